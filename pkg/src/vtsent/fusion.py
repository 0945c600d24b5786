"""Fusion heads: zero-pad sequence transformer and concatenation MLP.

Both heads take a padded sequence of branch rows ``(batch, slots, width)`` and an
effective mask ``(batch, slots)``.  A masked row (absent feature or ablated
branch) is replaced by zeros before anything reads it, and the transformer also
removes it from attention, so its stored values can never reach the logits.
"""

from __future__ import annotations

import json
import logging
import math
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .encoders import BRANCH_INDEX, BRANCHES, PAD_WIDTH, TRAINABLE_BRANCHES, FeatureBundle, check_branch
from .errors import ConfigError, DataError, VtsentError

logger = logging.getLogger(__name__)


class NonFiniteGradientError(VtsentError):
    pass


# --------------------------------------------------------------------------
# inputs
# --------------------------------------------------------------------------

def pad_feature(vector: np.ndarray, target: int = PAD_WIDTH) -> np.ndarray:
    vector = np.asarray(vector)
    if vector.ndim != 1:
        raise DataError("pad_feature expects a 1-d vector")
    if vector.shape[0] > target:
        raise DataError(f"feature of length {vector.shape[0]} exceeds pad width {target}")
    out = np.zeros(target, dtype=vector.dtype)
    out[:vector.shape[0]] = vector
    return out


def ablation_mask(removed: Iterable[str] = ()) -> np.ndarray:
    """Per-branch activity flags in canonical order; ``removed`` branches are False."""
    mask = np.ones(len(BRANCHES), dtype=bool)
    for name in removed:
        mask[BRANCH_INDEX[check_branch(name)]] = False
    return mask


@dataclass
class FusionInput:
    sequence: np.ndarray        # (slots, width), zero rows where the effective mask is off
    dims: tuple[int, ...]       # unpadded branch widths
    presence_mask: np.ndarray
    ablation_mask: np.ndarray

    @property
    def effective_mask(self) -> np.ndarray:
        return self.presence_mask & self.ablation_mask


def assemble(bundle: FeatureBundle, active: np.ndarray | None = None,
             pad_width: int = PAD_WIDTH) -> FusionInput:
    active = np.ones(len(BRANCHES), dtype=bool) if active is None else np.asarray(active, dtype=bool)
    presence = bundle.presence
    rows = []
    for i, rec in enumerate(bundle.records):
        row = pad_feature(rec.vector, pad_width)
        if not (presence[i] and active[i]):
            row = np.zeros_like(row)
        rows.append(row)
    return FusionInput(np.stack(rows), bundle.dims, presence, active.copy())


# --------------------------------------------------------------------------
# heads
# --------------------------------------------------------------------------

def _masked(seq: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    return torch.where(mask.unsqueeze(-1), seq, torch.zeros((), dtype=seq.dtype))


class MlpHead(nn.Module):
    """Three affine layers over the unpadded concatenation of branch features."""

    def __init__(self, branch_dims: Sequence[int], num_classes: int,
                 hidden: Sequence[int] = (1024, 256), dropout: float = 0.5):
        super().__init__()
        if len(hidden) != 2:
            raise ConfigError("MLP head needs exactly two hidden widths", key="fusion.mlp_hidden")
        self.branch_dims = tuple(int(d) for d in branch_dims)
        self.input_dim = sum(self.branch_dims)
        self.dropout = dropout
        self.fc1 = nn.Linear(self.input_dim, hidden[0])
        self.fc2 = nn.Linear(hidden[0], hidden[1])
        self.fc3 = nn.Linear(hidden[1], num_classes)

    def forward(self, seq: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        if seq.shape[1] != len(self.branch_dims):
            raise DataError(f"MLP head expects {len(self.branch_dims)} branch rows, got {seq.shape[1]}")
        if seq.shape[2] < max(self.branch_dims):
            raise DataError(f"row width {seq.shape[2]} narrower than branch width {max(self.branch_dims)}")
        seq = _masked(seq, mask)
        x = torch.cat([seq[:, i, :d] for i, d in enumerate(self.branch_dims)], dim=1)
        x = F.dropout(F.relu(self.fc1(x)), self.dropout, self.training)
        x = F.dropout(F.relu(self.fc2(x)), self.dropout, self.training)
        return self.fc3(x)


class FusionEncoderLayer(nn.Module):
    """Post-norm encoder layer (attention → add & norm → GELU FFN → add & norm)."""

    def __init__(self, width: int, heads: int, ffn_dim: int, dropout: float = 0.0):
        super().__init__()
        if width % heads:
            raise ConfigError(f"width {width} is not divisible by {heads} heads", key="fusion.heads")
        self.heads = heads
        self.dropout = dropout
        self.qkv = nn.Linear(width, 3 * width)
        self.attn_out = nn.Linear(width, width)
        self.norm1 = nn.LayerNorm(width, eps=1e-12)
        self.ffn_in = nn.Linear(width, ffn_dim)
        self.ffn_out = nn.Linear(ffn_dim, width)
        self.norm2 = nn.LayerNorm(width, eps=1e-12)

    def forward(self, x: torch.Tensor, key_mask: torch.Tensor) -> torch.Tensor:
        b, t, w = x.shape
        h, dh = self.heads, w // self.heads
        q, k, v = (z.reshape(b, t, h, dh).transpose(1, 2) for z in self.qkv(x).split(w, dim=-1))
        scores = q @ k.transpose(-1, -2) / math.sqrt(dh)
        scores = scores.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        ctx = (scores.softmax(dim=-1) @ v).transpose(1, 2).reshape(b, t, w)
        x = self.norm1(x + F.dropout(self.attn_out(ctx), self.dropout, self.training))
        ff = self.ffn_out(F.gelu(self.ffn_in(x)))
        return self.norm2(x + F.dropout(ff, self.dropout, self.training))


class TransformerHead(nn.Module):
    """Small BERT-style encoder over typed branch slots with a classification token.

    Rows are the zero-padded branch features, so the model width equals the pad
    width.  Each slot gets a learned type embedding; masked slots are dropped
    from the attention keys, and the classification token is always attendable.
    """

    def __init__(self, num_slots: int, width: int, num_classes: int, layers: int = 3,
                 heads: int = 8, ffn_dim: int | None = None, dropout: float = 0.5,
                 layer_dropout: float = 0.0):
        super().__init__()
        if width % heads:
            raise ConfigError(f"width {width} is not divisible by {heads} heads", key="fusion.heads")
        self.width = width
        self.dropout = dropout
        self.type_embed = nn.Parameter(torch.zeros(num_slots, width))
        self.cls_token = nn.Parameter(torch.zeros(width))
        self.layers = nn.ModuleList(
            FusionEncoderLayer(width, heads, ffn_dim or 4 * width, layer_dropout) for _ in range(layers))
        self.classifier = nn.Linear(width, num_classes)

    def forward(self, seq: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        b = seq.shape[0]
        if seq.shape[2] != self.width:
            raise DataError(f"transformer head expects rows of width {self.width}, got {seq.shape[2]}")
        x = _masked(seq, mask) + self.type_embed
        x = torch.cat([self.cls_token.expand(b, 1, -1), x], dim=1)
        key_mask = torch.cat([torch.ones(b, 1, dtype=torch.bool, device=mask.device), mask], dim=1)
        for layer in self.layers:
            x = layer(x, key_mask)
        return self.classifier(F.dropout(x[:, 0], self.dropout, self.training))


class BranchAdapter(nn.Module):
    """Trainable projection over a learnable branch's backbone feature.

    At desk scale this stands in for fine-tuning the main image/text encoders:
    ``tanh`` mirrors the pooled text feature, ``identity`` the image feature.
    """

    def __init__(self, in_dim: int, out_dim: int, activation: str = "identity"):
        super().__init__()
        if activation not in ("tanh", "identity"):
            raise ConfigError(f"unknown adapter activation {activation!r}")
        self.activation = activation
        self.proj = nn.Linear(in_dim, out_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = self.proj(x)
        return torch.tanh(y) if self.activation == "tanh" else y


# --------------------------------------------------------------------------
# full model
# --------------------------------------------------------------------------

ADAPTER_ACTIVATION = {"text_main": "tanh", "image_main": "identity"}


@dataclass(frozen=True)
class ModelSpec:
    """Architecture descriptor, stored verbatim in checkpoint headers."""

    input_dims: tuple[int, ...]
    num_classes: int = 3
    head: str = "mlp"
    adapters: tuple[str, ...] = TRAINABLE_BRANCHES
    ablated: tuple[str, ...] = ()
    pad_width: int = PAD_WIDTH
    mlp_hidden: tuple[int, int] = (1024, 256)
    layers: int = 3
    heads: int = 8
    ffn_dim: int | None = None
    dropout: float = 0.5
    layer_dropout: float = 0.0

    def __post_init__(self):
        if len(self.input_dims) != len(BRANCHES):
            raise ConfigError(f"need {len(BRANCHES)} branch dims, got {len(self.input_dims)}")
        if self.head not in ("mlp", "transformer"):
            raise ConfigError(f"unknown head kind {self.head!r}", key="fusion.head")
        for name in (*self.adapters, *self.ablated):
            check_branch(name)
        if self.head == "transformer" and max(self.input_dims) > self.pad_width:
            raise ConfigError(f"branch width {max(self.input_dims)} exceeds pad width {self.pad_width}",
                              key="fusion.pad_width")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kind"] = "fusion"
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        d = {k: v for k, v in d.items() if k != "kind"}
        for k in ("input_dims", "adapters", "ablated", "mlp_hidden"):
            d[k] = tuple(d[k])
        return cls(**d)


class FusionModel(nn.Module):
    """Learnable-branch adapters followed by a fusion head over all eight branches."""

    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.spec = spec
        self.adapters = nn.ModuleDict({
            name: BranchAdapter(spec.input_dims[BRANCH_INDEX[name]], spec.input_dims[BRANCH_INDEX[name]],
                                ADAPTER_ACTIVATION.get(name, "identity"))
            for name in spec.adapters
        })
        if spec.head == "mlp":
            self.head = MlpHead(spec.input_dims, spec.num_classes, spec.mlp_hidden, spec.dropout)
        else:
            self.head = TransformerHead(len(BRANCHES), spec.pad_width, spec.num_classes, spec.layers,
                                        spec.heads, spec.ffn_dim, spec.dropout, spec.layer_dropout)
        self.register_buffer("active", torch.from_numpy(ablation_mask(spec.ablated)), persistent=False)

    def describe(self) -> dict:
        return self.spec.to_dict()

    def forward(self, feats: Sequence[torch.Tensor], presence: torch.Tensor) -> torch.Tensor:
        width = self.spec.pad_width if self.spec.head == "transformer" else max(self.spec.input_dims)
        rows = []
        for name, x in zip(BRANCHES, feats):
            if name in self.adapters:
                x = self.adapters[name](x)
            rows.append(F.pad(x, (0, width - x.shape[1])))
        mask = presence & self.active
        return self.head(torch.stack(rows, dim=1), mask)


@dataclass(frozen=True)
class ProbeSpec:
    """Single-modal model: one learnable branch, its adapter and a linear classifier."""

    branch: str
    input_dim: int
    num_classes: int = 3
    dropout: float = 0.5

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kind"] = "probe"
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ProbeSpec":
        return cls(**{k: v for k, v in d.items() if k != "kind"})


class SingleModalModel(nn.Module):
    def __init__(self, spec: ProbeSpec):
        super().__init__()
        self.spec = spec
        self.adapter = BranchAdapter(spec.input_dim, spec.input_dim, ADAPTER_ACTIVATION.get(spec.branch, "identity"))
        self.classifier = nn.Linear(spec.input_dim, spec.num_classes)

    def describe(self) -> dict:
        return self.spec.to_dict()

    def forward(self, feats: Sequence[torch.Tensor], presence: torch.Tensor) -> torch.Tensor:
        x = self.adapter(feats[BRANCH_INDEX[self.spec.branch]])
        return self.classifier(F.dropout(x, self.spec.dropout, self.training))


def init_parameters(module: nn.Module, seed: int) -> nn.Module:
    """Seeded init: fan-in uniform for affine weights, zero biases, N(0, 0.02) embeddings."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, nn.Linear):
                bound = 1.0 / math.sqrt(m.in_features)
                m.weight.copy_(torch.empty_like(m.weight).uniform_(-bound, bound, generator=gen))
                m.bias.zero_()
            elif isinstance(m, nn.LayerNorm):
                m.weight.fill_(1.0)
                m.bias.zero_()
            elif isinstance(m, TransformerHead):
                m.type_embed.copy_(torch.empty_like(m.type_embed).normal_(0.0, 0.02, generator=gen))
                m.cls_token.copy_(torch.empty_like(m.cls_token).normal_(0.0, 0.02, generator=gen))
    return module


def build_model(spec: ModelSpec | ProbeSpec, seed: int = 0, dtype: torch.dtype = torch.float32) -> nn.Module:
    model = FusionModel(spec) if isinstance(spec, ModelSpec) else SingleModalModel(spec)
    return init_parameters(model, seed).to(dtype)


def spec_from_dict(d: dict) -> ModelSpec | ProbeSpec:
    return ProbeSpec.from_dict(d) if d.get("kind") == "probe" else ModelSpec.from_dict(d)


# --------------------------------------------------------------------------
# single-sample forward / backward
# --------------------------------------------------------------------------

def _head_tensors(inp: FusionInput, head: nn.Module, requires_grad: bool = False):
    dtype = next(head.parameters()).dtype
    seq = torch.tensor(inp.sequence, dtype=dtype).unsqueeze(0)
    seq.requires_grad_(requires_grad)
    mask = torch.from_numpy(np.asarray(inp.effective_mask, dtype=bool)).unsqueeze(0)
    return seq, mask


def _forward(inp: FusionInput, head: nn.Module, training: bool) -> np.ndarray:
    head.train(training)
    seq, mask = _head_tensors(inp, head)
    with torch.no_grad():
        return head(seq, mask)[0].numpy().copy()


def mlp_forward(inp: FusionInput, head: MlpHead, training: bool = False) -> np.ndarray:
    if sum(inp.dims) != head.input_dim:
        raise DataError(f"MLP input dim {head.input_dim} != sum of branch dims {sum(inp.dims)}")
    return _forward(inp, head, training)


def transformer_forward(inp: FusionInput, head: TransformerHead, training: bool = False) -> np.ndarray:
    return _forward(inp, head, training)


@dataclass
class Gradients:
    loss: float
    params: dict[str, np.ndarray]
    input: np.ndarray = field(repr=False)


def backward(head: nn.Module, inp: FusionInput, label: int, training: bool = False) -> Gradients:
    """Cross-entropy gradients for every head parameter and for the input sequence."""
    head.train(training)
    head.zero_grad(set_to_none=True)
    seq, mask = _head_tensors(inp, head, requires_grad=True)
    loss = F.cross_entropy(head(seq, mask), torch.tensor([label]))
    loss.backward()
    grads = {}
    for name, p in head.named_parameters():
        g = p.grad if p.grad is not None else torch.zeros_like(p)
        if not torch.all(torch.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient for {name}")
        grads[name] = g.detach().numpy().copy()
    return Gradients(loss.item(), grads, seq.grad[0].numpy().copy())


def predict(logits: np.ndarray) -> int | np.ndarray:
    """Argmax with lowest-index tie-break; accepts one logit vector or a batch."""
    logits = np.asarray(logits)
    return int(np.argmax(logits)) if logits.ndim == 1 else np.argmax(logits, axis=-1)


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"VTSCKPT\x01"
_U32 = struct.Struct("<I")


@dataclass
class Checkpoint:
    descriptor: dict
    seed: int
    tensors: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)


def save_checkpoint(path: str | Path, model: nn.Module, seed: int, meta: dict | None = None,
                    state: dict[str, torch.Tensor] | None = None) -> Path:
    """Write a portable checkpoint: header JSON, then little-endian f32 tensors, then a CRC32."""
    state = state if state is not None else model.state_dict()
    names = list(state)
    header = {
        "format": 1,
        "descriptor": model.describe(),
        "seed": seed,
        "tensors": [[n, list(state[n].shape)] for n in names],
        "meta": meta or {},
    }
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [_U32.pack(len(hb)), hb]
    parts += [state[n].detach().cpu().numpy().astype("<f4").tobytes() for n in names]
    body = b"".join(parts)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(CHECKPOINT_MAGIC + body + _U32.pack(zlib.crc32(body)))
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if not raw.startswith(CHECKPOINT_MAGIC) or len(raw) < len(CHECKPOINT_MAGIC) + 8:
        raise DataError(f"{path}: not a checkpoint file")
    body, (crc,) = raw[len(CHECKPOINT_MAGIC):-4], _U32.unpack(raw[-4:])
    if zlib.crc32(body) != crc:
        raise DataError(f"{path}: checkpoint checksum mismatch")
    (hlen,) = _U32.unpack_from(body, 0)
    header = json.loads(body[4:4 + hlen])
    pos = 4 + hlen
    tensors = {}
    for name, shape in header["tensors"]:
        n = int(np.prod(shape)) if shape else 1
        tensors[name] = np.frombuffer(body, dtype="<f4", count=n, offset=pos).reshape(shape).astype(np.float32)
        pos += 4 * n
    return Checkpoint(header["descriptor"], header["seed"], tensors, header.get("meta", {}))


def model_from_checkpoint(ckpt: Checkpoint, dtype: torch.dtype = torch.float32) -> nn.Module:
    model = build_model(spec_from_dict(ckpt.descriptor), ckpt.seed, dtype)
    model.load_state_dict({k: torch.from_numpy(v) for k, v in ckpt.tensors.items()})
    return model
