"""Toy fusion heads and inputs shared by the fusion tests and the acceptance suite."""

import numpy as np
import torch

from vtsent.fusion import MlpHead, TransformerHead

TOY_DIMS = (3, 2, 2, 3, 2, 1, 2, 2)
TOY_WIDTH = 4


def randomize(module, seed, scale=0.5):
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * scale)
    return module


def toy_mlp(seed=0, num_classes=3, hidden=(6, 5)):
    head = MlpHead(TOY_DIMS, num_classes, hidden, dropout=0.5).double()
    return randomize(head, seed).eval()


def toy_transformer(seed=0, num_classes=3, layers=1, heads=1, ffn_dim=8, width=TOY_WIDTH):
    head = TransformerHead(8, width, num_classes, layers=layers, heads=heads, ffn_dim=ffn_dim,
                           dropout=0.5).double()
    return randomize(head, seed).eval()


def toy_input(rng, mask=None, width=TOY_WIDTH, dims=TOY_DIMS):
    """(slots, width) float64 rows with zero tails beyond each branch width."""
    seq = np.zeros((8, width))
    for i, d in enumerate(dims):
        seq[i, :d] = rng.standard_normal(d)
    if mask is None:
        mask = rng.random(8) < 0.75
    return seq, np.asarray(mask, dtype=bool)


def param_count(module):
    return sum(p.numel() for p in module.parameters())
