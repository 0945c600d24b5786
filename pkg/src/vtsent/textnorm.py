"""Tweet-style text normalization: mentions, URLs and emoji become placeholder tokens."""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import emoji

URL_RE = re.compile(r"(?:https?://|www\.)\S+", re.IGNORECASE)
MENTION_RE = re.compile(r"@\w+")
_WS_RE = re.compile(r"\s+")

# applied before placeholder substitution so the mapping cannot create new URLs
PUNCT_MAP = str.maketrans({
    "‘": "'", "’": "'", "‚": "'", "‛": "'", "′": "'",
    "“": '"', "”": '"', "„": '"', "‟": '"', "″": '"',
    "«": '"', "»": '"',
    "–": "-", "—": "-", "―": "-", "−": "-",
    "…": "...",
})

# off by default; the mapping is a documented choice, not a fixed standard
DEFAULT_ABBREVIATIONS = {
    "u": "you",
    "ur": "your",
    "pls": "please",
    "plz": "please",
    "thx": "thanks",
    "b4": "before",
}


@dataclass(frozen=True)
class NormPolicy:
    user_placeholder: str = "@USER"
    url_placeholder: str = "HTTPURL"
    emoji_mode: str = "textual-alias"
    emoji_placeholder: str = "EMOJI"
    punctuation_canonicalization: bool = True
    abbreviations: dict[str, str] | None = field(default=None, hash=False)

    def __post_init__(self):
        for name in ("user_placeholder", "url_placeholder", "emoji_placeholder"):
            token = getattr(self, name)
            if not token or any(ch.isspace() for ch in token):
                raise ValueError(f"{name} must be a non-empty token without whitespace, got {token!r}")
        if self.emoji_mode not in ("textual-alias", "placeholder-token"):
            raise ValueError(f"unknown emoji_mode {self.emoji_mode!r}")

    def to_dict(self) -> dict:
        return {
            "user_placeholder": self.user_placeholder,
            "url_placeholder": self.url_placeholder,
            "emoji_mode": self.emoji_mode,
            "emoji_placeholder": self.emoji_placeholder,
            "punctuation_canonicalization": self.punctuation_canonicalization,
            "abbreviations": self.abbreviations,
        }


DEFAULT_POLICY = NormPolicy()


def mention_pattern(policy: NormPolicy = DEFAULT_POLICY) -> re.Pattern:
    """Mentions as detected in normalized output: ``@word`` other than the placeholder itself."""
    ph = policy.user_placeholder
    if MENTION_RE.fullmatch(ph):
        return re.compile(r"@(?!" + re.escape(ph[1:]) + r"(?!\w))\w+")
    return MENTION_RE


def _replace_emoji_once(text: str, policy: NormPolicy) -> str:
    if policy.emoji_mode == "textual-alias":
        # a few aliases contain curly apostrophes
        table = PUNCT_MAP if policy.punctuation_canonicalization else {}
        return emoji.replace_emoji(
            text, replace=lambda chars, data: f" {emoji.demojize(chars).translate(table)} ")
    return emoji.replace_emoji(text, replace=f" {policy.emoji_placeholder} ")


def _replace_emoji(text: str, policy: NormPolicy) -> str:
    # broken ZWJ sequences can expose a new emoji once their selectors are dropped
    while True:
        out = _replace_emoji_once(text, policy)
        if out == text:
            return out
        text = out


def _expand_abbreviations(text: str, table: dict[str, str]) -> str:
    out = []
    for tok in text.split(" "):
        out.append(table.get(tok.lower(), tok))
    return " ".join(out)


def normalize(text: str, policy: NormPolicy = DEFAULT_POLICY) -> str:
    if policy.punctuation_canonicalization:
        text = text.translate(PUNCT_MAP)
    # emoji first: the library drops stray variation selectors, which could
    # otherwise glue an '@' onto the next word after mentions were replaced
    text = _replace_emoji(text, policy)
    text = URL_RE.sub(policy.url_placeholder, text)
    text = mention_pattern(policy).sub(policy.user_placeholder, text)
    text = _WS_RE.sub(" ", text).strip()
    if policy.abbreviations:
        text = _expand_abbreviations(text, policy.abbreviations)
    return text


def has_raw_entities(text: str, policy: NormPolicy = DEFAULT_POLICY) -> bool:
    """True when ``text`` still contains an unreplaced mention or URL."""
    return bool(URL_RE.search(text) or mention_pattern(policy).search(text))
