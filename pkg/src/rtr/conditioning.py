"""Prompt and reference-image conditioning.

Text side: a 256-entry vocabulary (reserved control ids, style words bound
to the synthetic dataset's restyle oracles, content words), embedded by a
learned lookup table plus learned positional rows, padded to a fixed
L_text = 16 with pads masked out of cross-attention.

Reference side: the reference frame goes through the latent codec, a 2x2
latent patchify, a single linear adapter to model width, and a learned
type-embedding row added to every token so the model can tell reference
tokens from frame tokens.

Modes: "tv2v" (text prompt only) and "rv2v" (reference image + a fixed
instruction token). A ConditionSet carries ref_tokens exactly when the mode
is rv2v.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import codec
from . import tensor as T
from .tensor import ShapeError, Tensor

__all__ = [
    "VOCAB_SIZE",
    "L_TEXT",
    "PAD_ID",
    "NULL_ID",
    "RV2V_INSTRUCTION_ID",
    "Vocab",
    "default_vocab",
    "VocabularyError",
    "ConditionSet",
    "embed_text",
    "encode_reference",
    "build_condition",
]

VOCAB_SIZE = 256
L_TEXT = 16
PAD_ID = 0
NULL_ID = 1
RV2V_INSTRUCTION_ID = 2

# reserved first, then style words (bound 1:1 to synth restyle oracles),
# then content words used by prompt files; unnamed ids stay unused
_DEFAULT_NAMES = [
    "<pad>",
    "<null>",
    "<rv2v-instruction>",
    "sepia",
    "negative",
    "perm_gbr",
    "perm_brg",
    "gamma_warm",
    "gamma_cool",
    "ink",
    "cool_shift",
    "circle",
    "square",
    "triangle",
    "moving",
    "shapes",
    "video",
    "style",
]


class VocabularyError(ValueError):
    """Unknown token name or out-of-range token id."""


class Vocab:
    def __init__(self, names):
        if len(names) > VOCAB_SIZE:
            raise VocabularyError(f"{len(names)} names exceed vocab size {VOCAB_SIZE}")
        if len(set(names)) != len(names):
            raise VocabularyError("duplicate token names")
        self._names = list(names)
        self._ids = {n: i for i, n in enumerate(self._names)}

    @classmethod
    def load(cls, path):
        """One token name per line; id = line index. Blank lines rejected."""
        with open(path, "r", encoding="utf-8") as fh:
            names = [ln.strip() for ln in fh]
        if any(not n for n in names):
            raise VocabularyError(f"blank vocab line in {path}")
        return cls(names)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(self._names) + "\n")

    def id(self, name: str) -> int:
        try:
            return self._ids[name]
        except KeyError:
            raise VocabularyError(f"unknown token {name!r}") from None

    def name(self, token_id: int) -> str:
        if not 0 <= token_id < len(self._names):
            raise VocabularyError(f"id {token_id} out of range")
        return self._names[token_id]

    def encode(self, text: str) -> list[int]:
        """Whitespace-separated token names -> ids (the prompt-file format)."""
        return [self.id(w) for w in text.split()]

    def __contains__(self, name):
        return name in self._ids

    def __len__(self):
        return len(self._names)


def default_vocab() -> Vocab:
    return Vocab(_DEFAULT_NAMES)


@dataclass
class ConditionSet:
    mode: str  # "tv2v" | "rv2v"
    text: Tensor  # [L_TEXT, D]
    text_mask: np.ndarray  # [L_TEXT] of {0, -inf}; pads masked
    ref_tokens: Tensor | None  # [L_ref, D] iff mode == "rv2v"


def _check_ids(ids):
    ids = [int(i) for i in ids]
    for i in ids:
        if not 0 <= i < VOCAB_SIZE:
            raise VocabularyError(f"token id {i} outside [0, {VOCAB_SIZE})")
    return ids


def embed_text(ids, table: Tensor, pos: Tensor) -> Tensor:
    """rows = table[id] + pos[i]. Empty prompt embeds the reserved <null> id."""
    ids = _check_ids(ids)
    if not ids:
        ids = [NULL_ID]
    if len(ids) > L_TEXT:
        raise VocabularyError(f"prompt length {len(ids)} exceeds {L_TEXT}")
    rows = T.gather_rows(table, ids)
    return T.add(rows, T.narrow(pos, 0, 0, len(ids)))


def encode_reference(ref_frame: np.ndarray, w: Tensor, b: Tensor, type_emb: Tensor) -> Tensor:
    """Pixel reference -> [L_ref, D] adapter tokens.

    latent encode -> 2x2 patchify -> linear -> + bias + type embedding.
    L_ref = (H/4) * (W/4).
    """
    z = codec.encode(ref_frame)  # [h, w, 12]
    h, wd, c = z.shape
    pc = 4 * c  # 2x2 patch, flattened with channels
    if w.shape[0] != pc:
        raise ShapeError(f"adapter weight {w.shape} incompatible with patch dim {pc}")
    patches = z.reshape(h // 2, 2, wd // 2, 2, c).transpose(0, 2, 1, 3, 4).reshape(-1, pc)
    tok = T.matmul(Tensor(patches, dtype=w.dtype), w)
    tok = T.add(tok, b)
    return T.add(tok, type_emb)


def build_condition(mode, ids, params, ref_frame=None) -> ConditionSet:
    """Assemble the full conditioning set for one sample.

    params: mapping with cond.table [V, D], cond.pos [L_TEXT, D],
    cond.ref_w [48, D], cond.ref_b [D], cond.ref_type [D].
    """
    if mode not in ("tv2v", "rv2v"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "rv2v" and ref_frame is None:
        raise ValueError("rv2v requires a reference frame")
    if mode == "tv2v" and ref_frame is not None:
        raise ValueError("tv2v must not carry a reference frame")
    ids = _check_ids(ids)
    if not ids:
        ids = [NULL_ID]
    if len(ids) > L_TEXT:
        raise VocabularyError(f"prompt length {len(ids)} exceeds {L_TEXT}")
    n_real = len(ids)
    padded = ids + [PAD_ID] * (L_TEXT - n_real)
    text = embed_text(padded, params["cond.table"], params["cond.pos"])
    mask = np.zeros(L_TEXT, dtype=np.float64)
    mask[n_real:] = -np.inf
    ref_tokens = None
    if mode == "rv2v":
        ref_tokens = encode_reference(
            ref_frame, params["cond.ref_w"], params["cond.ref_b"], params["cond.ref_type"]
        )
    return ConditionSet(mode=mode, text=text, text_mask=mask, ref_tokens=ref_tokens)
