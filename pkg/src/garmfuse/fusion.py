"""Reference-token fusion inside self-attention.

Three interchangeable mechanisms merge garment reference tokens into a
denoiser self-attention block:

* ``naive``      — concatenate reference tokens with the noise tokens and
                   run ordinary self-attention over the union, keeping only
                   the noise rows. Garments see each other through both the
                   queries and the shared softmax.
* ``concat_kv``  — queries come from the noise tokens only; keys/values are
                   the concatenation. One softmax still spans all garments,
                   so they compete for attention mass.
* ``addition``   — one independent attention term per garment, summed onto
                   the self-attention term. No garment ever enters another
                   garment's softmax.

All modes share the block's Q/K/V/out projections by default. With zero
references every mode degenerates to the same plain self-attention call,
bit for bit, because it literally is the same code path.

Functions here return the attention mix *before* the output projection;
the caller owns `w_out` and the residual add.
"""

from enum import Enum

from .categories import GarmentCategory
from .module import Module, param
from .tensor import (
    ShapeError,
    concat,
    matmul,
    scale,
    slice_cols,
    slice_rows,
    softmax_lastdim,
    transpose2d,
)


class FusionMode(Enum):
    NAIVE = "naive"
    CONCAT_KV = "concat_kv"
    ADDITION = "addition"

    @classmethod
    def parse(cls, name):
        try:
            return cls(name)
        except ValueError:
            valid = ", ".join(m.value for m in cls)
            raise ValueError(
                f"unknown fusion mode {name!r}; expected one of: {valid}"
            ) from None


K_MAX_DEFAULT = 3


class FusionProjections(Module):
    """Q/K/V/out weights for one self-attention block.

    `w_out` starts at zero so the enclosing block is the identity map at
    initialization. `per_garment_kv` adds separate K/V weights per garment
    slot (in canonical order); it exists for ablation experiments and is
    off by default.
    """

    def __init__(self, channels, rng, head_dim=None, per_garment_kv=False,
                 k_max=K_MAX_DEFAULT):
        super().__init__()
        self.channels = channels
        if head_dim is None:
            head_dim = channels
        if channels % head_dim != 0:
            raise ShapeError(
                f"head_dim {head_dim} does not divide {channels} channels"
            )
        self.head_dim = head_dim
        self.n_heads = channels // head_dim
        self.w_q = param((channels, channels), rng)
        self.w_k = param((channels, channels), rng)
        self.w_v = param((channels, channels), rng)
        self.w_out = param((channels, channels), rng, zero=True)
        self.per_garment_kv = per_garment_kv
        if per_garment_kv:
            for slot in range(k_max):
                setattr(self, f"w_k_g{slot}", param((channels, channels), rng))
                setattr(self, f"w_v_g{slot}", param((channels, channels), rng))

    def garment_kv(self, slot):
        if not self.per_garment_kv:
            return self.w_k, self.w_v
        return getattr(self, f"w_k_g{slot}"), getattr(self, f"w_v_g{slot}")


def _check_refs(x_tokens, refs):
    c = x_tokens.shape[-1]
    for i, r in enumerate(refs):
        if r.ndim != 2 or r.shape[1] != c:
            raise ShapeError(
                f"reference {i} has shape {r.shape}, expected [tokens x {c}]"
            )


def attend(q, k, v, head_dim):
    """Scaled dot-product attention over 2-d token matrices, per head."""
    n_heads = q.shape[1] // head_dim
    inv = head_dim ** -0.5
    outs = []
    for h in range(n_heads):
        lo, hi = h * head_dim, (h + 1) * head_dim
        qh = slice_cols(q, lo, hi)
        kh = slice_cols(k, lo, hi)
        vh = slice_cols(v, lo, hi)
        weights = softmax_lastdim(scale(matmul(qh, transpose2d(kh)), inv))
        outs.append(matmul(weights, vh))
    return outs[0] if n_heads == 1 else concat(outs, axis=1)


def self_attend(x_tokens, proj):
    """Plain self-attention; the shared degenerate path of every mode."""
    q = matmul(x_tokens, proj.w_q)
    k = matmul(x_tokens, proj.w_k)
    v = matmul(x_tokens, proj.w_v)
    return attend(q, k, v, proj.head_dim)


def fuse_naive(x_tokens, refs, proj):
    """Self-attention over [noise; garments], noise rows returned."""
    _check_refs(x_tokens, refs)
    if not refs:
        return self_attend(x_tokens, proj)
    n = x_tokens.shape[0]
    z = concat([x_tokens] + list(refs), axis=0)
    if not proj.per_garment_kv:
        out = self_attend(z, proj)
    else:
        q = matmul(z, proj.w_q)
        k_parts = [matmul(x_tokens, proj.w_k)]
        v_parts = [matmul(x_tokens, proj.w_v)]
        for slot, r in enumerate(refs):
            wk, wv = proj.garment_kv(slot)
            k_parts.append(matmul(r, wk))
            v_parts.append(matmul(r, wv))
        out = attend(q, concat(k_parts, axis=0), concat(v_parts, axis=0),
                     proj.head_dim)
    return slice_rows(out, 0, n)


def fuse_concat_kv(x_tokens, refs, proj):
    """Noise queries against concatenated self+garment keys and values."""
    _check_refs(x_tokens, refs)
    if not refs:
        return self_attend(x_tokens, proj)
    q = matmul(x_tokens, proj.w_q)
    k_parts = [matmul(x_tokens, proj.w_k)]
    v_parts = [matmul(x_tokens, proj.w_v)]
    for slot, r in enumerate(refs):
        wk, wv = proj.garment_kv(slot)
        k_parts.append(matmul(r, wk))
        v_parts.append(matmul(r, wv))
    return attend(q, concat(k_parts, axis=0), concat(v_parts, axis=0), proj.head_dim)


def fuse_addition(x_tokens, refs, proj, normalize_terms=False):
    """Independent attention per garment, summed in the given order.

    Each term runs its own softmax, so garments cannot influence each
    other's attention weights. `normalize_terms` divides the garment sum
    by the garment count (experimental; the default is a raw sum).
    """
    _check_refs(x_tokens, refs)
    if not refs:
        return self_attend(x_tokens, proj)
    q = matmul(x_tokens, proj.w_q)
    out = attend(q, matmul(x_tokens, proj.w_k), matmul(x_tokens, proj.w_v),
                 proj.head_dim)
    garment_sum = None
    for slot, r in enumerate(refs):
        wk, wv = proj.garment_kv(slot)
        term = attend(q, matmul(r, wk), matmul(r, wv), proj.head_dim)
        garment_sum = term if garment_sum is None else garment_sum + term
    if normalize_terms:
        garment_sum = scale(garment_sum, 1.0 / len(refs))
    return out + garment_sum


_FUSERS = {
    FusionMode.NAIVE: fuse_naive,
    FusionMode.CONCAT_KV: fuse_concat_kv,
    FusionMode.ADDITION: fuse_addition,
}


def fuse(mode, x_tokens, refs, proj, normalize_terms=False):
    if mode is FusionMode.ADDITION:
        return fuse_addition(x_tokens, refs, proj, normalize_terms)
    return _FUSERS[mode](x_tokens, refs, proj)


def canonical_reference_order(entries):
    """Sort garment entries by category priority (upper, lower, dress, outer).

    Applied before any concatenation or summation so reference order never
    depends on caller argument order. Duplicate categories are rejected.
    """
    cats = [e.category for e in entries]
    if len(set(cats)) != len(cats):
        names = [c.value for c in cats]
        raise ValueError(f"duplicate garment categories in reference set: {names}")
    return sorted(entries, key=lambda e: e.category.priority)
