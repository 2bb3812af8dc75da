"""Layer math shared by the serial model and the sharded strategies.

Every function takes plain weight tensors, so the same code serves full
weights (serial) and head-sliced weights (tensor parallel).  Where a
replicated tensor feeds a head-split projection, callers wrap it in
`hooks.fanout` (identity forward, gradient all-reduce backward); where
head-split partial outputs must be summed, `hooks.allsum` performs a
ReduceScatter+AllGather forward.  With hooks=None both are no-ops and the
math is the single-process reference.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor

LN_EPS = 1e-5
N_DECODER_HEADS = 1  # the reconstruction decoder is small; single-head attention


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    out = T.matmul(x, w)
    if b is not None:
        out = T.add(out, b)
    return out


def split_heads(x: Tensor, n_heads: int) -> Tensor:
    """[..., Tn, Dl] -> [..., H, Tn, Dh]."""
    *lead, tn, dl = x.shape
    dh = dl // n_heads
    x = T.reshape(x, (*lead, tn, n_heads, dh))
    nd = x.ndim
    perm = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
    return T.transpose(x, perm)


def merge_heads(x: Tensor) -> Tensor:
    """[..., H, Tn, Dh] -> [..., Tn, H*Dh]."""
    *lead, h, tn, dh = x.shape
    nd = x.ndim
    perm = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
    x = T.transpose(x, perm)
    return T.reshape(x, (*lead, tn, h * dh))


def sdp_attention(q: Tensor, k: Tensor, v: Tensor, n_heads: int) -> Tensor:
    """Scaled dot-product attention; q/k/v are [..., Tn, Dl] pre-head-split.

    Materializes the logits and softmax tensors (the memory behavior the
    allocator studies measure).
    """
    dh = q.shape[-1] // n_heads
    qh = split_heads(q, n_heads)
    kh = split_heads(k, n_heads)
    vh = split_heads(v, n_heads)
    nd = kh.ndim
    kt = T.transpose(kh, tuple(range(nd - 2)) + (nd - 1, nd - 2))
    logits = T.scale(T.matmul(qh, kt), 1.0 / np.sqrt(dh))
    probs = T.softmax(logits, axis=-1)
    ctx = T.matmul(probs, vh)
    return merge_heads(ctx)


def transformer_block(x: Tensor, w: dict, prefix: str, n_heads: int,
                      hooks=None, tag: str = "") -> Tensor:
    """Pre-norm block: x + attn(ln1(x)); x + mlp(ln2(x))."""
    h = T.layernorm(x, w[f"{prefix}.ln1.g"], w[f"{prefix}.ln1.b"], LN_EPS)
    if hooks:
        h = hooks.fanout(h, tag)
    q = linear(h, w[f"{prefix}.wq"], w[f"{prefix}.bq"])
    k = linear(h, w[f"{prefix}.wk"])
    v = linear(h, w[f"{prefix}.wv"], w[f"{prefix}.bv"])
    ctx = sdp_attention(q, k, v, n_heads)
    attn = T.matmul(ctx, w[f"{prefix}.wo"])
    if hooks:
        attn = hooks.allsum(attn, tag)
    attn = T.add(attn, w[f"{prefix}.bo"])
    x = T.add(x, attn)

    h2 = T.layernorm(x, w[f"{prefix}.ln2.g"], w[f"{prefix}.ln2.b"], LN_EPS)
    if hooks:
        h2 = hooks.fanout(h2, tag)
    m = T.gelu(linear(h2, w[f"{prefix}.w1"], w[f"{prefix}.b1"]))
    m = T.matmul(m, w[f"{prefix}.w2"])
    if hooks:
        m = hooks.allsum(m, tag)
    m = T.add(m, w[f"{prefix}.b2"])
    return T.add(x, m)


def cross_attention_aggregate(x: Tensor, w: dict, prefix: str, variant: str,
                              n_heads: int, hooks=None, tag: str = "") -> Tensor:
    """Reduce [..., Ck, D] token stacks to [..., 1, D] per position.

    single_query: one learned query attends over the Ck tokens (1 x Ck
    logits per head).  full_cross: the Ck tokens attend over themselves
    (Ck x Ck logits), then a learned query reduces the Ck outputs to one.
    """
    xf = hooks.fanout(x, tag) if hooks else x
    k = T.matmul(xf, w[f"{prefix}.wk"])
    v = T.matmul(xf, w[f"{prefix}.wv"])
    if variant == "single_query":
        q = T.reshape(w[f"{prefix}.q"], (1, w[f"{prefix}.q"].shape[0]))
        if hooks:
            q = hooks.fanout(q, tag)
        q = T.matmul(q, w[f"{prefix}.wq"])  # [1, Dl]
        dl = q.shape[-1]
        dh = dl // n_heads
        qh = T.transpose(T.reshape(q, (1, n_heads, dh)), (1, 0, 2))  # [H, 1, Dh]
        kh = split_heads(k, n_heads)
        vh = split_heads(v, n_heads)
        nd = kh.ndim
        kt = T.transpose(kh, tuple(range(nd - 2)) + (nd - 1, nd - 2))
        logits = T.scale(T.matmul(qh, kt), 1.0 / np.sqrt(dh))  # [..., H, 1, Ck]
        probs = T.softmax(logits, axis=-1)
        ctx = merge_heads(T.matmul(probs, vh))  # [..., 1, Dl]
        out = T.matmul(ctx, w[f"{prefix}.wo"])
        if hooks:
            out = hooks.allsum(out, tag)
        return T.add(out, w[f"{prefix}.bo"])

    # full_cross
    q = T.matmul(xf, w[f"{prefix}.wq"])
    ctx = sdp_attention(q, k, v, n_heads)  # [..., Ck, Dl]
    out = T.matmul(ctx, w[f"{prefix}.wo"])
    if hooks:
        out = hooks.allsum(out, tag)
    out = T.add(out, w[f"{prefix}.bo"])  # replicated from here on
    d = out.shape[-1]
    rq = T.reshape(w[f"{prefix}.rq"], (d, 1))
    scores = T.scale(T.matmul(out, rq), 1.0 / np.sqrt(d))  # [..., Ck, 1]
    nd = scores.ndim
    scores = T.transpose(scores, tuple(range(nd - 2)) + (nd - 1, nd - 2))
    probs = T.softmax(scores, axis=-1)  # [..., 1, Ck]
    return T.matmul(probs, out)


def linear_mix_aggregate(x: Tensor, w: dict, prefix: str) -> Tensor:
    """Learned affine channel mix: out = (sum_g mix_g * x_g) @ W + b."""
    g = x.shape[-2]
    mix = T.reshape(w[f"{prefix}.mix"], (1, g))
    mixed = T.matmul(mix, x)  # [..., 1, D]
    return T.add(T.matmul(mixed, w[f"{prefix}.w"]), w[f"{prefix}.b"])
