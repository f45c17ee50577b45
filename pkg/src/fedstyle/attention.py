"""Attention-based feature highlighter.

For a key feature map X_i and a same-class query X_j, the spatial similarity
(theta_q X_j)^T (theta_k X_i) scores every key position against every query
position. Averaging over query positions and softmax-normalizing yields one
attention weight per spatial location of X_i; the weighted channel average is
an embedding of the class-common regions, concatenated downstream with the
globally pooled embedding. Training uses a mixed query (the average of the
partner's query and the sample's own); inference is pure self-attention, so
eval outputs depend only on the sample itself.

There is no softmax temperature and no 1/sqrt(d) scaling by design.
"""

from __future__ import annotations

import numpy as np

from .tensor import (
    ShapeError,
    Tensor,
    _accum,
    _finish,
    bmm,
    gather_rows,
    matmul,
    softmax,
)


def spatial_similarity(xi, xj, theta_q, theta_k):
    """S = (theta_q X_j)^T (theta_k X_i) for flattened [C,HW] features."""
    return matmul(matmul(theta_q, xj).transpose(), matmul(theta_k, xi))


def mixed_similarity(xi, xj, theta_q, theta_k):
    """Similarity with the averaged query: ((Q_j + Q_i)/2)^T (theta_k X_i)."""
    q = (matmul(theta_q, xj) + matmul(theta_q, xi)) * 0.5
    return matmul(q.transpose(), matmul(theta_k, xi))


def attention_score(s, h, w):
    """Collapse [HW,HW] similarity to a softmax-normalized [H,W] score map.

    Rows of S index query positions; the mean over them leaves one similarity
    per key position, normalized over all H*W entries.
    """
    hw = h * w
    if tuple(s.shape) != (hw, hw):
        raise ShapeError(
            "similarity must be [%d,%d] for a %dx%d map, got %r" % (hw, hw, h, w, tuple(s.shape))
        )
    per_key = s.reshape((hw, h, w)).mean(axis=0)
    return softmax(per_key.reshape((hw,)), axis=0).reshape((h, w))


def attention_pool(z_i, a_s):
    """Weighted channel average A[c] = sum_hw a_s[h,w] * z_i[c,h,w].

    Accumulates in f64 and renormalizes by the weight sum, so a softmax map
    whose f32 entries sum to 1 only approximately still maps a spatially
    constant input to exactly that constant.
    """
    z = z_i if isinstance(z_i, Tensor) else Tensor(z_i)
    a = a_s if isinstance(a_s, Tensor) else Tensor(a_s)
    if z.ndim != 3:
        raise ShapeError("attention_pool expects [C,H,W] features, got %r" % (tuple(z.shape),))
    if tuple(a.shape) != tuple(z.shape[1:]):
        raise ShapeError(
            "score map %r does not match feature grid %r" % (tuple(a.shape), tuple(z.shape[1:]))
        )
    z64 = z.data.astype(np.float64)
    a64 = a.data.astype(np.float64)
    wsum = a64.sum()
    pooled = (z64 * a64[None]).sum(axis=(1, 2)) / wsum
    out = Tensor(pooled, z.requires_grad or a.requires_grad)

    def backward(g):
        if z.requires_grad:
            _accum(z, (g[:, None, None] * (a64[None] / wsum)).astype(np.float32))
        if a.requires_grad:
            da = (g[:, None, None] * (z64 - pooled[:, None, None])).sum(axis=0) / wsum
            _accum(a, da.astype(np.float32))

    return _finish(out, backward)


def attention_pool_batch(flat, a):
    """Row-wise attention_pool: [B,C,HW] features x [B,HW] weights -> [B,C].

    Same f64 renormalized accumulation as attention_pool, one tape node for
    the whole batch.
    """
    z64 = flat.data.astype(np.float64)
    a64 = a.data.astype(np.float64)
    wsum = a64.sum(axis=1)
    pooled = (z64 * a64[:, None, :]).sum(axis=2) / wsum[:, None]
    out = Tensor(pooled, flat.requires_grad or a.requires_grad)

    def backward(g):
        if flat.requires_grad:
            dz = g[:, :, None] * (a64[:, None, :] / wsum[:, None, None])
            _accum(flat, dz.astype(np.float32))
        if a.requires_grad:
            da = (g[:, :, None] * (z64 - pooled[:, :, None])).sum(axis=1) / wsum[:, None]
            _accum(a, da.astype(np.float32))

    return _finish(out, backward)


def pair_samples(labels, rng):
    """Uniform same-class partner per sample, never self when avoidable.

    Batch members that are duplicated tensors count as distinct partners, so
    self-pairing only happens through duplication. A class with a single
    sample violates the upstream batch contract and raises.
    """
    y = np.asarray(labels)
    pairing = np.empty(len(y), dtype=np.int64)
    for i in range(len(y)):
        others = np.flatnonzero(y == y[i])
        others = others[others != i]
        if len(others) == 0:
            raise ValueError(
                "class %d has a single sample in the training batch; repair upstream" % int(y[i])
            )
        pairing[i] = others[rng.integers(len(others))]
    return pairing


def highlight(z, labels, theta_q, theta_k, mode, rng=None, pairing=None):
    """Per-sample attention features [B,C] for a [B,C,H,W] batch.

    mode "train_mixed" pairs each sample with a uniform same-class partner
    (draw per sample in index order) and uses the mixed query; "eval_self"
    ignores labels and pairs each sample with itself.
    """
    b, c, h, w = z.shape
    hw = h * w
    if mode == "eval_self":
        pairing = None
    elif mode == "train_mixed":
        if pairing is None:
            if rng is None:
                raise ValueError("train_mixed pairing needs an rng or a pinned pairing")
            pairing = pair_samples(labels, rng)
        else:
            pairing = np.asarray(pairing, dtype=np.int64)
    else:
        raise ValueError("unknown highlight mode %r" % (mode,))
    y = np.asarray(labels)
    if mode == "train_mixed" and not np.all(y[pairing] == y):
        raise ValueError("pairing crosses class boundaries")
    # Batched composition of the per-sample ops above: project every sample
    # with one matmul per theta, then bmm for all B similarity matrices.
    d = theta_q.data.shape[0]
    flat = z.reshape((b, c, hw))
    stacked = flat.transpose((1, 0, 2)).reshape((c, b * hw))
    q_all = matmul(theta_q, stacked).reshape((d, b, hw)).transpose((1, 0, 2))
    k_all = matmul(theta_k, stacked).reshape((d, b, hw)).transpose((1, 0, 2))
    if mode == "train_mixed":
        q_all = (gather_rows(q_all, pairing) + q_all) * 0.5
    sim = bmm(q_all.transpose((0, 2, 1)), k_all)
    scores = softmax(sim.mean(axis=1), axis=1)
    return attention_pool_batch(flat, scores)


def score_maps(z, theta_q, theta_k):
    """Eval-mode self-attention maps as a plain [B,H,W] array."""
    b, c, h, w = z.shape
    hw = h * w
    zt = z if isinstance(z, Tensor) else Tensor(z)
    flat = zt.reshape((b, c, hw))
    maps = np.empty((b, h, w), dtype=np.float32)
    for i in range(b):
        xi = gather_rows(flat, [i]).reshape((c, hw))
        sim = spatial_similarity(xi, xi, theta_q, theta_k)
        maps[i] = attention_score(sim, h, w).data
    return maps
