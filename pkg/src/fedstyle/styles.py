"""Style-statistics learning: measurement, sharing payloads, and the four
training-time feature augmentations (shift, oversample, explore, mix).

Feature "style" is the pair of channel-wise spatial mean and standard
deviation. A client's style info is the center and elementwise variance of
those stats over its full shard; shipping it to a peer lets the peer re-style
half of each mini-batch into the sender's domain via AdaIN. Oversampled
duplicates then get extrapolated away from the batch style center, and
MixStyle blends styles across the concatenated batch.

All augmentations are differentiable pass-throughs built from tensor ops, so
gradients reach the pre-hook feature map. Random draws come from an explicit
rng; every op also accepts its draws as arguments so tests can pin them.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, Tensor, gather_rows

# added to sigma denominators; zero-variance channels stay finite
EPS_STAB = 1e-6
# floor inside the sqrt keeps its gradient finite on constant channels
VAR_FLOOR = 1e-12


@dataclass
class StyleStats:
    """Channel-wise mean and standard deviation of one feature map."""

    mu: np.ndarray
    sigma: np.ndarray


@dataclass
class StyleInfo:
    """A client's style identity: center and spread of its feature styles.

    var_mu / var_sigma are elementwise population variances of the
    per-sample means / stds over the client's full shard, not a mini-batch.
    """

    mu_bar: np.ndarray
    sigma_bar: np.ndarray
    var_mu: np.ndarray
    var_sigma: np.ndarray
    client_id: int
    sample_count: int


@dataclass
class ExplorationParams:
    """Knobs for the oversample + explore + mix stage."""

    alpha: float = 3.0
    oversample_size: int = 0
    mix_beta: float = 0.1


def compute_style_stats(feature):
    """Measure (mu, sigma) of a single [C,H,W] map; population variance."""
    arr = feature.data if isinstance(feature, Tensor) else np.asarray(feature, dtype=np.float32)
    if arr.ndim != 3:
        raise ShapeError("style stats expect a [C,H,W] map, got %r" % (tuple(arr.shape),))
    mu = arr.mean(axis=(1, 2), dtype=np.float64)
    var = ((arr - mu[:, None, None]) ** 2).mean(axis=(1, 2), dtype=np.float64)
    return StyleStats(mu.astype(np.float32), np.sqrt(var).astype(np.float32))


def measure_batch(x):
    """Vectorized measurement over [B,C,H,W]: (mu, sigma) arrays of [B,C]."""
    arr = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float32)
    mu = arr.mean(axis=(2, 3), dtype=np.float64)
    var = ((arr - mu[:, :, None, None]) ** 2).mean(axis=(2, 3), dtype=np.float64)
    return mu.astype(np.float32), np.sqrt(var).astype(np.float32)


def compute_style_info(stats, client_id):
    """Aggregate per-sample StyleStats into a client's StyleInfo."""
    if not stats:
        raise ValueError("style info needs at least one sample")
    mus = np.stack([s.mu for s in stats]).astype(np.float64)
    sigs = np.stack([s.sigma for s in stats]).astype(np.float64)
    mu_bar = mus.mean(axis=0)
    sig_bar = sigs.mean(axis=0)
    var_mu = ((mus - mu_bar) ** 2).mean(axis=0)
    var_sigma = ((sigs - sig_bar) ** 2).mean(axis=0)
    return StyleInfo(
        mu_bar=mu_bar.astype(np.float32),
        sigma_bar=sig_bar.astype(np.float32),
        var_mu=var_mu.astype(np.float32),
        var_sigma=var_sigma.astype(np.float32),
        client_id=int(client_id),
        sample_count=len(stats),
    )


def select_keepers_kmeanspp(stats, rng):
    """Pick ceil(B/2) style-space medoids via k-means++ D^2 seeding.

    Points are concat(mu, sigma) per sample. The first center is uniform;
    each next center is drawn with probability proportional to its squared
    distance to the nearest chosen center (one seeding pass, no Lloyd
    refinement). Chosen indices keep their original style; the complement is
    the shift set. Returned indices are sorted.
    """
    b = len(stats)
    if b < 2:
        raise ValueError("keeper selection needs at least 2 samples, got %d" % b)
    pts = np.stack([np.concatenate([s.mu, s.sigma]) for s in stats]).astype(np.float64)
    k = (b + 1) // 2
    chosen = np.empty(k, dtype=np.int64)
    taken = np.zeros(b, dtype=bool)
    first = int(rng.integers(b))
    chosen[0] = first
    taken[first] = True
    d2 = ((pts - pts[first]) ** 2).sum(axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total > 0:
            idx = int(rng.choice(b, p=d2 / total))
        else:
            # every remaining point coincides with a center
            idx = int(rng.choice(np.flatnonzero(~taken)))
        chosen[i] = idx
        taken[idx] = True
        d2 = np.minimum(d2, ((pts - pts[idx]) ** 2).sum(axis=1))
    return np.sort(chosen)


def instance_stats(x):
    """Differentiable per-sample channel stats: [B,C,H,W] -> ([B,C], [B,C])."""
    if x.ndim != 4:
        raise ShapeError("instance stats expect [B,C,H,W], got %r" % (tuple(x.shape),))
    mu = x.mean(axis=(2, 3), keepdims=True)
    xc = x - mu.expand(x.shape)
    var = (xc * xc).mean(axis=(2, 3))
    sigma = (var + VAR_FLOOR).sqrt()
    n, c = x.shape[0], x.shape[1]
    return mu.reshape((n, c)), sigma


def _coerce_target(v, n, c, what):
    if isinstance(v, Tensor):
        if tuple(v.shape) != (n, c):
            raise ShapeError("%s must be [%d,%d], got %r" % (what, n, c, tuple(v.shape)))
        return v
    arr = np.asarray(v, dtype=np.float32)
    if arr.shape == (c,):
        arr = np.broadcast_to(arr, (n, c))
    if arr.shape != (n, c):
        raise ShapeError("%s must be [%d,%d] or [%d], got %r" % (what, n, c, c, tuple(arr.shape)))
    return Tensor(arr)


def adain(x, mu_target, sigma_target):
    """Re-normalize each sample's channels to the given target stats.

    Targets may be constants (ndarray) or graph tensors of shape [B,C].
    """
    if x.ndim != 4:
        raise ShapeError("adain expects [B,C,H,W], got %r" % (tuple(x.shape),))
    n, c = x.shape[0], x.shape[1]
    mu_t = _coerce_target(mu_target, n, c, "adain mu target").reshape((n, c, 1, 1))
    sig_t = _coerce_target(sigma_target, n, c, "adain sigma target").reshape((n, c, 1, 1))
    mu = x.mean(axis=(2, 3), keepdims=True)
    xc = x - mu.expand(x.shape)
    var = (xc * xc).mean(axis=(2, 3), keepdims=True)
    sigma = (var + VAR_FLOOR).sqrt()
    content = xc / (sigma + EPS_STAB).expand(x.shape)
    return content * sig_t.expand(x.shape) + mu_t.expand(x.shape)


def shift_batch(x, target, rng, eps_mu=None, eps_sigma=None):
    """Shift every sample in [n,C,H,W] to the received client's style.

    Target stats are mu_bar/sigma_bar perturbed per sample and per channel by
    standard-normal draws scaled elementwise by the received var_mu/var_sigma.
    Draw order when sampling: all eps_mu rows first, then all eps_sigma rows.
    """
    n, c = x.shape[0], x.shape[1]
    if eps_mu is None:
        eps_mu = rng.standard_normal((n, c))
    if eps_sigma is None:
        eps_sigma = rng.standard_normal((n, c))
    eps_mu = np.asarray(eps_mu, dtype=np.float32)
    eps_sigma = np.asarray(eps_sigma, dtype=np.float32)
    mu_t = target.mu_bar + eps_mu * target.var_mu
    sig_t = target.sigma_bar + eps_sigma * target.var_sigma
    return adain(x, mu_t, sig_t)


def style_shift(feature, target, own, rng, eps_mu=None, eps_sigma=None):
    """Shift one [C,H,W] feature to the received style (AdaIN with noise).

    `own` is the shifting client's StyleInfo, carried for protocol symmetry;
    the perturbation scale comes from the received info.
    """
    del own
    shaped = feature.reshape((1,) + tuple(feature.shape))
    out = shift_batch(shaped, target, rng, eps_mu=eps_mu, eps_sigma=eps_sigma)
    return out.reshape(tuple(feature.shape))


def plan_oversample(labels, size, rng):
    """Choose batch indices to duplicate so class counts equalize.

    Greedy minimum-count fill: each of the `size` slots goes to a class with
    the lowest running count (ties broken uniformly at random), then the
    duplicated members are drawn from that class (without replacement while
    possible). Returns an int array of length `size`.
    """
    y = np.asarray(labels)
    if size <= 0:
        return np.empty(0, dtype=np.int64)
    classes, counts = np.unique(y, return_counts=True)
    filled = counts.astype(np.int64).copy()
    extra = np.zeros(len(classes), dtype=np.int64)
    for _ in range(int(size)):
        low = np.flatnonzero(filled == filled.min())
        pick = int(low[rng.integers(len(low))]) if len(low) > 1 else int(low[0])
        extra[pick] += 1
        filled[pick] += 1
    picks = []
    for ci in range(len(classes)):
        if extra[ci] == 0:
            continue
        pool = np.flatnonzero(y == classes[ci])
        take = int(extra[ci])
        if take <= len(pool):
            picks.append(rng.choice(pool, size=take, replace=False))
        else:
            reps, rem = divmod(take, len(pool))
            full = np.tile(pool, reps)
            tail = rng.choice(pool, size=rem, replace=False) if rem else pool[:0]
            picks.append(np.concatenate([full, tail]))
    return np.concatenate(picks).astype(np.int64)


def oversample_class_balanced(batch, labels, size, rng, indices=None):
    """Duplicate `size` batch members class-balanced; gradient-sharing rows.

    Returns (duplicates, their labels). Duplicates are gathered from the
    batch, so the concatenated batch [batch, duplicates] backpropagates into
    the originals.
    """
    if indices is None:
        indices = plan_oversample(labels, size, rng)
    dup = gather_rows(batch, indices)
    return dup, np.asarray(labels)[indices]


def style_explore(oversampled, base_batch, alpha, rng=None):
    """Extrapolate oversampled styles away from the batch style center.

    mu_new = mu_i + alpha * (mu_i - mu_ref), sigma analogous with a clamp at
    0, then AdaIN to the new stats. The reference is the mean of per-sample
    stats over `base_batch`; pass the original mini-batch (formula default)
    or the concatenated batch, per configuration. Deterministic; rng is
    accepted for signature symmetry with the other hooks.
    """
    del rng
    if oversampled.shape[0] == 0:
        return oversampled
    a = np.float32(alpha)
    n, c = oversampled.shape[0], oversampled.shape[1]
    mu_i, sig_i = instance_stats(oversampled)
    mu_b, sig_b = instance_stats(base_batch)
    mu_ref = mu_b.mean(axis=0, keepdims=True).expand((n, c))
    sig_ref = sig_b.mean(axis=0, keepdims=True).expand((n, c))
    mu_new = mu_i + (mu_i - mu_ref) * a
    sig_new = (sig_i + (sig_i - sig_ref) * a).relu()
    return adain(oversampled, mu_new, sig_new)


def mixstyle(batch, rng, mix_beta=0.1, pairing=None, lam=None):
    """Blend each sample's style with a random partner's and AdaIN to it.

    Partner assignment is a shuffled permutation; lambda ~ Beta(mix_beta,
    mix_beta) per sample. Both can be pinned through the keyword arguments.
    Draw order when sampling: pairing permutation first, then lambdas.
    """
    n, c = batch.shape[0], batch.shape[1]
    if n < 2:
        raise ValueError("mixstyle needs at least 2 samples, got %d" % n)
    if pairing is None:
        pairing = rng.permutation(n)
    pairing = np.asarray(pairing, dtype=np.int64)
    if lam is None:
        lam = rng.beta(mix_beta, mix_beta, size=n)
    lam = np.asarray(lam, dtype=np.float32).reshape(n, 1)
    mu, sig = instance_stats(batch)
    mu_j = gather_rows(mu, pairing)
    sig_j = gather_rows(sig, pairing)
    lam_t = Tensor(np.broadcast_to(lam, (n, c)))
    inv_t = Tensor(np.broadcast_to(1.0 - lam, (n, c)))
    mu_new = mu * lam_t + mu_j * inv_t
    sig_new = sig * lam_t + sig_j * inv_t
    return adain(batch, mu_new, sig_new)


# -- wire encoding for the sharing round -------------------------------------
# client_id (u32 LE), sample_count (u32 LE), then mu_bar, sigma_bar, var_mu,
# var_sigma as C-length little-endian f32 vectors: 8 + 16*C bytes total.


def encode_style_info(info):
    body = b"".join(
        np.ascontiguousarray(v, dtype="<f4").tobytes()
        for v in (info.mu_bar, info.sigma_bar, info.var_mu, info.var_sigma)
    )
    return struct.pack("<II", info.client_id, info.sample_count) + body


def decode_style_info(blob):
    if len(blob) < 8 or (len(blob) - 8) % 16:
        raise ValueError("style info payload must be 8 + 16*C bytes, got %d" % len(blob))
    client_id, sample_count = struct.unpack_from("<II", blob)
    c = (len(blob) - 8) // 16
    vecs = np.frombuffer(blob, dtype="<f4", offset=8).reshape(4, c)
    return StyleInfo(
        mu_bar=vecs[0].copy(),
        sigma_bar=vecs[1].copy(),
        var_mu=vecs[2].copy(),
        var_sigma=vecs[3].copy(),
        client_id=int(client_id),
        sample_count=int(sample_count),
    )
