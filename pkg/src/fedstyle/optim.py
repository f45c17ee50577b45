"""SGD with momentum and weight decay, plus the learning-rate schedules."""

from __future__ import annotations

import math

import numpy as np


def grad_norm(params):
    """Global l2 norm over all present gradients (f64 accumulation)."""
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float(np.sum(p.grad.astype(np.float64) ** 2))
    return math.sqrt(total)


def sgd_step(params, velocities, lr, momentum=0.9, weight_decay=5e-4, clip_norm=None):
    """One SGD update over named parameter tensors.

    v <- momentum * v + grad + weight_decay * p ; p <- p - lr * v.
    Velocity buffers are created lazily and keyed by parameter name, so a
    client can keep them across rounds. Gradients are consumed: each
    parameter's .grad is cleared after the update so stale gradients cannot
    leak into the next batch. Parameters without a gradient are skipped.

    clip_norm, when set, rescales the whole gradient so its global l2 norm
    is at most that value before momentum and decay apply. The style hooks
    occasionally emit very large gradients (feature statistics can be
    extrapolated several-fold); without a bound, momentum snowballs them.
    """
    scale = np.float32(1.0)
    if clip_norm is not None:
        norm = grad_norm(params)
        if norm > clip_norm:
            scale = np.float32(clip_norm / norm)
    m = np.float32(momentum)
    wd = np.float32(weight_decay)
    step = np.float32(lr)
    for name, p in params.items():
        if p.grad is None:
            continue
        g = p.grad if scale == 1.0 else p.grad * scale
        if wd:
            g = g + wd * p.data
        v = velocities.get(name)
        if v is None:
            v = np.zeros_like(p.data)
        v = m * v + g
        velocities[name] = v
        # rebind instead of in-place: views of the old buffer stay valid
        p.data = p.data - step * v
        p.grad = None


def scheduled_lr(base_lr, schedule, global_epoch, total_epochs, step_every=20, gamma=0.1):
    """Learning rate for one local epoch.

    `global_epoch` counts local epochs across all rounds, starting at 0.
    cosine: half-cosine decay from base_lr toward 0 over total_epochs.
    step: multiply by gamma every `step_every` global epochs.
    """
    if schedule == "cosine":
        if total_epochs <= 0:
            return float(base_lr)
        frac = min(max(global_epoch / total_epochs, 0.0), 1.0)
        return float(base_lr) * 0.5 * (1.0 + math.cos(math.pi * frac))
    if schedule == "step":
        return float(base_lr) * gamma ** (global_epoch // step_every)
    raise ValueError("unknown lr schedule %r (expected 'cosine' or 'step')" % (schedule,))
