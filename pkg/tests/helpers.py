"""Shared test utilities: central-difference gradient checking.

check_grads builds the loss twice per probed coordinate, so callers keep
probe tensors small or cap the coordinate count. Autodiff runs once under a
Tape; the numeric side re-evaluates the builder on perturbed plain arrays
(no tape), which exercises the recording/non-recording paths together.
"""

import numpy as np

from fedstyle.tensor import Tape, Tensor


def rel_err(a, n):
    return abs(a - n) / max(1.0, abs(a), abs(n))


def conv_reference(x, w, b, stride, pad):
    """Direct-loop convolution oracle, f64 accumulation."""
    bs, c, h, wd = x.shape
    co, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((bs, co, ho, wo), dtype=np.float64)
    for n in range(bs):
        for o in range(co):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[n, :, i * stride : i * stride + k, j * stride : j * stride + k]
                    out[n, o, i, j] = (patch * w[o]).sum(dtype=np.float64) + b[o]
    return out


def check_grads(make_loss, arrays, rtol=1e-3, h=1e-3, rng=None, max_coords=None,
                richardson=False):
    """Compare tape gradients of a scalar builder against central differences.

    `make_loss(*tensors)` must return a scalar Tensor and must be
    deterministic (pin any random draws before calling). Steps scale with
    the coordinate magnitude: h * max(1, |x|). With `richardson` the h and
    h/2 quotients extrapolate the O(h^2) truncation term away and a
    coordinate whose quotients never stabilize (an activation kink inside
    the probe window) is skipped rather than certified; a converged
    quotient still flags any wrong analytic gradient. Returns the number of
    coordinates actually checked so callers can assert coverage.
    """
    tensors = [Tensor(np.asarray(a, dtype=np.float32), requires_grad=True) for a in arrays]
    with Tape() as tape:
        loss = make_loss(*tensors)
    tape.backward(loss)

    def feval(vals):
        return float(make_loss(*[Tensor(v) for v in vals]).data)

    checked = 0
    vals = [t.data.copy() for t in tensors]
    for wi, t in enumerate(tensors):
        ana = t.grad
        assert ana is not None, "input %d never received a gradient" % wi
        flat = vals[wi].reshape(-1)
        aflat = np.asarray(ana).reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        for i in coords:
            orig = float(flat[i])
            step = h * max(1.0, abs(orig))

            def quotient(s):
                flat[i] = orig + s
                fp = feval(vals)
                flat[i] = orig - s
                fm = feval(vals)
                flat[i] = orig
                return (fp - fm) / (2.0 * s)

            if richardson:
                num = None
                for s in (step, step / 4.0, step / 16.0):
                    n1 = quotient(s)
                    n2 = quotient(s / 2.0)
                    # quotients must agree well inside rtol before the
                    # extrapolation is trusted at rtol
                    if rel_err(n1, n2) < 0.5 * rtol:
                        num = (4.0 * n2 - n1) / 3.0
                        break
                if num is None:
                    continue
            else:
                num = quotient(step)
            err = rel_err(float(aflat[i]), num)
            assert err < rtol, (
                "input %d coord %d: analytic %.6g vs numeric %.6g (rel %.3g)"
                % (wi, int(i), float(aflat[i]), num, err)
            )
            checked += 1
    return checked
