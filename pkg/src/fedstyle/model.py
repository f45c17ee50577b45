"""Block-structured CNN with style hook points and the attention head.

Four conv blocks stand in for residual blocks (skips omitted; style
statistics live on feature maps, not on skip sums). Style hooks read and
rewrite the post-activation block outputs: sharing/shifting at block 1,
exploration at blocks 1-3, style mixing after the last exploration point at
block 3. Block 4 never carries a style hook. The classifier consumes the
globally pooled embedding, concatenated with the attention embedding when
the attention head is enabled, which doubles its input width.

All random draws inside a training forward come from the single `rng`
argument, in a fixed order: keeper selection, shift noise (eps_mu rows then
eps_sigma rows), oversampling choices, mixstyle pairing then lambdas,
attention pairing. Tests pin any of these through StyleOverride.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from . import attention as attn
from . import styles
from .tensor import Tensor, conv2d, concat, gather_rows, global_avg_pool, linear

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"FEDSTYLE-CKPT-1"

# inputs arrive in [0,1]; the trunk centers them so the stem sees zero-mean
# pixels (the raw DC component badly conditions the loss surface)
INPUT_CENTER = 0.5

# style hooks attach at these block indices only; block 4 is rejected
STYLE_HOOK_BLOCKS = (1, 2, 3)


def assert_hookable(block_index):
    if block_index not in STYLE_HOOK_BLOCKS:
        raise ValueError(
            "style hooks attach at blocks %r, block %d rejected" % (STYLE_HOOK_BLOCKS, block_index)
        )


@dataclass(frozen=True)
class BlockSpec:
    index: int
    in_channels: int
    out_channels: int
    downsample: bool

    # Downsampling blocks use 2x2/stride-2/no-pad convs so spatial sizes
    # halve exactly (conv2d rejects non-integral outputs); others 3x3/pad-1.
    @property
    def kernel(self):
        return 2 if self.downsample else 3

    @property
    def stride(self):
        return 2 if self.downsample else 1

    @property
    def pad(self):
        return 0 if self.downsample else 1


@dataclass(frozen=True)
class ModelConfig:
    """Desk-scale default: 3x32x32 input, blocks 16-16-32-32, stride 2 at 2 and 4."""

    in_channels: int = 3
    num_classes: int = 5
    stem_channels: int = 16
    block_channels: tuple = (16, 16, 32, 32)
    block_downsample: tuple = (False, True, False, True)
    attention_dim: int = 30
    use_attention: bool = True
    leaky_slope: float = 0.1

    def blocks(self):
        specs = []
        prev = self.stem_channels
        for i, (out, down) in enumerate(zip(self.block_channels, self.block_downsample), start=1):
            specs.append(BlockSpec(i, prev, out, down))
            prev = out
        return specs

    @property
    def feature_channels(self):
        return self.block_channels[-1]


@dataclass
class ForwardPlan:
    """Hook decisions for one mini-batch."""

    share_shift_active: bool = False
    explore_active: tuple = (False, False, False)
    mix_active: bool = False
    mode: str = "eval"

    def __post_init__(self):
        if self.mode not in ("train", "eval"):
            raise ValueError("plan mode must be 'train' or 'eval', got %r" % (self.mode,))
        if self.mode == "eval" and (
            self.share_shift_active or any(self.explore_active) or self.mix_active
        ):
            raise ValueError("style hooks are training-only; eval plans must be inactive")


def eval_plan():
    return ForwardPlan(mode="eval")


def inactive_plan():
    """Training plan with every hook off (the plain-CNN ablation path)."""
    return ForwardPlan(mode="train")


def sample_plan(rng, p, mix_active=True):
    """Draw the four Bernoulli(p) hook gates: shift, then explores 1..3.

    Mixing is not gated by p; it is on whenever style learning trains.
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError("hook probability must be in [0,1], got %r" % (p,))
    draws = rng.random(4) < p
    return ForwardPlan(
        share_shift_active=bool(draws[0]),
        explore_active=(bool(draws[1]), bool(draws[2]), bool(draws[3])),
        mix_active=bool(mix_active),
        mode="train",
    )


@dataclass
class StyleOverride:
    """Pinned values for the otherwise random draws inside forward."""

    keepers: np.ndarray | None = None
    eps_mu: np.ndarray | None = None
    eps_sigma: np.ndarray | None = None
    dup_indices: np.ndarray | None = None
    mix_pairing: np.ndarray | None = None
    mix_lam: np.ndarray | None = None
    attn_pairing: np.ndarray | None = None


@dataclass
class StyleContext:
    """Per-update style inputs: the received style info and the hook knobs."""

    received: styles.StyleInfo | None = None
    explore: styles.ExplorationParams = field(default_factory=styles.ExplorationParams)
    explore_ref: str = "original"
    override: StyleOverride | None = None


@dataclass
class ForwardOutput:
    logits: Tensor
    features: Tensor
    labels: np.ndarray


def init_params(config, rng):
    """Fan-in-scaled uniform init; biases zero. Returns the ordered name map."""
    params = {}

    def uniform(shape, fan_in):
        # Kaiming-uniform gain: keeps activation variance roughly flat
        # through the leaky-relu stack instead of decaying per layer.
        limit = np.sqrt(6.0 / fan_in)
        data = rng.uniform(-limit, limit, size=shape).astype(np.float32)
        return Tensor(data, requires_grad=True)

    def zeros(shape):
        return Tensor(np.zeros(shape, dtype=np.float32), requires_grad=True)

    params["stem.w"] = uniform(
        (config.stem_channels, config.in_channels, 3, 3), config.in_channels * 9
    )
    params["stem.b"] = zeros((config.stem_channels,))
    for spec in config.blocks():
        k = spec.kernel
        params["block%d.w" % spec.index] = uniform(
            (spec.out_channels, spec.in_channels, k, k), spec.in_channels * k * k
        )
        params["block%d.b" % spec.index] = zeros((spec.out_channels,))
    c4 = config.feature_channels
    if config.use_attention:
        params["attn.theta_q"] = uniform((config.attention_dim, c4), c4)
        params["attn.theta_k"] = uniform((config.attention_dim, c4), c4)
        head_width = 2 * c4
    else:
        head_width = c4
    params["head.w"] = uniform((config.num_classes, head_width), head_width)
    params["head.b"] = zeros((config.num_classes,))
    if config.use_attention:
        logger.info(
            "attention head holds %.2f%% of parameters", 100.0 * attention_param_ratio(params)
        )
    return params


def attention_param_ratio(params):
    total = sum(p.data.size for p in params.values())
    attn_n = sum(p.data.size for n, p in params.items() if n.startswith("attn."))
    return attn_n / total


def clone_params(params):
    return {n: Tensor(p.data.copy(), requires_grad=True) for n, p in params.items()}


def _reorder(parts, order):
    """Concatenate row groups and restore the original row order."""
    merged = concat(parts, axis=0)
    inv = np.argsort(np.concatenate(order))
    return gather_rows(merged, inv)


def _shift_stage(h, ctx, rng):
    n = h.shape[0]
    if n < 2:
        return h
    mu, sig = styles.measure_batch(h)
    stats = [styles.StyleStats(mu[i], sig[i]) for i in range(n)]
    ov = ctx.override
    if ov is not None and ov.keepers is not None:
        keepers = np.asarray(ov.keepers, dtype=np.int64)
    else:
        keepers = styles.select_keepers_kmeanspp(stats, rng)
    moved = np.setdiff1d(np.arange(n), keepers)
    if len(moved) == 0:
        return h
    eps_mu = ov.eps_mu if ov is not None else None
    eps_sigma = ov.eps_sigma if ov is not None else None
    shifted = styles.shift_batch(
        gather_rows(h, moved), ctx.received, rng, eps_mu=eps_mu, eps_sigma=eps_sigma
    )
    return _reorder([gather_rows(h, keepers), shifted], [keepers, moved])


def _explore_stage(h, n_orig, ctx, rng):
    head = gather_rows(h, np.arange(n_orig))
    dup = gather_rows(h, np.arange(n_orig, h.shape[0]))
    base = h if ctx.explore_ref == "concatenated" else head
    explored = styles.style_explore(dup, base, ctx.explore.alpha, rng)
    return concat([head, explored], axis=0)


def forward(params, batch, labels, plan, ctx=None, rng=None, config=None):
    """Run the network over one batch.

    In training plans with a style context, the batch can grow: oversampled
    duplicates are appended after the block-1 stage and the returned labels
    cover every row. The attention path turns on whenever the params carry
    theta tensors. `config` supplies the block strides and activation slope;
    the desk-scale default applies when omitted.
    """
    cfg = config or ModelConfig()
    slope = cfg.leaky_slope
    x = batch if isinstance(batch, Tensor) else Tensor(batch)
    y = np.asarray(labels, dtype=np.int64)
    train = plan.mode == "train"
    styled = train and ctx is not None
    if plan.share_shift_active and (ctx is None or ctx.received is None):
        raise ValueError("share_shift_active requires a style context with received style info")

    n_orig = x.shape[0]
    h = conv2d(x - INPUT_CENTER, params["stem.w"], params["stem.b"], stride=1, pad=1).leaky_relu(slope)
    for spec in cfg.blocks():
        bi = spec.index
        h = conv2d(
            h, params["block%d.w" % bi], params["block%d.b" % bi],
            stride=spec.stride, pad=spec.pad,
        ).leaky_relu(slope)
        if not styled or bi not in STYLE_HOOK_BLOCKS:
            continue
        assert_hookable(bi)
        if bi == 1:
            if plan.share_shift_active:
                h = _shift_stage(h, ctx, rng)
            size = ctx.explore.oversample_size
            if size > 0:
                ov = ctx.override
                if ov is not None and ov.dup_indices is not None:
                    dup_idx = np.asarray(ov.dup_indices, dtype=np.int64)
                else:
                    dup_idx = styles.plan_oversample(y, size, rng)
                h = concat([h, gather_rows(h, dup_idx)], axis=0)
                y = np.concatenate([y, y[dup_idx]])
        if plan.explore_active[bi - 1] and h.shape[0] > n_orig:
            h = _explore_stage(h, n_orig, ctx, rng)
        if bi == 3 and plan.mix_active and h.shape[0] >= 2:
            ov = ctx.override
            pairing = ov.mix_pairing if ov is not None else None
            lam = ov.mix_lam if ov is not None else None
            h = styles.mixstyle(h, rng, ctx.explore.mix_beta, pairing=pairing, lam=lam)

    z = h
    pooled = global_avg_pool(z)
    if "attn.theta_q" in params:
        mode = "train_mixed" if train else "eval_self"
        pin = ctx.override.attn_pairing if (ctx is not None and ctx.override is not None) else None
        pooled = concat(
            [pooled, attn.highlight(z, y, params["attn.theta_q"], params["attn.theta_k"], mode, rng=rng, pairing=pin)],
            axis=1,
        )
    logits = linear(pooled, params["head.w"], params["head.b"])
    return ForwardOutput(logits=logits, features=z, labels=y)


def block1_features(params, batch, slope=0.1):
    """Post-activation block-1 output as a plain array (style measurement)."""
    x = batch if isinstance(batch, Tensor) else Tensor(batch)
    h = conv2d(x - INPUT_CENTER, params["stem.w"], params["stem.b"], stride=1, pad=1).leaky_relu(slope)
    h = conv2d(h, params["block1.w"], params["block1.b"], stride=1, pad=1).leaky_relu(slope)
    return h.data


def features_only(params, batch, config=None):
    """Eval-mode trunk output [B, C4, H4, W4] as a plain array."""
    cfg = config or ModelConfig()
    x = batch if isinstance(batch, Tensor) else Tensor(batch)
    h = conv2d(x - INPUT_CENTER, params["stem.w"], params["stem.b"], stride=1, pad=1).leaky_relu(cfg.leaky_slope)
    for spec in cfg.blocks():
        h = conv2d(
            h, params["block%d.w" % spec.index], params["block%d.b" % spec.index],
            stride=spec.stride, pad=spec.pad,
        ).leaky_relu(cfg.leaky_slope)
    return h.data


# -- checkpoint format --------------------------------------------------------
# magic line, JSON manifest line {"params":[{"name","shape"}...],"meta":{}},
# then the concatenated little-endian f32 payloads in manifest order.


def save_checkpoint(path, params, meta=None):
    manifest = {
        "params": [{"name": n, "shape": list(p.data.shape)} for n, p in params.items()],
        "meta": meta or {},
    }
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC + b"\n")
        f.write(json.dumps(manifest).encode("utf-8") + b"\n")
        for p in params.values():
            f.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as f:
        magic = f.readline().rstrip(b"\n")
        if magic != CHECKPOINT_MAGIC:
            raise ValueError("not a model checkpoint (magic %r)" % (magic,))
        manifest = json.loads(f.readline().decode("utf-8"))
        params = {}
        for entry in manifest["params"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = f.read(count * 4)
            if len(buf) != count * 4:
                raise ValueError("checkpoint truncated at %r" % (entry["name"],))
            params[entry["name"]] = Tensor(
                np.frombuffer(buf, dtype="<f4").reshape(shape).copy(), requires_grad=True
            )
    return params, manifest.get("meta", {})
