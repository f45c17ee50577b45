"""Federated averaging loop with the style-sharing stage.

Each round: sample M of N clients uniformly without replacement, broadcast
the global parameters, let participants measure and exchange style info
(server assigns a uniform random derangement so nobody gets their own),
run E local epochs of SGD with the style/attention pipeline, then aggregate
shard-size-weighted in ascending client-id order.

RNG streams are derived deterministically from the run seed so a training
trajectory can be replayed outside the orchestrator:

    model init      default_rng([seed, 0])
    partitioning    default_rng([seed, 1])
    server          default_rng([seed, 2])        participant draws + derangements
    client          default_rng([seed, 3, t, client_id])   per round t (1-based)

Within a local update the client stream is consumed in a fixed order per
batch: plan gates (style modes), singleton repairs (attention modes), then
the in-forward draws documented in model.forward.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import model as mdl
from . import styles
from .optim import scheduled_lr, sgd_step
from .tensor import NumericError, Tape, Tensor, softmax_cross_entropy

logger = logging.getLogger(__name__)

MODES = ("fedavg", "style_only", "attention_only", "stablefdg")
PARTITIONS = ("single_domain", "multi_domain_dirichlet")

_STREAM_INIT = 0
_STREAM_PARTITION = 1
_STREAM_SERVER = 2
_STREAM_CLIENT = 3


@dataclass
class FederationConfig:
    num_clients: int = 12
    participation: int = 4
    rounds: int = 30
    local_epochs: int = 2
    batch_size: int = 16
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    clip_norm: float | None = 1.0
    lr_schedule: str = "cosine"
    lr_step_every: int = 20
    lr_step_gamma: float = 0.1
    style_prob: float = 0.5
    alpha: float = 3.0
    oversample_size: int | None = None  # None means "match batch_size"
    explore_ref: str = "original"
    mix_beta: float = 0.1
    mode: str = "stablefdg"
    partition: str = "single_domain"
    dirichlet_beta: float = 0.5
    seed: int = 0
    target_domain: int | None = None
    eval_every: int = 5

    def validate(self):
        if not 1 <= self.participation <= self.num_clients:
            raise ValueError(
                "participation must satisfy 1 <= M <= N, got M=%d N=%d"
                % (self.participation, self.num_clients)
            )
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2, got %d" % self.batch_size)
        if self.lr <= 0:
            raise ValueError("lr must be > 0, got %r" % (self.lr,))
        if self.momentum < 0 or self.weight_decay < 0:
            raise ValueError("momentum and weight_decay must be >= 0")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive or None, got %r" % (self.clip_norm,))
        if not 0.0 <= self.style_prob <= 1.0:
            raise ValueError("style_prob must be in [0,1], got %r" % (self.style_prob,))
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0, got %r" % (self.alpha,))
        if self.mix_beta <= 0:
            raise ValueError("mix_beta must be > 0, got %r" % (self.mix_beta,))
        if self.rounds < 0 or self.local_epochs < 1 or self.eval_every < 1:
            raise ValueError("rounds >= 0, local_epochs >= 1, eval_every >= 1 required")
        if self.mode not in MODES:
            raise ValueError("mode must be one of %r, got %r" % (MODES, self.mode))
        if self.partition not in PARTITIONS:
            raise ValueError("partition must be one of %r, got %r" % (PARTITIONS, self.partition))
        if self.explore_ref not in ("original", "concatenated"):
            raise ValueError("explore_ref must be 'original' or 'concatenated'")
        if self.lr_schedule not in ("cosine", "step"):
            raise ValueError("lr_schedule must be 'cosine' or 'step'")
        if self.dirichlet_beta <= 0:
            raise ValueError("dirichlet_beta must be > 0, got %r" % (self.dirichlet_beta,))

    @property
    def style_enabled(self):
        return self.mode in ("style_only", "stablefdg")

    @property
    def attention_enabled(self):
        return self.mode in ("attention_only", "stablefdg")

    def resolved_oversample(self):
        return self.batch_size if self.oversample_size is None else self.oversample_size


@dataclass
class ClientState:
    client_id: int
    shard: np.ndarray
    own_style: styles.StyleInfo | None = None
    received_style: styles.StyleInfo | None = None
    velocities: dict = field(default_factory=dict)
    rng: np.random.Generator | None = None


@dataclass
class RoundLog:
    round: int
    participants: list
    client_losses: dict  # client_id -> per-batch loss trajectory
    target_acc: float | None = None
    domain_acc: dict | None = None
    wall_time: float = 0.0


@dataclass
class AuditTrail:
    """Corpus indices touched by gradients and style measurement."""

    train_indices: set = field(default_factory=set)
    style_indices: set = field(default_factory=set)


@dataclass
class FederationResult:
    params: dict
    rounds: list
    audit: AuditTrail
    shards: list
    model_config: mdl.ModelConfig


def client_stream(seed, round_index, client_id):
    """The per-round client rng; round_index is 1-based."""
    return np.random.default_rng([seed, _STREAM_CLIENT, round_index, client_id])


def partition_single_domain(indices, domains, num_clients, rng):
    """Split each domain's samples uniformly across its client group.

    Clients are assigned to domains in sorted-domain blocks of equal size;
    num_clients must divide evenly by the number of domains present. A single
    client is the centralized special case and receives everything.
    """
    indices = np.asarray(indices)
    domains = np.asarray(domains)
    if num_clients == 1:
        return [indices.copy()]
    doms = np.unique(domains)
    if num_clients % len(doms):
        raise ValueError(
            "num_clients %d is not divisible by %d source domains" % (num_clients, len(doms))
        )
    per = num_clients // len(doms)
    shards = []
    for d in doms:
        pool = indices[domains == d]
        pool = pool[rng.permutation(len(pool))]
        split = np.array_split(pool, per)
        if any(len(s) == 0 for s in split):
            raise ValueError("domain %d has fewer samples than its %d clients" % (int(d), per))
        shards.extend(split)
    return shards


def largest_remainder(proportions, total):
    """Integer allocation of `total` by proportions, remainders decide ties."""
    props = np.asarray(proportions, dtype=np.float64)
    raw = props * total
    counts = np.floor(raw).astype(np.int64)
    short = int(total - counts.sum())
    if short > 0:
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def partition_multi_domain(indices, domains, num_clients, beta, rng):
    """Dirichlet(beta) shards: per domain, draw client proportions and allot.

    Largest-remainder rounding keeps counts exact; empty shards are repaired
    by moving one sample from the largest shard.
    """
    indices = np.asarray(indices)
    domains = np.asarray(domains)
    if num_clients == 1:
        return [indices.copy()]
    shards = [[] for _ in range(num_clients)]
    for d in np.unique(domains):
        pool = indices[domains == d]
        pool = pool[rng.permutation(len(pool))]
        props = rng.dirichlet(np.full(num_clients, beta))
        counts = largest_remainder(props, len(pool))
        start = 0
        for ci in range(num_clients):
            shards[ci].extend(pool[start : start + counts[ci]].tolist())
            start += counts[ci]
    shards = [np.asarray(s, dtype=indices.dtype) for s in shards]
    while any(len(s) == 0 for s in shards):
        empty = min(range(num_clients), key=lambda i: len(shards[i]))
        biggest = max(range(num_clients), key=lambda i: len(shards[i]))
        if len(shards[biggest]) <= 1:
            raise ValueError("not enough samples to give every client a shard")
        shards[empty] = shards[biggest][-1:]
        shards[biggest] = shards[biggest][:-1]
    return shards


def derange(rng, m):
    """Uniform random fixed-point-free permutation (rejection sampling)."""
    if m < 2:
        raise ValueError("derangements need at least 2 elements, got %d" % m)
    ident = np.arange(m)
    while True:
        p = rng.permutation(m)
        if not np.any(p == ident):
            return p


def style_sharing_round(participants, global_params, images, rng, model_config, audit=None):
    """Measure every participant's style info and exchange via derangement.

    Own style is computed over the full shard at the block-1 feature layer
    with the broadcast (global) parameters, eval mode, hooks off. Payloads
    travel through the wire codec. With one participant there is nothing to
    exchange: the hooks degrade to the client's own style later, and the
    derangement draw is skipped. Returns the assignment array or None.
    """
    payloads = []
    for cl in participants:
        stats = []
        for start in range(0, len(cl.shard), 128):
            chunk = images[cl.shard[start : start + 128]]
            feats = mdl.block1_features(global_params, chunk, slope=model_config.leaky_slope)
            mu, sig = styles.measure_batch(feats)
            stats.extend(styles.StyleStats(mu[i], sig[i]) for i in range(len(mu)))
        cl.own_style = styles.compute_style_info(stats, cl.client_id)
        payloads.append(styles.encode_style_info(cl.own_style))
        if audit is not None:
            audit.style_indices.update(int(i) for i in cl.shard)
    if len(participants) < 2:
        logger.warning("style sharing skipped: only one participant this round")
        return None
    assignment = derange(rng, len(participants))
    for i, cl in enumerate(participants):
        cl.received_style = styles.decode_style_info(payloads[assignment[i]])
    return assignment


def _repair_singletons(idx, shard, labels, rng):
    """Append a same-class shard sample for every singleton class in a batch."""
    y = labels[idx]
    classes, counts = np.unique(y, return_counts=True)
    extras = []
    for cls in classes[counts == 1]:
        pool = shard[labels[shard] == cls]
        pool = pool[~np.isin(pool, idx)]
        if len(pool):
            extras.append(int(pool[rng.integers(len(pool))]))
        else:
            # the shard has no second sample of this class: force duplication
            extras.append(int(idx[y == cls][0]))
    if not extras:
        return idx
    return np.concatenate([idx, np.asarray(extras, dtype=idx.dtype)])


def local_update(client, global_params, config, images, labels, round_index, model_config, audit=None):
    """E epochs of mini-batch SGD from a copy of the global parameters.

    Returns (params, per-batch losses). Velocity buffers live on the client
    and persist across rounds.
    """
    if len(client.shard) == 0:
        raise ValueError("client %d has an empty shard" % client.client_id)
    params = mdl.clone_params(global_params)
    rng = client.rng
    style_on = config.style_enabled
    attn_on = config.attention_enabled
    received = client.received_style
    if style_on and received is None:
        received = client.own_style
        if received is not None:
            logger.warning(
                "client %d shifts toward its own style (no peer style this round)",
                client.client_id,
            )
    explore = styles.ExplorationParams(
        alpha=config.alpha,
        oversample_size=config.resolved_oversample(),
        mix_beta=config.mix_beta,
    )
    n = len(client.shard)
    losses = []
    for epoch in range(config.local_epochs):
        lr_e = scheduled_lr(
            config.lr,
            config.lr_schedule,
            (round_index - 1) * config.local_epochs + epoch,
            config.rounds * config.local_epochs,
            step_every=config.lr_step_every,
            gamma=config.lr_step_gamma,
        )
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = client.shard[order[start : start + config.batch_size]]
            if style_on:
                plan = mdl.sample_plan(rng, config.style_prob)
                if received is None:
                    plan.share_shift_active = False  # nothing to shift toward
                ctx = mdl.StyleContext(
                    received=received,
                    explore=explore,
                    explore_ref=config.explore_ref,
                )
            else:
                plan = mdl.inactive_plan()
                ctx = None
            if attn_on:
                idx = _repair_singletons(idx, client.shard, labels, rng)
            x = Tensor(images[idx])
            y = labels[idx]
            with Tape() as tape:
                out = mdl.forward(params, x, y, plan, ctx=ctx, rng=rng, config=model_config)
                loss = softmax_cross_entropy(out.logits, out.labels)
                tape.backward(loss)
            sgd_step(
                params, client.velocities, lr_e, config.momentum,
                config.weight_decay, clip_norm=config.clip_norm,
            )
            val = loss.item()
            if not np.isfinite(val):
                raise NumericError(
                    "non-finite loss on client %d round %d" % (client.client_id, round_index)
                )
            losses.append(val)
            if audit is not None:
                audit.train_indices.update(int(i) for i in idx)
    return params, losses


def fedavg_aggregate(client_params, weights):
    """Weighted elementwise mean in the given client order, f64 accumulate."""
    if not client_params:
        raise ValueError("nothing to aggregate")
    w = np.asarray(weights, dtype=np.float64)
    if np.any(w < 0) or w.sum() <= 0:
        raise ValueError("aggregation weights must be >= 0 with positive sum")
    manifest = [(n, tuple(p.data.shape)) for n, p in client_params[0].items()]
    for cp in client_params[1:]:
        if [(n, tuple(p.data.shape)) for n, p in cp.items()] != manifest:
            raise ValueError("parameter manifests differ across clients")
    w = w / w.sum()
    out = {}
    for name, _ in manifest:
        acc = np.zeros(client_params[0][name].data.shape, dtype=np.float64)
        for wi, cp in zip(w, client_params):
            acc += wi * cp[name].data
        out[name] = Tensor(acc.astype(np.float32), requires_grad=True)
    return out


def evaluate(params, images, labels, model_config, batch_size=100):
    """Eval-mode accuracy; attention (when present) is self-attention."""
    correct = 0
    plan = mdl.eval_plan()
    for start in range(0, len(labels), batch_size):
        x = images[start : start + batch_size]
        y = labels[start : start + batch_size]
        out = mdl.forward(params, Tensor(x), y, plan, config=model_config)
        correct += int((out.logits.data.argmax(axis=1) == y).sum())
    return correct / max(len(labels), 1)


def run_federation(config, corpus, model_config=None):
    """Run the full protocol over a corpus with images/labels/domains arrays.

    When config.target_domain is set, that domain is excluded from every
    shard (leave-one-domain-out) and serves as the evaluation set at the
    configured cadence plus the final round.
    """
    config.validate()
    images = corpus.images
    labels = np.asarray(corpus.labels)
    domains = np.asarray(corpus.domains)
    if model_config is None:
        model_config = mdl.ModelConfig(num_classes=int(labels.max()) + 1)
    model_config = replace(model_config, use_attention=config.attention_enabled)

    all_idx = np.arange(len(labels))
    if config.target_domain is not None:
        source_idx = all_idx[domains != config.target_domain]
        target_idx = all_idx[domains == config.target_domain]
        if len(target_idx) == 0:
            raise ValueError("target domain %d has no samples" % config.target_domain)
    else:
        source_idx = all_idx
        target_idx = None

    init_rng = np.random.default_rng([config.seed, _STREAM_INIT])
    global_params = mdl.init_params(model_config, init_rng)

    part_rng = np.random.default_rng([config.seed, _STREAM_PARTITION])
    if config.partition == "single_domain":
        shards = partition_single_domain(
            source_idx, domains[source_idx], config.num_clients, part_rng
        )
    else:
        shards = partition_multi_domain(
            source_idx, domains[source_idx], config.num_clients, config.dirichlet_beta, part_rng
        )
    clients = [ClientState(cid, shard) for cid, shard in enumerate(shards)]

    server_rng = np.random.default_rng([config.seed, _STREAM_SERVER])
    audit = AuditTrail()
    logs = []
    for t in range(1, config.rounds + 1):
        t0 = time.perf_counter()
        part_ids = np.sort(
            server_rng.choice(config.num_clients, size=config.participation, replace=False)
        )
        participants = [clients[i] for i in part_ids]
        for cl in participants:
            cl.rng = client_stream(config.seed, t, cl.client_id)
            cl.received_style = None  # styles never persist across rounds
        if config.style_enabled:
            style_sharing_round(
                participants, global_params, images, server_rng, model_config, audit
            )
        updated = []
        weights = []
        losses = {}
        for cl in participants:
            p, batch_losses = local_update(
                cl, global_params, config, images, labels, t, model_config, audit
            )
            updated.append(p)
            weights.append(len(cl.shard))
            losses[cl.client_id] = [float(v) for v in batch_losses]
        global_params = fedavg_aggregate(updated, weights)
        acc = None
        per_domain = None
        if t % config.eval_every == 0 or t == config.rounds:
            per_domain = {
                int(d): evaluate(global_params, images[domains == d], labels[domains == d], model_config)
                for d in np.unique(domains)
            }
            if config.target_domain is not None:
                acc = per_domain[config.target_domain]
        logs.append(
            RoundLog(
                round=t,
                participants=[int(i) for i in part_ids],
                client_losses=losses,
                target_acc=acc,
                domain_acc=per_domain,
                wall_time=time.perf_counter() - t0,
            )
        )
    return FederationResult(
        params=global_params,
        rounds=logs,
        audit=audit,
        shards=shards,
        model_config=model_config,
    )


def write_round_logs(path, logs, num_domains=0):
    """RoundLog CSV: one row per (round, client), shared eval columns."""
    cols = ["round", "client_id", "loss", "target_acc"]
    cols += ["acc_domain_%d" % d for d in range(num_domains)]
    lines = [",".join(cols)]
    for log in logs:
        for cid, traj in sorted(log.client_losses.items()):
            row = [
                str(log.round),
                str(cid),
                "%.6f" % float(np.mean(traj)),
                "" if log.target_acc is None else "%.6f" % log.target_acc,
            ]
            for d in range(num_domains):
                acc = None if log.domain_acc is None else log.domain_acc.get(d)
                row.append("" if acc is None else "%.6f" % acc)
            lines.append(",".join(row))
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")
