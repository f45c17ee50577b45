"""Flat key = value experiment configuration.

One option per line, `#` comments, no sections. Every key has a declared
type below; unknown or duplicate keys are errors so that typos fail fast.
serialize -> parse is an exact round trip (floats via repr).
"""

from __future__ import annotations

from dataclasses import dataclass, fields

from .data import CorpusConfig
from .federation import MODES, FederationConfig


class ConfigError(ValueError):
    """Bad config file or option value; the CLI maps this to exit code 2."""


@dataclass
class ExperimentConfig:
    # federation
    mode: str = "stablefdg"
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
    oversample_size: int | None = None
    explore_ref: str = "original"
    mix_beta: float = 0.1
    partition: str = "single_domain"
    dirichlet_beta: float = 0.5
    eval_every: int = 5
    # corpus
    num_classes: int = 5
    num_domains: int = 4
    samples_per_domain: int = 200
    image_size: int = 32
    balance: str = "balanced"
    data_seed: int = 0
    # experiment matrix
    seeds: tuple = (0, 1, 2)
    targets: tuple = (0, 1, 2, 3)

    def corpus_config(self):
        return CorpusConfig(
            num_classes=self.num_classes,
            num_domains=self.num_domains,
            samples_per_domain=self.samples_per_domain,
            image_size=self.image_size,
            balance=self.balance,
            seed=self.data_seed,
        )

    def federation_config(self, seed, target, mode=None):
        return FederationConfig(
            num_clients=self.num_clients,
            participation=self.participation,
            rounds=self.rounds,
            local_epochs=self.local_epochs,
            batch_size=self.batch_size,
            lr=self.lr,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
            clip_norm=self.clip_norm,
            lr_schedule=self.lr_schedule,
            lr_step_every=self.lr_step_every,
            lr_step_gamma=self.lr_step_gamma,
            style_prob=self.style_prob,
            alpha=self.alpha,
            oversample_size=self.oversample_size,
            explore_ref=self.explore_ref,
            mix_beta=self.mix_beta,
            mode=self.mode if mode is None else mode,
            partition=self.partition,
            dirichlet_beta=self.dirichlet_beta,
            seed=seed,
            target_domain=target,
            eval_every=self.eval_every,
        )

    def validate(self):
        try:
            self.corpus_config().validate()
            self.federation_config(0, None).validate()
        except ValueError as e:
            raise ConfigError(str(e)) from e
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        if not self.targets:
            raise ConfigError("targets must be non-empty")
        for t in self.targets:
            if not 0 <= t < self.num_domains:
                raise ConfigError("target %d outside the %d domains" % (t, self.num_domains))


_INT_KEYS = {
    "num_clients", "participation", "rounds", "local_epochs", "batch_size",
    "lr_step_every", "eval_every", "num_classes", "num_domains",
    "samples_per_domain", "image_size", "data_seed",
}
_FLOAT_KEYS = {
    "lr", "momentum", "weight_decay", "lr_step_gamma", "style_prob", "alpha",
    "mix_beta", "dirichlet_beta",
}
_STR_KEYS = {"mode", "lr_schedule", "explore_ref", "partition", "balance"}
_OPT_INT_KEYS = {"oversample_size"}
_OPT_FLOAT_KEYS = {"clip_norm"}
_INT_LIST_KEYS = {"seeds", "targets"}

_ALL_KEYS = (
    _INT_KEYS | _FLOAT_KEYS | _STR_KEYS | _OPT_INT_KEYS | _OPT_FLOAT_KEYS | _INT_LIST_KEYS
)
assert _ALL_KEYS == {f.name for f in fields(ExperimentConfig)}


def _parse_value(key, raw):
    try:
        if key in _INT_KEYS:
            return int(raw)
        if key in _FLOAT_KEYS:
            return float(raw)
        if key in _OPT_INT_KEYS:
            return None if raw.lower() == "none" else int(raw)
        if key in _OPT_FLOAT_KEYS:
            return None if raw.lower() == "none" else float(raw)
        if key in _INT_LIST_KEYS:
            return tuple(int(v) for v in raw.split(",") if v.strip() != "")
        return raw
    except ValueError as e:
        raise ConfigError("bad value for %s: %r" % (key, raw)) from e


def parse_config(text):
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError("line %d: expected key = value, got %r" % (lineno, line))
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key not in _ALL_KEYS:
            raise ConfigError("line %d: unknown key %r" % (lineno, key))
        if key in values:
            raise ConfigError("line %d: duplicate key %r" % (lineno, key))
        values[key] = _parse_value(key, raw)
    return ExperimentConfig(**values)


def serialize_config(cfg):
    lines = []
    for f in fields(ExperimentConfig):
        v = getattr(cfg, f.name)
        if f.name in _INT_LIST_KEYS:
            raw = ",".join(str(x) for x in v)
        elif v is None:
            raw = "none"
        else:
            raw = repr(v) if isinstance(v, float) else str(v)
        lines.append("%s = %s" % (f.name, raw))
    return "\n".join(lines) + "\n"


def read_config(path):
    try:
        with open(path, "r", encoding="utf-8") as f:
            text = f.read()
    except OSError as e:
        raise ConfigError("cannot read config %s: %s" % (path, e)) from e
    return parse_config(text)


def apply_overrides(cfg, pairs):
    """Apply `key=value` strings (CLI flags) on top of a parsed config."""
    values = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError("override must look like key=value, got %r" % pair)
        key, raw = (part.strip() for part in pair.split("=", 1))
        if key not in _ALL_KEYS:
            raise ConfigError("unknown config key %r" % key)
        values[key] = _parse_value(key, raw)
    if not values:
        return cfg
    merged = {f.name: getattr(cfg, f.name) for f in fields(ExperimentConfig)}
    merged.update(values)
    return ExperimentConfig(**merged)
