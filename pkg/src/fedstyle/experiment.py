"""Leave-one-domain-out experiment matrix and artifact writers.

A run grid is (mode x target x seed); every completed cell is flushed to
the results CSV immediately so partial matrices survive a crash. Outputs
per invocation: results.csv, summary.txt, manifest.json, and per-run round
logs plus a final checkpoint.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import attention, data, federation
from . import model as mdl

RESULTS_VERSION = 1
RESULTS_COLUMNS = ("mode", "target_domain", "seed", "target_acc")


@dataclass
class ExperimentResult:
    entries: list = field(default_factory=list)  # (mode, target, seed, acc)

    def add(self, mode, target, seed, acc):
        self.entries.append((mode, int(target), int(seed), float(acc)))

    def accs(self, mode, target=None):
        return [
            a
            for m, t, s, a in self.entries
            if m == mode and (target is None or t == target)
        ]

    def mean(self, mode, target=None):
        vals = self.accs(mode, target)
        if not vals:
            raise KeyError("no entries for mode=%r target=%r" % (mode, target))
        return float(np.mean(vals))

    def spread(self, mode, target=None):
        vals = self.accs(mode, target)
        return float(np.max(vals) - np.min(vals)) if vals else 0.0


def final_accuracy(result):
    """Last recorded target accuracy of a federation run."""
    for log in reversed(result.rounds):
        if log.target_acc is not None:
            return log.target_acc
    raise ValueError("run produced no evaluation rounds")


def run_single(exp_cfg, corpus, seed, target, mode=None):
    fed_cfg = exp_cfg.federation_config(seed, target, mode=mode)
    result = federation.run_federation(fed_cfg, corpus)
    return result, final_accuracy(result)


def write_manifest(path, exp_cfg, extra=None):
    payload = {
        "results_version": RESULTS_VERSION,
        "config": {k: (list(v) if isinstance(v, tuple) else v) for k, v in vars(exp_cfg).items()},
    }
    if extra:
        payload.update(extra)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


def run_experiment(exp_cfg, corpus=None, out_dir=None, modes=None, save_artifacts=True):
    """Run the (mode x target x seed) grid and flush rows incrementally.

    modes=None runs just exp_cfg.mode; `ablate` passes the full sweep.
    Returns the accumulated ExperimentResult.
    """
    exp_cfg.validate()
    if corpus is None:
        corpus = data.generate_corpus(exp_cfg.corpus_config())
    if modes is None:
        modes = [exp_cfg.mode]
    result = ExperimentResult()
    csv_f = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        write_manifest(os.path.join(out_dir, "manifest.json"), exp_cfg, {"modes": list(modes)})
        csv_f = open(os.path.join(out_dir, "results.csv"), "w", encoding="utf-8")
        csv_f.write(",".join(RESULTS_COLUMNS) + "\n")
        csv_f.flush()
    try:
        for mode in modes:
            for target in exp_cfg.targets:
                for seed in exp_cfg.seeds:
                    fed_result, acc = run_single(exp_cfg, corpus, seed, target, mode=mode)
                    result.add(mode, target, seed, acc)
                    if csv_f is not None:
                        csv_f.write("%s,%d,%d,%.6f\n" % (mode, target, seed, acc))
                        csv_f.flush()
                    if out_dir is not None and save_artifacts:
                        tag = "%s_t%d_s%d" % (mode, target, seed)
                        federation.write_round_logs(
                            os.path.join(out_dir, "rounds_%s.csv" % tag),
                            fed_result.rounds,
                        )
                        mdl.save_checkpoint(
                            os.path.join(out_dir, "model_%s.ckpt" % tag),
                            fed_result.params,
                            meta={"mode": mode, "target": target, "seed": seed},
                        )
    finally:
        if csv_f is not None:
            csv_f.close()
    if out_dir is not None:
        with open(os.path.join(out_dir, "summary.txt"), "w", encoding="utf-8") as f:
            f.write(summary_table(result, exp_cfg.targets, modes))
    return result


def summary_table(result, targets, modes):
    """Mode-by-target accuracy table, mean over seeds, spread in brackets."""
    width = 22
    header = "mode".ljust(12) + "".join(
        ("target %d" % t).rjust(width) for t in targets
    ) + "avg".rjust(width)
    lines = [header]
    for mode in modes:
        cells = []
        for t in targets:
            cells.append(
                "%.4f (+/-%.4f)" % (result.mean(mode, t), result.spread(mode, t))
            )
        row = mode.ljust(12) + "".join(c.rjust(width) for c in cells)
        row += ("%.4f" % result.mean(mode)).rjust(width)
        lines.append(row)
    return "\n".join(lines) + "\n"


ABLATION_MODES = ("fedavg", "style_only", "attention_only", "stablefdg")


def ablate(exp_cfg, corpus=None, out_dir=None, save_artifacts=False):
    """Component sweep over all four modes on the same grid."""
    return run_experiment(
        exp_cfg, corpus=corpus, out_dir=out_dir, modes=list(ABLATION_MODES),
        save_artifacts=save_artifacts,
    )


def write_pgm(path, gray):
    """8-bit binary PGM (P5); input is any non-negative 2-D array."""
    arr = np.asarray(gray, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError("PGM expects a 2-D map, got shape %r" % (arr.shape,))
    top = arr.max()
    scaled = np.zeros(arr.shape, dtype=np.uint8) if top <= 0 else np.round(
        arr / top * 255
    ).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (arr.shape[1], arr.shape[0]))
        f.write(scaled.tobytes())


def dump_attention(checkpoint_path, corpus, out_dir, count=8, domain=None):
    """Write eval-mode self-attention score maps for `count` corpus samples.

    Each sample yields map_<i>.pgm (rescaled to 8-bit) and map_<i>.txt (the
    raw normalized scores, one row per line). Sample indices are evenly
    spaced over the corpus, optionally restricted to one domain.
    """
    params, meta = mdl.load_checkpoint(checkpoint_path)
    if "attn.theta_q" not in params:
        raise ValueError("checkpoint has no attention parameters")
    pool = np.arange(len(corpus.labels))
    if domain is not None:
        pool = pool[corpus.domains == domain]
    if len(pool) == 0:
        raise ValueError("no samples to visualize")
    count = min(count, len(pool))
    picks = pool[np.linspace(0, len(pool) - 1, count).astype(np.int64)]
    os.makedirs(out_dir, exist_ok=True)
    feats = mdl.features_only(params, corpus.images[picks])
    maps = attention.score_maps(feats, params["attn.theta_q"], params["attn.theta_k"])
    index = []
    for i, (corpus_idx, amap) in enumerate(zip(picks, maps)):
        write_pgm(os.path.join(out_dir, "map_%d.pgm" % i), amap)
        with open(os.path.join(out_dir, "map_%d.txt" % i), "w", encoding="utf-8") as f:
            for row in amap:
                f.write(" ".join("%.8f" % v for v in row) + "\n")
        index.append(
            {
                "file": "map_%d" % i,
                "corpus_index": int(corpus_idx),
                "label": int(corpus.labels[corpus_idx]),
                "domain": int(corpus.domains[corpus_idx]),
                "score_sum": float(amap.sum()),
            }
        )
    with open(os.path.join(out_dir, "index.json"), "w", encoding="utf-8") as f:
        json.dump({"checkpoint": str(checkpoint_path), "meta": meta, "maps": index}, f, indent=2)
        f.write("\n")
    return picks
