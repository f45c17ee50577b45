"""Command-line entry points.

Verbs: gen-data, train, eval, ablate, dump-attention. Every verb accepts
--config FILE plus repeatable --set key=value overrides; outputs land under
the FEDSTYLE_OUT root (default ./runs) unless --out is given explicitly.

Exit codes: 0 success, 2 configuration error, 3 numeric failure (NaN).
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import data, experiment, federation
from . import model as mdl
from .config import ConfigError, ExperimentConfig, apply_overrides, read_config, serialize_config
from .tensor import NumericError


def out_root():
    return os.environ.get("FEDSTYLE_OUT", "runs")


def _load_experiment_config(args):
    cfg = read_config(args.config) if args.config else ExperimentConfig()
    cfg = apply_overrides(cfg, args.set or [])
    cfg.validate()
    return cfg


def _load_corpus(args, cfg):
    if getattr(args, "data", None):
        return data.load_corpus(args.data)
    return data.generate_corpus(cfg.corpus_config())


def _add_common(p):
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument(
        "--set", action="append", metavar="KEY=VALUE", help="override a config key"
    )


def cmd_gen_data(args):
    cfg = _load_experiment_config(args)
    corpus = data.generate_corpus(cfg.corpus_config())
    out = args.out or os.path.join(out_root(), "corpus.npz")
    os.makedirs(os.path.dirname(out) or ".", exist_ok=True)
    data.save_corpus(out, corpus)
    print("wrote %s: %d samples, %d classes, %d domains" % (
        out, len(corpus), corpus.num_classes, corpus.num_domains))
    return 0


def cmd_train(args):
    cfg = _load_experiment_config(args)
    corpus = _load_corpus(args, cfg)
    seed = cfg.seeds[0] if args.seed is None else args.seed
    target = cfg.targets[0] if args.target is None else args.target
    mode = args.mode or cfg.mode
    out = args.out or os.path.join(out_root(), "train_%s_t%d_s%d" % (mode, target, seed))
    os.makedirs(out, exist_ok=True)
    result, acc = experiment.run_single(cfg, corpus, seed, target, mode=mode)
    federation.write_round_logs(os.path.join(out, "rounds.csv"), result.rounds)
    mdl.save_checkpoint(
        os.path.join(out, "model.ckpt"),
        result.params,
        meta={"mode": mode, "target": target, "seed": seed},
    )
    with open(os.path.join(out, "config.txt"), "w", encoding="utf-8") as f:
        f.write(serialize_config(cfg))
    experiment.write_manifest(
        os.path.join(out, "manifest.json"), cfg,
        {"mode": mode, "target": target, "seed": seed, "target_acc": acc},
    )
    print("final target accuracy: %.4f (outputs in %s)" % (acc, out))
    return 0


def cmd_eval(args):
    cfg = _load_experiment_config(args)
    corpus = _load_corpus(args, cfg)
    params, meta = mdl.load_checkpoint(args.checkpoint)
    model_config = mdl.ModelConfig(
        num_classes=params["head.w"].data.shape[0],
        use_attention="attn.theta_q" in params,
    )
    domains = [args.target] if args.target is not None else sorted(
        int(d) for d in np.unique(corpus.domains)
    )
    for d in domains:
        sel = corpus.domains == d
        acc = federation.evaluate(
            params, corpus.images[sel], corpus.labels[sel], model_config
        )
        marker = " (checkpoint target)" if meta.get("target") == d else ""
        print("domain %d accuracy: %.4f%s" % (d, acc, marker))
    return 0


def cmd_ablate(args):
    cfg = _load_experiment_config(args)
    corpus = _load_corpus(args, cfg)
    out = args.out or os.path.join(out_root(), "ablate")
    result = experiment.ablate(cfg, corpus=corpus, out_dir=out, save_artifacts=args.save_models)
    print(experiment.summary_table(result, cfg.targets, experiment.ABLATION_MODES))
    print("results in %s" % out)
    return 0


def cmd_dump_attention(args):
    cfg = _load_experiment_config(args)
    corpus = _load_corpus(args, cfg)
    out = args.out or os.path.join(out_root(), "attention")
    picks = experiment.dump_attention(
        args.checkpoint, corpus, out, count=args.count, domain=args.domain
    )
    print("wrote %d score maps to %s" % (len(picks), out))
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="fedstyle",
        description="Federated domain-generalization sandbox on synthetic data.",
    )
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("gen-data", help="render the synthetic corpus to an npz file")
    _add_common(p)
    p.add_argument("--out", help="output npz path")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="run one federated training job")
    _add_common(p)
    p.add_argument("--data", help="corpus npz (generated on the fly if omitted)")
    p.add_argument("--seed", type=int)
    p.add_argument("--target", type=int, help="held-out target domain")
    p.add_argument("--mode", choices=federation.MODES)
    p.add_argument("--out", help="output directory")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint per domain")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="corpus npz (generated on the fly if omitted)")
    p.add_argument("--target", type=int, help="restrict to one domain")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate", help="sweep all four modes over targets and seeds")
    _add_common(p)
    p.add_argument("--data", help="corpus npz (generated on the fly if omitted)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--save-models", action="store_true", help="keep per-run checkpoints")
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("dump-attention", help="write attention score maps for samples")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="corpus npz (generated on the fly if omitted)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--domain", type=int, help="restrict samples to one domain")
    p.set_defaults(fn=cmd_dump_attention)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print("config error: %s" % e, file=sys.stderr)
        return 2
    except FileNotFoundError as e:
        print("config error: %s" % e, file=sys.stderr)
        return 2
    except NumericError as e:
        print("numeric failure: %s" % e, file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
