"""Experiment harness: grid runs with incremental artifacts, summary tables,
PGM output, and attention score-map dumps."""

import json
import os

import numpy as np
import pytest

from fedstyle import experiment
from fedstyle import model as mdl
from fedstyle.config import ExperimentConfig
from fedstyle.data import CorpusConfig, generate_corpus
from fedstyle.experiment import (
    ABLATION_MODES,
    ExperimentResult,
    ablate,
    dump_attention,
    final_accuracy,
    run_experiment,
    run_single,
    summary_table,
    write_pgm,
)
from fedstyle.federation import RoundLog


def tiny_exp(**kw):
    base = dict(
        mode="fedavg",
        num_clients=3,
        participation=2,
        rounds=1,
        local_epochs=1,
        batch_size=4,
        samples_per_domain=9,
        image_size=16,
        num_classes=3,
        seeds=(0,),
        targets=(1,),
    )
    base.update(kw)
    return ExperimentConfig(**base)


def tiny_corpus(cfg):
    return generate_corpus(cfg.corpus_config())


def test_run_single_returns_final_target_accuracy():
    cfg = tiny_exp()
    corpus = tiny_corpus(cfg)
    result, acc = run_single(cfg, corpus, seed=0, target=1)
    assert 0.0 <= acc <= 1.0
    assert acc == final_accuracy(result)
    _, again = run_single(cfg, corpus, seed=0, target=1)
    assert again == acc


def test_final_accuracy_requires_an_eval():
    with pytest.raises(ValueError, match="no evaluation"):
        final_accuracy(
            type("R", (), {"rounds": [RoundLog(round=1, participants=[], client_losses={})]})()
        )
    r = type("R", (), {"rounds": [
        RoundLog(round=1, participants=[], client_losses={}, target_acc=0.25),
        RoundLog(round=2, participants=[], client_losses={}),
    ]})()
    assert final_accuracy(r) == 0.25


def test_run_experiment_writes_artifacts(tmp_path):
    cfg = tiny_exp(targets=(1, 2))
    corpus = tiny_corpus(cfg)
    out = tmp_path / "grid"
    result = run_experiment(cfg, corpus=corpus, out_dir=str(out))
    lines = (out / "results.csv").read_text().splitlines()
    assert lines[0] == "mode,target_domain,seed,target_acc"
    assert len(lines) == 1 + 2  # one row per completed cell
    for t in (1, 2):
        assert (out / ("rounds_fedavg_t%d_s0.csv" % t)).exists()
        assert (out / ("model_fedavg_t%d_s0.ckpt" % t)).exists()
        row = "fedavg,%d,0,%.6f" % (t, result.mean("fedavg", t))
        assert row in lines
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["modes"] == ["fedavg"]
    assert manifest["config"]["rounds"] == 1
    assert manifest["config"]["seeds"] == [0]
    table = (out / "summary.txt").read_text()
    assert "fedavg" in table and "target 1" in table and "target 2" in table


def test_run_experiment_flushes_partial_results(tmp_path):
    cfg = tiny_exp(targets=(1, 2))
    corpus = tiny_corpus(cfg)
    calls = {"n": 0}
    real = experiment.run_single

    def explode_on_second(*args, **kw):
        calls["n"] += 1
        if calls["n"] > 1:
            raise RuntimeError("mid-grid crash")
        return real(*args, **kw)

    experiment.run_single = explode_on_second
    try:
        with pytest.raises(RuntimeError, match="mid-grid crash"):
            run_experiment(cfg, corpus=corpus, out_dir=str(tmp_path), save_artifacts=False)
    finally:
        experiment.run_single = real
    lines = (tmp_path / "results.csv").read_text().splitlines()
    assert len(lines) == 2  # header plus the one completed cell
    assert lines[1].startswith("fedavg,1,0,")


def test_ablate_covers_all_modes(tmp_path):
    cfg = tiny_exp()
    corpus = tiny_corpus(cfg)
    result = ablate(cfg, corpus=corpus, out_dir=str(tmp_path))
    assert sorted({m for m, _, _, _ in result.entries}) == sorted(ABLATION_MODES)
    assert len(result.entries) == 4
    lines = (tmp_path / "results.csv").read_text().splitlines()
    assert len(lines) == 1 + 4


def test_experiment_result_accessors():
    r = ExperimentResult()
    r.add("fedavg", 0, 0, 0.5)
    r.add("fedavg", 0, 1, 0.7)
    r.add("fedavg", 1, 0, 0.1)
    r.add("stablefdg", 0, 0, 0.9)
    assert r.accs("fedavg", 0) == [0.5, 0.7]
    assert r.mean("fedavg", 0) == pytest.approx(0.6)
    assert r.spread("fedavg", 0) == pytest.approx(0.2)
    assert r.mean("fedavg") == pytest.approx((0.5 + 0.7 + 0.1) / 3)
    assert r.spread("stablefdg") == 0.0
    with pytest.raises(KeyError):
        r.mean("attention_only")


def test_summary_table_layout():
    r = ExperimentResult()
    for seed, acc in enumerate((0.25, 0.35)):
        r.add("fedavg", 0, seed, acc)
        r.add("fedavg", 1, seed, acc + 0.1)
    table = summary_table(r, targets=(0, 1), modes=("fedavg",))
    lines = table.splitlines()
    assert lines[0].split() == ["mode", "target", "0", "target", "1", "avg"]
    assert "0.3000 (+/-0.1000)" in lines[1]
    assert "0.4000 (+/-0.1000)" in lines[1]
    assert lines[1].endswith("0.3500")


def test_write_pgm_format(tmp_path):
    path = tmp_path / "m.pgm"
    write_pgm(path, np.array([[0.0, 0.5], [1.0, 2.0]]))
    blob = path.read_bytes()
    assert blob.startswith(b"P5\n2 2\n255\n")
    assert list(blob[-4:]) == [0, 64, 128, 255]  # rescaled by the max
    write_pgm(path, np.zeros((2, 3)))
    assert path.read_bytes()[-6:] == bytes(6)
    with pytest.raises(ValueError, match="2-D"):
        write_pgm(path, np.zeros(4))


def attention_checkpoint(tmp_path, corpus, use_attention=True):
    mc = mdl.ModelConfig(num_classes=3, use_attention=use_attention)
    params = mdl.init_params(mc, np.random.default_rng(0))
    path = str(tmp_path / "model.ckpt")
    mdl.save_checkpoint(path, params, meta={"mode": "stablefdg", "target": 1, "seed": 0})
    return path


def test_dump_attention_writes_normalized_maps(tmp_path):
    corpus = generate_corpus(
        CorpusConfig(num_classes=3, num_domains=4, samples_per_domain=12, image_size=16, seed=2)
    )
    # plant an exact duplicate inside the visualized domain
    pool = np.flatnonzero(corpus.domains == 0)
    corpus.images[pool[11]] = corpus.images[pool[0]]
    ckpt = attention_checkpoint(tmp_path, corpus)
    out = tmp_path / "maps"
    picks = dump_attention(ckpt, corpus, str(out), count=4, domain=0)
    assert len(picks) == 4
    index = json.loads((out / "index.json").read_text())
    assert len(index["maps"]) == 4
    maps = []
    for i, entry in enumerate(index["maps"]):
        assert entry["score_sum"] == pytest.approx(1.0, abs=1e-5)
        assert entry["domain"] == 0
        assert (out / ("map_%d.pgm" % i)).exists()
        rows = (out / ("map_%d.txt" % i)).read_text().splitlines()
        maps.append(np.array([[float(v) for v in row.split()] for row in rows]))
    for m in maps:
        assert m.sum() == pytest.approx(1.0, abs=1e-5)
        # untrained model: scores stay in a narrow band around uniform
        assert m.max() / m.min() < 5.0
    # identical inputs produce identical maps (picks 0 and 3 are the planted pair)
    assert picks[0] == pool[0] and picks[3] == pool[11]
    np.testing.assert_array_equal(maps[0], maps[3])


def test_dump_attention_requires_attention_params(tmp_path):
    corpus = generate_corpus(
        CorpusConfig(num_classes=3, num_domains=4, samples_per_domain=6, image_size=16, seed=2)
    )
    ckpt = attention_checkpoint(tmp_path, corpus, use_attention=False)
    with pytest.raises(ValueError, match="no attention"):
        dump_attention(ckpt, corpus, str(tmp_path / "maps"))
    with pytest.raises(ValueError, match="no samples"):
        dump_attention(
            attention_checkpoint(tmp_path, corpus), corpus, str(tmp_path / "maps"), domain=9
        )
