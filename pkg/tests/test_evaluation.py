import math

import numpy as np
import pytest

from msr import nn
from msr.data import Dataset, SynthSpec, synth_dataset
from msr.evaluation import (Cell, CellResult, ExperimentGrid, GridReport, ProbeConfig, accuracy,
                            beta_sweep_grid, extract_features, fit_linear, init_classifier,
                            knn_classify, knn_probe, linear_probe, probe_lr, run_grid,
                            table1_grid, write_report)
from msr.trainer import TrainConfig


@pytest.fixture(scope="module")
def splits():
    return (synth_dataset(SynthSpec(per_class=25, seed=0)),
            synth_dataset(SynthSpec(per_class=10, seed=1000)))


def test_probe_lr_trajectory_is_exact():
    cfg = ProbeConfig()
    lrs = [probe_lr(e, cfg) for e in range(100)]
    assert lrs[:60] == [30.0] * 60 and lrs[60:80] == [3.0] * 20 and lrs[80:] == [0.3] * 20
    # the float a naive product would give is not the literal
    assert 30.0 * 0.1 * 0.1 != 0.3


def test_probe_config_validation():
    for bad in ({"milestones": (60, 120)}, {"milestones": (80, 60)}, {"epochs": 0}, {"lr0": 0.0},
                {"momentum": 1.0}, {"augment_copies": -1}):
        with pytest.raises(ValueError):
            ProbeConfig(**bad).validate()


def test_linear_probe_reports_trajectory_and_leaves_encoder_untouched(splits):
    train, test = splits
    pair = nn.init_models("cifar-tiny", seed=0, dtype=np.float32)
    before = {k: v.tobytes() for k, v in pair.online.state().items()}
    res = linear_probe(pair.online, train, test, ProbeConfig())
    after = {k: v.tobytes() for k, v in pair.online.state().items()}
    assert before == after
    assert all(p.grad is None for p in pair.online.params.values())
    assert res.lr_trajectory == [30.0] * 60 + [3.0] * 20 + [0.3] * 20
    assert 0.0 <= res.accuracy <= 1.0 and res.weights.shape == (16 * 4, 4)


def test_untrained_classifier_is_at_chance():
    test = synth_dataset(SynthSpec(per_class=100, seed=5))
    accs = []
    for seed in range(5):
        p = nn.init_models("cifar-tiny", seed=seed, dtype=np.float32).online
        feats = extract_features(p, test.images)
        sd = feats.std(0)
        feats = (feats - feats.mean(0)) / np.where(sd > 0, sd, 1.0)  # dead channels stay zero
        W, b = init_classifier(feats.shape[1], 4, seed)
        accs.append(accuracy(feats, test.labels, W, b))
    assert abs(np.mean(accs) - 0.25) <= 0.05


def closed_form_accuracy(x, y, test_x, test_y, C):
    # independent oracle: ridge least squares on one-hot targets
    X = np.column_stack([x, np.ones(len(x))])
    W = np.linalg.solve(X.T @ X + 1e-3 * np.eye(X.shape[1]), X.T @ np.eye(C)[y])
    return np.mean(np.argmax(np.column_stack([test_x, np.ones(len(test_x))]) @ W, axis=1) == test_y)


def test_identity_encoder_on_separable_set():
    train = synth_dataset(SynthSpec(per_class=100, seed=0, contrast=1.0))
    test = synth_dataset(SynthSpec(per_class=50, seed=1000, contrast=1.0))
    feat = lambda d: d.images.reshape(len(d), -1, 3).mean(axis=1)  # noqa: E731
    tr, te = feat(train), feat(test)
    assert closed_form_accuracy(tr, train.labels, te, test.labels, 4) >= 0.99
    mu, sd = tr.mean(0), tr.std(0)
    W, b, _ = fit_linear((tr - mu) / sd, train.labels, 4, ProbeConfig())
    assert accuracy((te - mu) / sd, test.labels, W, b) >= 0.99


def test_augmented_probe_copies(splits):
    train, test = splits
    p = nn.init_models("cifar-tiny", seed=0, dtype=np.float32).online
    cfg = ProbeConfig(epochs=10, milestones=(6, 8), augment_copies=2)
    a, b = linear_probe(p, train, test, cfg), linear_probe(p, train, test, cfg)
    assert a.accuracy == b.accuracy
    np.testing.assert_array_equal(a.weights, b.weights)


def test_probe_rejects_mismatched_splits(splits):
    train, _ = splits
    other = Dataset(train.images[:4], np.zeros(4, dtype=np.int64), 3)
    p = nn.init_models("cifar-tiny", seed=0).online
    with pytest.raises(ValueError, match="class mismatch"):
        linear_probe(p, train, other)
    with pytest.raises(ValueError):
        knn_probe(p, train, train.subset([]))


def brute_force_knn(tr, ty, te, k, C):
    out = []
    for q in te:
        sims = [(-(q @ t) / (np.linalg.norm(q) * np.linalg.norm(t)), i) for i, t in enumerate(tr)]
        votes = np.zeros(C, dtype=int)
        for _, i in sorted(sims)[:k]:
            votes[ty[i]] += 1
        out.append(int(np.flatnonzero(votes == votes.max())[0]))
    return np.array(out)


def test_knn_matches_brute_force_and_clusters():
    rng = np.random.default_rng(0)
    centers = np.eye(4, 8) * 5
    ty = np.repeat(np.arange(4), 30)
    tr = centers[ty] + rng.normal(size=(120, 8))
    test_y = np.repeat(np.arange(4), 10)
    te = centers[test_y] + rng.normal(size=(40, 8))
    for k in (1, 5, 20):
        pred = knn_classify(tr, ty, te, k, 4)
        np.testing.assert_array_equal(pred, brute_force_knn(tr, ty, te, k, 4))
    assert np.mean(knn_classify(tr, ty, te, 20, 4) == test_y) >= 0.95


def test_knn_exact_match_and_ties():
    tr = np.random.default_rng(1).normal(size=(12, 5))
    ty = np.arange(12) % 4
    assert knn_classify(tr, ty, tr[[7]], 1, 4)[0] == ty[7]
    assert knn_classify(tr, ty, tr[:3], 12, 4).tolist() == [0, 0, 0]
    with pytest.raises(ValueError):
        knn_classify(tr, ty, tr, 13, 4)
    with pytest.raises(ValueError):
        knn_classify(tr, ty, tr, 0, 4)


def test_grid_presets_and_configs():
    base = TrainConfig(arch="cifar-tiny")
    g = table1_grid(base)
    assert [c.mode for c in g.cells] == ["byol_aa", "byol_aw", "msr", "msr"]
    assert g.cells[2] == Cell("msr", "fixed", 0.5) and g.cells[3] == Cell("msr", "cosine", 0.5)
    assert g.config(g.cells[3], 2).seed == 2 and g.config(g.cells[0], 0).beta_base == 0.0
    sweep = beta_sweep_grid(base)
    assert [c.beta_base for c in sweep.cells] == [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7]
    with pytest.raises(ValueError, match="unique"):
        ExperimentGrid([Cell("msr", "cosine", 0.3)] * 2, (0,), base)
    with pytest.raises(ValueError):
        ExperimentGrid([Cell("msr", "cosine", 0.3)], (), base)


def test_report_statistics_and_formats(tmp_path):
    a, b = Cell("msr", "cosine", 0.3), Cell("byol_aa", "fixed", 0.0)
    rep = GridReport([CellResult(a, 0, 0.5), CellResult(a, 1, 0.6), CellResult(a, 2, 0.7),
                      CellResult(b, 0, 0.4), CellResult(b, 1, None, "TrainingError: x")])
    (ca, ma, sa, na, fa), (cb, mb, sb, nb, fb) = rep.summary()
    assert (na, fa, nb, fb) == (3, 0, 1, 1)
    assert ma == pytest.approx(0.6) and sa == pytest.approx(math.sqrt(2 / 3) * 0.1)
    assert sb == 0.0 and rep.mean(b) == 0.4
    csv = rep.to_csv().splitlines()
    assert csv[0] == "mode,beta_schedule,beta_base,seed,accuracy"
    assert csv[-1] == "byol_aa,fixed,0.0,1,failed"
    text = rep.to_text()
    assert "60.0 +/- 8.2" in text and "1 (1 failed)" in text
    write_report(rep, tmp_path / "out")
    assert (tmp_path / "out" / "grid.csv").read_text() == rep.to_csv()


def test_run_grid_single_cell_and_determinism():
    train = synth_dataset(SynthSpec(per_class=4, seed=0))
    test = synth_dataset(SynthSpec(per_class=2, seed=1000))
    base = TrainConfig(arch="cifar-tiny", epochs=1, batch_size=8)
    probe = ProbeConfig(epochs=3, milestones=(1, 2))
    cell = Cell("msr", "cosine", 0.3)
    rep = run_grid(ExperimentGrid([cell], (0,), base, probe), train, test, workers=1)
    (_, mean, std, n, failed), = rep.summary()
    assert n == 1 and failed == 0 and std == 0.0
    again = run_grid(ExperimentGrid([cell, Cell("msr", "fixed", 0.3)], (0,), base, probe), train, test, workers=2)
    assert again.results[0].accuracy == rep.results[0].accuracy


def test_run_grid_marks_failures_without_aborting():
    train = synth_dataset(SynthSpec(per_class=4, seed=0))
    base = TrainConfig(arch="cifar-tiny", epochs=1, batch_size=64)  # larger than the dataset
    rep = run_grid(ExperimentGrid([Cell("msr", "cosine", 0.3)], (0, 1), base), train, train, workers=1)
    assert all(r.accuracy is None and "batch_size" in r.error for r in rep.results)
