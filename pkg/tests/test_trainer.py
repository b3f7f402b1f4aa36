import math

import numpy as np
import pytest

from msr import autodiff as ad
from msr import nn
from msr.augment import make_views
from msr.data import SynthSpec, synth_dataset
from msr.objective import beta_at, cosine_lr
from msr.trainer import (CheckpointError, TrainConfig, TrainingError, config_from_canonical,
                         config_from_items, init_state, load_checkpoint, pretrain, pretrain_step,
                         read_checkpoint, save_checkpoint, sgd_update, step_seed, write_metrics_csv)


@pytest.fixture(scope="module")
def tiny_data():
    return synth_dataset(SynthSpec(class_count=4, per_class=4, seed=0))


def tiny_config(**kw):
    base = dict(arch="cifar-tiny", epochs=2, batch_size=8, seed=0)
    base.update(kw)
    return TrainConfig(**base)


def flat_state(state):
    out = {"online:" + k: v for k, v in state.pair.online.state().items()}
    if state.pair.target is not None:
        out.update({"target:" + k: v for k, v in state.pair.target.state().items()})
    out.update({"momentum:" + k: v for k, v in state.momentum.items()})
    return out


def test_config_resolution_rules():
    assert TrainConfig().resolved().beta_base == 0.3
    assert TrainConfig(mode="byol_aa").resolved().beta_base == 0.0
    with pytest.raises(ValueError, match="beta_base must be 0"):
        TrainConfig(mode="byol_aw", beta_base=0.2).resolved()
    assert TrainConfig(mode="simsiam_msr").resolved().similarity == "neg_cosine"
    for bad in ({"mode": "simclr"}, {"beta_base": 1.5}, {"similarity": "l1"}, {"epochs": -1},
                {"momentum": 1.0}, {"float_width": 16}, {"arch": "nope"}, {"tau_schedule": "x"},
                {"crop_min_scale": 0.0}):
        with pytest.raises(ValueError):
            TrainConfig(**bad).resolved()


def test_canonical_round_trip_and_digest():
    cfg = tiny_config(beta_base=0.25, lr0=0.05, detach_online_partner=False)
    back = config_from_canonical(cfg.canonical())
    assert back.resolved() == cfg.resolved()
    assert back.digest() == cfg.digest()
    assert tiny_config(seed=1).digest() != cfg.digest()
    with pytest.raises(ValueError, match="unknown config keys"):
        config_from_items({"learning_rate": "1"})
    assert config_from_items({"epochs": "3", "beta_base": "none"}).epochs == 3


def test_two_step_routing_invariants(tiny_data):
    state = init_state(tiny_config(), len(tiny_data))
    target_before = {k: v.data.copy() for k, v in state.pair.target.params.items()}
    for k in range(2):
        idx = np.arange(8 * k, 8 * k + 8)
        views = make_views(tiny_data.images[idx], step_seed(0, k), state.config.aug_spec(), idx)
        tg = state.pair.target
        tau = state.pair.tau
        online_before = {k_: v.data.copy() for k_, v in state.pair.online.params.items()}
        # xi moves by the EMA alone, towards the post-step theta
        expected = {n: tau * t.data for n, t in tg.params.items()}
        state, m = pretrain_step(state, tiny_data.images[idx], idx, views)
        assert sum(m.forwards.values()) == 4
        assert m.forwards == {"online": 2, "target": 2}
        assert m.backward == 1
        routes = {(net, tag, pred) for net, tag, pred, _ in m.routes}
        assert routes == {("online", "v_a", True), ("online", "v_a_prime", True),
                          ("target", "v_w", False), ("target", "v_w_prime", False)}
        for name, t in state.pair.target.params.items():
            want = expected[name] + (1 - tau) * state.pair.online.params[name].data
            np.testing.assert_allclose(t.data, want, rtol=1e-6, atol=1e-7)
            assert t.grad is None
        assert any(not np.array_equal(online_before[n], p.data) for n, p in state.pair.online.params.items())
    assert state.k == 2
    assert any(not np.array_equal(target_before[n], t.data) for n, t in state.pair.target.params.items())


def test_stop_gradient_arguments_receive_no_gradient(tiny_data):
    state = init_state(tiny_config(), len(tiny_data))
    idx = np.arange(8)
    views = make_views(tiny_data.images[idx], 0, state.config.aug_spec(), idx)
    from msr.trainer import route_views
    from msr.objective import total_loss
    with ad.fresh_tape():
        z, zp, w, wp = route_views(state, views, nn.ForwardLog())
        grads = ad.backward(total_loss(z, zp, w, wp, 0.3))
        assert w.id not in grads and wp.id not in grads
        assert z.id in grads and zp.id in grads
        assert all(t.id not in grads for t in state.pair.target.params.values())
        # predictor gradients exist, so the predictor sits on both aggressive paths
        assert state.pair.online.params["predictor.fc0.weight"].id in grads


@pytest.mark.parametrize("mode,targets", [
    ("byol_aa", {("target", "v_a", False), ("target", "v_a_prime", False)}),
    ("byol_aw", {("target", "v_w", False), ("target", "v_w_prime", False)}),
    ("simsiam_msr", {("online-detached", "v_w", False), ("online-detached", "v_w_prime", False)}),
])
def test_baseline_routing(tiny_data, mode, targets):
    state = init_state(tiny_config(mode=mode), len(tiny_data))
    idx = np.arange(8)
    state, m = pretrain_step(state, tiny_data.images[idx], idx)
    routes = {(net, tag, pred) for net, tag, pred, _ in m.routes}
    assert routes == {("online", "v_a", True), ("online", "v_a_prime", True)} | targets
    assert m.beta == 0.0 or mode == "simsiam_msr"
    if mode == "simsiam_msr":
        assert state.pair.target is None and math.isnan(m.tau)


def test_schedules_in_metrics(tiny_data):
    cfg = tiny_config(epochs=3, beta_base=0.4)
    log = []
    state = pretrain(cfg, tiny_data, callback=lambda s, m: log.append(m))
    K = state.K
    assert K == 6 and [m.k for m in log] == list(range(6))
    for m in log:
        assert m.beta == beta_at(m.k, K, 0.4)  # beta is taken before the step
        assert m.lr == cosine_lr(m.k, K, cfg.lr0)
        assert m.tau == 0.99
    assert log[0].beta == 0.4


def test_sgd_update_coupled_weight_decay():
    p = {"w": ad.Tensor(np.array([1.0, -2.0]), requires_grad=True)}
    m = {"w": np.zeros(2)}
    sgd_update(p, {"w": np.array([0.5, 0.5])}, m, lr=0.1, mu=0.9, wd=0.1)
    np.testing.assert_allclose(m["w"], [0.6, 0.3])
    np.testing.assert_allclose(p["w"].data, [0.94, -2.03])
    sgd_update(p, {"w": np.zeros(2)}, m, lr=0.1, mu=0.9, wd=0.0)
    np.testing.assert_allclose(m["w"], [0.54, 0.27])
    assert p["w"].requires_grad


def test_non_finite_loss_raises(tiny_data):
    state = init_state(tiny_config(), len(tiny_data))
    state.pair.online.params["predictor.fc1.bias"] = ad.Tensor(
        np.full(32, np.nan, dtype=np.float32), requires_grad=True)
    idx = np.arange(8)
    with pytest.raises(TrainingError, match="non-finite"), np.errstate(invalid="ignore"):
        pretrain_step(state, tiny_data.images[idx], idx)


def test_identical_seeds_give_identical_checkpoints(tiny_data, tmp_path):
    a = pretrain(tiny_config(), tiny_data)
    b = pretrain(tiny_config(), tiny_data)
    save_checkpoint(a, tmp_path / "a.msr")
    save_checkpoint(b, tmp_path / "b.msr")
    assert (tmp_path / "a.msr").read_bytes() == (tmp_path / "b.msr").read_bytes()
    c = pretrain(tiny_config(seed=1), tiny_data)
    save_checkpoint(c, tmp_path / "c.msr")
    assert (tmp_path / "c.msr").read_bytes() != (tmp_path / "a.msr").read_bytes()


def test_resume_matches_uninterrupted_run(tiny_data, tmp_path):
    cfg = tiny_config(epochs=2)
    full = pretrain(cfg, tiny_data)
    half = pretrain(cfg, tiny_data, stop_at=3)  # stop mid-epoch
    save_checkpoint(half, tmp_path / "half.msr")
    resumed = pretrain(cfg, tiny_data, state=load_checkpoint(tmp_path / "half.msr"))
    assert resumed.k == full.k == 4
    a, b = flat_state(full), flat_state(resumed)
    assert a.keys() == b.keys()
    for k in a:
        np.testing.assert_array_equal(a[k], b[k], err_msg=k)
    assert resumed.log == full.log
    save_checkpoint(full, tmp_path / "full.msr")
    save_checkpoint(resumed, tmp_path / "resumed.msr")
    assert (tmp_path / "full.msr").read_bytes() == (tmp_path / "resumed.msr").read_bytes()


def test_resume_rejects_a_different_config(tiny_data):
    state = pretrain(tiny_config(), tiny_data, stop_at=1)
    with pytest.raises(ValueError, match="different configuration"):
        pretrain(tiny_config(lr0=0.2), tiny_data, state=state)


def test_checkpoint_round_trip_and_layout(tiny_data, tmp_path):
    state = pretrain(tiny_config(), tiny_data, stop_at=2)
    path = tmp_path / "ck.msr"
    save_checkpoint(state, path)
    manifest, arrays = read_checkpoint(path)
    assert manifest["k"] == 2 and manifest["config_sha256"] == state.config.digest()
    assert set(arrays) == set(flat_state_names(state))
    back = load_checkpoint(path)
    assert back.config == state.config and back.k == 2 and back.K == state.K
    for k, v in flat_state(state).items():
        np.testing.assert_array_equal(flat_state(back)[k], v)


def flat_state_names(state):
    names = ["online:" + k for k in state.pair.online.params]
    names += ["online:buf:" + k for k in state.pair.online.buffers]
    names += ["target:" + k for k in state.pair.target.params]
    names += ["target:buf:" + k for k in state.pair.target.buffers]
    names += ["momentum:" + k for k in state.momentum]
    return names


def test_checkpoint_corruption_is_detected(tiny_data, tmp_path):
    state = pretrain(tiny_config(), tiny_data, stop_at=1)
    path = tmp_path / "ck.msr"
    save_checkpoint(state, path)
    raw = path.read_bytes()
    cases = {
        "magic": b"XXXXXXXX" + raw[8:],
        "truncated": raw[:-10],
        "trailing": raw + b"\0",
        "header": raw[:12],
        "manifest": raw[:16] + b"#" + raw[17:],
    }
    for name, blob in cases.items():
        bad = tmp_path / f"{name}.msr"
        bad.write_bytes(blob)
        with pytest.raises(CheckpointError):
            load_checkpoint(bad)


def test_simsiam_checkpoint_has_no_target(tiny_data, tmp_path):
    state = pretrain(tiny_config(mode="simsiam_msr"), tiny_data, stop_at=1)
    save_checkpoint(state, tmp_path / "s.msr")
    back = load_checkpoint(tmp_path / "s.msr")
    assert back.pair.target is None and back.k == 1


def test_prefetch_gives_the_same_result(tiny_data, monkeypatch):
    serial = pretrain(tiny_config(epochs=1), tiny_data)
    monkeypatch.setenv("MSR_THREADS", "2")
    threaded = pretrain(tiny_config(epochs=1), tiny_data)
    for k, v in flat_state(serial).items():
        np.testing.assert_array_equal(flat_state(threaded)[k], v)


def test_metrics_csv(tiny_data, tmp_path):
    state = pretrain(tiny_config(epochs=1), tiny_data)
    write_metrics_csv(state, tmp_path / "m.csv")
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "k,loss,beta,lr,tau,backward" and len(lines) == 1 + state.K


def test_batch_larger_than_dataset(tiny_data):
    with pytest.raises(ValueError):
        init_state(tiny_config(batch_size=64), len(tiny_data))
