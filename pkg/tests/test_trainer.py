import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import cosfairnet.trainer as trainer_mod
from conftest import model_hashes
from cosfairnet.biasdata import BiasedDataset, GenConfig, make_protocol
from cosfairnet.errors import ConfigError, DivergenceError, TrainingError
from cosfairnet.linalg import Rng, cosine, norm
from cosfairnet.losses import ConstraintMode, LossConfig
from cosfairnet.model import init_mlp, layer_params
from cosfairnet.optim import AdamState, OptimConfig
from cosfairnet.report import accuracy_by_group
from cosfairnet.trainer import (
    ConstraintSchedule,
    TrainConfig,
    TrainState,
    constraint_pass,
    init_models,
    train,
    train_step,
)


@pytest.fixture(scope="module")
def data():
    return make_protocol(GenConfig(n=400, bias_ratio=0.05, grid=6, jitter=1, seed=1), 100)


def cfg(**kw):
    base = dict(hidden=(16, 16, 16), batch_size=32, epochs=2, seed=3)
    base.update(kw)
    return TrainConfig(**base)


def same_models(a, b):
    return model_hashes(a) == model_hashes(b)


def test_epochs_zero_rejected():
    with pytest.raises(ConfigError):
        TrainConfig(epochs=0)


@pytest.mark.parametrize("kw", [dict(batch_size=0), dict(mode="lff"), dict(weight_source="mid"), dict(hidden=(0,)),
                                dict(eval_every=-1)])
def test_train_config_validation(kw):
    with pytest.raises(ConfigError):
        TrainConfig(**kw)


def test_defaults():
    c = TrainConfig()
    assert c.hidden == (100, 100, 100) and c.batch_size == 256 and c.optim.lr == 1e-3
    assert c.loss.q == 0.7 and c.loss.lambda_c == 0.1
    assert c.schedule.modes == {0: ConstraintMode.SIM, 2: ConstraintMode.DISSIM}
    assert c.constraint_lr == c.optim.lr


def test_schedule_parse_format():
    s = ConstraintSchedule.parse("2:dissim, 0:sim")
    assert s.format() == "0:sim,2:dissim"
    assert ConstraintSchedule.parse("").modes == {}
    res = s.resolve(4, 0.1)
    assert [m for m, _ in res] == [ConstraintMode.SIM, ConstraintMode.NONE, ConstraintMode.DISSIM, ConstraintMode.NONE]
    for bad in ("0-sim", "x:sim", "0:cos"):
        with pytest.raises(ConfigError):
            ConstraintSchedule.parse(bad)
    with pytest.raises(ConfigError):
        s.resolve(2, 0.1)


def test_algorithm_wiring():
    s = ConstraintSchedule.algorithm_wiring(4)
    assert s.format() == "0:dissim,1:sim,2:sim,3:sim"


def test_deterministic(data):
    tr, te = data
    a, b = train(cfg(), tr, None, te), train(cfg(), tr, None, te)
    assert a.history == b.history and same_models(a.f_d, b.f_d) and same_models(a.f_b, b.f_b)


def test_no_constraints_unit_weights_equals_vanilla(data):
    tr, te = data
    a = train(cfg(mode="cosfairnet", schedule=ConstraintSchedule(modes={}), fixed_weight=1.0), tr, None, te)
    v = train(cfg(mode="vanilla"), tr, None, te)
    assert same_models(a.f_d, v.f_d)
    assert [r.acc_bc for r in a.history] == [r.acc_bc for r in v.history]


def test_lambda_zero_equals_lffonly(data):
    tr, te = data
    a = train(cfg(mode="cosfairnet", loss=LossConfig(lambda_c=0.0)), tr, None, te)
    b = train(cfg(mode="lffonly"), tr, None, te)
    assert same_models(a.f_d, b.f_d)
    assert [r.acc_unbiased for r in a.history] == [r.acc_unbiased for r in b.history]


def test_biased_model_independent_of_constraints(data):
    tr, te = data
    runs = [train(cfg(loss=LossConfig(lambda_c=lam), schedule=ConstraintSchedule.parse(s), epochs=1), tr, None, te)
            for lam, s in ((0.0, "0:sim"), (0.1, "0:sim,2:dissim"), (0.5, "1:orth,3:dissim"))]
    assert same_models(runs[0].f_b, runs[1].f_b) and same_models(runs[0].f_b, runs[2].f_b)
    assert not same_models(runs[1].f_d, runs[2].f_d)


def _models(c, tr):
    return init_models(c, tr.input_dim, tr.class_count)


def test_constraint_pass_touches_only_target_layer(data):
    tr, _ = data
    x, y = tr.x[:32].astype(np.float64), tr.y[:32]
    c_lff = cfg(mode="lffonly")
    c_cos = \
        cfg(schedule=ConstraintSchedule.parse("2:dissim", lr=0.05))
    fb1, fd1 = _models(c_lff, tr)
    fb2, fd2 = _models(c_cos, tr)
    train_step(fb1, fd1, x, y, c_lff, TrainState(AdamState.for_model(fb1), AdamState.for_model(fd1)))
    train_step(fb2, fd2, x, y, c_cos, TrainState(AdamState.for_model(fb2), AdamState.for_model(fd2)))
    post4, post5 = model_hashes(fd1), model_hashes(fd2)
    assert [post4[k] == post5[k] for k in range(4)] == [True, True, False, True]
    assert same_models(fb1, fb2)


def test_forward_call_budget(data, monkeypatch):
    tr, _ = data
    calls = []
    real = trainer_mod.forward

    def counting(model, x):
        calls.append(id(model))
        return real(model, x)

    monkeypatch.setattr(trainer_mod, "forward", counting)
    c = cfg()
    fb, fd = _models(c, tr)
    state = TrainState(AdamState.for_model(fb), AdamState.for_model(fd))
    train_step(fb, fd, tr.x[:32].astype(np.float64), tr.y[:32], c, state)
    assert calls.count(id(fb)) == 1 and calls.count(id(fd)) == 1
    calls.clear()
    c = cfg(weight_source="post")
    train_step(fb, fd, tr.x[:32].astype(np.float64), tr.y[:32], c, state)
    assert calls.count(id(fb)) == 2 and calls.count(id(fd)) == 1


def test_constraint_pass_needs_no_forward(monkeypatch):
    monkeypatch.setattr(trainer_mod, "forward", lambda *a: pytest.fail("forward called in constraint pass"))
    fb, fd = init_mlp([4, 5, 5, 3], Rng(0)), init_mlp([4, 5, 5, 3], Rng(1))
    losses = constraint_pass(fd, fb, cfg(schedule=ConstraintSchedule.parse("0:sim,2:dissim")))
    assert set(losses) == {0, 2}


def test_weights_in_unit_interval(data):
    tr, _ = data
    seen = []
    train(cfg(epochs=1), tr, step_callback=lambda fb, fd, m: seen.append((m.min_w, m.max_w, m.mean_w)))
    assert seen and all(0.0 <= lo <= mean <= hi <= 1.0 for lo, hi, mean in seen)


@given(st.integers(0, 10**6), st.sampled_from([1e-3, 1e-4]), st.booleans())
def test_similarity_step_monotone(seed, lr, include_bias):
    r = Rng(seed)
    fb, fd = init_mlp([6, 5, 4], r.stream(1)), init_mlp([6, 5, 4], r.stream(2))
    c = cfg(schedule=ConstraintSchedule.parse("0:sim,1:dissim", lr=lr), loss=LossConfig(lambda_c=float(r.uniform(None, 0.01, 10))),
            include_bias=include_bias)
    before = [cosine(layer_params(fd, k, include_bias), layer_params(fb, k, include_bias)) for k in (0, 1)]
    constraint_pass(fd, fb, c)
    after = [cosine(layer_params(fd, k, include_bias), layer_params(fb, k, include_bias)) for k in (0, 1)]
    assert after[0] >= before[0] - 1e-9
    assert after[1] <= before[1] + 1e-9


def test_renormalize_preserves_layer_norm():
    fb, fd = init_mlp([6, 5, 4], Rng(1)), init_mlp([6, 5, 4], Rng(2))
    n0 = norm(layer_params(fd, 0))
    constraint_pass(fd, fb, cfg(schedule=ConstraintSchedule.parse("0:sim", lr=0.5), renormalize=True))
    assert norm(layer_params(fd, 0)) == pytest.approx(n0, rel=1e-14)


def test_degenerate_layer_reports_context():
    fb, fd = init_mlp([3, 4, 2], Rng(1)), init_mlp([3, 4, 2], Rng(2))
    fd.layers[1].weight[...] = 0.0
    with pytest.raises(TrainingError, match="layer 1"):
        constraint_pass(fd, fb, cfg(schedule=ConstraintSchedule.parse("1:sim")))


def test_divergence_has_step_context(data):
    tr, _ = data
    x = tr.x.copy()
    x[:] = np.inf
    bad = BiasedDataset(x, tr.y, tr.bias, tr.class_count, tr.bias_ratio)
    with pytest.raises(DivergenceError, match="epoch 1 step 1"):
        train(cfg(), bad)


def test_dataset_mismatch_rejected(data):
    tr, _ = data
    other = make_protocol(GenConfig(n=120, grid=5, jitter=1, bias_ratio=0.1), 20)[1]
    with pytest.raises(ConfigError):
        train(cfg(), tr, other)


def test_history_and_best_snapshot(data, tmp_path):
    tr, te = data
    res = train(cfg(epochs=3), tr, te, te, checkpoint_dir=tmp_path, checkpoint_every=2)
    assert [r.epoch for r in res.history] == [1, 2, 3]
    steps = -(-len(tr) // 32)
    assert [r.step for r in res.history] == [steps, 2 * steps, 3 * steps]
    assert res.best_val_acc == max(r.acc_unbiased for r in res.history)
    assert res.best_eval == accuracy_by_group(res.best_f_d, te)
    assert res.final_eval == accuracy_by_group(res.f_d, te)
    assert sorted(p.name for p in tmp_path.iterdir()) == ["f_d_epoch0002.cfnm"]


def test_eval_every_rows(data):
    tr, te = data
    res = train(cfg(epochs=1, eval_every=5), tr, None, te)
    assert [r.step for r in res.history] == [5, 10]


def test_vanilla_has_no_biased_model(data):
    tr, te = data
    res = train(cfg(mode="vanilla", epochs=1), tr, None, te)
    assert res.f_b is None
    assert np.isnan(res.history[0].loss_b)


def test_shared_init(data):
    tr, _ = data
    fb, fd = _models(cfg(shared_init=True), tr)
    assert same_models(fb, fd) and fb is not fd
    fb2, fd2 = _models(cfg(), tr)
    assert not same_models(fb2, fd2) and same_models(fd, fd2)


def test_sgd_and_post_weights_run(data):
    tr, te = data
    res = train(cfg(epochs=1, optim=OptimConfig(kind="sgd", lr=0.05), weight_source="post"), tr, None, te)
    assert np.isfinite(res.history[-1].loss_d)
