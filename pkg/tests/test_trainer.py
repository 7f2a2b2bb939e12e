import json
import math
from dataclasses import replace

import numpy as np
import pytest

from proto_shift import synth, trainer
from proto_shift.autodiff import Tensor
from proto_shift.optim import SGD, Adam, StepDecay, make_optimizer
from proto_shift.trainer import EvalReport, Experiment, ModelSpec, TrainConfig


@pytest.fixture(scope="module")
def bench():
    tax, data, cmap = synth.generate(synth.SynthConfig(seed=3))
    return tax.graph, data, cmap


def quick_config(**kw):
    base = dict(iterations=40, val_every=20, val_episodes=20)
    base.update(kw)
    return TrainConfig(**base)


def small_spec(**kw):
    return ModelSpec(encoder_dims=(32, 16, 8), gcn_hidden=(16,), **kw)


# ------------------------------------------------------------ optimizers


def test_step_decay_schedule():
    s = StepDecay(0.001, 2000, 0.5)
    assert s(0) == 0.001 and s(1999) == 0.001
    assert s(2000) == 0.0005 and s(4000) == 0.00025
    tenfold = StepDecay(0.1, 10000, 0.1)
    assert tenfold(10000) == pytest.approx(0.01, rel=1e-15)
    for bad in ((0, 1, 0.5), (0.1, 0, 0.5), (0.1, 1, 0.0), (0.1, 1, 1.5)):
        with pytest.raises(ValueError):
            StepDecay(*bad)


def test_sgd_momentum_on_quadratic():
    # f(p) = 0.5 * p^2, gradient p
    p = Tensor(np.array([2.0, -1.0]), requires_grad=True)
    opt = SGD([p], lr=0.1, momentum=0.9)
    p.grad = p.data.copy()
    opt.step()
    np.testing.assert_allclose(p.data, [1.8, -0.9], rtol=1e-15)
    p.grad = p.data.copy()
    opt.step()
    # v = 0.9 * [2, -1] + [1.8, -0.9] = [3.6, -1.8]
    np.testing.assert_allclose(p.data, [1.8 - 0.36, -0.9 + 0.18], rtol=1e-14)


def test_adam_first_step_closed_form():
    g = np.array([0.5, -3.0, 1e-3])
    p = Tensor(np.array([1.0, 1.0, 1.0]), requires_grad=True)
    opt = Adam([p], lr=0.01, betas=(0.9, 0.999), eps=1e-8)
    p.grad = g.copy()
    opt.step()
    # bias correction makes m_hat = g and v_hat = g^2 at t = 1
    np.testing.assert_allclose(p.data, 1.0 - 0.01 * g / (np.abs(g) + 1e-8), rtol=1e-14)


def test_optimizers_skip_missing_grads():
    p = Tensor(np.ones(2), requires_grad=True)
    for opt in (SGD([p], 0.1), Adam([p], 0.1)):
        opt.step()
        np.testing.assert_array_equal(p.data, [1.0, 1.0])
    with pytest.raises(ValueError):
        make_optimizer("rmsprop", [p], 0.1)


# ------------------------------------------------------------ eval statistics


def test_eval_report_constant():
    rep = EvalReport.from_accuracies([0.6] * 10)
    assert rep.mean == pytest.approx(0.6, abs=1e-15) and rep.ci95 == 0.0


def test_eval_report_two_points():
    rep = EvalReport.from_accuracies([0.0, 1.0])
    assert rep.mean == 0.5
    assert abs(rep.ci95 - 1.96 * math.sqrt(0.5) / math.sqrt(2)) < 1e-12
    assert round(rep.ci95, 3) == 0.980


def test_eval_report_hand_oracle():
    accs = [0.2, 0.4, 0.4, 0.6, 0.9]
    mean = 2.5 / 5
    var = ((0.2 - mean) ** 2 + 2 * (0.4 - mean) ** 2 + (0.6 - mean) ** 2 + (0.9 - mean) ** 2) / 4
    rep = EvalReport.from_accuracies(accs)
    assert abs(rep.mean - mean) < 1e-12
    assert abs(rep.ci95 - 1.96 * math.sqrt(var / 5)) < 1e-12
    assert json.loads(rep.to_json()) == {"n": 5, "mean": rep.mean, "ci95": rep.ci95}
    lines = rep.to_csv().splitlines()
    assert lines[0] == "episode,accuracy" and len(lines) == 6
    with pytest.raises(ValueError):
        EvalReport.from_accuracies([])


def test_overlap():
    a = EvalReport(10, 0.5, 0.01)
    assert a.overlaps(EvalReport(10, 0.515, 0.01))
    assert not a.overlaps(EvalReport(10, 0.53, 0.01))


# ------------------------------------------------------------ config


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(iterations=0).validate()
    with pytest.raises(ValueError):
        TrainConfig(encoder_lr=0).validate()
    with pytest.raises(ValueError):
        TrainConfig(decay_factor=1.5).validate()
    with pytest.raises(ValueError):
        TrainConfig(setting="both").validate()
    c = TrainConfig(k_shot=5)
    assert TrainConfig.from_dict(c.to_dict()) == c
    with pytest.raises(ValueError, match="bogus"):
        TrainConfig.from_dict({"bogus": 1})


def test_presets():
    p = trainer.PRESETS
    assert p["office-home"].iterations == 5000 and p["office-home"].decay_every == 2000
    assert p["miniimagenet"].decay_factor == 0.1 and p["miniimagenet"].encoder_lr == 0.1
    for cfg in p.values():
        cfg.validate()


# ------------------------------------------------------------ training


def test_training_is_bitwise_reproducible(bench):
    graph, data, cmap = bench
    cfg = quick_config()
    runs = []
    for _ in range(2):
        m = trainer.build_model(graph, cmap, small_spec())
        _, rows = trainer.train(m, data, cfg)
        runs.append((m.param_vector().tobytes(), json.dumps(rows)))
    assert runs[0] == runs[1]


def test_log_rows_and_best_checkpoint(bench):
    graph, data, cmap = bench
    cfg = quick_config(iterations=60, val_every=15)
    m = trainer.build_model(graph, cmap, small_spec())
    _, rows = trainer.train(m, data, cfg)
    assert [r["iter"] for r in rows] == list(range(60))
    assert set(rows[0]) == {"iter", "loss", "lr_encoder", "lr_gcn"}
    vals = [r["val_acc"] for r in rows if "val_acc" in r]
    assert len(vals) == 4
    val_way = min(cfg.n_way, len(data.splits["val"]))
    rep = trainer.evaluate(m, data, "val", val_way, cfg.k_shot, cfg.n_query, cfg.val_episodes, cfg.val_seed)
    assert rep.mean == max(vals)


def test_lr_is_logged_with_decay(bench):
    graph, data, cmap = bench
    cfg = quick_config(iterations=6, decay_every=2, decay_factor=0.5, val_every=100)
    _, rows = trainer.train(trainer.build_model(graph, cmap, small_spec()), data, cfg)
    assert [r["lr_encoder"] for r in rows] == [0.001, 0.001, 0.0005, 0.0005, 0.00025, 0.00025]
    assert rows[2]["lr_gcn"] == 0.0025


def test_divergence_aborts(bench):
    graph, data, cmap = bench
    cfg = quick_config(iterations=200, encoder_lr=50.0, momentum=0.99)
    with np.errstate(all="ignore"), pytest.raises(trainer.TrainingDiverged, match="iteration"):
        trainer.train(trainer.build_model(graph, cmap, small_spec()), data, cfg)


def test_lambda_mismatch_rejected(bench):
    graph, data, cmap = bench
    with pytest.raises(ValueError, match="lambda"):
        trainer.train(trainer.build_model(graph, cmap, small_spec(lam=0.3)), data, quick_config())


def test_capacity_error_propagates(bench):
    graph, data, cmap = bench
    from proto_shift.episodes import CapacityError
    with pytest.raises(CapacityError):
        trainer.train(trainer.build_model(graph, cmap, small_spec()), data, quick_config(n_way=40))


def test_sanity_training_beats_chance():
    tax, data, cmap = synth.generate(synth.preset("no-shift"))
    cfg = TrainConfig(iterations=500, setting="tgt", val_every=250, val_episodes=100)
    m = trainer.build_model(tax.graph, cmap, ModelSpec())
    _, rows = trainer.train(m, data, cfg)
    n_way = min(cfg.n_way, len(data.splits["val"]))
    assert max(r["val_acc"] for r in rows if "val_acc" in r) > 1 / n_way + 0.2


# ------------------------------------------------------------ evaluation


def test_evaluate_parallel_equals_serial_and_does_not_mutate(bench):
    graph, data, cmap = bench
    m = trainer.build_model(graph, cmap, small_spec())
    before = m.param_vector().tobytes()
    serial = trainer.evaluate(m, data, "test", 5, 1, 15, 40, seed=7)
    parallel = trainer.evaluate(m, data, "test", 5, 1, 15, 40, seed=7, workers=4)
    assert serial.accuracies == parallel.accuracies
    assert (serial.mean, serial.ci95) == (parallel.mean, parallel.ci95)
    assert m.param_vector().tobytes() == before
    assert all(p.grad is None for p in m.parameters())


def test_evaluate_seed_dependence(bench):
    graph, data, cmap = bench
    m = trainer.build_model(graph, cmap, small_spec())
    a = trainer.evaluate(m, data, "test", 5, 1, 15, 30, seed=1)
    b = trainer.evaluate(m, data, "test", 5, 1, 15, 30, seed=1)
    c = trainer.evaluate(m, data, "test", 5, 1, 15, 30, seed=2)
    assert a.accuracies == b.accuracies and a.accuracies != c.accuracies


# ------------------------------------------------------------ experiments


@pytest.fixture(scope="module")
def experiment(bench):
    graph, data, cmap = bench
    return Experiment(data, graph, cmap, quick_config(), small_spec(), test_episodes=40)


def test_sweep_order_and_protonet_row(experiment):
    rows = trainer.sweep_lambda(experiment, [1.0, 0.0, 0.5])
    assert [lam for lam, _ in rows] == [1.0, 0.0, 0.5]
    proto = trainer.protonet_run(experiment)
    assert rows[0][1].accuracies == proto.accuracies
    with pytest.raises(ValueError):
        trainer.sweep_lambda(experiment, [1.2])


def test_ablations(experiment):
    a = trainer.run_ablation(experiment, "rand", seed=4)
    b = trainer.run_ablation(experiment, "rand", seed=4)
    assert a.accuracies == b.accuracies
    fc = trainer.run_ablation(experiment, "fc")
    assert fc.n == 40
    with pytest.raises(ValueError, match="rand"):
        trainer.run_ablation(experiment, "dropout")


def test_trials_pool_accuracies(experiment):
    two = replace(experiment, trials=2)
    rep = two.run()
    assert rep.n == 80
    assert rep.accuracies[:40] == experiment.run().accuracies
    assert two.trial_seeds(1) != two.trial_seeds(0)
