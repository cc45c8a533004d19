import math

import numpy as np
import pytest

from cecnn.copula import RcCopulaParams, RrGaussianParams, RrNonparamParams
from cecnn.errors import DivergenceError
from cecnn.nn import build_backbone
from cecnn.pipeline import (
    TrainConfig,
    ccnn_train,
    copula_loss,
    cv_splits,
    empirical_loss,
    estimate_copula,
    evaluate,
    run_cv,
    summarize,
    train_cecnn,
    warmup_train,
)
from cecnn.synthdata import SyntheticDataset, gen_rc_dataset, gen_rr_dataset, mvn_sample

SMALL = dict(epochs_warmup=3, epochs_ccnn=2, batch_size=32, patience=5)


def _dataset(task, images, y):
    return SyntheticDataset(task, images, np.asarray(y, dtype=float), np.zeros((len(images), 2)))


# -- configuration --------------------------------------------------------------


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(task="rr")
    with pytest.raises(ValueError):
        TrainConfig(epochs_warmup=0)
    with pytest.raises(ValueError):
        TrainConfig(lr_ccnn_factor=0.0)
    with pytest.raises(ValueError):
        TrainConfig(val_fraction=1.0)
    assert TrainConfig(task="rc").backbone.head_activations == ["identity", "sigmoid"]
    assert TrainConfig(task="rr-nonparam").data_task == "rr"
    d = TrainConfig().to_dict()
    assert d["lr_ccnn_factor"] == 0.1 and d["epochs_warmup"] == 200 and d["patience"] == 20


def test_task_mismatch():
    with pytest.raises(ValueError):
        warmup_train(gen_rc_dataset(50), TrainConfig(task="rr-gaussian", **SMALL))


# -- warm-up --------------------------------------------------------------------


def test_warmup_constant_response():
    rng = np.random.default_rng(0)
    n = 240
    images = rng.standard_normal((n, 9, 9))
    y = np.column_stack([3.0 + 0.1 * rng.standard_normal(n), -2.0 + 0.1 * rng.standard_normal(n)])
    data = _dataset("rr", images, y)
    cfg = TrainConfig(task="rr-gaussian", epochs_warmup=20, patience=20, lr_warmup=3e-3)
    model = warmup_train(data, cfg, val=data)
    pred = model.backbone.predict(data.inputs)
    mse = np.mean((pred - y) ** 2, axis=0)
    assert np.all(mse <= np.var(y, axis=0) + 1e-12)
    np.testing.assert_allclose(pred.mean(axis=0), [3.0, -2.0], atol=0.02)


def test_warmup_separable_classification():
    rng = np.random.default_rng(1)
    n = 400
    images = rng.standard_normal((n, 9, 9))
    label = (images.sum(axis=(1, 2)) > 0).astype(float)
    data = _dataset("rc", images, np.column_stack([rng.standard_normal(n), label]))
    cfg = TrainConfig(task="rc", epochs_warmup=60, patience=60, lr_warmup=3e-3)
    model = warmup_train(data, cfg, val=data)
    assert evaluate(model.backbone, data)["accuracy"] > 0.95


def test_warmup_deterministic():
    data = gen_rr_dataset(120, seed=2)
    cfg = TrainConfig(task="rr-gaussian", **SMALL)
    a, b = warmup_train(data, cfg), warmup_train(data, cfg)
    for p, q in zip(a.backbone.state(), b.backbone.state()):
        np.testing.assert_array_equal(p, q)
    assert a.provenance["dataset_digest"] == b.provenance["dataset_digest"]


def test_early_stopping_keeps_best_epoch():
    data = gen_rr_dataset(160, seed=3)
    model = warmup_train(data, TrainConfig(task="rr-gaussian", epochs_warmup=8, patience=3))
    hist = [h for h in model.history if h["stage"] == "warmup"]
    losses = [h["val_loss"] for h in hist]
    best = model.provenance["best_epoch"]
    assert losses[best] == min(losses)
    assert best == losses.index(min(losses))  # earliest minimiser


def test_divergence_reported():
    data = gen_rr_dataset(80, seed=4)
    data.y[5, 0] = np.nan
    with pytest.raises(DivergenceError, match="non-finite"):
        warmup_train(data, TrainConfig(task="rr-gaussian", **SMALL))


# -- copula stage ---------------------------------------------------------------


def test_provenance_records_copula_used():
    data = gen_rr_dataset(150, seed=5)
    cfg = TrainConfig(task="rr-gaussian", **SMALL)
    warm = warmup_train(data, cfg)
    forced = RrGaussianParams(np.array([[1.0, 0.3], [0.3, 1.0]]), [1.1, 2.2])
    cec = ccnn_train(warm, forced, data, cfg)
    assert cec.copula is forced
    assert cec.provenance["copula"] == forced.to_kv()
    assert cec.backbone.param_count() == warm.backbone.param_count()
    # the warm-up model is not modified by fine-tuning
    assert any(not np.array_equal(p, q) for p, q in zip(warm.backbone.state(), cec.final_backbone().state()))


def test_train_cecnn_stages():
    data = gen_rc_dataset(150, seed=6)
    warm, cec = train_cecnn(data, TrainConfig(task="rc", **SMALL))
    assert isinstance(cec.copula, RcCopulaParams)
    stages = {h["stage"] for h in cec.history}
    assert stages == {"warmup", "ccnn"}
    assert cec.provenance["param_count"] == warm.provenance["param_count"]


def test_rc_rho_zero_objective_is_empirical():
    data = gen_rc_dataset(50, seed=7)
    bb = build_backbone(TrainConfig(task="rc").backbone, seed=1)
    n = len(data)
    # sigma^2 = 1/2 makes the Gaussian term equal to the plain squared error
    cop = copula_loss(RcCopulaParams(0.0, 1 / math.sqrt(2)))(bb, data.inputs, data.y, 1.0 / n).value
    emp = empirical_loss("rc")(bb, data.inputs, data.y, 1.0 / n).value
    assert abs(cop - emp) <= 1e-10


def test_rr_identity_copula_gradients_follow_mse():
    data = gen_rr_dataset(40, seed=8)
    bb = build_backbone(TrainConfig().backbone, seed=2)
    n = len(data)
    eye = RrGaussianParams(np.eye(2), [1.0, 1.0])

    def grads(fn):
        loss = fn(bb, data.inputs, data.y, 1.0 / n).total
        loss.backward()
        return [p.grad.copy() for p in bb.parameters()], loss.item()

    gc, vc = grads(copula_loss(eye))
    ge, ve = grads(empirical_loss("rr"))
    assert abs(vc - (0.5 * ve + math.log(2 * math.pi))) <= 1e-10
    for a, b in zip(gc, ge):
        np.testing.assert_allclose(a, 0.5 * b, rtol=1e-10, atol=1e-14)


def test_rc_independent_logits_give_small_rho():
    n = 10_000
    rng = np.random.default_rng(9)
    images = rng.standard_normal((n, 9, 9))
    cfg = TrainConfig(task="rc")
    bb = build_backbone(cfg.backbone, seed=3)
    mu2 = bb.predict(images[:, None])[:, 1]
    y = np.column_stack([rng.standard_normal(n), (rng.random(n) < mu2).astype(float)])
    data = _dataset("rc", images, y)

    class Warm:
        backbone = bb

    assert abs(estimate_copula(Warm, data, "rc").rho) < 0.05


def test_nonparam_and_gaussian_agree_on_gaussian_residuals():
    n = 4000
    rng = np.random.default_rng(10)
    images = rng.standard_normal((n, 9, 9))
    bb = build_backbone(TrainConfig().backbone, seed=4)
    pred = bb.predict(images[:, None])
    y = pred + mvn_sample([0, 0], [[1.0, 1.2], [1.2, 4.0]], n, rng)
    data = _dataset("rr", images, y)

    class Warm:
        backbone = bb

    g = estimate_copula(Warm, data, "rr-gaussian")
    np_ = estimate_copula(Warm, data, "rr-nonparam")
    assert isinstance(np_, RrNonparamParams)
    assert abs(g.gamma[0, 1] - np_.gamma[0, 1]) < 0.03
    assert abs(g.gamma[0, 1] - 0.6) < 0.05


# -- cross validation -----------------------------------------------------------


def test_cv_splits_partition():
    for r, f, test, rest in cv_splits(53, 4, 2, seed=1):
        assert np.intersect1d(test, rest).size == 0
        assert test.size + rest.size == 53
    tests = [t for r, f, t, _ in cv_splits(53, 4, 1, seed=1)]
    assert np.array_equal(np.sort(np.concatenate(tests)), np.arange(53))


def test_run_cv_counts_and_shared_indices():
    data = gen_rr_dataset(100, seed=11)
    cfg = TrainConfig(task="rr-gaussian", **SMALL)
    details = []
    res = run_cv(data, cfg, k=2, rounds=2, details=details)
    assert len(res) == 8
    assert sum(r.method == "baseline" for r in res) == 4
    assert len(details) == 4
    for d in details:
        assert d["test_idx"].size == 50
    for r in res:
        assert all(math.isfinite(v) for v in r.metrics.values())
        assert set(r.final_metrics) == set(r.metrics)
    rows = summarize(res)
    assert [row["metric"] for row in rows] == ["rmse_y1", "rmse_y2", "mae_y1", "mae_y2"]
    for row in rows:
        assert row["n_pairs"] == 4 and 0 <= row["sign_test_p"] <= 1


def test_run_cv_deterministic_and_worker_independent():
    data = gen_rc_dataset(100, seed=12)
    cfg = TrainConfig(task="rc", **SMALL)
    a = run_cv(data, cfg, k=2, rounds=1)
    b = run_cv(data, cfg, k=2, rounds=1, workers=2)
    assert [(r.round, r.fold, r.method, r.metrics) for r in a] == [(r.round, r.fold, r.method, r.metrics) for r in b]


def test_run_cv_errors():
    data = gen_rr_dataset(30, seed=13)
    cfg = TrainConfig(task="rr-gaussian", **SMALL)
    with pytest.raises(ValueError):
        run_cv(data, cfg, k=5)
    with pytest.raises(ValueError):
        run_cv(data, cfg, k=1)
    bad = gen_rr_dataset(100, seed=13)
    bad.y[0, 0] = np.inf
    errors = []
    res = run_cv(bad, cfg, k=2, rounds=1, errors=errors)
    # sample 0 is in the training data of exactly one fold
    assert len(errors) == 1 and "DivergenceError" in errors[0][2]
    assert len(res) == 2


def test_summarize_sign_test():
    from cecnn.pipeline import FoldResult
    res = []
    for f in range(6):
        res.append(FoldResult(0, f, "baseline", {"rmse_y1": 1.0, "auc": 0.8}))
        res.append(FoldResult(0, f, "cecnn", {"rmse_y1": 0.9, "auc": 0.8}))
    rows = {r["metric"]: r for r in summarize(res)}
    assert rows["rmse_y1"]["n_improved"] == 6
    assert rows["rmse_y1"]["sign_test_p"] == pytest.approx(1 / 64)
    assert rows["auc"]["sign_test_p"] == 1.0  # all ties
    assert rows["rmse_y1"]["diff_mean"] == pytest.approx(-0.1)


@pytest.mark.slow
def test_true_copula_improves_y2():
    """Fine-tuning with the true noise copula beats the warm-up on y2 in most seeds."""
    cfg = TrainConfig(task="rr-gaussian")
    truth = RrGaussianParams(np.array([[1.0, 0.7], [0.7, 1.0]]), [1.0, 2.0])
    wins = 0
    for seed in range(5):
        data = gen_rr_dataset(3000, seed=100 + seed)
        train, val = data.subset(np.arange(2000)), data.subset(np.arange(2000, 3000))
        warm = warmup_train(train, cfg, val=val, init_seed=seed)
        cec = ccnn_train(warm, truth, train, cfg, val=val)
        wins += evaluate(cec.backbone, val)["rmse_y2"] <= evaluate(warm.backbone, val)["rmse_y2"]
    assert wins >= 4
