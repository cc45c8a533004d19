"""Acceptance criteria 1-8.

Each test prints one ``[PASS]``/``[FAIL]`` line and adds it to the summary
section shown at the end of the pytest run.  Run this file alone with::

    pytest tests/test_acceptance.py -s
    python3 tests/test_acceptance.py
"""

import itertools
import math
import time

import numpy as np
import pytest
from scipy import special

from cecnn.cli import main as cli_main
from cecnn.copula import (
    RcCopulaParams,
    RrGaussianParams,
    SmoothedResidualCdf,
    estimate_gamma_nonparam,
    estimate_rr_gaussian_params,
    verify_latent_score,
)
from cecnn.gls import convergence_study, variance_experiment
from cecnn.losses import (
    copula_rc_loss,
    copula_rr_gaussian_loss,
    copula_rr_nonparam_loss,
    cross_entropy_loss,
    mse_loss,
)
from cecnn.metrics import accuracy, auc, mae, rmse
from cecnn.nn import BackboneSpec, build_backbone
from cecnn.pipeline import TrainConfig, estimate_copula, run_cv, split_train_val, summarize, warmup_train
from cecnn.synthdata import gen_rc_dataset, gen_rr_dataset

from conftest import ACCEPTANCE_LINES, FD_RTOL, check_tensor_grads

LOG_2PI = math.log(2 * math.pi)


def record(number: int, title: str, ok: bool, detail: str, started: float) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {title} ({detail}; {time.time() - started:.1f}s)"
    ACCEPTANCE_LINES.append(line)
    print(line)


# ---------------------------------------------------------------------------
# 1. gradient fidelity through the backbone
# ---------------------------------------------------------------------------


def _loss_builders(rng):
    cdfs = [SmoothedResidualCdf.from_residuals(rng.standard_t(6, size=60)) for _ in range(2)]
    rho = rng.uniform(-0.8, 0.8)
    gamma = np.array([[1.0, rho], [rho, 1.0]])
    rc = RcCopulaParams(rng.uniform(-0.8, 0.8), rng.uniform(0.5, 2.0))
    rr = RrGaussianParams(gamma, rng.uniform(0.5, 2.0, 2))
    return {
        "mse": lambda out, y: mse_loss(out[0], y[:, 0]).total,
        "cross-entropy": lambda out, y: cross_entropy_loss(out[1], (y[:, 1] > 0).astype(float)).total,
        "copula R-C": lambda out, y: copula_rc_loss(y[:, 0], (y[:, 1] > 0).astype(float), out[0], out[1], rc).total,
        "copula R-R nonparametric": lambda out, y: copula_rr_nonparam_loss(y, out[2], gamma, cdfs).total,
        "copula R-R Gaussian": lambda out, y: copula_rr_gaussian_loss(y, out[2], rr).total,
    }


def test_criterion_1_gradient_fidelity():
    started = time.time()
    worst = {}
    for seed in range(20):
        rng = np.random.default_rng(seed)
        bb = build_backbone(BackboneSpec(head_activations=["identity", "sigmoid"]), seed=seed)
        x = rng.normal(size=(4, 1, 9, 9))
        y = rng.normal(size=(4, 2))
        for name, loss in _loss_builders(rng).items():
            def total(loss=loss):
                raw = bb.forward(x)
                out = bb.activate(raw)
                return loss((out[0], out[1], raw), y)

            err = check_tensor_grads(total, bb.parameters(), rng, 5)
            worst[name] = max(worst.get(name, 0.0), err)
    ok = all(v <= FD_RTOL for v in worst.values())
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    record(1, "reverse-mode vs central differences <= 1e-4 over 20 seeds", ok, f"worst: {detail}", started)
    assert ok


# ---------------------------------------------------------------------------
# 2. reduction identities
# ---------------------------------------------------------------------------


def test_criterion_2_reduction_identities():
    started = time.time()
    errs = {"rc rho=0": 0.0, "gaussian gamma=I": 0.0, "nonparam gamma=I": 0.0}
    for seed in range(20):
        rng = np.random.default_rng(500 + seed)
        n = 25
        y1, mu1 = rng.normal(size=n) * 2, rng.normal(size=n)
        y2 = rng.integers(0, 2, n).astype(float)
        mu2 = rng.uniform(0.01, 0.99, n)
        sigma = rng.uniform(0.3, 3.0)
        got = copula_rc_loss(y1, y2, mu1, mu2, RcCopulaParams(0.0, sigma)).value
        ref = np.sum((y1 - mu1) ** 2) / (2 * sigma**2) + cross_entropy_loss(mu2, y2).value
        errs["rc rho=0"] = max(errs["rc rho=0"], abs(got - ref))

        p = 3
        Y, P = rng.normal(size=(n, p)), rng.normal(size=(n, p))
        s = rng.uniform(0.3, 3.0, p)
        got = copula_rr_gaussian_loss(Y, P, RrGaussianParams(np.eye(p), s)).value
        r = Y - P
        ref = np.sum(r**2 / (2 * s**2)) + n * (np.sum(np.log(s)) + 0.5 * p * LOG_2PI)
        errs["gaussian gamma=I"] = max(errs["gaussian gamma=I"], abs(got - ref))

        cdfs = [SmoothedResidualCdf.from_residuals(rng.standard_t(4, size=50)) for _ in range(p)]
        got = copula_rr_nonparam_loss(Y, P, np.eye(p), cdfs).value
        ref = -sum(np.sum(np.log(cdfs[j].pdf(r[:, j]))) for j in range(p))
        errs["nonparam gamma=I"] = max(errs["nonparam gamma=I"], abs(got - ref))
    ok = all(v <= 1e-10 for v in errs.values())
    record(2, "reduction identities <= 1e-10", ok, ", ".join(f"{k} {v:.1e}" for k, v in errs.items()), started)
    assert ok


# ---------------------------------------------------------------------------
# 3. latent Gaussian score Monte Carlo
# ---------------------------------------------------------------------------


def test_criterion_3_latent_score():
    started = time.time()
    reports = [verify_latent_score(mu2, rho, 1_000_000, seed=[i, 3])
               for i, (mu2, rho) in enumerate(itertools.product((0.2, 0.5, 0.8), (-0.6, 0.0, 0.6)))]
    ok = all(r.passed(3.0) for r in reports)
    worst_p = max(r.p_z for r in reports)
    worst_bin = max(r.max_bin_z for r in reports)
    n_bins = sum(r.bin_counts.size for r in reports)
    # chance that the largest of n_bins independent |z| is at least this big under a correct model
    family_p = 1.0 - (1.0 - 2.0 * special.ndtr(-worst_bin)) ** n_bins
    record(3, "P(z2>0)=mu2 and binned C* within 3 SE, 9 cells x 1e6 draws", ok,
           f"max |z| marginal {worst_p:.2f}, per-bin {worst_bin:.2f} over {n_bins} bins "
           f"(family-wise p {family_p:.2f})", started)
    assert ok


# ---------------------------------------------------------------------------
# 4. copula parameter recovery
# ---------------------------------------------------------------------------


def test_criterion_4_copula_recovery():
    started = time.time()
    data = gen_rr_dataset(100_000, seed=2024)
    resid = data.y - data.latent
    est = estimate_rr_gaussian_params(resid)
    g = est.gamma[0, 1]
    g_np = estimate_gamma_nonparam(resid)[0, 1]
    s1, s2 = est.sigmas
    residual_ok = (abs(g - 0.7) <= 0.01 and abs(g_np - 0.7) <= 0.01
                   and abs(s1 - 1.0) <= 0.01 and abs(s2 - 2.0) <= 0.02)

    cfg = TrainConfig(task="rr-gaussian", seed=0)
    pipe = gen_rr_dataset(10_000, seed=7)
    tr, va = split_train_val(len(pipe), cfg.val_fraction, [cfg.seed, 0xA11])
    train = pipe.subset(tr)
    warm = warmup_train(train, cfg, val=pipe.subset(va))
    g_pipe = estimate_copula(warm, train, "rr-gaussian").gamma[0, 1]
    pipe_ok = abs(g_pipe - 0.7) <= 0.05
    ok = residual_ok and pipe_ok
    record(4, "copula parameter recovery", ok,
           f"n=1e5 residuals: gamma {g:.4f} (nonparametric {g_np:.4f}), sigma ({s1:.4f}, {s2:.4f}); "
           f"after warm-up on n=1e4: gamma {g_pipe:.4f}", started)
    assert ok


# ---------------------------------------------------------------------------
# 5. GLS dominance over OLS
# ---------------------------------------------------------------------------


def test_criterion_5_gls_dominance():
    started = time.time()
    cmp = variance_experiment(n=500, K=8, rho=0.7, replicates=200, M=200, seed=0)
    per_coord = cmp.dominance_per_coordinate()
    ratio = cmp.mean_variance_ratio()
    unbiased = {e: cmp.unbiased(e, 3.0) for e in ("ols", "gls", "fgls")}
    finite_ok = per_coord.min() >= 0.95 and ratio < 1 and unbiased["ols"] and unbiased["gls"]

    trend = convergence_study(ns=(200, 1000, 5000), K=8, rho=0.7, replicates=100, M=100, seed=0)
    dom = [t["dominance_fraction"] for t in trend]
    msd = [t["fgls_gls_msd"] for t in trend]
    trend_ok = all(b >= a for a, b in zip(dom, dom[1:])) and all(b < a for a, b in zip(msd, msd[1:]))
    ok = finite_ok and trend_ok
    record(5, "GLS variance dominance", ok,
           f"min per-coordinate dominance {per_coord.min():.3f}, mean ratio {ratio:.3f}, "
           f"unbiased {unbiased}; dominance over n {dom}, FGLS-GLS msd {[f'{m:.1e}' for m in msd]}", started)
    assert ok


# ---------------------------------------------------------------------------
# 6. simulation direction
# ---------------------------------------------------------------------------

CV_N = 10_000


def _cv_summary(task, data):
    res = run_cv(data, TrainConfig(task=task, seed=0), k=5, rounds=2)
    return {row["metric"]: row for row in summarize(res)}


@pytest.mark.slow
def test_criterion_6_simulation_direction():
    started = time.time()
    rr = _cv_summary("rr-gaussian", gen_rr_dataset(CV_N, seed=0))
    rr_ok = all(rr[m]["cecnn_mean"] <= rr[m]["baseline_mean"] and rr[m]["sign_test_p"] < 0.1
                for m in ("rmse_y1", "rmse_y2"))
    rc = _cv_summary("rc", gen_rc_dataset(CV_N, seed=0))
    rc_ok = rc["auc"]["cecnn_mean"] >= rc["auc"]["baseline_mean"]
    ok = rr_ok and rc_ok
    detail = "; ".join(
        [f"R-R {m}: baseline {rr[m]['baseline_mean']:.4f}, CeCNN {rr[m]['cecnn_mean']:.4f}, "
         f"improved {rr[m]['n_improved']}/{rr[m]['n_pairs']}, sign p {rr[m]['sign_test_p']:.4f}"
         for m in ("rmse_y1", "rmse_y2")]
        + [f"R-C auc: baseline {rc['auc']['baseline_mean']:.4f}, CeCNN {rc['auc']['cecnn_mean']:.4f}"])
    record(6, f"CeCNN beats baseline, n={CV_N}, 5 folds x 2 rounds", ok, detail, started)
    assert ok


# ---------------------------------------------------------------------------
# 7. metric oracles
# ---------------------------------------------------------------------------


def _pair_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = sum(1.0 if p > q else 0.5 if p == q else 0.0 for p in pos for q in neg)
    return wins / (len(pos) * len(neg))


def test_criterion_7_metric_oracles():
    started = time.time()
    mismatches = 0
    cases = 0
    # every labelling and every score pattern over three levels for n <= 6
    for n in range(2, 7):
        for labels in itertools.product((0, 1), repeat=n):
            if 0 < sum(labels) < n:
                for scores in itertools.product((0.0, 0.5, 1.0), repeat=n):
                    cases += 1
                    mismatches += auc(scores, labels) != _pair_auc(scores, labels)
    # random tie-heavy inputs for 7 <= n <= 12
    rng = np.random.default_rng(7)
    for _ in range(20_000):
        n = int(rng.integers(7, 13))
        labels = rng.integers(0, 2, n)
        if 0 < labels.sum() < n:
            scores = rng.integers(0, 5, n) / 4.0
            cases += 1
            mismatches += auc(scores, labels) != _pair_auc(scores.tolist(), labels.tolist())
    hand = [
        abs(rmse([3, -4], [0, 0]) - math.sqrt(12.5)),
        abs(mae([3, -4], [0, 0]) - 3.5),
        abs(accuracy([0.6, 0.4, 0.7], [1, 1, 0]) - 1 / 3),
        abs(auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) - 0.75),
        abs(rmse([1, 2], [1, 2])), abs(mae([1, 2], [1, 2])),
        abs(accuracy([1, 0], [1, 0]) - 1), abs(accuracy([0, 1], [1, 0])),
        abs(auc([0.3] * 4, [0, 1, 0, 1]) - 0.5), abs(auc([0, 1], [0, 1]) - 1),
    ]
    ok = mismatches == 0 and max(hand) <= 1e-12
    record(7, "metric oracles", ok, f"{cases} exhaustive/random AUC cases, {mismatches} mismatches; "
                                    f"hand values max error {max(hand):.1e}", started)
    assert ok


# ---------------------------------------------------------------------------
# 8. determinism of reproduce-sim
# ---------------------------------------------------------------------------


def test_criterion_8_reproduce_sim_determinism(tmp_path):
    started = time.time()
    ini = tmp_path / "smoke.ini"
    ini.write_text("[data]\ntask = rr-gaussian\nn = 500\nseed = 5\n\n[train]\nepochs_warmup = 5\n"
                   "epochs_ccnn = 3\n\n[cv]\nfolds = 2\nrounds = 1\n")
    codes, blobs = [], []
    for run in ("a", "b"):
        out = tmp_path / run
        codes.append(cli_main(["reproduce-sim", "--config", str(ini), "--out", str(out)]))
        blobs.append([(out / f).read_bytes() for f in ("results.csv", "results_final_epoch.csv", "summary.csv")])
    ok = codes == [0, 0] and blobs[0] == blobs[1]
    record(8, "reproduce-sim twice gives byte-identical CSVs", ok,
           f"exit codes {codes}, results.csv {len(blobs[0][0])} bytes", started)
    assert ok


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-s", "-p", "no:cacheprovider"]))
