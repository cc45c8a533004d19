"""Three-stage CeCNN training and the cross-validation harness.

Stage 1 fits the backbone under the empirical loss (mean MSE per regression
head plus cross entropy for a classification head).  Stage 2 estimates the
copula parameters once from the stage-1 outputs on the training split.
Stage 3 fine-tunes the same backbone under the copula likelihood with the
parameters frozen and the learning rate scaled by ``lr_ccnn_factor``.

The baseline in ``run_cv`` is the stage-1 model itself, so both methods of a
fold share the backbone initialisation, the training/validation split and
the test indices.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
from scipy.stats import binomtest

from . import metrics
from .copula import (
    RcCopulaParams,
    RrGaussianParams,
    RrNonparamParams,
    estimate_rc_params,
    estimate_rr_gaussian_params,
    fit_nonparam_copula,
)
from .errors import DivergenceError
from .losses import (
    LossValue,
    copula_rc_loss,
    copula_rr_gaussian_loss,
    copula_rr_nonparam_loss,
    cross_entropy_loss,
    mse_loss,
)
from .nn import Adam, Backbone, BackboneSpec, Tensor, build_backbone, no_grad
from .synthdata import SyntheticDataset

log = logging.getLogger(__name__)

TASKS = ("rc", "rr-gaussian", "rr-nonparam")
CopulaParams = RcCopulaParams | RrGaussianParams | RrNonparamParams


@dataclass
class TrainConfig:
    task: str = "rr-gaussian"
    epochs_warmup: int = 200
    epochs_ccnn: int = 100
    lr_warmup: float = 1e-3
    lr_ccnn_factor: float = 0.1
    batch_size: int = 64
    seed: int = 0
    patience: int = 20
    val_fraction: float = 0.25
    bandwidth: float | None = None
    backbone: BackboneSpec = field(default_factory=BackboneSpec)

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.epochs_warmup < 1 or self.epochs_ccnn < 1:
            raise ValueError("epoch counts must be >= 1")
        if self.lr_warmup <= 0 or self.lr_ccnn_factor <= 0:
            raise ValueError("learning rate and its stage-3 factor must be positive")
        if self.batch_size < 1 or self.patience < 1:
            raise ValueError("batch_size and patience must be >= 1")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must be inside (0, 1)")
        self.backbone.head_activations = ["identity", "sigmoid"] if self.task == "rc" else ["identity", "identity"]

    @property
    def data_task(self) -> str:
        return "rc" if self.task == "rc" else "rr"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["backbone"] = self.backbone.to_dict()
        return d


@dataclass
class TrainedModel:
    backbone: Backbone
    copula: CopulaParams | None
    history: list[dict]
    provenance: dict
    final_state: list[np.ndarray] | None = None

    def final_backbone(self) -> Backbone:
        """The backbone at the last epoch run rather than the early-stopped one."""
        bb = self.backbone.copy()
        if self.final_state is not None:
            bb.load_state(self.final_state)
        return bb


@dataclass
class FoldResult:
    round: int
    fold: int
    method: str
    metrics: dict[str, float]
    final_metrics: dict[str, float] = field(default_factory=dict)
    best_epoch: int = 0


# ---------------------------------------------------------------------------
# loss builders: (backbone, inputs, Y, scale) -> LossValue
# ---------------------------------------------------------------------------

LossFn = Callable[[Backbone, np.ndarray, np.ndarray, float], LossValue]


def empirical_loss(task: str) -> LossFn:
    def fn(bb: Backbone, x, y, scale):
        raw = bb.forward(x)
        n = y.shape[0]
        if task == "rc":
            total = (mse_loss(raw[:, 0], y[:, 0]).total
                     + cross_entropy_loss(raw[:, 1].sigmoid(), y[:, 1], scale=1.0 / n).total)
        else:
            total = mse_loss(raw[:, 0], y[:, 0]).total
            for j in range(1, y.shape[1]):
                total = total + mse_loss(raw[:, j], y[:, j]).total
        return LossValue(total)

    return fn


def copula_loss(copula: CopulaParams) -> LossFn:
    def fn(bb: Backbone, x, y, scale):
        raw = bb.forward(x)
        if isinstance(copula, RcCopulaParams):
            return copula_rc_loss(y[:, 0], y[:, 1], raw[:, 0], raw[:, 1].sigmoid(), copula, scale)
        if isinstance(copula, RrGaussianParams):
            return copula_rr_gaussian_loss(y, raw, copula, scale)
        return copula_rr_nonparam_loss(y, raw, copula.gamma, copula.cdfs, scale)

    return fn


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


def _loss_value(loss_fn: LossFn, bb: Backbone, x, y, scale) -> float:
    with no_grad():
        try:
            return loss_fn(bb, x, y, scale).value
        except FloatingPointError:
            return float("nan")


def fit(bb: Backbone, train: SyntheticDataset, val: SyntheticDataset, loss_fn: LossFn, *,
        lr: float, epochs: int, patience: int, batch_size: int, seed, stage: str) -> dict:
    """Adam with early stopping on the validation loss.

    The backbone is left at the earliest epoch with the lowest validation loss.
    Returns the loss history, the best epoch and the last-epoch parameters.
    """
    rng = np.random.default_rng(seed)
    opt = Adam(bb.parameters(), lr=lr)
    xtr, ytr = train.inputs, train.y
    xva, yva = val.inputs, val.y
    n = len(train)
    best = _loss_value(loss_fn, bb, xva, yva, 1.0 / len(val))
    if not math.isfinite(best):
        raise DivergenceError(f"{stage}: non-finite validation loss before training")
    best_epoch, best_state = 0, bb.state()
    history = [{"stage": stage, "epoch": 0, "train_loss": float("nan"), "val_loss": best}]
    last_finite = 0
    for epoch in range(1, epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            try:
                loss = loss_fn(bb, xtr[idx], ytr[idx], 1.0 / idx.size)
            except FloatingPointError as exc:
                raise DivergenceError(f"{stage}: {exc} in epoch {epoch}; last finite epoch {last_finite}") from exc
            if not math.isfinite(loss.value):
                raise DivergenceError(f"{stage}: non-finite loss in epoch {epoch}; last finite epoch {last_finite}")
            loss.backward()
            opt.step()
            total += loss.value * idx.size
        val_loss = _loss_value(loss_fn, bb, xva, yva, 1.0 / len(val))
        if not math.isfinite(val_loss):
            raise DivergenceError(f"{stage}: non-finite validation loss in epoch {epoch}; last finite epoch {last_finite}")
        last_finite = epoch
        history.append({"stage": stage, "epoch": epoch, "train_loss": total / n, "val_loss": val_loss})
        if val_loss < best:
            best, best_epoch, best_state = val_loss, epoch, bb.state()
        elif epoch - best_epoch >= patience:
            break
    final_state = bb.state()
    bb.load_state(best_state)
    return {"history": history, "best_epoch": best_epoch, "best_val_loss": best,
            "final_state": final_state, "epochs_run": history[-1]["epoch"]}


def split_train_val(n: int, val_fraction: float, seed) -> tuple[np.ndarray, np.ndarray]:
    perm = np.random.default_rng(seed).permutation(n)
    n_val = max(1, int(round(n * val_fraction)))
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def _resolve_split(data: SyntheticDataset, val: SyntheticDataset | None, config: TrainConfig):
    if val is not None:
        return data, val
    tr, va = split_train_val(len(data), config.val_fraction, [config.seed, 0xA11])
    return data.subset(tr), data.subset(va)


def init_head_bias(bb: Backbone, train: SyntheticDataset) -> None:
    """Start each head at the training marginal: the response mean, or its logit for a sigmoid head.

    Responses here sit far from zero; without this the shared tanh layer
    saturates while the biases are still travelling towards the mean.
    """
    b = np.empty(bb.n_heads)
    for j, act in enumerate(bb.head_activations):
        m = float(np.mean(train.y[:, j]))
        if act == "sigmoid":
            m = float(np.clip(m, 1e-3, 1 - 1e-3))
            b[j] = math.log(m / (1.0 - m))
        else:
            b[j] = m
    bb.head_bias.data[...] = b


def warmup_train(data: SyntheticDataset, config: TrainConfig, val: SyntheticDataset | None = None,
                 init_seed: int | None = None) -> TrainedModel:
    """Stage 1: fit the backbone under the empirical loss.

    Without an explicit ``val`` set, ``config.val_fraction`` of ``data`` is
    held out for early stopping.
    """
    if len(data) == 0:
        raise ValueError("empty training data")
    if data.task != config.data_task:
        raise ValueError(f"dataset task {data.task!r} does not match config task {config.task!r}")
    train, val = _resolve_split(data, val, config)
    seed = config.seed if init_seed is None else init_seed
    bb = build_backbone(config.backbone, seed=seed)
    init_head_bias(bb, train)
    out = fit(bb, train, val, empirical_loss(config.data_task), lr=config.lr_warmup,
              epochs=config.epochs_warmup, patience=config.patience,
              batch_size=config.batch_size, seed=[seed, 1], stage="warmup")
    prov = {"stage": "warmup", "config": config.to_dict(), "seed": seed,
            "dataset_digest": train.digest(), "best_epoch": out["best_epoch"],
            "epochs_run": out["epochs_run"], "param_count": bb.param_count()}
    return TrainedModel(bb, None, out["history"], prov, out["final_state"])


def estimate_copula(warmup: TrainedModel, data: SyntheticDataset, task: str,
                    bandwidth: float | None = None) -> CopulaParams:
    """Stage 2: one pass of copula estimation from the warm-up outputs on ``data``."""
    with no_grad():
        raw = warmup.backbone.forward(data.inputs).data
    if task == "rc":
        return estimate_rc_params(data.y[:, 0], raw[:, 0], raw[:, 1])
    resid = data.y - raw
    if task == "rr-gaussian":
        return estimate_rr_gaussian_params(resid)
    if task == "rr-nonparam":
        return fit_nonparam_copula(resid, bandwidth)
    raise ValueError(f"unknown task {task!r}")


def ccnn_train(warmup: TrainedModel, copula: CopulaParams, data: SyntheticDataset,
               config: TrainConfig, val: SyntheticDataset | None = None) -> TrainedModel:
    """Stage 3: fine-tune a copy of the warm-up backbone under the copula loss."""
    train, val = _resolve_split(data, val, config)
    bb = warmup.backbone.copy()
    seed = warmup.provenance.get("seed", config.seed)
    out = fit(bb, train, val, copula_loss(copula), lr=config.lr_warmup * config.lr_ccnn_factor,
              epochs=config.epochs_ccnn, patience=config.patience,
              batch_size=config.batch_size, seed=[seed, 3], stage="ccnn")
    prov = {"stage": "ccnn", "config": config.to_dict(), "seed": seed,
            "dataset_digest": train.digest(), "best_epoch": out["best_epoch"],
            "epochs_run": out["epochs_run"], "param_count": bb.param_count(),
            "copula": copula.to_kv()}
    return TrainedModel(bb, copula, warmup.history + out["history"], prov, out["final_state"])


def train_cecnn(data: SyntheticDataset, config: TrainConfig, val: SyntheticDataset | None = None,
                init_seed: int | None = None) -> tuple[TrainedModel, TrainedModel]:
    """All three stages; returns (warm-up model, CeCNN model)."""
    train, val = _resolve_split(data, val, config)
    warm = warmup_train(train, config, val=val, init_seed=init_seed)
    copula = estimate_copula(warm, train, config.task, config.bandwidth)
    return warm, ccnn_train(warm, copula, train, config, val=val)


# ---------------------------------------------------------------------------
# evaluation and cross validation
# ---------------------------------------------------------------------------


def evaluate(bb: Backbone, data: SyntheticDataset) -> dict[str, float]:
    pred = bb.predict(data.inputs)
    y = data.y
    if data.task == "rc":
        out = {"rmse_y1": metrics.rmse(pred[:, 0], y[:, 0]),
               "mae_y1": metrics.mae(pred[:, 0], y[:, 0]),
               "accuracy": metrics.accuracy(pred[:, 1], y[:, 1])}
        try:
            out["auc"] = metrics.auc(pred[:, 1], y[:, 1])
        except metrics.UndefinedMetricError:
            out["auc"] = float("nan")
        return out
    return {"rmse_y1": metrics.rmse(pred[:, 0], y[:, 0]), "rmse_y2": metrics.rmse(pred[:, 1], y[:, 1]),
            "mae_y1": metrics.mae(pred[:, 0], y[:, 0]), "mae_y2": metrics.mae(pred[:, 1], y[:, 1])}


def cv_splits(n: int, k: int, rounds: int, seed: int):
    """Yield (round, fold, test_idx, trainval_idx) with a reshuffle per round."""
    for r in range(rounds):
        perm = np.random.default_rng([seed, r]).permutation(n)
        folds = np.array_split(perm, k)
        for f in range(k):
            test = np.sort(folds[f])
            rest = np.sort(np.concatenate([folds[j] for j in range(k) if j != f]))
            yield r, f, test, rest


def run_fold(dataset: SyntheticDataset, config: TrainConfig, r: int, f: int,
             test_idx: np.ndarray, trainval_idx: np.ndarray) -> dict:
    fold_seed = int(np.random.SeedSequence([config.seed, r, f]).generate_state(1)[0])
    tr, va = split_train_val(trainval_idx.size, config.val_fraction, [fold_seed, 7])
    train = dataset.subset(trainval_idx[tr])
    val = dataset.subset(trainval_idx[va])
    test = dataset.subset(test_idx)
    warm, cec = train_cecnn(train, config, val=val, init_seed=fold_seed)
    base_res = FoldResult(r, f, "baseline", evaluate(warm.backbone, test),
                          evaluate(warm.final_backbone(), test), warm.provenance["best_epoch"])
    cec_res = FoldResult(r, f, "cecnn", evaluate(cec.backbone, test),
                         evaluate(cec.final_backbone(), test), cec.provenance["best_epoch"])
    return {"results": [base_res, cec_res], "copula": cec.copula.to_kv(),
            "test_idx": test_idx, "seed": fold_seed}


def _run_fold_job(args):
    return run_fold(*args)


def run_cv(dataset: SyntheticDataset, config: TrainConfig, k: int = 5, rounds: int = 10,
           workers: int = 1, details: list | None = None, errors: list | None = None) -> list[FoldResult]:
    """``rounds`` x ``k``-fold cross validation of baseline versus CeCNN.

    Per-fold extras (copula estimates, test indices, seeds) are appended to
    ``details`` when a list is passed.  Without an ``errors`` list the first
    failing fold raises; with one, each failure is recorded as
    ``(round, fold, message)`` and the remaining folds still run.
    """
    if k < 2:
        raise ValueError("need at least 2 folds")
    if rounds < 1:
        raise ValueError("need at least 1 round")
    if len(dataset) < 10 * k:
        raise ValueError(f"dataset of {len(dataset)} samples too small for {k} folds")
    jobs = [(dataset, config, r, f, te, tv) for r, f, te, tv in cv_splits(len(dataset), k, rounds, config.seed)]
    outs: list = []
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            futures = [ex.submit(_run_fold_job, j) for j in jobs]
            for fut in futures:
                try:
                    outs.append(fut.result())
                except Exception as exc:
                    if errors is None:
                        raise
                    outs.append(exc)
    else:
        for j in jobs:
            try:
                outs.append(_run_fold_job(j))
            except Exception as exc:
                if errors is None:
                    raise
                outs.append(exc)
    results: list[FoldResult] = []
    for job, out in zip(jobs, outs):
        if isinstance(out, Exception):
            log.error("round %d fold %d aborted: %s", job[2], job[3], out)
            errors.append((job[2], job[3], f"{type(out).__name__}: {out}"))
            continue
        results.extend(out["results"])
        if details is not None:
            details.append({"round": job[2], "fold": job[3], "copula": out["copula"],
                            "seed": out["seed"], "test_idx": out["test_idx"]})
    return results


LOWER_IS_BETTER = ("rmse", "mae")


def summarize(results: list[FoldResult]) -> list[dict]:
    """Per-metric means, SDs and paired CeCNN-minus-baseline differences.

    ``sign_test_p`` is the one-sided binomial sign test that CeCNN improves
    on the baseline (ties dropped).
    """
    base = {(r.round, r.fold): r for r in results if r.method == "baseline"}
    cec = {(r.round, r.fold): r for r in results if r.method == "cecnn"}
    keys = sorted(set(base) & set(cec))
    if not keys:
        return []
    rows = []
    for metric in base[keys[0]].metrics:
        b = np.array([base[k].metrics[metric] for k in keys])
        c = np.array([cec[k].metrics[metric] for k in keys])
        with np.errstate(invalid="ignore"):
            d = c - b
        lower = metric.startswith(LOWER_IS_BETTER)
        improved = int(np.sum(d < 0)) if lower else int(np.sum(d > 0))
        nonties = int(np.sum(d != 0))
        p = binomtest(improved, nonties, 0.5, alternative="greater").pvalue if nonties else 1.0
        sd = (lambda a: float(np.std(a, ddof=1)) if a.size > 1 else 0.0)
        rows.append({"metric": metric, "n_pairs": len(keys),
                     "baseline_mean": float(b.mean()), "baseline_sd": sd(b),
                     "cecnn_mean": float(c.mean()), "cecnn_sd": sd(c),
                     "diff_mean": float(d.mean()), "diff_sd": sd(d),
                     "n_improved": improved, "sign_test_p": float(p)})
    return rows
