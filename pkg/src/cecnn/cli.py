"""Command line entry point: ``cecnn <command> [flags]``.

Commands
    gen-data       write a synthetic dataset container and its CSV manifest
    train          warm-up + copula estimation + fine-tuning on one split
    eval           score a saved backbone on a dataset
    reproduce-sim  repeated k-fold comparison of baseline and CeCNN
    gls-demo       OLS / GLS / FGLS conditional-variance experiment
    print-config   print the default configuration

Configuration files are INI with the sections printed by ``print-config``.
Command-line flags override the file.  Exit codes: 0 success, 1 runtime
abort (partial results are kept), 2 usage or configuration error.

Output files
    results.csv              round,fold,method,metric,value (early-stopped models)
    results_final_epoch.csv  same schema, models at their last trained epoch
    summary.csv              per-metric means, SDs, paired differences, sign test
    gls.csv                  replicate,coordinate,estimator,variance,bias
    manifest.ini             command, config snapshot, digests, artifact paths, timings

Only the manifest carries timestamps, so the CSVs of two identical runs are
byte-identical.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import io
import json
import logging
import os
import sys
import tempfile
import time
from pathlib import Path

from . import __version__
from .errors import DivergenceError
from .gls import variance_experiment
from .nn import Backbone, BackboneSpec
from .pipeline import TrainConfig, evaluate, run_cv, split_train_val, summarize, train_cecnn
from .synthdata import SyntheticDataset, gen_rc_dataset, gen_rr_dataset

log = logging.getLogger("cecnn")

TRAIN_TASKS = ("rc", "rr-gaussian", "rr-nonparam")
DATA_TASKS = ("rc", "rr")
ALL_TASKS = ("rc", "rr", "rr-gaussian", "rr-nonparam")


class ConfigError(Exception):
    pass


DEFAULTS: dict[str, dict[str, str]] = {
    "data": {"task": "rr-gaussian", "n": "2000", "seed": "0"},
    "train": {
        "epochs_warmup": "200",
        "epochs_ccnn": "100",
        "lr_warmup": "0.001",
        "lr_ccnn_factor": "0.1",
        "batch_size": "64",
        "patience": "20",
        "val_fraction": "0.25",
        "bandwidth": "",
    },
    "cv": {"folds": "5", "rounds": "2", "workers": "1"},
    "gls": {
        "n": "500",
        "K": "8",
        "rho": "0.7",
        "sigma1": "1.0",
        "sigma2": "2.0",
        "replicates": "200",
        "M": "200",
        "overlap": "disjoint",
        "support_size": "3",
    },
    "backbone": {"layers": json.dumps(BackboneSpec().layers)},
}


def default_config() -> configparser.ConfigParser:
    cp = configparser.ConfigParser()
    cp.optionxform = str  # keep "K" and "M" as written
    cp.read_dict(DEFAULTS)
    return cp


def load_config(path: str | None) -> configparser.ConfigParser:
    cp = default_config()
    if path is None:
        return cp
    if not Path(path).is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path) as fh:
            cp.read_file(fh)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    unknown = [s for s in cp.sections() if s not in DEFAULTS]
    if unknown:
        raise ConfigError(f"unknown config sections: {', '.join(unknown)}")
    for section in DEFAULTS:
        for key in cp[section]:
            if key not in DEFAULTS[section]:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
    return cp


def _get(cp, section: str, key: str, cast):
    raw = cp[section][key]
    try:
        return cast(raw)
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key} = {raw!r}: {exc}") from exc


def apply_flags(cp: configparser.ConfigParser, args) -> None:
    for flag, (section, key) in {"task": ("data", "task"), "n": ("data", "n"), "seed": ("data", "seed"),
                                 "folds": ("cv", "folds"), "rounds": ("cv", "rounds"),
                                 "workers": ("cv", "workers")}.items():
        value = getattr(args, flag, None)
        if value is not None:
            cp[section][key] = str(value)


def train_config(cp: configparser.ConfigParser) -> TrainConfig:
    task = cp["data"]["task"]
    if task == "rr":
        task = "rr-gaussian"
    if task not in TRAIN_TASKS:
        raise ConfigError(f"task must be one of {TRAIN_TASKS}, got {task!r}")
    t = cp["train"]
    kw = {}
    for key in ("epochs_warmup", "epochs_ccnn", "batch_size", "patience"):
        kw[key] = _get(cp, "train", key, int)
    for key in ("lr_warmup", "lr_ccnn_factor", "val_fraction"):
        kw[key] = _get(cp, "train", key, float)
    bw = t["bandwidth"].strip()
    kw["bandwidth"] = _get(cp, "train", "bandwidth", float) if bw else None
    try:
        layers = json.loads(cp["backbone"]["layers"])
    except json.JSONDecodeError as exc:
        raise ConfigError(f"[backbone] layers is not valid JSON: {exc}") from exc
    try:
        return TrainConfig(task=task, seed=_get(cp, "data", "seed", int),
                           backbone=BackboneSpec(layers=layers), **kw)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def config_text(cp: configparser.ConfigParser) -> str:
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


# ---------------------------------------------------------------------------
# output helpers
# ---------------------------------------------------------------------------


def atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_manifest(path: Path, command: str, cp, started: float, extra: dict[str, dict[str, str]]) -> None:
    man = configparser.ConfigParser(interpolation=None)
    man.optionxform = str
    man["run"] = {"command": command, "version": __version__, "argv": " ".join(sys.argv[1:]),
                  "started": time.strftime("%Y-%m-%dT%H:%M:%S", time.localtime(started)),
                  "wall_seconds": f"{time.time() - started:.3f}"}
    for section in cp.sections():
        man[f"config.{section}"] = dict(cp[section])
    for section, kv in extra.items():
        man[section] = {k: str(v) for k, v in kv.items()}
    buf = io.StringIO()
    man.write(buf)
    atomic_write(path, buf.getvalue())


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def results_rows(results, final: bool = False):
    for r in results:
        for metric, value in (r.final_metrics if final else r.metrics).items():
            yield [r.round, r.fold, r.method, metric, repr(float(value))]


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, float) else str(v)


def load_dataset(args, cp) -> SyntheticDataset:
    if getattr(args, "data", None):
        return SyntheticDataset.load(args.data)
    task = cp["data"]["task"]
    gen = gen_rc_dataset if task == "rc" else gen_rr_dataset
    return gen(_get(cp, "data", "n", int), _get(cp, "data", "seed", int))


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_data(args, cp) -> int:
    task = cp["data"]["task"]
    data_task = "rc" if task == "rc" else "rr"
    n, seed = _get(cp, "data", "n", int), _get(cp, "data", "seed", int)
    if n < 1:
        raise ConfigError("n must be at least 1")
    started = time.time()
    data = (gen_rc_dataset if data_task == "rc" else gen_rr_dataset)(n, seed)
    out = Path(args.out or f"{data_task}_{n}_{seed}.bin")
    out.parent.mkdir(parents=True, exist_ok=True)
    path, csv_path = data.save(out)
    write_manifest(out.with_name(out.name + ".manifest.ini"), "gen-data", cp, started,
                   {"dataset": {"task": data_task, "n": n, "seed": seed, "digest": data.digest(),
                                "path": path, "csv": csv_path}})
    print(f"wrote {n} {data_task} samples to {path} (sha256 {data.digest()[:16]})")
    return 0


def cmd_train(args, cp) -> int:
    config = train_config(cp)
    data = load_dataset(args, cp)
    if data.task != config.data_task:
        raise ConfigError(f"dataset task {data.task!r} does not fit training task {config.task!r}")
    started = time.time()
    out = Path(args.out or "train_out")
    out.mkdir(parents=True, exist_ok=True)
    tr, va = split_train_val(len(data), config.val_fraction, [config.seed, 0xA11])
    warm, cec = train_cecnn(data.subset(tr), config, val=data.subset(va))
    warm.backbone.save(out / "warmup")
    cec.backbone.save(out / "cecnn")
    history = [[h["stage"], h["epoch"], repr(h["train_loss"]), repr(h["val_loss"])] for h in cec.history]
    atomic_write(out / "history.csv", _csv_text(["stage", "epoch", "train_loss", "val_loss"], history))
    write_manifest(out / "manifest.ini", "train", cp, started, {
        "dataset": {"task": data.task, "n": len(data), "digest": data.digest(),
                    "train_digest": cec.provenance["dataset_digest"]},
        "copula": cec.copula.to_kv(),
        "warmup": {"best_epoch": warm.provenance["best_epoch"], "epochs_run": warm.provenance["epochs_run"]},
        "cecnn": {"best_epoch": cec.provenance["best_epoch"], "epochs_run": cec.provenance["epochs_run"]},
        "artifacts": {"warmup": out / "warmup.bin", "cecnn": out / "cecnn.bin", "history": out / "history.csv"},
    })
    for key, value in cec.copula.to_kv().items():
        print(f"copula.{key} = {value}")
    print(f"models written to {out}")
    return 0


def cmd_eval(args, cp) -> int:
    if not args.model:
        raise ConfigError("eval needs --model STEM (a saved backbone without extension)")
    stem = Path(args.model)
    if stem.suffix in (".bin", ".json"):
        stem = stem.with_suffix("")
    bb = Backbone.load(stem)
    data = load_dataset(args, cp)
    res = evaluate(bb, data)
    text = _csv_text(["metric", "value"], [[k, repr(v)] for k, v in res.items()])
    if args.out:
        atomic_write(Path(args.out), text)
    sys.stdout.write(text)
    return 0


def cmd_reproduce_sim(args, cp) -> int:
    config = train_config(cp)
    folds = _get(cp, "cv", "folds", int)
    rounds = _get(cp, "cv", "rounds", int)
    workers = _get(cp, "cv", "workers", int)
    data = load_dataset(args, cp)
    if data.task != config.data_task:
        raise ConfigError(f"dataset task {data.task!r} does not fit training task {config.task!r}")
    if folds < 2 or rounds < 1 or workers < 1:
        raise ConfigError("need folds >= 2, rounds >= 1, workers >= 1")
    started = time.time()
    out = Path(args.out or "sim_out")
    out.mkdir(parents=True, exist_ok=True)
    details: list = []
    errors: list = []
    results = run_cv(data, config, k=folds, rounds=rounds, workers=workers, details=details, errors=errors)
    header = ["round", "fold", "method", "metric", "value"]
    atomic_write(out / "results.csv", _csv_text(header, results_rows(results)))
    atomic_write(out / "results_final_epoch.csv", _csv_text(header, results_rows(results, final=True)))
    summary = summarize(results)
    if summary:
        cols = list(summary[0])
        atomic_write(out / "summary.csv", _csv_text(cols, [[_fmt(r[c]) for c in cols] for r in summary]))
    extra = {"dataset": {"task": data.task, "n": len(data), "digest": data.digest()},
             "artifacts": {"results": out / "results.csv", "results_final_epoch": out / "results_final_epoch.csv",
                           "summary": out / "summary.csv"}}
    for d in details:
        extra[f"copula.r{d['round']}.f{d['fold']}"] = dict(d["copula"], seed=d["seed"])
    for r in results:
        extra.setdefault(f"fold.r{r.round}.f{r.fold}", {})[f"{r.method}.best_epoch"] = r.best_epoch
    if errors:
        extra["aborted"] = {f"r{r}.f{f}": msg for r, f, msg in errors}
    write_manifest(out / "manifest.ini", "reproduce-sim", cp, started, extra)
    print(f"{'metric':<10} {'baseline':>18} {'cecnn':>18} {'diff':>10} {'better':>7} {'sign p':>7}")
    for r in summary:
        print(f"{r['metric']:<10} {r['baseline_mean']:>9.4f}±{r['baseline_sd']:<8.4f} "
              f"{r['cecnn_mean']:>9.4f}±{r['cecnn_sd']:<8.4f} {r['diff_mean']:>+10.4f} "
              f"{r['n_improved']:>3}/{r['n_pairs']:<3} {r['sign_test_p']:>7.4f}")
    if errors:
        for r, f, msg in errors:
            print(f"round {r} fold {f} aborted: {msg}", file=sys.stderr)
        return 1
    return 0


def cmd_gls_demo(args, cp) -> int:
    g = cp["gls"]
    replicates = _get(cp, "gls", "replicates", int)
    if replicates < 100:
        print(f"warning: {replicates} replicates (< 100); dominance fractions will be coarse", file=sys.stderr)
    started = time.time()
    try:
        comp = variance_experiment(
            n=_get(cp, "gls", "n", int), K=_get(cp, "gls", "K", int), rho=_get(cp, "gls", "rho", float),
            replicates=replicates, M=_get(cp, "gls", "M", int), seed=_get(cp, "data", "seed", int),
            sigmas=(_get(cp, "gls", "sigma1", float), _get(cp, "gls", "sigma2", float)),
            overlap=g["overlap"], support_size=_get(cp, "gls", "support_size", int))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    out = Path(args.out or "gls_out")
    out.mkdir(parents=True, exist_ok=True)
    comp.write_csv(out / "gls.csv")
    summ = comp.summary()
    write_manifest(out / "manifest.ini", "gls-demo", cp, started,
                   {"summary": {k: _fmt(v) for k, v in summ.items()},
                    "artifacts": {"csv": out / "gls.csv"}})
    for key, value in summ.items():
        print(f"{key} = {_fmt(value)}")
    return 0


def cmd_print_config(args, cp) -> int:
    sys.stdout.write(config_text(cp))
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "reproduce-sim": cmd_reproduce_sim,
    "gls-demo": cmd_gls_demo,
    "print-config": cmd_print_config,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cecnn", description="Copula-enhanced multi-task CNN experiments")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="INI configuration file")
        p.add_argument("--task", choices=ALL_TASKS)
        p.add_argument("--n", type=int)
        p.add_argument("--seed", type=int)
        p.add_argument("--folds", type=int)
        p.add_argument("--rounds", type=int)
        p.add_argument("--workers", type=int)
        p.add_argument("--out", help="output file (gen-data, eval) or directory")
        if name in ("train", "eval", "reproduce-sim"):
            p.add_argument("--data", help="dataset container written by gen-data")
        if name == "eval":
            p.add_argument("--model", help="saved backbone stem")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cp = load_config(args.config)
        apply_flags(cp, args)
        return COMMANDS[args.command](args, cp)
    except ConfigError as exc:
        print(f"cecnn: config error: {exc}", file=sys.stderr)
        return 2
    except (DivergenceError, OSError, ValueError) as exc:
        print(f"cecnn: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
