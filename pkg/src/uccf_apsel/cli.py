"""``uccf`` command: generate, train, eval and bench subcommands.

Output directory layout::

    <out>/datasets/<Variant>/      manifest.txt, features.csv, labels.csv, rows.csv
    <out>/models/<Variant>/        fold<f>.mlp + fold<f>.scaler.csv + fold<f>.history.csv
                                   (fold<f>_ue<k>.* with --per-ue-models)
    <out>/reports/<Variant>/       tpr_tnr.csv, tpr_tnr_by_snr.csv, sumrate_by_snr.csv
    <out>/reports/runtime.csv

Every flag can also be set through an environment variable named
``UCCF_`` + the upper-cased flag (``UCCF_CONFIG``, ``UCCF_OUTPUT_DIR``,
``UCCF_SEED``, ``UCCF_THREADS``, ``UCCF_VARIANT``, ``UCCF_FOLD``,
``UCCF_PER_UE_MODELS``); a flag on the command line wins.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Callable

import numpy as np
import pandas as pd
from threadpoolctl import threadpool_limits

from . import store
from .config import RunConfig, load_run_config
from .netmodel import _parse_bool, dump_scenario
from .pipeline import (
    Dataset,
    FoldModel,
    Teacher,
    Variant,
    benchmark_runtime,
    evaluate_fold,
    evaluate_sumrate_fidelity,
    generate_datasets,
    kfold_split,
    predicted_assignments,
    rows_for,
    train_fold,
)

log = logging.getLogger("uccf")

ENV_PREFIX = "UCCF_"
THRESHOLD = 0.5


def _env(name: str, default=None):
    return os.environ.get(ENV_PREFIX + name.upper(), default)


def fold_seed(master_seed: int, fold: int) -> int:
    return int(np.random.SeedSequence([int(master_seed), 0xF01D, int(fold)]).generate_state(1, np.uint64)[0])


def model_stem(fold: int, ue: int | None = None) -> str:
    return f"fold{fold}" if ue is None else f"fold{fold}_ue{ue}"


class Context:
    """Resolved configuration plus output paths for one invocation."""

    def __init__(self, cfg: RunConfig, out: Path, threads: int):
        self.cfg = cfg
        self.out = out
        self.threads = threads

    @property
    def params(self):
        return self.cfg.params

    @property
    def seed(self) -> int:
        return self.cfg.master_seed

    @property
    def hash(self) -> str:
        return self.cfg.config_hash()

    def dataset_dir(self, v: Variant) -> Path:
        return self.out / "datasets" / v.value

    def model_dir(self, v: Variant) -> Path:
        return self.out / "models" / v.value

    def report_dir(self, v: Variant | None = None) -> Path:
        return self.out / "reports" / (v.value if v is not None else "")

    def splits(self, n_instances: int):
        return kfold_split(n_instances, self.cfg.folds, seed=self.seed)

    def load_dataset(self, v: Variant) -> Dataset:
        d = self.dataset_dir(v)
        if not (d / "manifest.txt").exists():
            raise FileNotFoundError(f"missing dataset {d}; run 'uccf generate' first")
        ds = store.read_dataset(d)
        seed = int(ds.manifest.get("master_seed", self.seed))
        if seed != self.seed:
            raise ValueError(f"dataset {d} was generated with seed {seed}, not {self.seed}")
        ds.check(self.params)
        return ds

    def write(self, path: Path, frame: pd.DataFrame) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        store.write_csv(path, frame, self.hash, self.seed)
        log.info("wrote %s", path)


def _variants(arg: str | None) -> list[Variant]:
    return list(Variant) if arg in (None, "", "all") else [Variant(arg)]


def _folds(arg, n_folds: int) -> list[int]:
    if arg in (None, ""):
        return list(range(n_folds))
    f = int(arg)
    if not 0 <= f < n_folds:
        raise ValueError(f"--fold {f} out of range for {n_folds} folds")
    return [f]


# ---------------------------------------------------------------- generate

def cmd_generate(ctx: Context, variant: str | None = None) -> list[Path]:
    variants = _variants(variant)
    datasets = generate_datasets(ctx.params, ctx.cfg.n_instances, ctx.seed, variants,
                                 ctx.cfg.features, threads=ctx.threads)
    scenario = dump_scenario(ctx.params, {"config_hash": ctx.hash})
    out = []
    for v, ds in datasets.items():
        out.append(store.write_dataset(ctx.dataset_dir(v), ds, scenario, ctx.hash, ctx.seed,
                                       ctx.params.K, ctx.params.M))
        log.info("%s: %d rows -> %s", v.value, len(ds.features), out[-1])
    return out


# ---------------------------------------------------------------- train

def cmd_train(ctx: Context, variant: str | None = None, fold=None) -> list[Path]:
    written = []
    for v in _variants(variant):
        ds = ctx.load_dataset(v)
        splits = ctx.splits(ds.n_instances)
        per_ue = ctx.cfg.per_ue_models and not v.centralized
        for f in _folds(fold, len(splits)):
            seed = fold_seed(ctx.seed, f)
            tcfg = replace(ctx.cfg.train[v], shuffle_seed=seed)
            ues = range(ctx.params.K) if per_ue else [None]
            for k in ues:
                fm = train_fold(ds, ctx.params, splits[f][0], tcfg, seed=seed, ue=k)
                store.save_fold_model(ctx.model_dir(v), model_stem(f, k), fm, ctx.hash, ctx.seed)
                written.append(ctx.model_dir(v) / f"{model_stem(f, k)}.mlp")
                log.info("%s fold %d%s: %d epochs, best %d", v.value, f,
                         "" if k is None else f" ue {k}", len(fm.history), fm.best_epoch)
    return written


# ---------------------------------------------------------------- eval

Predictor = Callable[[int, np.ndarray], np.ndarray]


def stored_predictor(ctx: Context, ds: Dataset, per_ue: bool) -> Predictor:
    """Scores of dataset rows from the saved fold models."""
    d = ctx.model_dir(ds.variant)

    def predict(fold: int, rows: np.ndarray) -> np.ndarray:
        feats = ds.features[rows]
        if not per_ue:
            return store.load_fold_model(d, model_stem(fold)).proba(feats)
        out = np.empty((len(rows), ds.labels.shape[1]))
        for k in range(ctx.params.K):
            sel = ds.ue[rows] == k
            if sel.any():
                out[sel] = store.load_fold_model(d, model_stem(fold, k)).proba(feats[sel])
        return out

    return predict


def _mean(values) -> float | None:
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def evaluate_variant(ctx: Context, ds: Dataset, predict: Predictor, folds: list[int]):
    """TPR/TNR and sum-rate frames for the given folds of one variant.

    Fold averages are plain means of the per-fold figures (each fold pools
    its SNR levels); the by-SNR frame breaks every fold down per level and
    adds the across-fold mean of each level.
    """
    params = ctx.params
    splits = ctx.splits(ds.n_instances)
    tpr_rows, snr_rows = [], []
    rates: dict[float, list[dict]] = {}
    for f in folds:
        test = splits[f][1]
        rows = rows_for(ds, test)
        scores = predict(f, rows)
        m = evaluate_fold(ds, test, lambda r: scores[np.searchsorted(rows, r)] > THRESHOLD)
        tpr_rows.append({"fold": str(f), "n_instances": len(test), "tpr": m.tpr, "tnr": m.tnr})
        for snr, (tpr, tnr) in sorted(m.by_snr.items()):
            snr_rows.append({"fold": str(f), "snr_db": snr, "tpr": tpr, "tnr": tnr})
        pred = predicted_assignments(ds, test, scores, params.K, params.M, THRESHOLD)
        fid = evaluate_sumrate_fidelity(params, ctx.seed, test, ds.variant.teacher, pred)
        for snr, vals in fid.items():
            rates.setdefault(snr, []).append(vals)

    tpr_rows.append({"fold": "mean", "n_instances": sum(r["n_instances"] for r in tpr_rows),
                     "tpr": _mean(r["tpr"] for r in tpr_rows), "tnr": _mean(r["tnr"] for r in tpr_rows)})
    for snr in sorted({r["snr_db"] for r in snr_rows}):
        mine = [r for r in snr_rows if r["snr_db"] == snr and r["fold"] != "mean"]
        snr_rows.append({"fold": "mean", "snr_db": snr, "tpr": _mean(r["tpr"] for r in mine),
                         "tnr": _mean(r["tnr"] for r in mine)})
    rate_rows = []
    for snr in sorted(rates):
        per_fold = rates[snr]
        row = {"snr_db": snr}
        for key in ("cf", "teacher", "dnn"):
            row[key] = float(np.mean([p[key] for p in per_fold]))
        row["dnn_vs_teacher"] = (row["dnn"] - row["teacher"]) / row["teacher"]
        row["folds"] = len(per_fold)
        row["n_instances"] = int(sum(p["n"] for p in per_fold))
        rate_rows.append(row)
    return pd.DataFrame(tpr_rows), pd.DataFrame(snr_rows), pd.DataFrame(rate_rows)


def cmd_eval(ctx: Context, variant: str | None = None, fold=None,
             predictors: dict[Variant, Predictor] | None = None) -> list[Path]:
    written = []
    for v in _variants(variant):
        ds = ctx.load_dataset(v)
        folds = _folds(fold, ctx.cfg.folds)
        if predictors and v in predictors:
            predict = predictors[v]
        else:
            per_ue = ctx.cfg.per_ue_models and not v.centralized
            for f in folds:
                stem = model_stem(f, 0 if per_ue else None)
                if not (ctx.model_dir(v) / f"{stem}.mlp").exists():
                    raise FileNotFoundError(f"missing model {ctx.model_dir(v) / stem}.mlp; run 'uccf train' first")
            predict = stored_predictor(ctx, ds, per_ue)
        tpr, by_snr, rates = evaluate_variant(ctx, ds, predict, folds)
        for name, frame in (("tpr_tnr.csv", tpr), ("tpr_tnr_by_snr.csv", by_snr), ("sumrate_by_snr.csv", rates)):
            ctx.write(ctx.report_dir(v) / name, frame)
            written.append(ctx.report_dir(v) / name)
    return written


# ---------------------------------------------------------------- bench

def cmd_bench(ctx: Context, teacher: str = "BSR", trials: int | None = None) -> Path:
    teacher = Teacher(teacher)
    models: dict[bool, FoldModel] = {}
    for centralized in (True, False):
        v = Variant(("Centralized" if centralized else "Distributed") + teacher.value.capitalize())
        stem = model_stem(0, 0 if (ctx.cfg.per_ue_models and not centralized) else None)
        if not (ctx.model_dir(v) / f"{stem}.mlp").exists():
            raise FileNotFoundError(f"missing model {ctx.model_dir(v) / stem}.mlp; run 'uccf train --fold 0' first")
        models[centralized] = store.load_fold_model(ctx.model_dir(v), stem)
    n = ctx.cfg.bench_trials if trials is None else int(trials)
    with threadpool_limits(limits=1):
        res = benchmark_runtime(ctx.params, n, models[True], models[False], ctx.seed,
                                ctx.cfg.features, dnn_teacher=teacher)
    frame = pd.DataFrame([{"method": k, "per_ue_ms": v["per_ue_ms"], "trials": v["trials"]}
                          for k, v in res.items()])
    path = ctx.report_dir() / "runtime.csv"
    ctx.write(path, frame)
    return path


# ---------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=_env("config"), help="run or scenario file (key=value)")
    common.add_argument("--output-dir", default=_env("output_dir", "uccf_out"))
    common.add_argument("--seed", type=int, default=_env("seed"), help="master seed, overrides the file")
    common.add_argument("--threads", type=int, default=int(_env("threads", 1)),
                        help="worker cap; 1 gives bitwise reproducible output")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="uccf", description=__doc__.split("\n", 1)[0])
    sub = p.add_subparsers(dest="command", required=True)
    variants = ["all"] + [v.value for v in Variant]

    g = sub.add_parser("generate", parents=[common], help="simulate instances and write datasets")
    g.add_argument("--variant", choices=variants, default=_env("variant"))

    for name, text in (("train", "train one model per fold"), ("eval", "TPR/TNR and sum-rate reports")):
        s = sub.add_parser(name, parents=[common], help=text)
        s.add_argument("--variant", choices=variants, default=_env("variant"))
        s.add_argument("--fold", type=int, default=_env("fold"))
        s.add_argument("--per-ue-models", action="store_true",
                       default=_parse_bool(_env("per_ue_models", "false")),
                       help="one distributed network per UE instead of a pooled one")

    b = sub.add_parser("bench", parents=[common], help="per-UE AP selection run time")
    b.add_argument("--teacher", choices=[t.value for t in Teacher], default=_env("teacher", "BSR"))
    b.add_argument("--trials", type=int, default=_env("trials"))
    b.add_argument("--per-ue-models", action="store_true",
                   default=_parse_bool(_env("per_ue_models", "false")))
    return p


def make_context(args) -> Context:
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise ValueError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    if args.config is not None and not Path(args.config).exists():
        raise FileNotFoundError(f"config file {args.config} not found")
    cfg = load_run_config(args.config, overrides)
    if args.seed is not None:
        cfg.master_seed = int(args.seed)
    if getattr(args, "per_ue_models", False):
        cfg.per_ue_models = True
    if args.threads < 1:
        raise ValueError(f"--threads must be >= 1, got {args.threads}")
    return Context(cfg, Path(args.output_dir), args.threads)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s", stream=sys.stderr)
    try:
        ctx = make_context(args)
        with threadpool_limits(limits=args.threads):
            if args.command == "generate":
                cmd_generate(ctx, args.variant)
            elif args.command == "train":
                cmd_train(ctx, args.variant, args.fold)
            elif args.command == "eval":
                cmd_eval(ctx, args.variant, args.fold)
            else:
                cmd_bench(ctx, args.teacher, args.trials)
    except Exception as exc:  # one-line diagnostic, nonzero exit
        print(f"uccf {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
