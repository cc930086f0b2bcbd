"""On-disk layout of datasets, trained models and reports.

Every CSV starts with a ``# config_hash=<hex> seed=<int>`` comment line and
then a header row.  Dataset directories hold:

``manifest.txt``
    scenario echo, master seed, variant and feature options (key=value)
``features.csv``
    centralized: ``s{j}_q{i}`` for the L (or M) fading/rate columns and
    ``s{j}_x``, ``s{j}_y`` of sample position j, positions in sample order;
    distributed: ``q{i}``, ``x``, ``y``
``labels.csv``
    centralized: ``s{j}_m{m}``, row-major (sample position, antenna);
    distributed: ``m{m}``
``rows.csv``
    ``instance``, ``snr_db`` and ``ue``: the UE index of a distributed row,
    or the space-separated UE permutation of a centralized sample
"""

from __future__ import annotations

import io
from pathlib import Path

import numpy as np
import pandas as pd

from . import mlp
from .pipeline import Dataset, FoldModel, Standardizer, Variant

__all__ = [
    "comment_line",
    "write_csv",
    "read_csv",
    "write_dataset",
    "read_dataset",
    "save_fold_model",
    "load_fold_model",
]

_FLOAT_FMT = "%.12g"
_FEATURE_FMT = "%.9g"


def comment_line(config_hash: str, seed: int) -> str:
    return f"# config_hash={config_hash} seed={seed}\n"


def write_csv(path: str | Path, frame: pd.DataFrame, config_hash: str, seed: int,
              float_format: str = _FLOAT_FMT) -> None:
    buf = io.StringIO()
    buf.write(comment_line(config_hash, seed))
    frame.to_csv(buf, index=False, float_format=float_format, lineterminator="\n")
    Path(path).write_text(buf.getvalue())


def read_csv(path: str | Path) -> pd.DataFrame:
    return pd.read_csv(path, comment="#", float_precision="round_trip")


def _feature_columns(variant: Variant, width: int, K: int) -> list[str]:
    names = [f"q{i}" for i in range(width - 2)] + ["x", "y"]
    if not variant.centralized:
        return names
    return [f"s{j}_{n}" for j in range(K) for n in names]


def _label_columns(variant: Variant, M: int, K: int) -> list[str]:
    names = [f"m{m}" for m in range(M)]
    if not variant.centralized:
        return names
    return [f"s{j}_{n}" for j in range(K) for n in names]


def write_dataset(directory: str | Path, ds: Dataset, scenario_text: str,
                  config_hash: str, seed: int, K: int, M: int) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    manifest = scenario_text + "".join(f"{k}={v}\n" for k, v in ds.manifest.items())
    (d / "manifest.txt").write_text(manifest)
    width = ds.features.shape[1] // (K if ds.variant.centralized else 1)
    feats = pd.DataFrame(ds.features, columns=_feature_columns(ds.variant, width, K))
    write_csv(d / "features.csv", feats, config_hash, seed, float_format=_FEATURE_FMT)
    labels = pd.DataFrame(ds.labels, columns=_label_columns(ds.variant, M, K))
    write_csv(d / "labels.csv", labels, config_hash, seed)
    if ds.variant.centralized:
        ue = [" ".join(str(int(u)) for u in row) for row in ds.ue]
    else:
        ue = ds.ue.astype(int)
    rows = pd.DataFrame({"instance": ds.instance, "snr_db": ds.snr_db, "ue": ue})
    write_csv(d / "rows.csv", rows, config_hash, seed, float_format="%.17g")
    return d


def read_dataset(directory: str | Path) -> Dataset:
    d = Path(directory)
    if not (d / "manifest.txt").exists():
        raise FileNotFoundError(f"no dataset at {d}")
    manifest = {}
    for line in (d / "manifest.txt").read_text().splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            manifest[k.strip()] = v.strip()
    variant = Variant(manifest["variant"])
    feats = read_csv(d / "features.csv").to_numpy(dtype=float)
    labels = read_csv(d / "labels.csv").to_numpy(dtype=np.uint8)
    rows = read_csv(d / "rows.csv")
    if variant.centralized:
        ue = np.array([[int(u) for u in str(s).split()] for s in rows["ue"]], dtype=np.int64)
    else:
        ue = rows["ue"].to_numpy(dtype=np.int64)
    return Dataset(variant, feats, labels, rows["instance"].to_numpy(dtype=np.int64),
                   rows["snr_db"].to_numpy(dtype=float), ue, manifest)


def save_fold_model(directory: str | Path, stem: str, fm: FoldModel, config_hash: str, seed: int) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    mlp.save_model(d / f"{stem}.mlp", fm.model)
    scaler = pd.DataFrame({"mean": fm.scaler.mean, "std": fm.scaler.std})
    write_csv(d / f"{stem}.scaler.csv", scaler, config_hash, seed, float_format="%.17g")
    hist = pd.DataFrame({
        "epoch": np.arange(len(fm.history)),
        "train_loss": [h[0] for h in fm.history],
        "val_loss": [np.nan if h[1] is None else h[1] for h in fm.history],
        "best": [int(i == fm.best_epoch) for i in range(len(fm.history))],
    })
    write_csv(d / f"{stem}.history.csv", hist, config_hash, seed, float_format="%.17g")


def load_fold_model(directory: str | Path, stem: str) -> FoldModel:
    d = Path(directory)
    path = d / f"{stem}.mlp"
    if not path.exists():
        raise FileNotFoundError(f"missing model {path}")
    model = mlp.load_model(path)
    sc = read_csv(d / f"{stem}.scaler.csv")
    hist = read_csv(d / f"{stem}.history.csv")
    history = [(float(t), None if np.isnan(v) else float(v)) for t, v in zip(hist["train_loss"], hist["val_loss"])]
    best = int(np.flatnonzero(hist["best"].to_numpy())[0]) if hist["best"].any() else len(history) - 1
    return FoldModel(model, Standardizer(sc["mean"].to_numpy(float), sc["std"].to_numpy(float)), history, best)
