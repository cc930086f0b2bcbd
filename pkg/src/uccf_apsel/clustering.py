"""User-centric AP clustering heuristics.

Both heuristics threshold a per-link quality against its network-wide mean
and fall back to the single best link for a UE that clears nothing:

* LSF clustering works per AP on the large-scale fading coefficients and
  hands a selected AP's antennas to the UE as a block.
* BSR clustering works per antenna on the single-link rates and then tops
  every UE up to ``min_links`` antennas, best rate first.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

__all__ = [
    "Granularity",
    "ClusterAssignment",
    "lsf_threshold",
    "lsf_cluster",
    "bsr_cluster",
    "apply_mask",
    "repair_rows",
    "write_assignment",
    "read_assignment",
]


class Granularity(str, Enum):
    PER_AP = "PerAp"
    PER_ANTENNA = "PerAntenna"


@dataclass(frozen=True)
class ClusterAssignment:
    """Binary (K, M) link matrix; row k is UE k's serving set."""

    a: np.ndarray
    granularity: Granularity
    threshold: float

    def __post_init__(self):
        a = np.asarray(self.a)
        if a.ndim != 2:
            raise ValueError(f"assignment must be 2-D, got shape {a.shape}")
        if not np.isin(a, (0, 1)).all():
            raise ValueError("assignment entries must be 0 or 1")
        empty = np.flatnonzero(a.sum(axis=1) == 0)
        if empty.size:
            raise ValueError(f"UE {int(empty[0])} is served by no antenna")
        a = a.astype(np.uint8)
        a.setflags(write=False)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "granularity", Granularity(self.granularity))

    @property
    def K(self) -> int:
        return self.a.shape[0]

    @property
    def M(self) -> int:
        return self.a.shape[1]

    def serving_set(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.a[k])

    @classmethod
    def full(cls, K: int, M: int) -> "ClusterAssignment":
        """Every antenna serves every UE (the unclustered network)."""
        return cls(np.ones((K, M), dtype=np.uint8), Granularity.PER_ANTENNA, 0.0)


def lsf_threshold(beta: np.ndarray, N: int = 1) -> float:
    """Mean large-scale fading coefficient over all antenna-UE pairs."""
    # replicating each AP row N times leaves the mean unchanged
    return float(np.mean(beta))


def _threshold_rows(score: np.ndarray, alpha: float) -> np.ndarray:
    sel = score >= alpha
    empty = ~sel.any(axis=1)
    # argmax returns the lowest index on ties
    sel[np.flatnonzero(empty), np.argmax(score[empty], axis=1)] = True
    return sel


def lsf_cluster(beta: np.ndarray, params) -> ClusterAssignment:
    """Per-AP selection on ``beta`` (L, K), expanded to antennas."""
    beta = np.asarray(beta, dtype=float)
    alpha = lsf_threshold(beta, params.N)
    per_ap = _threshold_rows(beta.T, alpha)
    return ClusterAssignment(np.repeat(per_ap, params.N, axis=1), Granularity.PER_AP, alpha)


def bsr_cluster(sr: np.ndarray, min_links: int = 2) -> ClusterAssignment:
    """Per-antenna selection on the single-link rate matrix ``sr`` (K, M)."""
    sr = np.asarray(sr, dtype=float)
    K, M = sr.shape
    if not 1 <= min_links <= M:
        raise ValueError(f"min_links must lie in [1, {M}], got {min_links}")
    if not np.all(np.isfinite(sr)):
        raise ValueError("link rates must be finite")
    alpha = float(np.mean(sr))
    sel = _threshold_rows(sr, alpha)
    short = np.flatnonzero(sel.sum(axis=1) < min_links)
    if short.size:
        # stable sort keeps lower antenna indices first among equal rates
        order = np.argsort(-sr[short], axis=1, kind="stable")
        for row, k in enumerate(short):
            missing = min_links - int(sel[k].sum())
            for m in order[row]:
                if missing == 0:
                    break
                if not sel[k, m]:
                    sel[k, m] = True
                    missing -= 1
    return ClusterAssignment(sel, Granularity.PER_ANTENNA, alpha)


def apply_mask(g: np.ndarray, a: ClusterAssignment | np.ndarray) -> np.ndarray:
    """Zero UE k's channel column on antennas outside its serving set."""
    mask = a.a if isinstance(a, ClusterAssignment) else np.asarray(a)
    if mask.shape != (g.shape[1], g.shape[0]):
        raise ValueError(f"mask shape {mask.shape} does not match channel {g.shape}")
    return g * mask.T


def repair_rows(pred: np.ndarray, scores: np.ndarray) -> np.ndarray:
    """Give every empty row of ``pred`` its highest-scoring antenna."""
    pred = np.array(pred, dtype=np.uint8)
    empty = np.flatnonzero(pred.sum(axis=1) == 0)
    pred[empty, np.argmax(np.asarray(scores)[empty], axis=1)] = 1
    return pred


def write_assignment(path: str | Path, a: ClusterAssignment) -> None:
    """0/1 CSV grid below a one-line ``K,M,granularity,threshold`` header."""
    lines = [f"{a.K},{a.M},{a.granularity.value},{a.threshold!r}"]
    lines += [",".join(str(int(v)) for v in row) for row in a.a]
    Path(path).write_text("\n".join(lines) + "\n")


def read_assignment(path: str | Path) -> ClusterAssignment:
    header, *rows = Path(path).read_text().strip().splitlines()
    K, M, gran, thr = header.split(",")
    a = np.array([[int(v) for v in row.split(",")] for row in rows], dtype=np.uint8)
    if a.shape != (int(K), int(M)):
        raise ValueError(f"{path}: header says {K}x{M}, grid is {a.shape}")
    return ClusterAssignment(a, Granularity(gran), float(thr))
