"""Experiment orchestration: teacher datasets, cross-validation, evaluation.

Instance ``i`` of a run uses SNR level ``i mod n_levels`` and the seed
``instance_seed(master_seed, i)``, so any instance can be regenerated on
demand.  Nothing except features and labels is ever cached.

Feature rows are per UE: ``[q_1 .. q_W, x_k, y_k]`` where ``q`` is the
large-scale fading of the L APs (LSF variants, in dB by default) or the M
single-link rates (BSR variants).  A centralized sample concatenates the K
UE rows; a distributed sample is one row.  Centralized samples list UEs in
a canonical order (see :func:`ue_permutation`); the permutation is stored
with the dataset and undone before any rate evaluation.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import mlp
from .clustering import ClusterAssignment, apply_mask, bsr_cluster, lsf_cluster, repair_rows
from .linkrate import build_precoder, per_link_rates, sum_rate
from .netmodel import ChannelRealization, SystemParams, realize

__all__ = [
    "Teacher",
    "Variant",
    "FeatureConfig",
    "Instance",
    "Dataset",
    "Standardizer",
    "FoldModel",
    "instance_seed",
    "snr_for_instance",
    "simulate_instance",
    "ue_permutation",
    "generate_datasets",
    "generate_dataset",
    "kfold_split",
    "rows_for",
    "train_fold",
    "evaluate_tpr_tnr",
    "evaluate_fold",
    "predicted_assignments",
    "evaluate_sumrate_fidelity",
    "benchmark_runtime",
]

log = logging.getLogger(__name__)


class Teacher(str, Enum):
    LSF = "LSF"
    BSR = "BSR"


class Variant(str, Enum):
    CENTRALIZED_LSF = "CentralizedLsf"
    CENTRALIZED_BSR = "CentralizedBsr"
    DISTRIBUTED_LSF = "DistributedLsf"
    DISTRIBUTED_BSR = "DistributedBsr"

    @property
    def teacher(self) -> Teacher:
        return Teacher.LSF if self.value.endswith("Lsf") else Teacher.BSR

    @property
    def centralized(self) -> bool:
        return self.value.startswith("Centralized")

    def row_width(self, params: SystemParams) -> int:
        return (params.L if self.teacher is Teacher.LSF else params.M) + 2

    def feature_width(self, params: SystemParams) -> int:
        return self.row_width(params) * (params.K if self.centralized else 1)

    def label_width(self, params: SystemParams) -> int:
        return params.M * (params.K if self.centralized else 1)

    def layout(self, params: SystemParams) -> tuple[int, list[mlp.LayerSpec]]:
        if self.centralized:
            return mlp.centralized_layout(params.K, self.row_width(params), params.M)
        return mlp.distributed_layout(self.row_width(params), params.M)


@dataclass(frozen=True)
class FeatureConfig:
    lsf_scale: str = "db"  # "db" or "linear"
    ue_order: str = "strongest_ap"  # "strongest_ap" or "index"

    def __post_init__(self):
        if self.lsf_scale not in ("db", "linear"):
            raise ValueError(f"lsf_scale must be 'db' or 'linear', got {self.lsf_scale!r}")
        if self.ue_order not in ("strongest_ap", "index"):
            raise ValueError(f"ue_order must be 'strongest_ap' or 'index', got {self.ue_order!r}")


def instance_seed(master_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([int(master_seed), int(index)]).generate_state(1, np.uint64)[0])


def snr_for_instance(params: SystemParams, index: int) -> float:
    return params.snr_levels_db[index % len(params.snr_levels_db)]


@dataclass
class Instance:
    index: int
    seed: int
    snr_db: float
    rho_f: float
    channel: ChannelRealization
    lsf: ClusterAssignment
    sr: np.ndarray | None = None  # (K, M) single-link rates under the unclustered precoder
    bsr: ClusterAssignment | None = None


def simulate_instance(params: SystemParams, master_seed: int, index: int,
                      teachers: tuple[Teacher, ...] = (Teacher.LSF, Teacher.BSR)) -> Instance:
    seed = instance_seed(master_seed, index)
    snr = snr_for_instance(params, index)
    rho = params.rho_f(snr)
    ch = realize(params, seed)
    inst = Instance(index, seed, snr, rho, ch, lsf_cluster(ch.beta, params))
    if Teacher.BSR in teachers:
        full = build_precoder(ch.g_hat, params.precoder, params.zf_reg)
        inst.sr = per_link_rates(ch.g_hat, ch.g_tilde, full, rho, params.sigma_w2, params.bsr_rho_sqrt)
        inst.bsr = bsr_cluster(inst.sr, params.min_links)
    return inst


def teacher_assignment(inst: Instance, teacher: Teacher) -> ClusterAssignment:
    return inst.lsf if teacher is Teacher.LSF else inst.bsr


def ue_rows(inst: Instance, teacher: Teacher, params: SystemParams, fcfg: FeatureConfig) -> np.ndarray:
    """Per-UE feature rows, shape (K, W + 2), in UE index order."""
    if teacher is Teacher.LSF:
        q = inst.channel.beta.T
        if fcfg.lsf_scale == "db":
            q = 10.0 * np.log10(q)
    else:
        q = inst.sr
    return np.hstack([q, inst.channel.topology.ue_positions])


def ue_permutation(rows: np.ndarray, teacher: Teacher, params: SystemParams,
                   fcfg: FeatureConfig) -> np.ndarray:
    """Order in which a centralized sample lists the UEs.

    ``strongest_ap`` sorts UEs by the index of their strongest AP (largest
    fading for LSF rows, AP of the best single link for BSR rows), strongest
    UE first within an AP; ties keep UE index order.  It only reads the
    features themselves.
    """
    if fcfg.ue_order == "index":
        return np.arange(rows.shape[0])
    q = rows[:, :-2]
    best = np.argmax(q, axis=1)
    top = q[np.arange(len(q)), best]
    ap = best if teacher is Teacher.LSF else best // params.N
    # lexsort is stable, so exact ties keep UE index order
    return np.lexsort((-top, ap))


@dataclass
class Dataset:
    """Feature/label matrices plus the bookkeeping needed to map rows back.

    ``ue`` holds, per row, the UE index of a distributed row (shape (n,)) or
    the UE permutation of a centralized sample (shape (n, K)): position j of
    the sample belongs to UE ``ue[row, j]``.
    """

    variant: Variant
    features: np.ndarray
    labels: np.ndarray
    instance: np.ndarray
    snr_db: np.ndarray
    ue: np.ndarray
    manifest: dict[str, str] = field(default_factory=dict)

    @property
    def n_instances(self) -> int:
        return int(self.instance.max()) + 1 if len(self.instance) else 0

    def check(self, params: SystemParams) -> None:
        v = self.variant
        if self.features.shape[1] != v.feature_width(params):
            raise ValueError(f"{v.value}: feature width {self.features.shape[1]} != {v.feature_width(params)}")
        if self.labels.shape[1] != v.label_width(params):
            raise ValueError(f"{v.value}: label width {self.labels.shape[1]} != {v.label_width(params)}")
        rows = np.reshape(self.labels, (-1, params.M))
        if not np.all(rows.sum(axis=1) >= 1):
            raise ValueError(f"{v.value}: a label row has no positive link")


def _simulate_many(args) -> list[Instance]:
    params, master_seed, indices, teachers = args
    return [simulate_instance(params, master_seed, i, teachers) for i in indices]


def _instances(params, master_seed, n_instances, teachers, threads):
    if threads <= 1:
        for i in range(n_instances):
            yield simulate_instance(params, master_seed, i, teachers)
        return
    chunks = np.array_split(np.arange(n_instances), threads * 4)
    jobs = [(params, master_seed, c.tolist(), teachers) for c in chunks if len(c)]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        for batch in pool.map(_simulate_many, jobs):
            yield from batch


def generate_datasets(params: SystemParams, n_instances: int, master_seed: int,
                      variants=tuple(Variant), fcfg: FeatureConfig = FeatureConfig(),
                      threads: int = 1) -> dict[Variant, Dataset]:
    """Simulate ``n_instances`` once and build every requested variant from them."""
    n_levels = len(params.snr_levels_db)
    if n_instances < 1 or n_instances % n_levels:
        raise ValueError(f"n_instances={n_instances} must be a positive multiple of {n_levels} SNR levels")
    variants = [Variant(v) for v in variants]
    teachers = tuple(sorted({v.teacher for v in variants}, key=lambda t: t.value))
    acc = {v: ([], [], [], [], []) for v in variants}
    for inst in _instances(params, master_seed, n_instances, teachers, threads):
        for teacher in teachers:
            rows = ue_rows(inst, teacher, params, fcfg)
            a = teacher_assignment(inst, teacher).a
            for v in variants:
                if v.teacher is not teacher:
                    continue
                feats, labs, insts, snrs, ues = acc[v]
                if v.centralized:
                    perm = ue_permutation(rows, teacher, params, fcfg)
                    feats.append(rows[perm].reshape(1, -1))
                    labs.append(a[perm].reshape(1, -1))
                    ues.append(perm[None, :])
                    insts.append([inst.index])
                    snrs.append([inst.snr_db])
                else:
                    feats.append(rows)
                    labs.append(a)
                    ues.append(np.arange(params.K))
                    insts.append([inst.index] * params.K)
                    snrs.append([inst.snr_db] * params.K)
    out = {}
    for v, (feats, labs, insts, snrs, ues) in acc.items():
        ds = Dataset(
            variant=v,
            features=np.vstack(feats),
            labels=np.vstack(labs).astype(np.uint8),
            instance=np.concatenate(insts).astype(np.int64),
            snr_db=np.concatenate(snrs).astype(float),
            ue=np.concatenate(ues) if not v.centralized else np.vstack(ues),
            manifest={
                "variant": v.value,
                "teacher": v.teacher.value,
                "n_instances": str(n_instances),
                "master_seed": str(master_seed),
                "lsf_scale": fcfg.lsf_scale,
                "ue_order": fcfg.ue_order,
            },
        )
        ds.check(params)
        out[v] = ds
    return out


def generate_dataset(params: SystemParams, n_instances: int, variant: Variant | str,
                     teacher: Teacher | str, master_seed: int = 0,
                     fcfg: FeatureConfig = FeatureConfig(), threads: int = 1) -> Dataset:
    variant, teacher = Variant(variant), Teacher(teacher)
    if variant.teacher is not teacher:
        raise ValueError(f"variant {variant.value} is built from the {variant.teacher.value} teacher, not {teacher.value}")
    return generate_datasets(params, n_instances, master_seed, (variant,), fcfg, threads)[variant]


def kfold_split(n_instances: int, k: int = 5, seed: int = 0) -> list[tuple[np.ndarray, np.ndarray]]:
    """Random partition of instance indices into ``k`` near-equal test folds."""
    if k < 2:
        raise ValueError(f"need at least 2 folds, got {k}")
    if n_instances < k:
        raise ValueError(f"cannot split {n_instances} instances into {k} folds")
    perm = np.random.default_rng(seed).permutation(n_instances)
    folds = np.array_split(perm, k)
    out = []
    for i, test in enumerate(folds):
        train = np.concatenate([f for j, f in enumerate(folds) if j != i])
        out.append((np.sort(train), np.sort(test)))
    return out


def rows_for(dataset: Dataset, instances: np.ndarray) -> np.ndarray:
    """Dataset row indices whose instance is in ``instances``, in row order."""
    return np.flatnonzero(np.isin(dataset.instance, instances))


@dataclass
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, x: np.ndarray) -> "Standardizer":
        std = x.std(axis=0)
        return cls(x.mean(axis=0), np.where(std > 0, std, 1.0))

    def transform(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std


@dataclass
class FoldModel:
    model: mlp.MlpModel
    scaler: Standardizer
    history: list[tuple[float, float | None]]
    best_epoch: int

    def proba(self, features: np.ndarray) -> np.ndarray:
        return mlp.predict_proba(self.model, self.scaler.transform(features))


def train_fold(dataset: Dataset, params: SystemParams, train_instances: np.ndarray,
               cfg: mlp.TrainConfig, seed: int = 0, ue: int | None = None) -> FoldModel:
    """Fit scaler and network on the training instances of one fold.

    The early-stopping hold-out is a random ``cfg.val_fraction`` of the
    training *instances*, so sibling UE rows never straddle it.  With ``ue``
    set, only that UE's rows of a distributed dataset are used.
    """
    train_instances = np.asarray(train_instances)
    val_rows = None
    if cfg.early_stop_patience > 0:
        rng = np.random.default_rng([seed, 7])
        n_val = max(1, int(round(len(train_instances) * cfg.val_fraction)))
        shuffled = rng.permutation(train_instances)
        val_inst, train_inst = shuffled[:n_val], shuffled[n_val:]
        fit_rows = rows_for(dataset, train_inst)
        val_rows = rows_for(dataset, val_inst)
    else:
        fit_rows = rows_for(dataset, train_instances)
    if ue is not None:
        fit_rows = fit_rows[dataset.ue[fit_rows] == ue]
        if val_rows is not None:
            val_rows = val_rows[dataset.ue[val_rows] == ue]

    scaler = Standardizer.fit(dataset.features[fit_rows])
    x = scaler.transform(dataset.features[fit_rows])
    y = dataset.labels[fit_rows]
    validation = None
    if val_rows is not None and len(val_rows):
        validation = (scaler.transform(dataset.features[val_rows]), dataset.labels[val_rows])
    input_size, layers = dataset.variant.layout(params)
    model = mlp.build_network(input_size, layers, seed=seed)
    result = mlp.train(model, x, y, cfg, validation=validation)
    return FoldModel(result.model, scaler, result.history, result.best_epoch)


def evaluate_tpr_tnr(a_pred: np.ndarray, a_true: np.ndarray) -> tuple[float | None, float | None]:
    """Element-wise true-positive and true-negative rates; None when undefined."""
    a_pred = np.asarray(a_pred).astype(bool)
    a_true = np.asarray(a_true).astype(bool)
    if a_pred.shape != a_true.shape:
        raise ValueError(f"shape mismatch {a_pred.shape} vs {a_true.shape}")
    pos = int(a_true.sum())
    neg = a_true.size - pos
    tpr = int((a_pred & a_true).sum()) / pos if pos else None
    tnr = int((~a_pred & ~a_true).sum()) / neg if neg else None
    return tpr, tnr


@dataclass
class FoldMetrics:
    tpr: float | None
    tnr: float | None
    by_snr: dict[float, tuple[float | None, float | None]]


def evaluate_fold(dataset: Dataset, test_instances: np.ndarray, predict) -> FoldMetrics:
    """TPR/TNR of ``predict(rows) -> link matrix`` on one test fold."""
    rows = rows_for(dataset, test_instances)
    pred = predict(rows)
    truth = dataset.labels[rows]
    by_snr = {}
    for snr in np.unique(dataset.snr_db[rows]):
        sel = dataset.snr_db[rows] == snr
        by_snr[float(snr)] = evaluate_tpr_tnr(pred[sel], truth[sel])
    return FoldMetrics(*evaluate_tpr_tnr(pred, truth), by_snr)


def predicted_assignments(dataset: Dataset, instances: np.ndarray, proba: np.ndarray,
                          K: int, M: int, threshold: float = 0.5) -> dict[int, ClusterAssignment]:
    """Per-instance (K, M) link matrices from row-wise scores, in UE index order.

    ``proba`` holds the scores of ``rows_for(dataset, instances)``.  Rows
    with no score above the threshold get their best-scoring antenna.
    """
    rows = rows_for(dataset, instances)
    out = {}
    for i in np.unique(dataset.instance[rows]):
        sel = np.flatnonzero(dataset.instance[rows] == i)
        if dataset.variant.centralized:
            scores_sorted = proba[sel[0]].reshape(K, M)
            perm = dataset.ue[rows[sel[0]]]
            scores = np.empty_like(scores_sorted)
            scores[perm] = scores_sorted
        else:
            scores = np.empty((K, M))
            scores[dataset.ue[rows[sel]]] = proba[sel]
        links = repair_rows(scores > threshold, scores)
        out[int(i)] = ClusterAssignment(links, "PerAntenna", threshold)
    return out


def uccf_sum_rate(inst: Instance, a: ClusterAssignment, params: SystemParams) -> float:
    g_hat = apply_mask(inst.channel.g_hat, a)
    g_tilde = apply_mask(inst.channel.g_tilde, a)
    p = build_precoder(g_hat, params.precoder, params.zf_reg, mask=a.a)
    return sum_rate(g_hat, g_tilde, p, inst.rho_f, params.sigma_w2)


def evaluate_sumrate_fidelity(params: SystemParams, master_seed: int, instances, teacher: Teacher,
                              predicted: dict[int, ClusterAssignment]) -> dict[float, dict[str, float]]:
    """Mean CF, teacher-UCCF and DNN-UCCF sum-rates per SNR level.

    The unclustered network uses the all-ones assignment through the same
    code path as the clustered ones.
    """
    teacher = Teacher(teacher)
    per_snr: dict[float, list[tuple[float, float, float]]] = {}
    full = ClusterAssignment.full(params.K, params.M)
    for i in instances:
        inst = simulate_instance(params, master_seed, int(i), (teacher,))
        cf = uccf_sum_rate(inst, full, params)
        tr = uccf_sum_rate(inst, teacher_assignment(inst, teacher), params)
        dnn = uccf_sum_rate(inst, predicted[int(i)], params)
        per_snr.setdefault(inst.snr_db, []).append((cf, tr, dnn))
    out = {}
    for snr in sorted(per_snr):
        vals = np.asarray(per_snr[snr])
        out[snr] = {"cf": float(vals[:, 0].mean()), "teacher": float(vals[:, 1].mean()),
                    "dnn": float(vals[:, 2].mean()), "n": len(vals)}
    return out


def benchmark_runtime(params: SystemParams, n_trials: int, centralized: FoldModel,
                      distributed: FoldModel, master_seed: int = 0,
                      fcfg: FeatureConfig = FeatureConfig(),
                      dnn_teacher: Teacher = Teacher.BSR, repeats: int = 5) -> dict[str, dict]:
    """Median per-UE AP-selection wall time in milliseconds.

    Channels and features are prepared before the clock starts, for every
    method alike; the networks receive a float32 copy of the features.  Heuristics are timed for the whole network and divided
    by K; the BSR heuristic includes building the unclustered precoder and
    the single-link rate matrix.  DNN timings include UE ordering and use a
    float32 :class:`mlp.FrozenPredictor` with the feature standardization
    folded into its first layer; the K
    distributed inferences run as one batch and are divided by K.  Each
    trial's time is the minimum over ``repeats`` runs (timer:
    ``time.perf_counter``).
    """
    rows = {"UCCF-LSF": [], "UCCF-BSR": [], "DNN-centralized": [], "DNN-distributed": []}
    cen_net = mlp.FrozenPredictor(centralized.model, input_mean=centralized.scaler.mean,
                                  input_std=centralized.scaler.std)
    dis_net = mlp.FrozenPredictor(distributed.model, input_mean=distributed.scaler.mean,
                                  input_std=distributed.scaler.std)
    K = params.K

    def lsf():
        lsf_cluster(inst.channel.beta, params)

    def bsr():
        p = build_precoder(inst.channel.g_hat, params.precoder, params.zf_reg)
        sr = per_link_rates(inst.channel.g_hat, inst.channel.g_tilde, p, inst.rho_f,
                            params.sigma_w2, params.bsr_rho_sqrt)
        bsr_cluster(sr, params.min_links)

    def cen():
        perm = ue_permutation(feats, dnn_teacher, params, fcfg)
        links = cen_net.links(feats32[perm].reshape(1, -1)).reshape(K, params.M)
        out = np.empty_like(links)
        out[perm] = links

    def dis():
        dis_net.links(feats32)

    for t in range(n_trials):
        inst = simulate_instance(params, master_seed, t)
        feats = ue_rows(inst, dnn_teacher, params, fcfg)
        feats32 = feats.astype(np.float32)  # handed to the networks in their own precision
        for name, fn in (("UCCF-LSF", lsf), ("UCCF-BSR", bsr), ("DNN-centralized", cen), ("DNN-distributed", dis)):
            best = np.inf
            for _ in range(repeats):
                t0 = time.perf_counter()
                fn()
                best = min(best, time.perf_counter() - t0)
            rows[name].append(best * 1e3 / K)
    return {name: {"per_ue_ms": float(np.median(v)), "trials": len(v)} for name, v in rows.items()}
