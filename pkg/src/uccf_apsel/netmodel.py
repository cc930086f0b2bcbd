"""Network topology, large-scale fading and imperfect-CSI channel draws.

Every random quantity is drawn from its own sub-stream derived from an
explicit integer seed, so e.g. changing the CSI error fraction never moves
an AP or a UE.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np

__all__ = [
    "Precoding",
    "PathLossParams",
    "SystemParams",
    "Topology",
    "ChannelRealization",
    "substream",
    "generate_topology",
    "large_scale_fading",
    "draw_channel",
    "realize",
    "load_scenario",
    "dump_scenario",
]

# sub-stream identifiers
_TOPOLOGY, _AP_LAYOUT, _SHADOWING, _FADING, _CSI_ERROR = range(5)


class Precoding(str, Enum):
    MRT = "MRT"
    ZF = "ZF"


@dataclass(frozen=True)
class PathLossParams:
    """Log-distance path loss with log-normal shadowing."""

    exponent: float = 3.76
    ref_distance: float = 100.0
    shadow_sigma_db: float = 8.0
    min_distance: float = 10.0

    def __post_init__(self):
        if not self.exponent > 0:
            raise ValueError(f"path-loss exponent must be > 0, got {self.exponent}")
        if not self.ref_distance > 0:
            raise ValueError(f"ref_distance must be > 0, got {self.ref_distance}")
        if not self.shadow_sigma_db >= 0:
            raise ValueError(f"shadow_sigma_db must be >= 0, got {self.shadow_sigma_db}")
        if not self.min_distance > 0:
            raise ValueError(f"min_distance must be > 0, got {self.min_distance}")


@dataclass(frozen=True)
class SystemParams:
    """Static scenario constants.

    ``rho_f`` is not stored: it is derived per SNR level with the noise
    variance pinned to one (see :meth:`rho_f`).  When ``ap_layout_seed`` is
    set, AP positions are a fixed deployment drawn once from that seed and
    only the UEs move between instances.
    """

    L: int = 16
    N: int = 4
    K: int = 32
    area_side: float = 400.0
    tau: float = 0.1
    precoder: Precoding = Precoding.ZF
    snr_levels_db: tuple[float, ...] = (0.0, 5.0, 10.0, 15.0, 20.0, 25.0)
    pl: PathLossParams = field(default_factory=PathLossParams)
    sigma_w2: float = 1.0
    zf_reg: float = 1e-9
    min_links: int = 2
    bsr_rho_sqrt: bool = True
    ap_layout_seed: int | None = 0

    def __post_init__(self):
        for name in ("L", "N", "K"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not self.area_side > 0:
            raise ValueError(f"area_side must be > 0, got {self.area_side}")
        if not 0.0 <= self.tau < 1.0:
            raise ValueError(f"tau must lie in [0, 1), got {self.tau}")
        if self.sigma_w2 != 1.0:
            raise ValueError("sigma_w2 is fixed to 1; sweep the SNR instead")
        if not self.snr_levels_db:
            raise ValueError("at least one SNR level is required")
        if not all(math.isfinite(s) for s in self.snr_levels_db):
            raise ValueError(f"non-finite SNR level in {self.snr_levels_db}")
        if not 1 <= self.min_links <= self.M:
            raise ValueError(f"min_links must lie in [1, {self.M}], got {self.min_links}")
        object.__setattr__(self, "precoder", Precoding(self.precoder))
        object.__setattr__(self, "snr_levels_db", tuple(float(s) for s in self.snr_levels_db))

    @property
    def M(self) -> int:
        return self.L * self.N

    def rho_f(self, snr_db: float) -> float:
        return self.sigma_w2 * 10.0 ** (snr_db / 10.0)

    def antenna_ap(self) -> np.ndarray:
        """AP index of every antenna row, shape (M,)."""
        return np.repeat(np.arange(self.L), self.N)


@dataclass(frozen=True)
class Topology:
    ap_positions: np.ndarray  # (L, 2) meters
    ue_positions: np.ndarray  # (K, 2) meters
    seed: int

    def distances(self) -> np.ndarray:
        """AP-UE distances, shape (L, K)."""
        diff = self.ap_positions[:, None, :] - self.ue_positions[None, :, :]
        return np.hypot(diff[..., 0], diff[..., 1])


@dataclass(frozen=True)
class ChannelRealization:
    beta: np.ndarray  # (L, K) linear power gain
    g: np.ndarray  # (M, K) true channel
    g_hat: np.ndarray  # (M, K) estimate
    g_tilde: np.ndarray  # (M, K) estimation error
    topology: Topology


def substream(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), stream]))


def generate_topology(params: SystemParams, seed: int) -> Topology:
    """Uniform AP and UE placement over the square deployment area."""
    side = params.area_side
    ue = substream(seed, _TOPOLOGY).uniform(0.0, side, size=(params.K, 2))
    ap_seed = seed if params.ap_layout_seed is None else params.ap_layout_seed
    ap = substream(ap_seed, _AP_LAYOUT).uniform(0.0, side, size=(params.L, 2))
    return Topology(ap_positions=ap, ue_positions=ue, seed=int(seed))


def large_scale_fading(topology: Topology, pl: PathLossParams, seed: int) -> np.ndarray:
    """Path loss times shadowing, one coefficient per (AP, UE) pair."""
    d = np.maximum(topology.distances(), pl.min_distance)
    z = substream(seed, _SHADOWING).standard_normal(d.shape)
    return (d / pl.ref_distance) ** (-pl.exponent) * 10.0 ** (z * pl.shadow_sigma_db / 10.0)


def _cn(rng: np.random.Generator, shape) -> np.ndarray:
    # circularly-symmetric complex Gaussian, unit variance
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / math.sqrt(2.0)


def draw_channel(beta: np.ndarray, params: SystemParams, seed: int,
                 topology: Topology | None = None) -> ChannelRealization:
    """Rayleigh fading on top of ``beta`` plus the CSI-error decomposition.

    The estimate is ``sqrt(1 - tau^2) g + tau sqrt(beta) e`` and the error is
    whatever is left, so ``g_hat + g_tilde == g`` holds by construction.
    """
    beta = np.asarray(beta, dtype=float)
    if beta.shape != (params.L, params.K):
        raise ValueError(f"beta must be {(params.L, params.K)}, got {beta.shape}")
    if not np.all(beta > 0):
        raise ValueError("beta must be strictly positive")
    sqrt_beta = np.sqrt(np.repeat(beta, params.N, axis=0))
    g = sqrt_beta * _cn(substream(seed, _FADING), sqrt_beta.shape)
    if params.tau == 0.0:
        g_hat = g.copy()
    else:
        e = _cn(substream(seed, _CSI_ERROR), sqrt_beta.shape)
        g_hat = math.sqrt(1.0 - params.tau**2) * g + params.tau * sqrt_beta * e
    return ChannelRealization(beta=beta, g=g, g_hat=g_hat, g_tilde=g - g_hat, topology=topology)


def realize(params: SystemParams, seed: int) -> ChannelRealization:
    """Topology, fading and channel for one simulation instance."""
    topo = generate_topology(params, seed)
    beta = large_scale_fading(topo, params.pl, seed)
    return draw_channel(beta, params, seed, topology=topo)


# ---------------------------------------------------------------------------
# scenario files: flat key=value text
# ---------------------------------------------------------------------------

_INT_KEYS = {"L", "N", "K", "min_links"}
_FLOAT_KEYS = {"area_side", "tau", "zf_reg"}
_PL_KEYS = {"pl.exponent", "pl.ref_distance", "pl.shadow_sigma_db", "pl.min_distance"}


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def parse_scenario(text: str) -> tuple[SystemParams, dict[str, str]]:
    """Parse scenario text into params; also returns the keys it did not consume."""
    kwargs: dict = {}
    pl: dict = {}
    extra: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in _INT_KEYS:
            kwargs[key] = int(value)
        elif key in _FLOAT_KEYS:
            kwargs[key] = float(value)
        elif key in _PL_KEYS:
            pl[key[3:]] = float(value)
        elif key == "precoder":
            kwargs["precoder"] = Precoding(value.upper())
        elif key == "snr_levels_db":
            kwargs["snr_levels_db"] = tuple(float(v) for v in value.split(",") if v.strip())
        elif key == "bsr_rho_sqrt":
            kwargs["bsr_rho_sqrt"] = _parse_bool(value)
        elif key == "ap_layout_seed":
            kwargs["ap_layout_seed"] = None if value.lower() in ("", "none", "random") else int(value)
        else:
            extra[key] = value
    if pl:
        kwargs["pl"] = PathLossParams(**pl)
    return SystemParams(**kwargs), extra


def load_scenario(path: str | Path) -> tuple[SystemParams, dict[str, str]]:
    return parse_scenario(Path(path).read_text())


def dump_scenario(params: SystemParams, extra: dict[str, object] | None = None) -> str:
    """Inverse of :func:`parse_scenario`, one key per line in a fixed order."""
    lines = [
        f"L={params.L}",
        f"N={params.N}",
        f"K={params.K}",
        f"area_side={params.area_side!r}",
        f"tau={params.tau!r}",
        f"precoder={params.precoder.value}",
        "snr_levels_db=" + ",".join(repr(s) for s in params.snr_levels_db),
        f"pl.exponent={params.pl.exponent!r}",
        f"pl.ref_distance={params.pl.ref_distance!r}",
        f"pl.shadow_sigma_db={params.pl.shadow_sigma_db!r}",
        f"pl.min_distance={params.pl.min_distance!r}",
        f"zf_reg={params.zf_reg!r}",
        f"min_links={params.min_links}",
        f"bsr_rho_sqrt={str(params.bsr_rho_sqrt).lower()}",
        f"ap_layout_seed={'none' if params.ap_layout_seed is None else params.ap_layout_seed}",
    ]
    for key, value in (extra or {}).items():
        lines.append(f"{key}={value}")
    return "\n".join(lines) + "\n"


def with_overrides(params: SystemParams, **changes) -> SystemParams:
    return replace(params, **changes)
