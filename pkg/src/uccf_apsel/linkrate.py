"""Precoders and downlink rate evaluation.

The same :func:`sum_rate` serves the fully cooperative network (unmasked
channels) and the user-centric one (masked channels and precoder), so the
two are directly comparable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .netmodel import Precoding

__all__ = [
    "RateError",
    "Precoder",
    "build_precoder",
    "sum_rate",
    "per_link_rates",
]

_LN2 = np.log(2.0)


class RateError(ArithmeticError):
    """Raised when a rate evaluation is ill-posed or not finite."""


@dataclass(frozen=True)
class Precoder:
    p: np.ndarray  # (M, K) complex, columns per UE
    mode: Precoding
    scale: float  # global factor applied after per-column normalization

    def column_power(self) -> np.ndarray:
        """``p_k^H p_k`` per UE."""
        return np.einsum("mk,mk->k", self.p, self.p.conj()).real


def build_precoder(g_hat_masked: np.ndarray, mode: Precoding | str = Precoding.ZF,
                   reg: float = 1e-9, mask: np.ndarray | None = None) -> Precoder:
    """MRT or (regularized) ZF precoder with per-antenna power normalization.

    Columns are first scaled to unit norm, then the whole matrix is scaled so
    that the busiest antenna radiates exactly unit power.  Antennas that serve
    nobody (all-zero rows of the input) keep all-zero rows.

    ``mask`` is the (K, M) 0/1 link matrix of a user-centric cluster.  When
    given, UE k's column is zeroed on every antenna outside its cluster
    before normalization, since those antennas do not carry its data.  ZF
    is then only approximately interference-free.
    """
    mode = Precoding(mode)
    g = np.asarray(g_hat_masked, dtype=complex)
    col_energy = np.einsum("mk,mk->k", g, g.conj()).real
    orphans = np.flatnonzero(col_energy == 0.0)
    if orphans.size:
        raise RateError(f"UE {int(orphans[0])} has no serving antenna")

    if mode is Precoding.MRT:
        p = g.conj()
    else:
        K = g.shape[1]
        gram = g.T @ g.conj()
        if reg == 0.0:
            rank = np.linalg.matrix_rank(gram)
            if rank < K:
                raise RateError(f"ZF system is singular: rank {rank} < {K} UEs")
        p = g.conj() @ np.linalg.solve(gram + reg * np.eye(K), np.eye(K))
    if mask is not None:
        p = p * np.asarray(mask).T

    p = p / np.linalg.norm(p, axis=0)
    peak = np.max(np.einsum("mk,mk->m", p, p.conj()).real)
    scale = 1.0 / np.sqrt(peak)
    return Precoder(p=p * scale, mode=mode, scale=float(scale))


def _hermitian_logdet(a: np.ndarray) -> float:
    # natural log of det for Hermitian positive definite input
    chol = np.linalg.cholesky(a)
    return 2.0 * float(np.sum(np.log(np.abs(np.diagonal(chol)))))


def sum_rate(g_hat: np.ndarray, g_tilde: np.ndarray, p: Precoder | np.ndarray,
             rho_f: float, sigma_w2: float = 1.0) -> float:
    """Network sum-rate ``log2 det(I + R)`` in bits/s/Hz, CSI error as noise.

    With ``S = G_hat^T P`` and ``Q = rho G_tilde^T P P^H G_tilde^* + sigma^2 I``
    we have ``I + R = (rho S S^H + Q) Q^{-1}``, so the determinant is the
    ratio of two Hermitian positive-definite determinants, each taken from a
    Cholesky factor.  ``R`` is never formed.
    """
    pm = p.p if isinstance(p, Precoder) else np.asarray(p)
    if g_hat.shape != pm.shape or g_tilde.shape != pm.shape:
        raise ValueError(f"shape mismatch: g_hat {g_hat.shape}, g_tilde {g_tilde.shape}, P {pm.shape}")
    K = pm.shape[1]
    s = g_hat.T @ pm
    e = g_tilde.T @ pm
    q = rho_f * (e @ e.conj().T) + sigma_w2 * np.eye(K)
    total = q + rho_f * (s @ s.conj().T)
    try:
        rate = (_hermitian_logdet(total) - _hermitian_logdet(q)) / _LN2
    except np.linalg.LinAlgError as exc:
        raise RateError(f"sum-rate covariance not positive definite: {exc}") from None
    if not np.isfinite(rate):
        raise RateError(f"non-finite sum-rate {rate!r}")
    if rate < -1e-9:
        raise RateError(f"negative sum-rate {rate!r}")
    return max(rate, 0.0)


def per_link_rates(g_hat: np.ndarray, g_tilde: np.ndarray, p: Precoder | np.ndarray,
                   rho_f: float, sigma_w2: float = 1.0, rho_sqrt: bool = True) -> np.ndarray:
    """Single-link rate from each antenna ``m`` to each UE ``k``, shape (K, M).

    ``rho_sqrt`` scales the link by ``sqrt(rho_f)`` (the default); set it to
    False to use ``rho_f`` like the sum-rate does.
    """
    pm = p.p if isinstance(p, Precoder) else np.asarray(p)
    if g_hat.shape != pm.shape or g_tilde.shape != pm.shape:
        raise ValueError(f"shape mismatch: g_hat {g_hat.shape}, g_tilde {g_tilde.shape}, P {pm.shape}")
    power = np.einsum("mk,mk->k", pm, pm.conj()).real
    gain = np.sqrt(rho_f) if rho_sqrt else rho_f
    sig = gain * np.abs(g_hat.T) ** 2 * power[:, None]
    err = gain * np.abs(g_tilde.T) ** 2 * power[:, None]
    sr = np.log2(1.0 + sig / (err + sigma_w2))
    if not np.all(np.isfinite(sr)):
        bad = np.argwhere(~np.isfinite(sr))[0]
        raise RateError(f"non-finite link rate at UE {bad[0]}, antenna {bad[1]}")
    return sr
