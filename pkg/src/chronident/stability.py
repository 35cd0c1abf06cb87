"""Empirical and analytic Allan (co)variance over a grid of averaging times.

The empirical estimator is the overlapping one: every available second
difference of length m contributes. For two channels i, j and tau = m*Ts,

    acov(i, j, m) = sum_k D_i[k] * D_j[k] / (2 tau^2 (N - 2m + 1)),
    D_c[k] = z_c[k+2m] - 2 z_c[k+m] + z_c[k],  k = 0 .. N-2m.

Second differences annihilate constants and ramps, so phase and frequency
offsets never leak into the estimates.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import EnsembleParams
from .simulate import MeasurementRecord

__all__ = [
    "TauGrid",
    "AcovEstimate",
    "log_spaced_grid",
    "empirical_acov",
    "analytic_acov",
    "clock_avar",
    "acov_variance",
    "acov_grid",
    "acov_pairs",
    "write_acov_csv",
]

# absolute floor so weights stay finite even for identically zero channels
_VAR_FLOOR_ABS = 1e-100


@dataclass(frozen=True)
class TauGrid:
    """Averaging times tau = m * Ts for increasing integer m."""

    m_values: np.ndarray
    Ts: float
    truncated: bool = False

    def __post_init__(self):
        m = np.asarray(self.m_values, dtype=np.int64)
        if m.size == 0 or m[0] < 1 or np.any(np.diff(m) <= 0):
            raise ValueError("m_values must be increasing positive integers")
        object.__setattr__(self, "m_values", m)

    @property
    def taus(self) -> np.ndarray:
        return self.m_values * self.Ts

    def __len__(self) -> int:
        return len(self.m_values)


def log_spaced_grid(ell: int, m_max: int, ts: float) -> TauGrid:
    """ell log-evenly spaced integer averaging factors in [1, m_max].

    Rounding can merge neighbours; duplicates are dropped and the grid is
    marked ``truncated`` when fewer than ell distinct values remain.
    """
    if ell < 2:
        raise ValueError(f"ell must be >= 2, got {ell}")
    if m_max < 1:
        raise ValueError(f"m_max must be >= 1, got {m_max}")
    raw = np.round(np.exp(np.linspace(0.0, np.log(m_max), ell)))
    m = np.unique(raw.astype(np.int64))
    return TauGrid(m_values=m, Ts=ts, truncated=len(m) < ell)


def empirical_acov(record: MeasurementRecord, i: int, j: int, m: int) -> float:
    """Overlapping Allan covariance of channels i and j (1-based) at m steps."""
    n = record.n_steps
    if not 1 <= i <= record.n_z or not 1 <= j <= record.n_z:
        raise ValueError(f"channel pair ({i}, {j}) out of range 1..{record.n_z}")
    if not 1 <= m <= n // 2:
        raise ValueError(f"m={m} outside 1..floor(N/2)={n // 2}")
    tau = m * record.Ts
    zi = record.Z[i - 1]
    zj = record.Z[j - 1]
    di = zi[2 * m :] - 2.0 * zi[m : -m] + zi[: -2 * m]
    dj = di if j == i else zj[2 * m :] - 2.0 * zj[m : -m] + zj[: -2 * m]
    return float(di @ dj) / (2.0 * tau**2 * (n - 2 * m + 1))


def analytic_acov(params: EnsembleParams, i: int, j: int, tau: float) -> float:
    """Model-implied Allan covariance of measurement channels i and j.

    Channel c compares clock c+1 against the pivot, so the pivot noise is
    common to every channel; for i == j this is the channel AVAR.
    """
    if tau <= 0.0:
        raise ValueError(f"tau must be > 0, got {tau}")
    if not 1 <= i <= params.n_z or not 1 <= j <= params.n_z:
        raise ValueError(f"channel pair ({i}, {j}) out of range 1..{params.n_z}")
    pivot = params.clocks[0]
    di = params.clocks[i].d - pivot.d
    dj = params.clocks[j].d - pivot.d
    r = float(params.R[i - 1, j - 1])
    value = pivot.q1 / tau + pivot.q2 * tau / 3.0 + 3.0 * r / tau**2 + di * dj * tau**2 / 2.0
    if i == j:
        clk = params.clocks[i]
        value += clk.q1 / tau + clk.q2 * tau / 3.0
    return value


def clock_avar(q1: float, q2: float, d: float, tau):
    """Single-clock AVAR q1/tau + q2*tau/3 + d^2 tau^2/2 (vectorised in tau)."""
    tau = np.asarray(tau, dtype=float)
    return q1 / tau + q2 * tau / 3.0 + d**2 * tau**2 / 2.0


def acov_variance(sigma2_hat: float, n_steps: int, m: int) -> float:
    """Approximate variance of an ACOV estimate, 2|sigma2|/nu with nu = N/m.

    nu is the conservative random-walk choice of effective degrees of
    freedom. Cross covariances can be negative, hence the absolute value,
    and a strictly positive floor keeps downstream weights finite.
    """
    if n_steps < 2 * m:
        raise ValueError(f"need N >= 2m, got N={n_steps}, m={m}")
    nu = n_steps / m
    mag = abs(float(sigma2_hat))
    return max(2.0 * mag / nu, 1e-3 * mag / nu + _VAR_FLOOR_ABS)


def acov_pairs(n_z: int) -> list[tuple[int, int]]:
    """Canonical channel-pair order: diagonals first, then (i, j) with i < j."""
    diag = [(i, i) for i in range(1, n_z + 1)]
    off = [(i, j) for i in range(1, n_z + 1) for j in range(i + 1, n_z + 1)]
    return diag + off


@dataclass(frozen=True)
class AcovEstimate:
    """ACOV estimates for all channel pairs over a tau grid.

    Rows of sigma2/var follow acov_pairs(n_z); columns follow grid.taus.
    """

    grid: TauGrid
    pairs: tuple[tuple[int, int], ...]
    sigma2: np.ndarray
    var: np.ndarray
    n_steps: int

    @property
    def n_z(self) -> int:
        count = len(self.pairs)
        # invert count = n_z (n_z + 1) / 2
        return int((np.sqrt(8 * count + 1) - 1) / 2)


def acov_grid(record: MeasurementRecord, grid: TauGrid) -> AcovEstimate:
    """Evaluate all n_z(n_z+1)/2 channel pairs on the grid, with variances.

    The second-difference matrix is shared between pairs at each m, so the
    cost is O(len(grid) * n_z * N) rather than per pair.
    """
    n = record.n_steps
    if grid.m_values[-1] > n // 2:
        raise ValueError(
            f"grid m_max={grid.m_values[-1]} exceeds floor(N/2)={n // 2}"
        )
    if abs(grid.Ts - record.Ts) > 1e-9 * record.Ts:
        raise ValueError(f"grid Ts={grid.Ts} does not match record Ts={record.Ts}")
    pairs = acov_pairs(record.n_z)
    sigma2 = np.empty((len(pairs), len(grid)))
    var = np.empty_like(sigma2)
    Z = record.Z
    for p, m in enumerate(grid.m_values):
        tau = m * record.Ts
        D = Z[:, 2 * m :] - 2.0 * Z[:, m : -m] + Z[:, : -2 * m]
        G = (D @ D.T) / (2.0 * tau**2 * (n - 2 * m + 1))
        for row, (i, j) in enumerate(pairs):
            sigma2[row, p] = G[i - 1, j - 1]
            var[row, p] = acov_variance(G[i - 1, j - 1], n, int(m))
    return AcovEstimate(
        grid=grid, pairs=tuple(pairs), sigma2=sigma2, var=var, n_steps=n
    )


def write_acov_csv(est: AcovEstimate, path: str | Path) -> None:
    """Export as CSV with columns tau_s,pair_i,pair_j,sigma2,var_sigma2."""
    taus = est.grid.taus
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("tau_s,pair_i,pair_j,sigma2,var_sigma2\n")
        for row, (i, j) in enumerate(est.pairs):
            for p, tau in enumerate(taus):
                fh.write(
                    f"{tau:.17g},{i},{j},{est.sigma2[row, p]:.17g},{est.var[row, p]:.17g}\n"
                )
