"""Measurement-difference identification.

Stacking L consecutive measurements gives Z_k = O x_k + Gamma W_k + V_k.
Multiplying by an annihilator of O (orthonormal basis of its left null
space) removes the unobservable state, leaving residues that are linear
in the state and measurement noises alone:

    Zbar_k = Am Z_k = A E_k,   A = Am [Gamma, I],   E_k = [W_k; V_k].

The residue mean is linear in the drifts and the residue second moment is
linear in the unique elements of Q and R (via the Kronecker identity
(A e) kron (A e) = (A kron A)(e kron e)), so both stages reduce to
pseudo-inverse solves of known maps.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DriftUnidentifiableError, NoResidueError, UnidentifiableError
from .model import (
    ClockParams,
    EnsembleModel,
    EnsembleParams,
    assemble_ensemble,
    upper_triangle_pairs,
)
from .numerics import left_null_space, weighted_least_squares
from .report import EstimateReport
from .simulate import MeasurementRecord, decimate

__all__ = [
    "MdmConfig",
    "MdmSystem",
    "build_mdm_system",
    "build_structure_matrices",
    "compute_residues",
    "residue_mean_from_drifts",
    "residue_second_moment_from_cov",
    "solve_drifts_from_mean",
    "estimate_drifts_mdm",
    "solve_theta_alpha_from_moment",
    "estimate_theta_alpha",
    "theta_alpha_from_params",
    "theta_alpha_names",
    "estimate_mdm",
]

_POSITIVE_FLOOR = np.finfo(float).tiny


@dataclass(frozen=True)
class MdmConfig:
    """Window length L (>= 2) and resampling period for the MDM method."""

    L: int = 5
    ts_target_s: float = 5000.0

    def validate(self) -> None:
        if int(self.L) != self.L or self.L < 2:
            raise ValueError(f"L must be an integer >= 2, got {self.L}")
        if self.ts_target_s <= 0.0:
            raise ValueError(f"ts_target_s must be > 0, got {self.ts_target_s}")


@dataclass(frozen=True)
class MdmSystem:
    """Precomputed matrices of the residue construction.

    O          : (L n_z, 2n) stacked observation matrix [H; HF; ...]
    Gamma      : (L n_z, (L-1) 2n) noise propagation stack
    Am         : (n_aO, L n_z) annihilator, Am O = 0
    A          : (n_aO, n_E) residue map Am [Gamma, I]
    drift_map_pivot / drift_map_rest : residue-mean maps for d^(1) and d^(2..n)
    theta_map  : (n_aO^2, n(n+3)/2) residue-second-moment map
    """

    O: np.ndarray
    Gamma: np.ndarray
    Am: np.ndarray
    A: np.ndarray
    drift_map_pivot: np.ndarray
    drift_map_rest: np.ndarray
    theta_map: np.ndarray
    B_Q: tuple[np.ndarray, ...]
    B_R: tuple[np.ndarray, ...]
    Ts: float
    L: int
    n: int

    @property
    def n_z(self) -> int:
        return self.n - 1

    @property
    def n_residue(self) -> int:
        return self.Am.shape[0]

    @property
    def n_noise(self) -> int:
        return self.A.shape[1]


def build_structure_matrices(
    n: int, n_z: int, ts: float
) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Basis matrices (B_Q^(i), B_R^(i)) such that Q = sum theta_i B_Q^(i)
    and R = sum theta_i B_R^(i) for theta = [q1 x n, q2 x n, r upper].

    The q1 entries select the white-FM part of one clock's 2x2 block, the
    q2 entries the random-walk part, and the r entries place ones at the
    matching (symmetric) positions of R.
    """
    white_block = np.array([[ts, 0.0], [0.0, 0.0]])
    walk_block = np.array(
        [[ts**3 / 3.0, ts**2 / 2.0], [ts**2 / 2.0, ts]]
    )
    B_Q: list[np.ndarray] = []
    B_R: list[np.ndarray] = []
    for i in range(n):
        selector = np.zeros((n, n))
        selector[i, i] = 1.0
        B_Q.append(np.kron(selector, white_block))
        B_R.append(np.zeros((n_z, n_z)))
    for i in range(n):
        selector = np.zeros((n, n))
        selector[i, i] = 1.0
        B_Q.append(np.kron(selector, walk_block))
        B_R.append(np.zeros((n_z, n_z)))
    for i, j in upper_triangle_pairs(n_z):
        indicator = np.zeros((n_z, n_z))
        indicator[i - 1, j - 1] = 1.0
        indicator[j - 1, i - 1] = 1.0
        B_Q.append(np.zeros((2 * n, 2 * n)))
        B_R.append(indicator)
    return B_Q, B_R


def theta_alpha_names(n: int) -> list[str]:
    names = [f"q1_clk{i + 1}" for i in range(n)]
    names += [f"q2_clk{i + 1}" for i in range(n)]
    names += [f"r_{i}{j}" for i, j in upper_triangle_pairs(n - 1)]
    return names


def theta_alpha_from_params(params: EnsembleParams) -> np.ndarray:
    """[q1 x n, q2 x n, upper triangle of R]; drifts are excluded."""
    q1 = [c.q1 for c in params.clocks]
    q2 = [c.q2 for c in params.clocks]
    r = [params.R[i - 1, j - 1] for i, j in upper_triangle_pairs(params.n_z)]
    return np.concatenate([q1, q2, r])


def build_mdm_system(model: EnsembleModel, L: int) -> MdmSystem:
    """Assemble the annihilator, residue map and moment maps for window L.

    Only the structural parts of the model (F, H, Ts, n) are used; the
    noise parameters being estimated never enter. Raises NoResidueError
    when O has full row rank (the common-mode pivot subspace leaves
    rank(O) = 2(n-1), so L = 2 always has an empty null space).
    """
    if int(L) != L or L < 2:
        raise ValueError(f"L must be an integer >= 2, got {L}")
    L = int(L)
    H, F, ts, n = model.H, model.F, model.Ts, model.n
    n_z, n_x = model.n_z, model.n_x

    hf_powers = [H.copy()]
    for _ in range(L - 1):
        hf_powers.append(hf_powers[-1] @ F)
    O = np.vstack(hf_powers)

    Gamma = np.zeros((L * n_z, (L - 1) * n_x))
    for r in range(1, L):
        for c in range(r):
            Gamma[r * n_z : (r + 1) * n_z, c * n_x : (c + 1) * n_x] = hf_powers[r - 1 - c]

    Am = left_null_space(O, tol_rel=1e-10)
    if Am.shape[0] == 0:
        raise NoResidueError(
            f"stacked observation matrix has full row rank for L={L}, n={n}; "
            "increase L to obtain a residue"
        )
    A = Am @ np.hstack([Gamma, np.eye(L * n_z)])

    step_mean = np.array([[ts**2 / 2.0], [ts]])
    pivot_sel = np.zeros((n, 1))
    pivot_sel[0, 0] = 1.0
    rest_sel = np.vstack([np.zeros((1, n - 1)), np.eye(n - 1)])
    ones_l = np.ones((L - 1, 1))
    ups_pivot = np.kron(ones_l, np.kron(pivot_sel, step_mean))
    ups_rest = np.kron(ones_l, np.kron(rest_sel, step_mean))
    am_gamma = Am @ Gamma
    drift_map_pivot = am_gamma @ ups_pivot
    drift_map_rest = am_gamma @ ups_rest

    B_Q, B_R = build_structure_matrices(n, n_z, ts)
    theta_map = np.empty((Am.shape[0] ** 2, len(B_Q)))
    for col, (bq, br) in enumerate(zip(B_Q, B_R)):
        # (A kron A) vec(M) = vec(A M A^T); built per column to avoid the
        # explicit n_aO^2 x n_E^2 Kronecker product
        block = np.zeros((A.shape[1], A.shape[1]))
        block[: (L - 1) * n_x, : (L - 1) * n_x] = np.kron(np.eye(L - 1), bq)
        block[(L - 1) * n_x :, (L - 1) * n_x :] = np.kron(np.eye(L), br)
        theta_map[:, col] = (A @ block @ A.T).reshape(-1, order="F")

    return MdmSystem(
        O=O,
        Gamma=Gamma,
        Am=Am,
        A=A,
        drift_map_pivot=drift_map_pivot,
        drift_map_rest=drift_map_rest,
        theta_map=theta_map,
        B_Q=tuple(B_Q),
        B_R=tuple(B_R),
        Ts=ts,
        L=L,
        n=n,
    )


def compute_residues(record: MeasurementRecord, system: MdmSystem) -> np.ndarray:
    """Residues Zbar_k = Am [z_k; ...; z_{k+L-1}], shape (n_aO, N-L+2)."""
    if record.n_z != system.n_z:
        raise ValueError(
            f"record has {record.n_z} channels, system expects {system.n_z}"
        )
    if abs(record.Ts - system.Ts) > 1e-9 * system.Ts:
        raise ValueError(f"record Ts={record.Ts} does not match system Ts={system.Ts}")
    samples = record.Z.shape[1]
    if samples < system.L:
        raise ValueError(f"record has {samples} samples, need at least L={system.L}")
    count = samples - system.L + 1
    stacked = np.vstack([record.Z[:, r : r + count] for r in range(system.L)])
    return system.Am @ stacked


def residue_mean_from_drifts(system: MdmSystem, drifts: np.ndarray) -> np.ndarray:
    """Model-implied residue mean for the full drift vector d^(1..n)."""
    d = np.asarray(drifts, dtype=float).ravel()
    if d.size != system.n:
        raise ValueError(f"expected {system.n} drifts, got {d.size}")
    return system.drift_map_pivot[:, 0] * d[0] + system.drift_map_rest @ d[1:]


def residue_second_moment_from_cov(
    system: MdmSystem, Q: np.ndarray, R: np.ndarray
) -> np.ndarray:
    """Model-implied vec of the residue covariance for given Q and R."""
    L, n_x = system.L, 2 * system.n
    block = np.zeros((system.n_noise, system.n_noise))
    block[: (L - 1) * n_x, : (L - 1) * n_x] = np.kron(np.eye(L - 1), Q)
    block[(L - 1) * n_x :, (L - 1) * n_x :] = np.kron(np.eye(L), R)
    return (system.A @ block @ system.A.T).reshape(-1, order="F")


def solve_drifts_from_mean(
    mean: np.ndarray, system: MdmSystem, d1: float = 0.0
) -> tuple[np.ndarray, dict]:
    """Drifts d^(2..n) from a residue mean, with the pivot drift known."""
    mean = np.asarray(mean, dtype=float).ravel()
    rhs = mean - system.drift_map_pivot[:, 0] * d1
    n_rest = system.n - 1
    x, diag = weighted_least_squares(
        system.drift_map_rest, rhs, np.ones(mean.size)
    )
    if diag.rank < n_rest:
        raise DriftUnidentifiableError(
            f"drift map rank {diag.rank} < {n_rest}; increase the window L"
        )
    return x, {"residual": diag.residual_norm, "cond": diag.condition_number}


def estimate_drifts_mdm(
    residues: np.ndarray, system: MdmSystem, d1: float = 0.0
) -> tuple[np.ndarray, dict]:
    """Drifts from the sample mean of the residues."""
    return solve_drifts_from_mean(residues.mean(axis=1), system, d1=d1)


def _lstsq_cov_diag(M: np.ndarray) -> np.ndarray:
    """diag((M^T M)^-1) through a column-equilibrated SVD."""
    scale = np.linalg.norm(M, axis=0)
    scale[scale == 0.0] = 1.0
    _, s, Vt = np.linalg.svd(M / scale, full_matrices=False)
    rank = int(np.sum(s > 1e-12 * s[0])) if s.size and s[0] > 0 else 0
    if rank == 0:
        return np.full(M.shape[1], np.inf)
    diag = ((Vt[:rank].T / s[:rank]) ** 2).sum(axis=1)
    return diag / scale**2


def solve_theta_alpha_from_moment(
    moment: np.ndarray, system: MdmSystem
) -> tuple[np.ndarray, dict]:
    """Noise parameters theta_alpha from a vectorised residue covariance.

    Solved as a plain (minimum-norm) least squares on the moment map;
    full column rank is required, otherwise the parameters are not
    identifiable and a larger L is suggested. Negative variance entries
    (q1, q2, r_ii) are clamped with flags; standard errors are approximate
    because overlapping residues are serially correlated.
    """
    moment = np.asarray(moment, dtype=float).ravel()
    n = system.n
    n_par = system.theta_map.shape[1]
    x, diag = weighted_least_squares(system.theta_map, moment, np.ones(moment.size))
    if diag.rank < n_par:
        raise UnidentifiableError(
            f"moment map rank {diag.rank} < {n_par} parameters (n={n}, "
            f"L={system.L}); increase the window L",
        )
    dof = max(moment.size - diag.rank, 1)
    sigma_fit = diag.residual_norm / np.sqrt(dof)
    se = np.sqrt(_lstsq_cov_diag(system.theta_map)) * sigma_fit

    names = theta_alpha_names(n)
    variance_like = list(range(2 * n))
    for t, (i, j) in enumerate(upper_triangle_pairs(n - 1)):
        if i == j:
            variance_like.append(2 * n + t)
    clamped = []
    for idx in variance_like:
        if x[idx] < 0.0:
            x[idx] = max(1e-3 * se[idx], _POSITIVE_FLOOR)
            clamped.append(names[idx])
    diagnostics = {
        "residual": diag.residual_norm,
        "cond": diag.condition_number,
        "se_approx": se,
        "clamped": clamped,
    }
    return x, diagnostics


def estimate_theta_alpha(
    residues: np.ndarray,
    drifts: np.ndarray,
    system: MdmSystem,
    d1: float = 0.0,
) -> tuple[np.ndarray, dict]:
    """Noise parameters from drift-corrected residue second moments."""
    correction = residue_mean_from_drifts(
        system, np.concatenate([[d1], np.asarray(drifts, dtype=float).ravel()])
    )
    centred = residues - correction[:, None]
    count = centred.shape[1]
    outer = (centred @ centred.T) / count
    return solve_theta_alpha_from_moment(outer.reshape(-1, order="F"), system)


def estimate_mdm(
    record: MeasurementRecord,
    config: MdmConfig | None = None,
    d1: float = 0.0,
) -> EstimateReport:
    """Full MDM pipeline: resample, build system, residues, drifts, noise."""
    config = config or MdmConfig()
    config.validate()
    ratio = config.ts_target_s / record.Ts
    factor = int(round(ratio))
    if factor < 1 or abs(ratio - factor) > 1e-9 * factor:
        raise ValueError(
            f"ts_target_s={config.ts_target_s} is not an integer multiple of "
            f"record Ts={record.Ts}"
        )
    resampled = decimate(record, factor) if factor > 1 else record

    n = record.n_z + 1
    structural = assemble_ensemble(
        EnsembleParams(
            clocks=tuple(ClockParams(q1=1.0, q2=1.0, d=0.0) for _ in range(n)),
            R=np.eye(n - 1),
        ),
        resampled.Ts,
    )
    system = build_mdm_system(structural, config.L)
    residues = compute_residues(resampled, system)
    drifts, drift_diag = estimate_drifts_mdm(residues, system, d1=d1)
    theta_alpha, diagnostics = estimate_theta_alpha(residues, drifts, system, d1=d1)

    q1 = theta_alpha[:n]
    q2 = theta_alpha[n : 2 * n]
    r_upper = theta_alpha[2 * n :]
    clocks = [ClockParams(q1=q1[0], q2=q2[0], d=d1)]
    clocks += [
        ClockParams(q1=q1[i], q2=q2[i], d=drifts[i - 1]) for i in range(1, n)
    ]
    diagnostics = dict(diagnostics)
    diagnostics["drift_residual"] = drift_diag["residual"]
    diagnostics["drift_cond"] = drift_diag["cond"]
    diagnostics["L"] = system.L
    diagnostics["ts_target_s"] = resampled.Ts
    diagnostics["n_residue_dim"] = system.n_residue
    return EstimateReport(
        method="mdm",
        ts_seconds=record.Ts,
        clocks=tuple(clocks),
        r_upper=r_upper,
        diagnostics=diagnostics,
    )
