"""Gain synthesis: LQR baseline and the certified least-squares fit.

The fit solves::

    minimise   sum_i |K dx_i + u_i|^2
    subject to sigma_max(A - B K) <= 1 - margin

by changing variables to the closed-loop matrix ``M = A - B K`` (``B`` is
diagonal and invertible), where the constraint is a spectral-norm ball
with a closed-form projection.
"""

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import linalg2
from .certify import Certificate, Gain, certify_gain, closed_loop
from .model import DomainError


class SolverError(RuntimeError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


@dataclass(frozen=True)
class LqrWeights:
    Q: np.ndarray
    R_cost: np.ndarray

    def __post_init__(self):
        Q = np.array(self.Q, dtype=float).reshape(2, 2)
        R = np.array(self.R_cost, dtype=float).reshape(2, 2)
        for name, S in (("Q", Q), ("R_cost", R)):
            if np.abs(S - S.T).max() > 1e-12 * max(1.0, np.abs(S).max()):
                raise DomainError(f"{name} must be symmetric")
        lo_q = linalg2.sym_eigvals(Q[0, 0], Q[0, 1], Q[1, 1])[0]
        lo_r = linalg2.sym_eigvals(R[0, 0], R[0, 1], R[1, 1])[0]
        if lo_q < -1e-12 * max(1.0, np.abs(Q).max()):
            raise DomainError("Q must be positive semidefinite")
        if not lo_r > 0:
            raise DomainError("R_cost must be positive definite")
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "R_cost", R)

    @classmethod
    def reference(cls, plant, q=(1.0, 0.1), r_scale=5.0):
        """``Q = diag(q)`` and ``R_cost = r_scale * B``."""
        return cls(np.diag(q), r_scale * plant.B)

    @classmethod
    def parse(cls, plant, q="1 0.1", r_cost="5B"):
        """Weights from text: ``q`` is 2 (diagonal) or 4 (row-major) numbers;
        ``r_cost`` is 4 numbers or ``"<scale>B"`` for a multiple of ``B``."""
        qv = [float(v) for v in str(q).replace(",", " ").split()]
        if len(qv) == 2:
            Q = np.diag(qv)
        elif len(qv) == 4:
            Q = np.array(qv).reshape(2, 2)
        else:
            raise DomainError(f"Q needs 2 or 4 numbers, got {q!r}")
        text = str(r_cost).strip()
        if text.upper().endswith("B"):
            scale = text[:-1].strip().rstrip("*").strip()
            R = (float(scale) if scale else 1.0) * plant.B
        else:
            rv = [float(v) for v in text.replace(",", " ").split()]
            if len(rv) != 4:
                raise DomainError(f"R_cost needs 4 numbers or '<scale>B', got {r_cost!r}")
            R = np.array(rv).reshape(2, 2)
        return cls(Q, R)

    def stage_cost(self, dx, du):
        return float(dx @ self.Q @ dx + du @ self.R_cost @ du)


def riccati_step(A, B, Q, R, P):
    BtPA = B.T @ P @ A
    return Q + A.T @ P @ A - BtPA.T @ np.linalg.solve(R + B.T @ P @ B, BtPA)


def riccati_residual(A, B, Q, R, P):
    return float(np.linalg.norm(P - riccati_step(A, B, Q, R, P)))


def lqr_gain(plant, weights, rtol=1e-12, max_iter=1_000_000, return_cost=False):
    """Infinite-horizon discrete LQR gain by iterating the Riccati recursion from ``P = Q``."""
    A, B = plant.A, plant.B
    Q, R = weights.Q, weights.R_cost
    P = Q.copy()
    for it in range(1, max_iter + 1):
        P_new = riccati_step(A, B, Q, R, P)
        P_new = 0.5 * (P_new + P_new.T)
        change = np.linalg.norm(P_new - P)
        P = P_new
        if change <= rtol * np.linalg.norm(P) or change == 0.0:
            break
    else:
        raise SolverError(
            f"Riccati iteration did not converge in {max_iter} iterations",
            {"relative_change": float(change / max(np.linalg.norm(P), 1e-300))},
        )
    K = np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)
    rep = certify_gain(plant, K)
    gain = Gain(K, Certificate(rep.sigma_closed) if rep.feasible else None)
    return (gain, P) if return_cost else gain


# --- data sets ---------------------------------------------------------------


@dataclass
class Dataset:
    """State-deviation / input-deviation pairs, one row per sample."""

    dx: np.ndarray
    u: np.ndarray
    traj_id: np.ndarray
    t: np.ndarray
    provenance: dict = field(default_factory=dict)

    CSV_HEADER = ("traj_id", "t", "dx_d", "dx_q", "u_v", "u_delta")

    def __post_init__(self):
        self.dx = np.asarray(self.dx, dtype=float).reshape(-1, 2)
        self.u = np.asarray(self.u, dtype=float).reshape(-1, 2)
        self.traj_id = np.asarray(self.traj_id, dtype=int).reshape(-1)
        self.t = np.asarray(self.t, dtype=int).reshape(-1)
        n = len(self.dx)
        if not (len(self.u) == len(self.traj_id) == len(self.t) == n):
            raise DomainError("dataset columns have different lengths")
        if not (np.all(np.isfinite(self.dx)) and np.all(np.isfinite(self.u))):
            raise DomainError("dataset contains non-finite entries")

    def __len__(self):
        return len(self.dx)

    @classmethod
    def from_pairs(cls, dx, u):
        dx = np.asarray(dx, dtype=float).reshape(-1, 2)
        return cls(dx, u, np.zeros(len(dx), dtype=int), np.arange(len(dx)))

    @classmethod
    def concat(cls, parts, provenance=None):
        parts = list(parts)
        if not parts:
            return cls(np.zeros((0, 2)), np.zeros((0, 2)), [], [], provenance or {})
        return cls(
            np.concatenate([p.dx for p in parts]),
            np.concatenate([p.u for p in parts]),
            np.concatenate([p.traj_id for p in parts]),
            np.concatenate([p.t for p in parts]),
            provenance or {},
        )

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.CSV_HEADER)
            for k, t, dx, u in zip(self.traj_id, self.t, self.dx, self.u):
                w.writerow([int(k), int(t), repr(float(dx[0])), repr(float(dx[1])), repr(float(u[0])), repr(float(u[1]))])

    @classmethod
    def read_csv(cls, path):
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        return cls(
            dx=[[float(r["dx_d"]), float(r["dx_q"])] for r in rows],
            u=[[float(r["u_v"]), float(r["u_delta"])] for r in rows],
            traj_id=[int(r["traj_id"]) for r in rows],
            t=[int(r["t"]) for r in rows],
        )


# --- certified least-squares fit ---------------------------------------------


def fit_objective(K, dataset):
    r = dataset.dx @ np.asarray(K, dtype=float).T + dataset.u
    return float(np.einsum("ij,ij->", r, r))


def unconstrained_fit(dataset):
    """Minimum-norm least-squares ``K`` ignoring the certificate."""
    Kt, *_ = np.linalg.lstsq(dataset.dx, -dataset.u, rcond=None)
    return Kt.T


@dataclass
class FitInfo:
    iterations: int
    objective: float
    constrained: bool
    converged: bool


def fit_gain(plant, dataset, margin=1e-6, max_iter=500_000, window=100, rtol=1e-12, return_info=False):
    """Least-squares gain with ``sigma_max(A - BK) <= 1 - margin``.

    Returns the unconstrained least-squares solution untouched when it is
    already inside the ball; otherwise runs monotone accelerated projected
    gradient on ``M = A - BK`` with step ``1/L`` from the closed-form
    Lipschitz constant.
    """
    if len(dataset) == 0:
        raise DomainError("cannot fit a gain to an empty dataset")
    if not 0 < margin < 1:
        raise DomainError(f"margin must lie in (0, 1), got {margin}")
    radius = 1.0 - margin
    A, B = plant.A, plant.B
    Binv = np.linalg.inv(B)

    K_ls = unconstrained_fit(dataset)
    if linalg2.spectral_norm(A - B @ K_ls) <= radius:
        info = FitInfo(0, fit_objective(K_ls, dataset), False, True)
        return _finish(plant, K_ls, info, return_info)

    X, U = dataset.dx, dataset.u
    S = X.T @ X  # second moment of the state deviations
    C = U.T @ X
    lip = 2.0 * np.linalg.eigvalsh(S)[-1] * np.linalg.eigvalsh(Binv.T @ Binv)[-1]
    if not lip > 0:
        # all dx are zero: objective does not depend on K
        info = FitInfo(0, fit_objective(K_ls, dataset), False, True)
        return _finish(plant, A - linalg2.project_spectral_ball(A - B @ K_ls, radius), info, return_info)
    const = float(np.einsum("ij,ij->", U, U))

    def objective(M):
        K = Binv @ (A - M)
        return float(np.einsum("ij,jk,ik->", K, S, K) + 2.0 * np.einsum("ij,ij->", K, C) + const)

    def gradient(M):
        K = Binv @ (A - M)
        return -Binv.T @ (2.0 * (K @ S + C))

    x = linalg2.project_spectral_ball(A - B @ K_ls, radius)
    fx = objective(x)
    y, x_prev, tk = x, x, 1.0
    history = [fx]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        z = linalg2.project_spectral_ball(y - gradient(y) / lip, radius)
        fz = objective(z)
        t_next = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * tk * tk))
        if fz <= fx:
            x_prev, x, fx = x, z, fz
            y = x + ((tk - 1.0) / t_next) * (x - x_prev)
            tk = t_next
        else:
            # momentum overshoot: restart from the last accepted iterate
            y, tk = x, 1.0
        history.append(fx)
        if it >= window:
            old = history[-window - 1]
            if old - fx <= rtol * max(abs(old), 1e-300):
                converged = True
                break
    if not converged:
        raise SolverError(
            "projected gradient did not converge",
            {"iterations": it, "objective": fx, "sigma": linalg2.spectral_norm(x)},
        )
    K = Binv @ (A - x)
    info = FitInfo(it, fit_objective(K, dataset), True, converged)
    return _finish(plant, K, info, return_info)


def _finish(plant, K, info, return_info):
    rep = certify_gain(plant, K)
    gain = Gain(K, Certificate(rep.sigma_closed) if rep.feasible else None)
    return (gain, info) if return_info else gain


def schur_equivalence_check(plant, K, band=1e-9):
    """Positive definiteness of ``[[I, M'], [M, I]]`` with ``M = A - BK``.

    Cross-checked against :func:`certify_gain`; a disagreement outside the
    ``band`` around ``sigma = 1`` raises ``AssertionError``.
    """
    M = closed_loop(plant, K)
    block = np.block([[np.eye(2), M.T], [M, np.eye(2)]])
    schur = linalg2.is_positive_definite(block, tol=1e-12)
    rep = certify_gain(plant, K, eps=0.0)
    if schur != rep.feasible and abs(rep.sigma_closed - 1.0) > band:
        raise AssertionError(
            f"Schur test ({schur}) disagrees with certificate ({rep.feasible}) at sigma={rep.sigma_closed}"
        )
    return schur
