"""Circular-Lyapunov stability certificates for saturated linear feedback.

A gain ``K`` is certified for a plant when ``(A - BK)' (A - BK) - I`` is
negative definite, i.e. when the closed-loop matrix is a strict contraction
in the Euclidean norm. Because the Lyapunov level sets ``|x - x_ref|^2``
are circles, radial saturation can only shrink the tracking error further,
so a certified gain can never get stuck on the current limit.
"""

import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import linalg2
from .model import PlantParams, build_plant

EPS_CERT = 1e-9


class PreconditionError(ValueError):
    pass


@dataclass(frozen=True)
class Certificate:
    sigma_closed: float

    @property
    def margin(self):
        return 1.0 - self.sigma_closed

    def as_dict(self):
        return {"sigma_closed": self.sigma_closed, "margin": self.margin}


@dataclass
class Gain:
    """Static feedback ``u = u_ref - K (x - x_ref)``."""

    K: np.ndarray
    certificate: Optional[Certificate] = None

    def __post_init__(self):
        self.K = np.array(self.K, dtype=float).reshape(2, 2)

    def to_json(self):
        out = {"K": self.K.tolist()}
        if self.certificate is not None:
            out["certificate"] = self.certificate.as_dict()
        return json.dumps(out, indent=2)

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_json() + "\n")

    @classmethod
    def from_json(cls, text):
        data = json.loads(text)
        cert = data.get("certificate")
        return cls(
            K=np.array(data["K"], dtype=float),
            certificate=Certificate(float(cert["sigma_closed"])) if cert else None,
        )

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_json(fh.read())


# Gains printed for the 1.5 kVA reference inverter: the LQR baseline and the
# MPC-imitating fit.
K_BASE_REFERENCE = np.array([[1.206, 0.0957], [0.096, 0.0671]])
K_FIT_REFERENCE = np.array([[0.608, 0.027], [0.012, 0.026]])


@dataclass(frozen=True)
class CertificateReport:
    feasible: bool
    sigma_closed: float
    eigenvalues: tuple  # of (A-BK)'(A-BK) - I, ascending

    def as_dict(self):
        return {
            "feasible": self.feasible,
            "sigma_closed": self.sigma_closed,
            "eigenvalues": list(self.eigenvalues),
        }


def closed_loop(plant, K):
    return plant.A - plant.B @ np.asarray(getattr(K, "K", K), dtype=float)


def certify_gain(plant, K, eps=EPS_CERT):
    """Check ``(A - BK)'(A - BK) - I < 0`` with the closed-form 2x2 eigenvalues.

    Strictness is operationalised as ``lambda_max <= -eps``.
    """
    M = closed_loop(plant, K)
    lo, hi = linalg2.gram_eigvals(M)
    return CertificateReport(
        feasible=bool(hi - 1.0 <= -eps),
        sigma_closed=math.sqrt(max(hi, 0.0)),
        eigenvalues=(float(lo - 1.0), float(hi - 1.0)),
    )


def issue(plant, K, eps=EPS_CERT):
    """Return a :class:`Gain` carrying a certificate, or raise if infeasible."""
    report = certify_gain(plant, K, eps)
    if not report.feasible:
        raise PreconditionError(f"gain is not certified: sigma_closed = {report.sigma_closed:.9g}")
    return Gain(np.asarray(getattr(K, "K", K)), Certificate(report.sigma_closed))


# --- robustness to the unknown grid-side resistance -------------------------


def continuous_matrices(params):
    """``(A_hat, B_hat)`` with ``A = I - dt*A_hat`` and ``B = dt*B_hat``."""
    rl = params.R / params.L
    w = params.omega_nom
    A_hat = np.array([[rl, w], [-w, rl]])
    B_hat = np.diag([math.sqrt(2.0) / params.L, math.sqrt(2.0) * params.E / params.L])
    return A_hat, B_hat


def first_order_matrix(params, K):
    """Symmetric ``A_hat' + K' B_hat' + A_hat + B_hat K``, the dt-free form of the certificate."""
    A_hat, B_hat = continuous_matrices(params)
    BK = B_hat @ np.asarray(K, dtype=float)
    return A_hat.T + A_hat + BK + BK.T


def first_order_margin(params, K):
    """Smallest eigenvalue of :func:`first_order_matrix`; positive means the condition holds."""
    S = first_order_matrix(params, K)
    return float(linalg2.sym_eigvals(S[0, 0], 0.5 * (S[0, 1] + S[1, 0]), S[1, 1])[0])


@dataclass
class RobustReport:
    first_order_margin: float
    r_values: np.ndarray
    feasible: np.ndarray
    sigma_closed: np.ndarray
    first_order_margins: np.ndarray = field(default=None)

    @property
    def first_order_holds(self):
        return self.first_order_margin > 0

    @property
    def all_feasible(self):
        return bool(np.all(self.feasible))

    def as_dict(self):
        return {
            "first_order_margin": self.first_order_margin,
            "first_order_holds": self.first_order_holds,
            "all_feasible": self.all_feasible,
            "samples": [
                {"R": float(r), "feasible": bool(f), "sigma_closed": float(s)}
                for r, f, s in zip(self.r_values, self.feasible, self.sigma_closed)
            ],
        }


def certify_robust(params, K, r_grid_max, n_samples=50, eps=EPS_CERT):
    """Check that a certified gain stays certified when R grows.

    Reports the first-order margin at the nominal R and the exact
    certificate on ``n_samples`` resistances in ``[R, R + r_grid_max]``.
    """
    if r_grid_max < 0:
        raise PreconditionError("r_grid_max must be >= 0")
    params = params or PlantParams()
    K = np.asarray(getattr(K, "K", K), dtype=float)
    if not certify_gain(build_plant(params), K, eps).feasible:
        raise PreconditionError("K is not certified at the nominal resistance")
    r_values = np.linspace(params.R, params.R + r_grid_max, n_samples)
    feasible = np.zeros(n_samples, dtype=bool)
    sigma = np.zeros(n_samples)
    fo = np.zeros(n_samples)
    for i, r in enumerate(r_values):
        p = params.replace(R=float(r))
        rep = certify_gain(build_plant(p), K, eps)
        feasible[i] = rep.feasible
        sigma[i] = rep.sigma_closed
        fo[i] = first_order_margin(p, K)
    return RobustReport(first_order_margin(params, K), r_values, feasible, sigma, fo)


# --- trajectory-level checks -------------------------------------------------


@dataclass(frozen=True)
class AuditReport:
    clean: bool
    first_violation: Optional[int] = None
    kind: str = ""
    checked: int = 0

    def as_dict(self):
        return {
            "clean": self.clean,
            "first_violation": self.first_violation,
            "kind": self.kind,
            "checked": self.checked,
        }


def audit_lyapunov(trajectory, x_ref=None, tol=1e-9):
    """Check strict decrease of ``|x - x_ref|^2`` along a trajectory.

    Steps whose error is at most ``tol`` are skipped. For clipped steps the
    intermediate inequality ``|x[t+1] - x_ref| < |presat[t] - x_ref|`` is
    also checked when pre-saturation states are available.
    """
    if len(trajectory) == 0:
        raise PreconditionError("empty trajectory")
    x_ref = trajectory.x_ref if x_ref is None else np.asarray(x_ref, dtype=float)
    err = np.linalg.norm(trajectory.states - x_ref, axis=1)
    checked = 0
    for t in range(len(err) - 1):
        if err[t] <= tol:
            continue
        checked += 1
        if not err[t + 1] < err[t]:
            return AuditReport(False, t, "no_decrease", checked)
        if trajectory.saturated[t]:
            pre = trajectory.presat[t]
            if np.all(np.isfinite(pre)) and not err[t + 1] < np.linalg.norm(pre - x_ref):
                return AuditReport(False, t, "projection", checked)
    return AuditReport(True, None, "", checked)


def _tangential(M, x_ref, c, radius):
    """Closed-loop image of the boundary point at angle ``c`` split into
    (tangential, radial) components."""
    px, py = radius * math.cos(c), radius * math.sin(c)
    dx, dy = px - x_ref[0], py - x_ref[1]
    zx = x_ref[0] + M[0, 0] * dx + M[0, 1] * dy
    zy = x_ref[1] + M[1, 0] * dx + M[1, 1] * dy
    return -zx * math.sin(c) + zy * math.cos(c), zx * math.cos(c) + zy * math.sin(c)


def find_stuck_points(plant, K, x_ref, n_angles=3600, angle_tol=1e-10, ref_tol=1e-6):
    """All fixed points of the saturated closed loop on the current limit
    other than ``x_ref``.

    A boundary point ``p`` is fixed when its unsaturated image is a positive
    multiple of ``p`` at least as long as the limit; this scans the zero
    crossings of the tangential component and bisects each one.
    """
    M = closed_loop(plant, K)
    x_ref = np.asarray(x_ref, dtype=float)
    radius = plant.i_max
    angles = np.linspace(0.0, 2.0 * math.pi, n_angles + 1)
    tang = [_tangential(M, x_ref, c, radius)[0] for c in angles]
    found = []
    for i in range(n_angles):
        lo, hi = angles[i], angles[i + 1]
        flo, fhi = tang[i], tang[i + 1]
        if flo == 0.0:
            hi = lo
        elif flo * fhi > 0.0:
            continue
        while hi - lo > angle_tol:
            mid = 0.5 * (lo + hi)
            fm = _tangential(M, x_ref, mid, radius)[0]
            if (fm > 0.0) == (flo > 0.0):
                lo, flo = mid, fm
            else:
                hi = mid
        c = 0.5 * (lo + hi)
        tan_c, rad_c = _tangential(M, x_ref, c, radius)
        if rad_c < radius * (1.0 - 1e-9):
            continue  # image lies strictly inside: not clipped back onto p
        p = radius * np.array([math.cos(c), math.sin(c)])
        if np.linalg.norm(p - x_ref) <= ref_tol:
            continue
        if any(np.linalg.norm(p - q) < 1e-7 for q in found):
            continue
        found.append(p)
    return found


def find_stuck_point(plant, K, x_ref, **kwargs):
    """First boundary fixed point other than ``x_ref``, or None."""
    points = find_stuck_points(plant, K, x_ref, **kwargs)
    return points[0] if points else None
