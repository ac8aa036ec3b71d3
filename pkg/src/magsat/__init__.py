"""Certified static current control for inverters with magnitude saturation.

Simplified dq-frame plant with radial current limiting, the
circular-Lyapunov certificate for static gains, LQR and MPC-imitating
gain synthesis, a saturated MPC, and a 12-state full-order check model.
"""

from .certify import Certificate, CertificateReport, Gain, certify_gain, find_stuck_point
from .model import DomainError, LinearPlant, PlantParams, Trajectory, build_plant, saturate, simulate
from .synthesis import Dataset, LqrWeights, fit_gain, lqr_gain

__version__ = "0.1.0"

__all__ = [
    "Certificate", "CertificateReport", "Gain", "certify_gain", "find_stuck_point",
    "DomainError", "LinearPlant", "PlantParams", "Trajectory", "build_plant", "saturate", "simulate",
    "Dataset", "LqrWeights", "fit_gain", "lqr_gain",
]
