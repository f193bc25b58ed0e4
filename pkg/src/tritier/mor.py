"""Proper orthogonal decomposition by the method of snapshots."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

MAX_MODES = 20


@dataclass
class SnapshotMatrix:
    columns: np.ndarray
    times: Optional[np.ndarray] = None

    def __post_init__(self):
        self.columns = np.atleast_2d(np.asarray(self.columns, dtype=float))
        if self.columns.shape[1] < 1:
            raise ValueError("need at least one snapshot")
        if not np.all(np.isfinite(self.columns)):
            raise ValueError("snapshots must be finite")
        if self.times is None:
            self.times = np.arange(self.columns.shape[1], dtype=float)
        self.times = np.asarray(self.times, dtype=float)


@dataclass
class PodBasis:
    modes: np.ndarray
    singular_values: np.ndarray
    energy_fraction: float
    mean_state: np.ndarray
    degenerate: bool = False

    @property
    def r(self) -> int:
        return self.modes.shape[1]

    @property
    def dim(self) -> int:
        return self.modes.shape[0]


def jacobi_eigh(a: np.ndarray, tol: float = 1e-12, max_sweeps: int = 100):
    """Cyclic Jacobi eigensolver for a symmetric matrix.

    Sweeps until the off-diagonal Frobenius norm drops below ``tol`` times the
    Frobenius norm of the input. Returns eigenvalues sorted descending and the
    matching eigenvectors as columns.
    """
    a = np.array(a, dtype=float)
    n = a.shape[0]
    v = np.eye(n)
    scale = np.linalg.norm(a)
    if scale == 0.0:
        return np.zeros(n), v
    for _ in range(max_sweeps):
        off = np.sqrt(max(np.sum(a * a) - np.sum(np.diag(a) ** 2), 0.0))
        if off <= tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= 1e-300:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = math.copysign(1.0, theta) / (abs(theta) + math.hypot(theta, 1.0)) if theta != 0 else 1.0
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                ap = a[:, p].copy()
                aq = a[:, q].copy()
                a[:, p] = c * ap - s * aq
                a[:, q] = s * ap + c * aq
                rp = a[p, :].copy()
                rq = a[q, :].copy()
                a[p, :] = c * rp - s * rq
                a[q, :] = s * rp + c * rq
                vp = v[:, p].copy()
                vq = v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    w = np.diag(a).copy()
    order = np.argsort(-w, kind="stable")
    return w[order], v[:, order]


def compute_pod(snaps: SnapshotMatrix, energy_target: float = 0.99,
                max_modes: int = MAX_MODES) -> PodBasis:
    if not 0 < energy_target <= 1:
        raise ValueError("energy_target must lie in (0, 1]")
    X = snaps.columns
    mean = X.mean(axis=1)
    Xc = X - mean[:, None]
    G = Xc.T @ Xc
    lam, vecs = jacobi_eigh(G)
    lam = np.maximum(lam, 0.0)
    sigma = np.sqrt(lam)

    if sigma.size == 0 or sigma[0] <= 0.0 or not np.any(Xc):
        e1 = np.zeros((X.shape[0], 1))
        e1[0, 0] = 1.0
        return PodBasis(e1, np.zeros(1), 1.0, mean, degenerate=True)

    keep = sigma > 1e-12 * sigma[0]
    sigma, vecs = sigma[keep], vecs[:, keep]
    energy = np.cumsum(sigma ** 2) / np.sum(sigma ** 2)
    r = int(np.searchsorted(energy, energy_target - 1e-15) + 1)
    r = max(1, min(r, sigma.size, max_modes))
    modes = Xc @ vecs[:, :r] / sigma[:r]
    # one re-orthonormalisation pass; Gram-based modes lose orthogonality as sigma_i / sigma_1 shrinks
    q, rr = np.linalg.qr(modes)
    modes = q * np.sign(np.diag(rr))
    return PodBasis(modes, sigma[:r], float(energy[r - 1]), mean)


def project(basis: PodBasis, state: np.ndarray) -> np.ndarray:
    state = np.asarray(state, dtype=float)
    if state.shape[0] != basis.dim:
        raise ValueError(f"state has dimension {state.shape[0]}, basis expects {basis.dim}")
    if state.ndim == 2:
        return basis.modes.T @ (state - basis.mean_state[:, None])
    return basis.modes.T @ (state - basis.mean_state)


def lift(basis: PodBasis, reduced: np.ndarray) -> np.ndarray:
    reduced = np.asarray(reduced, dtype=float)
    if reduced.shape[0] != basis.r:
        raise ValueError(f"reduced vector has dimension {reduced.shape[0]}, basis has {basis.r} modes")
    if reduced.ndim == 2:
        return basis.mean_state[:, None] + basis.modes @ reduced
    return basis.mean_state + basis.modes @ reduced
