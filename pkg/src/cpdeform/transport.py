"""Entropic optimal transport between particle clouds.

Log-domain Sinkhorn with geometric epsilon annealing and warm-started
potentials. The source dual potential, centered to mean zero, is the
per-particle transport priority used by contact discovery; the exponent-1
cost gives the Wasserstein-1 style distance used for evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .errors import TransportNumericError
from .geometry import ParticleCloud


def cost_matrix(src: ParticleCloud, tgt: ParticleCloud, exponent: int = 1) -> np.ndarray:
    """Pairwise Euclidean costs |src_i - tgt_j|^exponent."""
    if exponent not in (1, 2):
        raise ValueError("exponent must be 1 or 2")
    diff = src.points[:, None, :] - tgt.points[None, :, :]
    d2 = np.einsum("ijk,ijk->ij", diff, diff)
    if exponent == 2:
        return d2
    return np.sqrt(d2)


@dataclass(frozen=True)
class EpsilonSchedule:
    """Geometric decay from start_scale*diameter to end_scale*diameter."""

    start_scale: float = 0.5
    end_scale: float = 1e-3
    levels: int = 10

    def values(self, diameter: float) -> np.ndarray:
        if self.levels < 1 or self.start_scale < self.end_scale:
            raise ValueError("invalid epsilon schedule")
        base = max(diameter, 1e-12)
        if self.levels == 1:
            return np.array([self.end_scale * base])
        return base * np.geomspace(self.start_scale, self.end_scale, self.levels)


# a cheaper default for the inner optimization loop, where the plan is
# refreshed every iteration from warm-started potentials
LOSS_SCHEDULE = EpsilonSchedule(start_scale=0.1, end_scale=5e-3, levels=4)


@dataclass(frozen=True)
class TransportResult:
    f: np.ndarray              # source dual potential
    g: np.ndarray              # target dual potential
    plan: np.ndarray           # (N_src, N_tgt) nonnegative coupling
    cost: float                # <plan, M>
    epsilon: float             # final regularization used
    iterations: int
    marginal_error: float      # L1 error of row+column sums
    converged: bool

    def dual_objective(self, a: np.ndarray, b: np.ndarray) -> float:
        return float(a @ self.f + b @ self.g)


def _diameter(src: ParticleCloud, tgt: ParticleCloud) -> float:
    pts = np.vstack([src.points, tgt.points])
    return float(np.linalg.norm(pts.max(axis=0) - pts.min(axis=0)))


def sinkhorn(src: ParticleCloud, tgt: ParticleCloud, M: np.ndarray,
             epsilon: float, max_iters: int = 500, tol: float = 1e-9,
             f0: np.ndarray | None = None, g0: np.ndarray | None = None
             ) -> TransportResult:
    """Log-domain Sinkhorn at a single regularization level.

    Masses are the clouds' own (uniform, summing to 1). Returns flagged
    unconverged rather than raising when max_iters is hit.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    a = src.masses / src.masses.sum()
    b = tgt.masses / tgt.masses.sum()
    la, lb = np.log(a), np.log(b)
    f = np.zeros(len(a)) if f0 is None else f0.copy()
    g = np.zeros(len(b)) if g0 is None else g0.copy()
    it = 0
    err = np.inf
    for it in range(1, max_iters + 1):
        # alternate dual maximization in the log domain
        f = -epsilon * (logsumexp((g[None, :] - M) / epsilon + lb[None, :], axis=1))
        g = -epsilon * (logsumexp((f[:, None] - M) / epsilon + la[:, None], axis=0))
        if it % 5 == 0 or it == max_iters:
            logP = (f[:, None] + g[None, :] - M) / epsilon + la[:, None] + lb[None, :]
            P = np.exp(logP)
            err = float(np.abs(P.sum(axis=1) - a).sum() + np.abs(P.sum(axis=0) - b).sum())
            if err <= tol:
                break
    if not (np.all(np.isfinite(f)) and np.all(np.isfinite(g))):
        raise TransportNumericError("non-finite Sinkhorn potentials")
    logP = (f[:, None] + g[None, :] - M) / epsilon + la[:, None] + lb[None, :]
    P = np.exp(logP)
    err = float(np.abs(P.sum(axis=1) - a).sum() + np.abs(P.sum(axis=0) - b).sum())
    return TransportResult(
        f=f, g=g, plan=P, cost=float(np.sum(P * M)), epsilon=epsilon,
        iterations=it, marginal_error=err, converged=err <= tol,
    )


def sinkhorn_annealed(src: ParticleCloud, tgt: ParticleCloud,
                      M: np.ndarray | None = None,
                      schedule: EpsilonSchedule = EpsilonSchedule(),
                      exponent: int = 1, max_iters: int = 500, tol: float = 1e-9,
                      f0: np.ndarray | None = None, g0: np.ndarray | None = None
                      ) -> TransportResult:
    """Sinkhorn with geometric epsilon decay, warm-starting the potentials."""
    if M is None:
        M = cost_matrix(src, tgt, exponent)
    diam = _diameter(src, tgt)
    if diam <= 0.0:
        # coincident clouds: optimum is any feasible plan at zero cost
        a = src.masses / src.masses.sum()
        b = tgt.masses / tgt.masses.sum()
        return TransportResult(f=np.zeros(len(a)), g=np.zeros(len(b)),
                               plan=np.outer(a, b), cost=0.0,
                               epsilon=0.0, iterations=0,
                               marginal_error=0.0, converged=True)
    f, g = f0, g0
    res: TransportResult | None = None
    for eps in schedule.values(diam):
        res = sinkhorn(src, tgt, M, float(eps), max_iters=max_iters, tol=tol,
                       f0=f, g0=g)
        f, g = res.f, res.g
    assert res is not None
    return res


def transport_priorities(src: ParticleCloud, tgt: ParticleCloud,
                         schedule: EpsilonSchedule = EpsilonSchedule(),
                         result: TransportResult | None = None) -> np.ndarray:
    """Source dual potential, gauge-fixed to mean zero.

    Only the ordering matters to contact discovery and the ordering is
    invariant to the dual's additive constant.
    """
    if result is None:
        result = sinkhorn_annealed(src, tgt, schedule=schedule, exponent=1)
    return result.f - result.f.mean()


def w1_distance(src: ParticleCloud, tgt: ParticleCloud,
                schedule: EpsilonSchedule = EpsilonSchedule()) -> float:
    """Entropic approximation of the exponent-1 transport cost."""
    return sinkhorn_annealed(src, tgt, schedule=schedule, exponent=1).cost
