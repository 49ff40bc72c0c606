"""Shape-matching loss: frozen-plan transport cost plus a grasp proximity term.

The transport plan is treated as a constant during differentiation (envelope
rule at the inner optimum); the plan itself is refreshed by the caller, once
per outer solver iteration, optionally warm-starting the dual potentials.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..geometry import ParticleCloud
from ..transport import LOSS_SCHEDULE, EpsilonSchedule, cost_matrix, sinkhorn, sinkhorn_annealed
from .state import SimState


@dataclass(frozen=True)
class LossConfig:
    shape_weight: float = 1.0
    grasp_weight: float = 0.1
    grasp_beta: float = 200.0        # softmin sharpness, 1/length
    schedule: EpsilonSchedule = field(default_factory=lambda: LOSS_SCHEDULE)
    warm_iters: int = 30             # refresh iterations when warm-started


@dataclass
class LossValue:
    total: float
    shape_term: float
    grasp_term: float
    plan: np.ndarray
    f: np.ndarray
    g: np.ndarray
    epsilon: float
    # adjoint seeds
    dx: np.ndarray
    dc: np.ndarray
    dtheta: np.ndarray


def _transport_plan(cloud: ParticleCloud, goal: ParticleCloud, cfg: LossConfig,
                    warm):
    M = cost_matrix(cloud, goal, exponent=1)
    if warm is not None:
        f0, g0, eps = warm
        res = sinkhorn(cloud, goal, M, eps, max_iters=cfg.warm_iters,
                       tol=1e-9, f0=f0, g0=g0)
        if res.converged or np.all(np.isfinite(res.plan)):
            return res
    return sinkhorn_annealed(cloud, goal, M=M, schedule=cfg.schedule, exponent=1)


def shape_loss(state: SimState, goal: ParticleCloud,
               cfg: LossConfig = LossConfig(),
               plan: np.ndarray | None = None,
               warm: tuple | None = None) -> LossValue:
    """Loss at a state, with adjoint seeds for the particles and manipulators.

    `plan` freezes the transport plan explicitly; otherwise a plan is computed
    (warm-started from `warm = (f, g, epsilon)` when given) and returned for
    reuse.
    """
    x = state.x
    gpts = goal.points
    f = g = np.zeros(0)
    eps = 0.0
    if plan is None:
        res = _transport_plan(ParticleCloud.from_points(x.copy()), goal, cfg, warm)
        plan = res.plan
        f, g, eps = res.f, res.g, res.epsilon

    diff = x[:, None, :] - gpts[None, :, :]
    dist = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    shape_term = float(np.sum(plan * dist))
    with np.errstate(invalid="ignore", divide="ignore"):
        dgrad = plan[:, :, None] * diff / np.maximum(dist, 1e-12)[:, :, None]
    dx = cfg.shape_weight * dgrad.sum(axis=1)

    nm = len(state.manips)
    dc = np.zeros((nm, 3))
    dtheta = np.zeros((nm, 3))
    grasp_term = 0.0
    if nm and cfg.grasp_weight != 0.0:
        beta = cfg.grasp_beta
        for m, shape in enumerate(state.manips):
            d = shape.sdf(x)
            dmin = d.min()
            wts = np.exp(-beta * (d - dmin))
            Z = wts.sum()
            softmin = dmin - np.log(Z / len(d)) / beta
            grasp_term += softmin / nm
            sm = wts / Z
            nrm = shape.sdf_grad(x)
            coef = cfg.grasp_weight / nm
            dx += coef * sm[:, None] * nrm
            dc[m] += coef * (-(sm[:, None] * nrm).sum(axis=0))
            rel = x - shape.center
            dtheta[m] += coef * (sm[:, None] * np.cross(nrm, rel)).sum(axis=0)

    total = cfg.shape_weight * shape_term + cfg.grasp_weight * grasp_term
    return LossValue(total=total, shape_term=shape_term, grasp_term=grasp_term,
                     plan=plan, f=f, g=g, epsilon=eps,
                     dx=dx, dc=dc, dtheta=dtheta)
