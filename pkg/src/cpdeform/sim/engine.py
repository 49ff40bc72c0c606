"""Step/rollout drivers and the reverse-mode action-gradient pass.

The kernels own one substep; this module owns the substep loop, manipulator
pose integration (and its adjoint), trajectory checkpointing, and the
action-window bookkeeping that turns per-substep adjoints into per-action
gradients.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import SimulationBlowup
from .backend import get_backend
from .config import SimConfig
from .state import MANIP_COLS, SimState, pack_manipulators


def _quat_mul(a, b):
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def _quat_conj(q):
    return np.array([q[0], -q[1], -q[2], -q[3]])


def _integrate_pose(centers, quats, vels, omegas, dt):
    c2 = centers + dt * vels
    q2 = quats.copy()
    for m in range(quats.shape[0]):
        om = omegas[m]
        if np.any(om != 0.0):
            mid = quats[m] + 0.5 * dt * _quat_mul(np.concatenate(([0.0], om)),
                                                  quats[m])
            q2[m] = mid / np.linalg.norm(mid)
    return c2, q2


def split_action(action, n_manip):
    """(M, 3) or (M, 6) action -> (velocities, angular velocities)."""
    action = np.asarray(action, dtype=float)
    if action.shape not in ((n_manip, 3), (n_manip, 6)):
        raise ValueError(f"action must be ({n_manip}, 3) or ({n_manip}, 6)")
    vels = action[:, :3]
    omegas = action[:, 3:6] if action.shape[1] == 6 else np.zeros((n_manip, 3))
    return vels, omegas


def _check_bounds(actions, a_max):
    if actions.size and np.max(np.abs(actions)) > a_max + 1e-9:
        raise ValueError(f"action components exceed the bound {a_max}")


@dataclass
class Trajectory:
    """Per-substep checkpoints, enough to run the adjoint pass."""

    x: np.ndarray        # (S, N, 3) pre-substep positions
    v: np.ndarray
    C: np.ndarray
    F: np.ndarray
    centers: np.ndarray  # (S+1, M, 3)
    quats: np.ndarray    # (S+1, M, 4)
    substeps: int        # substeps per action


def _run(state: SimState, actions: np.ndarray, cfg: SimConfig, record: bool,
         backend=None):
    kern = backend if backend is not None else get_backend()
    n = state.n
    nm = len(state.manips)
    T = actions.shape[0]
    S = T * cfg.substeps
    params = cfg.param_vector()
    G = cfg.n_grid + 1

    x = state.x.copy()
    v = state.v.copy()
    C = state.C.copy()
    F = state.F.copy()
    centers = state.manip_centers().copy()
    quats = state.manip_quats().copy()

    xo = np.empty_like(x)
    vo = np.empty_like(v)
    Co = np.empty_like(C)
    Fo = np.empty_like(F)
    grid_m = np.zeros(G ** 3)
    grid_v = np.zeros((G ** 3, 3))

    traj = None
    if record:
        traj = Trajectory(
            x=np.empty((S, n, 3)), v=np.empty((S, n, 3)),
            C=np.empty((S, n, 3, 3)), F=np.empty((S, n, 3, 3)),
            centers=np.empty((S + 1, nm, 3)), quats=np.empty((S + 1, nm, 4)),
            substeps=cfg.substeps)

    k = 0
    for t in range(T):
        vels, omegas = split_action(actions[t], nm)
        for _ in range(cfg.substeps):
            if record:
                traj.x[k] = x
                traj.v[k] = v
                traj.C[k] = C
                traj.F[k] = F
                traj.centers[k] = centers
                traj.quats[k] = quats
            mp = _pack(state.manips, centers, quats, vels, omegas)
            status = kern.substep(x, v, C, F, xo, vo, Co, Fo, mp, params)
            if status != 0:
                raise SimulationBlowup(state.step * cfg.substeps + k)
            x, xo = xo, x
            v, vo = vo, v
            C, Co = Co, C
            F, Fo = Fo, F
            centers, quats = _integrate_pose(centers, quats, vels, omegas, cfg.dt)
            k += 1
    if record:
        traj.centers[S] = centers
        traj.quats[S] = quats

    manips = tuple(s.at(center=centers[i], quat=quats[i])
                   for i, s in enumerate(state.manips))
    out = SimState(x=x, v=v, C=C, F=F, manips=manips, step=state.step + T)
    return out, traj


def _pack(manips, centers, quats, vels, omegas):
    mp = pack_manipulators(manips, vels, omegas)
    mp[:, 5:8] = centers
    mp[:, 8:12] = quats
    return mp


def step(state: SimState, action, cfg: SimConfig, backend=None) -> SimState:
    """Advance one action step (cfg.substeps MPM substeps)."""
    action = np.asarray(action, dtype=float)
    _check_bounds(action, cfg.a_max)
    out, _ = _run(state, action[None], cfg, record=False, backend=backend)
    return out


def rollout(state: SimState, actions, cfg: SimConfig, record: bool = False,
            backend=None):
    """Apply the action sequence; optionally keep adjoint checkpoints."""
    actions = np.asarray(actions, dtype=float)
    if actions.ndim == 2:  # single manipulator convenience
        actions = actions[:, None, :]
    if actions.shape[0] == 0:
        return state, None
    _check_bounds(actions, cfg.a_max)
    return _run(state, actions, cfg, record, backend=backend)


def backward(state0: SimState, actions: np.ndarray, traj: Trajectory,
             cfg: SimConfig, seed_x: np.ndarray, seed_c: np.ndarray,
             seed_theta: np.ndarray, backend=None) -> np.ndarray:
    """Adjoint sweep over a recorded rollout.

    seed_x: dLoss/d(final positions); seed_c, seed_theta: dLoss w.r.t. the
    final manipulator centers and rotation (rotation-vector convention).
    Returns per-action gradients with the same shape as `actions`.
    """
    kern = backend if backend is not None else get_backend()
    actions = np.asarray(actions, dtype=float)
    if actions.ndim == 2:
        actions = actions[:, None, :]
    T, nm, adim = actions.shape
    S = T * cfg.substeps
    n = state0.n
    params = cfg.param_vector()

    ax = seed_x.copy()
    av = np.zeros((n, 3))
    aC = np.zeros((n, 3, 3))
    aF = np.zeros((n, 3, 3))
    axi = np.empty_like(ax)
    avi = np.empty_like(av)
    aCi = np.empty_like(aC)
    aFi = np.empty_like(aF)
    aman = np.zeros((nm, 12))
    ac = seed_c.copy()
    aq = np.zeros((nm, 4))
    for m in range(nm):
        th = seed_theta[m]
        aq[m] = _quat_mul(np.concatenate(([0.0], 2.0 * th)), traj.quats[S, m])

    grads = np.zeros((T, nm, adim))
    for k in range(S - 1, -1, -1):
        t = k // cfg.substeps
        vels, omegas = split_action(actions[t], nm)
        # pose update ran after the physics of substep k
        grads[t, :, 0:3] += cfg.dt * ac
        for m in range(nm):
            om = omegas[m]
            if np.any(om != 0.0):
                qk = traj.quats[k, m]
                mid = qk + 0.5 * cfg.dt * _quat_mul(np.concatenate(([0.0], om)), qk)
                nrm = np.linalg.norm(mid)
                qhat = mid / nrm
                aq_mid = (aq[m] - (aq[m] @ qhat) * qhat) / nrm
                if adim == 6:
                    w_bar = _quat_mul(aq_mid, _quat_conj(qk))
                    grads[t, m, 3:6] += 0.5 * cfg.dt * w_bar[1:]
                aq[m] = aq_mid + 0.5 * cfg.dt * _quat_mul(
                    np.concatenate(([0.0], -om)), aq_mid)

        mp = _pack(state0.manips, traj.centers[k], traj.quats[k], vels, omegas)
        status = kern.substep_grad(
            traj.x[k], traj.v[k], traj.C[k], traj.F[k], mp,
            ax, av, aC, aF, axi, avi, aCi, aFi, aman, params)
        if status != 0:
            raise SimulationBlowup(k, "non-finite adjoint state")
        ax, axi = axi, ax
        av, avi = avi, av
        aC, aCi = aCi, aC
        aF, aFi = aFi, aF
        ac += aman[:, 0:3]
        grads[t, :, 0:3] += aman[:, 6:9]
        if adim == 6:
            grads[t, :, 3:6] += aman[:, 9:12]
        for m in range(nm):
            th = aman[m, 3:6]
            if np.any(th != 0.0):
                aq[m] += _quat_mul(np.concatenate(([0.0], 2.0 * th)),
                                   traj.quats[k, m])
    return grads
