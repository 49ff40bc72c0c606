from .backend import backend_name, get_backend
from .config import SimConfig
from .engine import Trajectory, backward, rollout, step
from .loss import LossConfig, LossValue, shape_loss
from .state import SimState, pack_manipulators

__all__ = [
    "SimConfig", "SimState", "Trajectory", "LossConfig", "LossValue",
    "backend_name", "get_backend", "pack_manipulators",
    "step", "rollout", "backward", "shape_loss", "grad_actions",
]


def grad_actions(state0, actions, goal, cfg, loss_cfg=None, plan=None,
                 warm=None, backend=None):
    """Gradient of the frozen-plan loss at the end of a rollout w.r.t. actions.

    Returns (grads, LossValue, final_state). T = 0 yields an empty gradient.
    """
    import numpy as np

    if loss_cfg is None:
        loss_cfg = LossConfig()
    actions = np.asarray(actions, dtype=float)
    if actions.ndim == 2:
        actions = actions[:, None, :]
    if actions.shape[0] == 0:
        lv = shape_loss(state0, goal, loss_cfg, plan=plan, warm=warm)
        return np.zeros_like(actions), lv, state0
    final, traj = rollout(state0, actions, cfg, record=True, backend=backend)
    lv = shape_loss(final, goal, loss_cfg, plan=plan, warm=warm)
    grads = backward(state0, actions, traj, cfg,
                     seed_x=lv.dx, seed_c=lv.dc, seed_theta=lv.dtheta,
                     backend=backend)
    return grads, lv, final
