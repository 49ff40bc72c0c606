"""Simulation state: particle fields plus kinematic manipulator poses."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from ..errors import ConfigError
from ..geometry import Capsule, ParticleCloud, RoundedBox, ShapePrimitive, Sphere

# packed manipulator row: kind, s0..s3, center xyz, quat wxyz, vel xyz, omega xyz
MANIP_COLS = 18
KIND_SPHERE = 0.0
KIND_CAPSULE = 1.0
KIND_RBOX = 2.0


def pack_manipulators(manips: Sequence[ShapePrimitive],
                      vels: np.ndarray | None = None,
                      omegas: np.ndarray | None = None) -> np.ndarray:
    """Pack manipulator shapes and rigid velocities for the kernels."""
    m = len(manips)
    out = np.zeros((m, MANIP_COLS))
    for i, shape in enumerate(manips):
        if isinstance(shape, Sphere):
            out[i, 0] = KIND_SPHERE
            out[i, 1] = shape.radius
        elif isinstance(shape, Capsule):
            out[i, 0] = KIND_CAPSULE
            out[i, 1] = shape.radius
            out[i, 2] = shape.half_length
        elif isinstance(shape, RoundedBox):  # covers Box (radius 0)
            out[i, 0] = KIND_RBOX
            out[i, 1:4] = shape.half_extents
            out[i, 4] = shape.radius
        else:
            raise ConfigError(
                f"unsupported manipulator shape: {shape.kind}")
        out[i, 5:8] = shape.center
        out[i, 8:12] = shape.quat
    if vels is not None:
        out[:, 12:15] = vels
    if omegas is not None:
        out[:, 15:18] = omegas
    return out


@dataclass(frozen=True)
class SimState:
    """A value type: one step of the simulator maps a state to a new state."""

    x: np.ndarray                      # (N, 3) positions
    v: np.ndarray                      # (N, 3) velocities
    C: np.ndarray                      # (N, 3, 3) affine velocity field
    F: np.ndarray                      # (N, 3, 3) deformation gradient
    manips: tuple[ShapePrimitive, ...]  # poses live on the shapes
    step: int = 0

    def __post_init__(self):
        for name in ("x", "v", "C", "F"):
            arr = np.ascontiguousarray(getattr(self, name), dtype=float)
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "manips", tuple(self.manips))
        n = self.x.shape[0]
        if self.v.shape != (n, 3) or self.C.shape != (n, 3, 3) or self.F.shape != (n, 3, 3):
            raise ValueError("inconsistent particle array shapes")

    @classmethod
    def initial(cls, cloud: ParticleCloud,
                manips: Sequence[ShapePrimitive] = ()) -> "SimState":
        n = cloud.n
        eye = np.broadcast_to(np.eye(3), (n, 3, 3)).copy()
        return cls(x=cloud.points.copy(), v=np.zeros((n, 3)),
                   C=np.zeros((n, 3, 3)), F=eye, manips=tuple(manips), step=0)

    @property
    def n(self) -> int:
        return self.x.shape[0]

    def cloud(self) -> ParticleCloud:
        return ParticleCloud.from_points(self.x.copy())

    def with_manips(self, manips: Sequence[ShapePrimitive]) -> "SimState":
        return replace(self, manips=tuple(manips))

    def manip_centers(self) -> np.ndarray:
        return np.array([m.center for m in self.manips]).reshape(len(self.manips), 3)

    def manip_quats(self) -> np.ndarray:
        return np.array([m.quat for m in self.manips]).reshape(len(self.manips), 4)
