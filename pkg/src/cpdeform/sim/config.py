"""Material, grid, and contact parameters for the particle simulator."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# layout of the packed parameter vector handed to the kernels
# (the compiled backend mirrors these indices; keep in sync with _kernels.pyx)
P_DT = 0
P_INV_DX = 1
P_MU = 2
P_LAM = 3
P_YIELD = 4
P_GX = 5
P_GY = 6
P_GZ = 7
P_MASS = 8
P_VOL = 9
P_BOUND = 10
P_WALL_FRICTION = 11
P_CONTACT_FRICTION = 12
P_CONTACT_SOFT = 13
P_GATE_V = 14
P_MARGIN = 15
P_NGRID = 16
N_PARAMS = 17

CFL_FACTOR = 0.5


@dataclass(frozen=True)
class SimConfig:
    """Simulator configuration; validates a CFL-style timestep bound."""

    n_grid: int = 32
    dt: float = 2e-4
    substeps: int = 10               # substeps per action step
    youngs_modulus: float = 5e3
    poisson_ratio: float = 0.2
    yield_stress: float = 50.0
    friction: float = 0.9            # manipulator contact, tangential damping in [0, 1]
    wall_friction: float = 1.0       # Coulomb coefficient at the domain walls
    gravity: tuple[float, float, float] = (0.0, -5.0, 0.0)
    a_max: float = 2.0               # per-component action bound (velocity command)
    density: float = 1.0
    boundary_cells: int = 3
    contact_softness: float | None = None   # boundary-layer width; default one cell
    gate_velocity: float = 0.05      # separation-velocity smoothing scale
    cfl_dt_limit: float = field(init=False, default=0.0)

    def __post_init__(self):
        if self.n_grid < 8:
            raise ValueError("grid resolution must be >= 8")
        for name in ("dt", "youngs_modulus", "yield_stress", "a_max", "density",
                     "gate_velocity"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be strictly positive")
        if not 0.0 < self.poisson_ratio < 0.5:
            raise ValueError("poisson_ratio must be in (0, 0.5)")
        if not 0.0 <= self.friction <= 1.0:
            raise ValueError("friction must be in [0, 1]")
        if self.substeps < 1:
            raise ValueError("substeps must be >= 1")
        limit = CFL_FACTOR * self.dx / (self.sound_speed + self.a_max)
        object.__setattr__(self, "cfl_dt_limit", limit)
        if self.dt > limit:
            raise ValueError(
                f"dt={self.dt} violates the CFL-style bound {limit:.3e} "
                f"(grid {self.n_grid}, E={self.youngs_modulus})")

    @property
    def dx(self) -> float:
        return 1.0 / self.n_grid

    @property
    def sound_speed(self) -> float:
        return float(np.sqrt(self.youngs_modulus / self.density))

    @property
    def mu(self) -> float:
        return self.youngs_modulus / (2.0 * (1.0 + self.poisson_ratio))

    @property
    def lam(self) -> float:
        nu = self.poisson_ratio
        return self.youngs_modulus * nu / ((1.0 + nu) * (1.0 - 2.0 * nu))

    @property
    def particle_volume(self) -> float:
        return (0.5 * self.dx) ** 3

    @property
    def particle_mass(self) -> float:
        return self.density * self.particle_volume

    @property
    def clamp_margin(self) -> float:
        return self.dx

    def param_vector(self) -> np.ndarray:
        p = np.zeros(N_PARAMS)
        p[P_DT] = self.dt
        p[P_INV_DX] = self.n_grid
        p[P_MU] = self.mu
        p[P_LAM] = self.lam
        p[P_YIELD] = self.yield_stress
        p[P_GX], p[P_GY], p[P_GZ] = self.gravity
        p[P_MASS] = self.particle_mass
        p[P_VOL] = self.particle_volume
        p[P_BOUND] = self.boundary_cells
        p[P_WALL_FRICTION] = self.wall_friction
        p[P_CONTACT_FRICTION] = self.friction
        p[P_CONTACT_SOFT] = (self.contact_softness
                             if self.contact_softness is not None else self.dx)
        p[P_GATE_V] = self.gate_velocity
        p[P_MARGIN] = self.clamp_margin
        p[P_NGRID] = self.n_grid
        return p
