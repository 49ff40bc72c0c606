"""Typed errors raised across the toolkit."""


class CPDeformError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(CPDeformError):
    """Invalid run/task configuration (CLI exit code 2)."""


class SamplingFailure(CPDeformError):
    """Rejection sampling exhausted its attempt budget."""


class GridSpecMismatch(CPDeformError):
    """Two occupancy grids do not share the same spec."""


class GridBoundsError(CPDeformError):
    """Particles fall outside the voxelization grid."""


class UndefinedIoU(CPDeformError):
    """IoU of two all-zero grids is undefined."""


class TransportNumericError(CPDeformError):
    """Sinkhorn produced non-finite potentials."""


class SimulationBlowup(CPDeformError):
    """Simulator state became non-finite.

    Carries the substep index at which the blowup was detected.
    """

    def __init__(self, step: int, message: str = ""):
        self.step = step
        super().__init__(message or f"non-finite simulation state at substep {step}")


class NoValidPlacement(CPDeformError):
    """Every candidate placement collided with the particle cloud."""


class SolverFailure(CPDeformError):
    """Every trajectory-optimization iteration blew up."""


class PipelineError(CPDeformError):
    """The staged pipeline could not make progress (CLI exit code 3)."""


class UndefinedCorrelation(CPDeformError):
    """Rank correlation of constant inputs is undefined."""
