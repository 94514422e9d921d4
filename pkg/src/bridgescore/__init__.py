"""Learning conditioned diffusions from Malliavin regression targets."""

from .sde import (
    TimeGrid, SdeModel, PathSample, PathBatch, SimulationError, ModelError,
    make_model, simulate_path, simulate_batch, jacobian_full, derive_seed,
)
from .targets import (
    AlphaSchedule, ScoreTargetSet, backward_differences, adjoint_score_targets,
    reparam_score_targets, gaussian_step_target, unconditional_score_targets,
)

__version__ = "0.1.0"
