"""Monte Carlo laboratory for branching random walk in random environment."""
from .env import Environment, EnvironmentSpec, InvalidEnvironment, bounding_environments, rate_at, sample_environment
from .engine import (PopulationCapExceeded, SimConfig, TrajectoryRecord, run, run_dekking_host_branch,
                     run_hitting, time_grid, track_uniform_descendant)

__version__ = "0.1.0"

__all__ = ["Environment", "EnvironmentSpec", "InvalidEnvironment", "bounding_environments", "rate_at",
           "sample_environment", "PopulationCapExceeded", "SimConfig", "TrajectoryRecord", "run",
           "run_dekking_host_branch", "run_hitting", "time_grid", "track_uniform_descendant"]
