"""Forward simulation and parameter recovery for nonlocal aggregation-diffusion systems on the torus."""

__version__ = "0.1.0"

from .errors import (AggrekitError, CFLViolation, ConfigError, GridError, NonDivergenceSource, NonIdentifiable,
                     NonphysicalDiffusion, NumericalFailure)
from .torus import Field, TorusGrid
from .forward import KernelSpec, ModelParams, simulate
