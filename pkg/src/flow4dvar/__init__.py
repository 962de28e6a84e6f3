"""4DVar data assimilation for 2D incompressible flow with P1-P1 finite elements."""

from .forward import FlowProblem, ModelConfig, Trajectory
from .mesh import BifurcationParams, Mesh, generate_bifurcation, load_mesh, reconstruction_domain
from .observe import ObservationSet, Observer
from .reduced import ReducedFunctional

__version__ = "0.1.0"

__all__ = ["BifurcationParams", "FlowProblem", "Mesh", "ModelConfig", "ObservationSet", "Observer",
           "ReducedFunctional", "Trajectory", "generate_bifurcation", "load_mesh", "reconstruction_domain"]
