"""Variable-resolution nonsmooth DEM for granular terrain."""
from .errors import (BuildTimeout, ConfigError, ExperimentFault, InvalidComparison, InvalidInput,
                     InvalidParameter, RefineDEMError, SingularFit, SolverDiverged)

__version__ = "0.1.0"
