"""Stochastic implicit differentiation for bilevel problems with a
stochastic contraction fixed point at the lower level."""
from .core import (ContractionWarning, NonFiniteError, ProblemConstants, SampleKey, Stream,
                   StochasticFixedPointProblem)

__version__ = "0.1.0"

__all__ = ["ContractionWarning", "NonFiniteError", "ProblemConstants", "SampleKey", "Stream",
           "StochasticFixedPointProblem", "__version__"]
