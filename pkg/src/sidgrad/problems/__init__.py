"""Concrete bilevel problems."""
from .logistic import (MultinomialLogistic, RegLogistic, logistic_constants, logistic_problem,
                       multinomial_problem, top_eigenvalue)
from .quadratic import QuadraticBilevel, quadratic_bilevel, quadratic_exact_hypergrad
from .toy import ToyContraction, toy_contraction

__all__ = [
    "MultinomialLogistic", "RegLogistic", "logistic_constants", "logistic_problem",
    "multinomial_problem", "top_eigenvalue", "QuadraticBilevel", "quadratic_bilevel",
    "quadratic_exact_hypergrad", "ToyContraction", "toy_contraction",
]
