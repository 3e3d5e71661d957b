"""Polynomial feedback laws for quadratic control systems.

Degree-d value expansions from a Riccati solve and a chain of tensor
Lyapunov equations, with algebraic checks, closed-loop simulation and an
open-loop optimal control oracle.
"""
__version__ = "0.1.0"

from .errors import (DivergenceError, IterationError, NumericalError, PolyfeedError,
                     ProvenanceError, SolverError, StudyError, SynthesisError, ValidationError)
from .feedback import ValueExpansion, eval_DVd, eval_feedback, eval_rd, eval_Vd, hjb_check
from .genlyap import load_chain, save_chain, solve_chain_lyapunov, synthesize
from .model import (BurgersConfig, QuadraticControlSystem, load_system, make_burgers,
                    make_scalar, save_system)
from .oracle import optimal_openloop, taylor_order_study
from .riccati import solve_are
from .sim import cost_J, cost_Jd, dp_identity_check, integrate_closed_loop
from .symtensor import SymTensor

__all__ = [
    "BurgersConfig", "DivergenceError", "IterationError", "NumericalError", "PolyfeedError",
    "ProvenanceError", "QuadraticControlSystem", "SolverError", "StudyError", "SymTensor",
    "SynthesisError", "ValidationError", "ValueExpansion", "cost_J", "cost_Jd",
    "dp_identity_check", "eval_DVd", "eval_Vd", "eval_feedback", "eval_rd", "hjb_check",
    "integrate_closed_loop", "load_chain", "load_system", "make_burgers", "make_scalar",
    "optimal_openloop", "save_chain", "save_system", "solve_are", "solve_chain_lyapunov",
    "synthesize", "taylor_order_study",
]
