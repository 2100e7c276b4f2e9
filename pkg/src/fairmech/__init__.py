"""Shapley-based payments for allocating indivisible goods under verification."""
from .matching import OptCache, solve_optimal
from .model import Allocation, Scenario, TypeVector, VerifiedView, verify
from .payments import make_rule, pay_exact, pay_normalized, pay_sampled, run_mechanism
from .sampling import SamplingConfig

__version__ = "0.1.0"
