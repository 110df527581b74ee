"""Neural-network control variates for Monte Carlo pricing of SDEs with and without jumps."""
from .models import (
    Call,
    CallOnMax,
    MertonJumps,
    ModelError,
    ModelSpec,
    Payoff,
    SingularTempered,
    build_exp_levy,
    build_gbm,
    build_heston,
    build_merton,
    levy_derive,
)
from .schemes import SchemeSpec, default_scheme, simulate, simulate_batch

__version__ = "0.1.0"
