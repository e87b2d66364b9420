"""Stability certificates, gain synthesis and simulation for Itô stochastic T-S models."""
from .lmi import SDPProblem, Solution, SolveOptions, Status, solve
from .stability import LineIntegralCertificate, QuadraticCertificate, analyze, sweep
from .synthesis import SynthesisOptions, SynthesisProblem, synthesize, verify_closed_loop
from .tsmodel import BetaBounds, Gaussian, Complement, MembershipFamily, TSModel, beta_bounds

__version__ = "0.1.0"
