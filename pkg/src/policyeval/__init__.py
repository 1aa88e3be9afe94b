"""Off-policy evaluation of capacity-constrained assignment policies."""
__version__ = "0.1.0"
