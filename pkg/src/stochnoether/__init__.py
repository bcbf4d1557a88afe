"""Contact symmetries, Noether conserved quantities and martingale checks for scalar stochastic control."""

__version__ = "0.1.0"
