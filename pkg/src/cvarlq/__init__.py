"""Risk-averse linear-quadratic control with a scalable CVaR upper bound."""

__version__ = "0.1.0"
