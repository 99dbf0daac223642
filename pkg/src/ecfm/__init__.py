"""Flow matching under entropy-rate budgets, as a numerical lab."""

__version__ = "0.1.0"
