"""Simulated annealing, nonlocal Monte Carlo and learned nonlocal moves for binary optimization."""
__version__ = "0.1.0"
