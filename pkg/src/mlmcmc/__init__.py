"""Multilevel Markov chain Monte Carlo with coupled independence samplers."""
__version__ = "0.1.0"
