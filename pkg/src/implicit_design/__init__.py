"""Bayesian experimental design for implicit models via LFIRE and Bayesian optimisation."""
