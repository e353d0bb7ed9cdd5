"""Variational integrators for forced, constrained mechanical systems and
exact first- and second-order linearizations of their one-step map."""

__version__ = "0.1.0"
