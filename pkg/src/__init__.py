# RM-FEM inverse-problem laboratory
"""Random-mesh finite elements in a Bayesian inverse problem."""

__version__ = "0.1.0"
