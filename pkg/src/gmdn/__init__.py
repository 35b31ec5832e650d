"""Graph Mixture Density Networks on stochastic SIR simulations."""

__version__ = "0.1.0"
