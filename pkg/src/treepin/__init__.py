"""Tree-like pairwise interaction networks for Poisson claim-frequency regression."""

__version__ = "0.1.0"
