"""Age-specific seroprevalence and infection fatality rate estimation with a
hierarchical Bayesian model sampled by NUTS."""

__version__ = "0.1.0"
