"""CARMA regularisation for compositional robustness in small numpy transformers."""

__version__ = "0.1.0"
