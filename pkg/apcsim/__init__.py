"""
apcsim: a simulator of noise-limited analog matrix multiplication for neural
network inference, with an optimizer that allocates energy per MAC across
layers and channels.
"""

__version__ = "0.1.0"
