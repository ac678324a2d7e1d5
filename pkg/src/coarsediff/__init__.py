"""Graph generation by reversing randomized spectrum-preserving coarsening."""

__version__ = "0.1.0"
