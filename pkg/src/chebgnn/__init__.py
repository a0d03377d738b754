"""From-scratch Chebyshev spectral graph convolutions with a stability and transfer benchmark harness."""

__version__ = "0.1.0"
