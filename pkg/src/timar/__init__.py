"""Turn-level interleaved masked autoregression for dyadic 3D head generation."""

__version__ = "0.1.0"
