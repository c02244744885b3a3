"""Light-cone feature selection with weighted local quantum kernels."""

__version__ = "0.1.0"
