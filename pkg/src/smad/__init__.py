"""Self-and-mixed attention decoder toolkit on a small numpy autodiff engine."""

__version__ = "0.1.0"
