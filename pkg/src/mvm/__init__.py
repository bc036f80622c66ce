"""Multi-head visual-audio memory for lip reading, on a numpy autodiff core."""

__version__ = "0.1.0"
