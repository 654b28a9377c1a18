"""Feedback multi-level ROI feature extraction on a small numpy autodiff core."""
__version__ = "0.1.0"
