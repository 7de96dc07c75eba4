"""T1-weighted to T2-weighted MR synthesis on a small numpy autodiff core."""

__version__ = "0.1.0"
