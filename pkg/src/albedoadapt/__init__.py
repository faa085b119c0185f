"""Two-phase synthetic-to-real adaptation for a toy diffusion albedo estimator."""

__version__ = "0.1.0"
