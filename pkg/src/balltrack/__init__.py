"""balltrack: small fast-object tracking with motion-augmented heatmap
regression and residual spatio-temporal refinement, built on a minimal
double-precision autodiff core."""

__version__ = "0.1.0"
