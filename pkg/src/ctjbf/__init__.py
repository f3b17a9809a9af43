"""Low-dose CT denoising: guided joint bilateral filtering with learned
guidance estimation, a learned quality score, and Q-learning parameter tuning."""

__version__ = "0.1.0"
