"""Visual-inertial localization against a prior Gaussian-mixture map."""

__version__ = "0.1.0"
