"""freqlens: frequency-domain study kit for universal perturbations and image hiding."""

__version__ = "0.1.0"
