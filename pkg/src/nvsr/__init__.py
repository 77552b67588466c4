"""Feature-plane radiance fields with learned plane super-resolution."""

__version__ = "0.1.0"
