"""Point-light photometric stereo: rendering, observation maps, normal regression and integration."""
__version__ = "0.1.0"
