"""Dense descriptor learning supervised by relative camera pose."""
__version__ = "0.1.0"
