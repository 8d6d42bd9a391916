"""Joint learning of parameter-dependent controllers and Lyapunov functions."""
__version__ = "0.1.0"
