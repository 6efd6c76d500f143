"""Model-based policy optimization with forward and backward dynamics
ensembles, plus exact tabular checks of its return bounds.
"""
from bidyn.bidyn import main

__all__ = ["main"]

try:
    import pkg_resources

    __version__ = pkg_resources.get_distribution("bidyn").version
except Exception:
    from bidyn.version import __version__
