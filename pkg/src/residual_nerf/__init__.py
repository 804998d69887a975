"""Residual radiance fields for depth through transparent objects.

A background field is fitted to the scene without the transparent objects,
frozen, and then combined with a residual field through a learned per-point
blend weight. Depth is read off with a density threshold.
"""

__version__ = "0.1.0"
