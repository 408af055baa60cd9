"""Articulated canonical-surface-mapping geometry: parametrization, skinning,
orthographic rendering, cycle-consistency losses, fitting and evaluation."""

__version__ = "0.1.0"
