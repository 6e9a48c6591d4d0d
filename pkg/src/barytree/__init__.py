"""Barycentric extensions of rational maps to hyperbolic 3-space.

Modules: ``sphere`` (points, spinors, quadrature), ``h3`` (ball and
half-space models, isometries), ``rational`` (rational maps, cycles,
resultants), ``barycentric`` (the extension, its derivative and the
quantitative checks), ``degeneration`` (preimages, rescaling radii,
translation estimates), ``tree`` (finite metric trees and branched covers)
and ``cli``.
"""

from .barycentric import derivative, extend, lipschitz_scan
from .errors import BarytreeError
from .h3 import BallPoint, CylindricalPoint, Isometry
from .rational import RationalMap
from .sphere import make_quadrature

__all__ = ["BallPoint", "BarytreeError", "CylindricalPoint", "Isometry", "RationalMap", "derivative", "extend",
           "lipschitz_scan", "make_quadrature"]
__version__ = "0.1.0"
