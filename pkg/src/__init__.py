"""
Brittle-homog: numerical homogenization of high-contrast brittle composites.
"""

__version__ = "1.0.0"
