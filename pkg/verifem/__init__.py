"""
verifem - guaranteed a posteriori error estimation for 2D P1 finite elements
"""

__version__ = "1.0.0"
