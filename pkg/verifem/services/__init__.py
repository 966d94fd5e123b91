"""
Numerical services: mesh, finite elements, estimators and adaptivity
"""
