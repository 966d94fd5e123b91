"""
Effectivity and rate evaluation of verifem runs
"""
