"""
verifem test suite
"""
