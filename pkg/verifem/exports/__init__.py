"""
Output writers
"""
