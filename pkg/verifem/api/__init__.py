"""
Command routing for the verifem CLI
"""
