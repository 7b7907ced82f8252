"""
IO package initialization.
"""
