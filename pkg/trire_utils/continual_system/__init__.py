"""
Continual learning system root package.
"""
