"""
TriRE continual-learning utilities.
"""

__version__ = "0.1.0"
