"""
ScaleAgent - Segment large rasters patch by patch, letting a learned agent pick the context scale
"""

__version__ = "0.1.0"
