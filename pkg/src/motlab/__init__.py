"""Query-based multi-object tracking supervision lab on synthetic scenes."""
__version__ = "0.1.0"
