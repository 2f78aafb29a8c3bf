"""Online Instance Matching loss and person-search evaluation on synthetic scenes."""

__version__ = "0.1.0"
