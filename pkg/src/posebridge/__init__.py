"""Zero-shot skeleton action recognition with pose-anchored semantic bridging."""

__version__ = "0.1.0"
