"""No-reference quality assessment for novel-view-synthesis scenes."""

__version__ = "0.1.0"
