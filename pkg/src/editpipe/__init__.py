"""editpipe: dataset curation and evaluation for instruction-guided image editing."""

__version__ = "0.1.0"
