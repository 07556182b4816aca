"""editshim: reference inference server for the editpipe capability protocol."""

__version__ = "0.1.0"
