"""Black-box extraction and ownership-verification benchmark for small GNNs."""

__version__ = "0.1.0"
