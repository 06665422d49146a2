"""Joint EIS + dermoscopy melanoma classifiers with fixed-sensitivity evaluation."""

__version__ = "0.1.0"
