"""NMF-based clustering of CNN feature maps for whole-slide explainability."""

__version__ = "0.1.0"
