"""perceptlab: desk-scale toolkit for model-guided image difficulty scoring,
category enhancement, curriculum design, and interactive learning experiments."""

__version__ = "0.1.0"
