"""Multi-annotation triplet loss laboratory: box-label clustering, triplet
losses over class and box labels, and a small multi-task detector trained on
a numpy autodiff engine."""

__version__ = "0.1.0"
