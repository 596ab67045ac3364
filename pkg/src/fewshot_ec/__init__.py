"""Few-shot event classification with metric learning and a leave-out loss."""

__version__ = "0.1.0"
