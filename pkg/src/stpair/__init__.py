"""Self-supervised Siamese 3-D ConvNet training on spatio-temporal video volumes."""

__version__ = "0.1.0"
