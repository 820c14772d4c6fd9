"""Offensive-tweet classification with small transformer encoders trained
from scratch on numpy, staged pretraining/fine-tuning, and a
representation-concatenation ensemble."""

__version__ = "0.1.0"
