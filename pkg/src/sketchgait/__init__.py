"""Sketch gait modality construction, multi-branch descriptors, metric head
training and gallery/probe evaluation."""

__version__ = "0.1.0"
