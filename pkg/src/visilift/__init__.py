"""Visibility-aware lifting of 2D language features onto 3D Gaussians."""

__version__ = "0.1.0"
