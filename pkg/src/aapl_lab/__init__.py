"""Toy-scale augmentation-adversarial prompt learning on frozen synthetic encoders."""

__version__ = "0.1.0"
