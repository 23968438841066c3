"""Image captioning with adaptive spatial attention and per-step text
attributes, built on numpy with hand-written backpropagation."""

__version__ = "0.1.0"
