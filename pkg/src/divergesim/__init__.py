"""Lane-change success probabilities and an advance warning system for highway diverges."""

__version__ = "0.1.0"
