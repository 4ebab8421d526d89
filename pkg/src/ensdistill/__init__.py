"""Progressive distillation of a teacher network onto an anytime ensemble of
small students, driven by a two-player weighting game."""

__version__ = "0.1.0"
