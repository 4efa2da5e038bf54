"""Knowledge tracing, signal smoothing and curriculum allocation for learner interaction streams."""

__version__ = "0.1.0"
