"""Feature-space class-incremental learning toolkit."""

__version__ = "0.1.0"
