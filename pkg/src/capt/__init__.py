"""Joint pronunciation assessment and mispronunciation detection toolkit."""

__version__ = "0.1.0"
