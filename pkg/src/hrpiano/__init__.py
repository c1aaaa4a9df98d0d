"""Piano transcription with high-resolution onset/offset regression targets."""

__version__ = "0.1.0"
