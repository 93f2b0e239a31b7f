"""paravox: desk-scale parallel phoneme-to-spectrogram synthesis."""

__version__ = "0.1.0"
