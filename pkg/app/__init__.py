"""
Timbre: Multi-Modal Music Style Transfer Engine

Unpaired timbre translation between two audio domains on a four-channel
spectral representation, with mel-spectrogram inversion back to audio.
"""

__version__ = "1.0.0"
__author__ = "Timbre Team"
