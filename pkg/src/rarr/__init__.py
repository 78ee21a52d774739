"""Audio-to-vibration transfer for activity recognition.

A multitask VAE is pretrained on near-surface audio spectrograms, then moved
to on-surface vibration by training only a latent adapter and the TCN's final
layer.
"""

__version__ = "0.1.0"
