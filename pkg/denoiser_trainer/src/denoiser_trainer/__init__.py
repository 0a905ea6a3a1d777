"""Toy conditional denoiser for sparse-view CT reconstruction.

Trains a small UNet to predict the clean image from a noisy image, a
sparse-view FBP condition, and the noise level, then serves it over the
length-prefixed frame protocol specified in the reconstruction toolkit's
``docs/file_formats.md``.  This package deliberately shares no code with
that toolkit: it talks to it only through the documented file formats and
the wire protocol.
"""

__version__ = "0.1.0"
