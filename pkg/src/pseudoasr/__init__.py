"""Speech recognition with a text-only training path through a pseudo-speech encoder.

A numpy-only toolkit: autodiff core, CTC, CTC-driven frame compression,
pseudo-speech encoder, Conformer/Transformer++ ASR model, training regimes,
joint CTC/attention decoding, a synthetic corpus and a CLI.
"""

__version__ = "0.1.0"
