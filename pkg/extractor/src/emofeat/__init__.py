"""Speech feature extraction to the shared "EMOF" feature-file format.

Two families of features: a 43-dimensional mel-filterbank + pitch baseline
(`mfb.py`) and frame-level embeddings from published self-supervised speech
encoders (`encoders.py`). The training stack downstream only ever sees the
EMOF files this package writes.
"""

__version__ = "0.1.0"
