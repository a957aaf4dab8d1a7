"""Dimensional emotion estimation from speech features.

Recurrent regression models (GRU / time-convolution GRU) trained with a
concordance-correlation loss, an auxiliary emotion-class head, and optional
teacher-student embedding distillation.
"""

from emodist import _simd

_simd.pick_blas_kernel()

__version__ = "0.1.0"
