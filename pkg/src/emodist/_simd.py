"""Workaround for OpenBLAS core-type detection inside VMs.

OpenBLAS's runtime dispatch sometimes falls back to the AVX2 (Haswell) kernels
on virtualized AVX-512 CPUs, costing ~1.5-2x on the small dgemms that dominate
recurrent training. The core type can only be forced via the environment, and
only before numpy first loads OpenBLAS, so this must run ahead of any numpy
import.
"""

import os
import sys


def _cpu_has_avx512() -> bool:
    try:
        with open("/proc/cpuinfo") as f:
            for line in f:
                if line.startswith("flags"):
                    return " avx512f " in line or line.rstrip().endswith("avx512f")
    except OSError:
        pass
    return False


def pick_blas_kernel() -> None:
    if "OPENBLAS_CORETYPE" in os.environ:
        return
    if "numpy" in sys.modules:
        return  # too late, OpenBLAS already initialized
    if sys.platform.startswith("linux") and _cpu_has_avx512():
        os.environ["OPENBLAS_CORETYPE"] = "SKYLAKEX"
