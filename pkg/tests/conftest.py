import emodist  # noqa: F401  (pick the BLAS kernel before numpy loads)

import numpy as np
import pytest

from emodist.data import SynthSpec, gen_synthetic


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """48 utterances (32/8/8), small dims, written once per session."""
    out = tmp_path_factory.mktemp("tiny_corpus")
    spec = SynthSpec(n_utts=48, seed=11, teacher_dim=16, student_dim=8,
                     noise=0.2)
    manifest = gen_synthetic(spec, out)
    return manifest
