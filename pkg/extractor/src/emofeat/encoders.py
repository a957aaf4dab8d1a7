"""Frame embeddings from published self-supervised speech encoders.

Runs wav2vec2 / HuBERT forward (inference only, CPU) and takes one
contextualizer layer's hidden states, by default the final layer. Weights
must be available locally (a model directory or a cache the `transformers`
hub can resolve offline).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

# encoder choice -> (default hub id, embedding dim)
ENCODERS = {
    "wav2vec2-base": ("facebook/wav2vec2-base", 768),
    "wav2vec2-base-100h-asr": ("facebook/wav2vec2-base-100h", 768),
    "wav2vec2-large-100h-asr": ("facebook/wav2vec2-large-100h", 1024),
    "hubert-base": ("facebook/hubert-base-ls960", 768),
    "hubert-large": ("facebook/hubert-large-ll60k", 1024),
    "hubert-large-960h-asr": ("facebook/hubert-large-ls960-ft", 1024),
}


class EncoderError(Exception):
    pass


@dataclass
class EncoderSession:
    """A loaded encoder plus the metadata needed to write feature files."""

    model: object
    dim: int
    frame_period_ms: float
    layer: int
    expected_sr: int = 16000

    def embed(self, samples: np.ndarray, sr: int) -> np.ndarray:
        import torch

        if sr != self.expected_sr:
            raise EncoderError(
                f"encoder expects {self.expected_sr} Hz audio, got {sr} Hz")
        with torch.no_grad():
            x = torch.from_numpy(np.asarray(samples, dtype=np.float32))[None, :]
            out = self.model(x, output_hidden_states=True)
        hidden = out.hidden_states[self.layer]
        return hidden[0].numpy().astype(np.float32)


def load_encoder(choice: str, layer: int = -1,
                 model_dir: str | None = None) -> EncoderSession:
    """Load an encoder by name; `model_dir` points at a local directory of
    weights (used verbatim), otherwise the hub id is resolved from cache."""
    if choice not in ENCODERS:
        raise EncoderError(
            f"unknown encoder {choice!r}; expected one of {sorted(ENCODERS)}")
    hub_id, expected_dim = ENCODERS[choice]
    source = model_dir or hub_id
    try:
        import torch  # noqa: F401
        from transformers import AutoModel
    except ImportError as e:
        raise EncoderError(
            "encoder extraction needs the optional dependencies: "
            "pip install 'emofeat[encoders]'") from e
    try:
        model = AutoModel.from_pretrained(source)
    except Exception as e:
        raise EncoderError(
            f"cannot load weights for {choice!r} from {source!r}: {e}. "
            f"Download the model (hub id {hub_id!r}) to a local directory "
            f"and pass it as model_dir.") from e
    model.eval()
    dim = model.config.hidden_size
    if model_dir is None and dim != expected_dim:
        raise EncoderError(
            f"{choice!r} should embed into {expected_dim} dims, "
            f"but the loaded model has {dim}")
    stride = int(np.prod(model.config.conv_stride))
    period_ms = 1000.0 * stride / 16000.0
    return EncoderSession(model=model, dim=dim, frame_period_ms=period_ms,
                          layer=layer)
