"""The GRU / time-convolution GRU emotion networks.

A variable-length feature sequence runs through an optional depthwise
temporal convolution (whose output is concatenated with the raw features,
so the first recurrent layer sees twice the input width), two stacked GRU
layers of 128 units, masked mean pooling over time, and a tanh embedding
layer of 128; two linear heads map the embedding to the three dimensional
emotion scores (activation, valence, dominance on the raw 1-7 scale) and
seven discrete-class logits. The embedding is the distillation target.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from emodist.nnstack import (
    DepthwiseTConvParams,
    GruCellParams,
    Value,
    gru_sequence,
    gru_sequence_infer,
    load_tensors,
    masked_mean,
    save_tensors,
    tconv_forward,
)
from emodist.nnstack.layers import _uniform
from emodist.nnstack.value import concat

__all__ = ["ModelConfig", "UtteranceOutput", "EmotionModel", "build_model",
           "load_model", "param_report"]

# fixed per-layer seed slots, so identical layers get identical inits
# regardless of which other layers exist
_SEED_SLOTS = {"tconv": 0, "gru1": 1, "gru2": 2, "embed": 3,
               "head_reg": 4, "head_cls": 5}


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int
    use_tconv: bool = False
    hidden: int = 128
    embed_dim: int = 128
    n_dims: int = 3
    n_classes: int = 7

    def validate(self) -> None:
        for name in ("input_dim", "hidden", "embed_dim", "n_dims", "n_classes"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")


@dataclass
class UtteranceOutput:
    embedding: np.ndarray     # [embed_dim], pre-head representation
    scores: np.ndarray        # [3]: activation, valence, dominance
    class_logits: np.ndarray  # [n_classes]


class _Dense:
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator):
        self.w = Value(_uniform(rng, (d_in, d_out), d_in), requires_grad=True)
        self.b = Value(np.zeros(d_out), requires_grad=True)

    def __call__(self, x: Value) -> Value:
        return x @ self.w + self.b

    def apply(self, x: np.ndarray) -> np.ndarray:
        return x @ self.w.data + self.b.data

    def named(self, prefix: str) -> dict[str, Value]:
        return {f"{prefix}.w": self.w, f"{prefix}.b": self.b}


class EmotionModel:
    """Parameter container plus the forward passes. Training mutates the
    parameters single-threaded; a frozen model is safe to run from many
    threads through the `infer_*` paths."""

    def __init__(self, cfg: ModelConfig, seed: int):
        cfg.validate()
        self.cfg = cfg
        self.seed = seed

        def rng(slot_name: str) -> np.random.Generator:
            ss = np.random.SeedSequence(entropy=seed,
                                        spawn_key=(_SEED_SLOTS[slot_name],))
            return np.random.default_rng(ss)

        self.tconv = (DepthwiseTConvParams.init(cfg.input_dim, rng("tconv"))
                      if cfg.use_tconv else None)
        gru_in = 2 * cfg.input_dim if cfg.use_tconv else cfg.input_dim
        self.gru1 = GruCellParams.init(gru_in, cfg.hidden, rng("gru1"))
        self.gru2 = GruCellParams.init(cfg.hidden, cfg.hidden, rng("gru2"))
        self.embed = _Dense(cfg.hidden, cfg.embed_dim, rng("embed"))
        self.head_reg = _Dense(cfg.embed_dim, cfg.n_dims, rng("head_reg"))
        self.head_cls = _Dense(cfg.embed_dim, cfg.n_classes, rng("head_cls"))

    # -- parameters ---------------------------------------------------------

    def named_parameters(self) -> dict[str, Value]:
        out: dict[str, Value] = {}
        if self.tconv is not None:
            out.update(self.tconv.named("tconv"))
        out.update(self.gru1.named("gru1"))
        out.update(self.gru2.named("gru2"))
        out.update(self.embed.named("embed"))
        out.update(self.head_reg.named("head_reg"))
        out.update(self.head_cls.named("head_cls"))
        return out

    def parameters(self) -> list[Value]:
        return list(self.named_parameters().values())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = set(params) - set(arrays)
        if missing:
            raise ValueError(f"state is missing tensors: {sorted(missing)}")
        for k, p in params.items():
            if arrays[k].shape != p.data.shape:
                raise ValueError(f"shape mismatch for {k}: "
                                 f"{arrays[k].shape} vs {p.data.shape}")
            p.data = np.array(arrays[k], dtype=np.float64)

    # -- forward ------------------------------------------------------------

    def _check_input(self, feats: np.ndarray) -> None:
        if feats.ndim != 3 or feats.shape[0] < 1:
            raise ValueError("expected time-major [T,B,D] with T >= 1")
        if feats.shape[2] != self.cfg.input_dim:
            raise ValueError(f"feature width {feats.shape[2]} does not match "
                             f"model input_dim {self.cfg.input_dim}")

    def forward_batch(self, feats: np.ndarray, mask: np.ndarray | None = None,
                      ) -> tuple[Value, Value, Value]:
        """Training-path forward of a padded batch [T,B,D] (+ mask [T,B]).
        Returns (embedding [B,E], scores [B,3], class logits [B,C])."""
        self._check_input(feats)
        x = Value(feats, requires_grad=False)
        if self.tconv is not None:
            x = concat([x, tconv_forward(self.tconv, x)], axis=2)
        h = gru_sequence(self.gru1, x, mask)
        h = gru_sequence(self.gru2, h, mask)
        pooled = masked_mean(h, mask)
        emb = self.embed(pooled).tanh()
        return emb, self.head_reg(emb), self.head_cls(emb)

    def infer_batch(self, feats: np.ndarray, mask: np.ndarray | None = None,
                    ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Graph-free forward on plain arrays; same outputs as forward_batch."""
        self._check_input(feats)
        x = np.asarray(feats, dtype=np.float64)
        if self.tconv is not None:
            y = tconv_forward(self.tconv, Value(x, requires_grad=False)).data
            x = np.concatenate([x, y], axis=2)
        h = gru_sequence_infer(self.gru1, x, mask)
        h = gru_sequence_infer(self.gru2, h, mask)
        if mask is None:
            pooled = h.mean(axis=0)
        else:
            m = np.asarray(mask, dtype=np.float64)
            pooled = np.einsum("tbh,tb->bh", h, m) / m.sum(axis=0)[:, None]
        emb = np.tanh(self.embed.apply(pooled))
        return emb, self.head_reg.apply(emb), self.head_cls.apply(emb)

    def forward_utterance(self, seq: np.ndarray) -> UtteranceOutput:
        """Map one [T,D] feature sequence to its embedding, scores, and
        class logits."""
        seq = np.asarray(seq, dtype=np.float64)
        if seq.ndim != 2 or seq.shape[0] < 1:
            raise ValueError("expected a non-empty [T,D] sequence")
        emb, scores, logits = self.infer_batch(seq[:, None, :])
        if not np.isfinite(scores).all():
            raise ArithmeticError("non-finite scores from forward pass")
        return UtteranceOutput(emb[0], scores[0], logits[0])

    # -- persistence --------------------------------------------------------

    def save(self, path) -> None:
        path = Path(path)
        save_tensors(path, {k: v.data for k, v in self.named_parameters().items()})
        sidecar = path.with_name(path.name + ".json")
        sidecar.write_text(json.dumps(asdict(self.cfg), sort_keys=True) + "\n")


def build_model(cfg: ModelConfig, seed: int) -> EmotionModel:
    """Construct a model with seeded uniform +/-sqrt(1/fan_in) weights and
    zero biases; layer inits depend only on (seed, layer, shape)."""
    return EmotionModel(cfg, seed)


def load_model(path) -> EmotionModel:
    """Load a checkpoint written by `EmotionModel.save` (with its config
    sidecar)."""
    path = Path(path)
    sidecar = path.with_name(path.name + ".json")
    if not sidecar.exists():
        raise FileNotFoundError(f"missing model config sidecar {sidecar}")
    cfg = ModelConfig(**json.loads(sidecar.read_text()))
    model = build_model(cfg, seed=0)
    model.load_state_arrays(load_tensors(path))
    return model


def param_report(model: EmotionModel) -> dict:
    """Exact parameter count per part, total, and size at 32-bit storage."""
    by_part: dict[str, int] = {}
    for name, p in model.named_parameters().items():
        part = name.split(".", 1)[0]
        by_part[part] = by_part.get(part, 0) + p.data.size
    total = int(sum(by_part.values()))
    return {
        "params": total,
        "bytes_fp32": 4 * total,
        "megabytes_fp32": 4 * total / 2 ** 20,
        "by_part": by_part,
    }
