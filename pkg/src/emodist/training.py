"""Adam optimization, the multi-task epoch loop, CCC-based early stopping,
and the teacher-to-student distillation pipeline.

Distillation runs in two phases driven by the coefficient schedule: the
first 40 epochs emphasize matching the frozen teacher embeddings, the rest
emphasize the emotion tasks. Teacher embeddings, teacher scores, and the
per-sample confidence weights are precomputed once into a cache file, so
student training never runs the teacher.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from emodist import losses
from emodist.data import DataError, FeatureCache, Manifest, make_batches
from emodist.losses import GammaInputs, ScheduleState
from emodist.model import EmotionModel
from emodist.nnstack.value import Value, backward

__all__ = [
    "NumericError",
    "Adam",
    "TeacherCache",
    "prepare_teacher_cache",
    "LossBreakdown",
    "train_epoch",
    "FitConfig",
    "FitReport",
    "fit",
]

TEACHER_MAGIC = b"EMOT"
TEACHER_VERSION = 1
TEACHER_EMBED_DIM = 128


class NumericError(Exception):
    """Non-finite loss or gradients; the optimization step was aborted."""


class Adam:
    """Bias-corrected Adam over a fixed parameter list."""

    def __init__(self, params: list[Value], lr: float = 5e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]

    def step(self) -> None:
        grads = []
        for p in self.params:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.isfinite(g).all():
                raise NumericError(
                    f"non-finite gradient in parameter of shape {p.data.shape}; "
                    "step aborted")
            grads.append(g)
        self.step_count += 1
        b1c = 1.0 - self.beta1 ** self.step_count
        b2c = 1.0 - self.beta2 ** self.step_count
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)


def clip_global_norm(params: list[Value], max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most `max_norm`;
    returns the pre-clip norm."""
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    norm = float(np.sqrt(total))
    if norm > max_norm:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return norm


# -- teacher cache ---------------------------------------------------------------

@dataclass
class TeacherCache:
    """Frozen teacher outputs per utterance id: 128-dim embedding, the three
    teacher scores, and the confidence gamma."""

    embeddings: dict[str, np.ndarray]
    scores: dict[str, np.ndarray]
    gammas: dict[str, float]

    def __len__(self) -> int:
        return len(self.embeddings)

    def lookup(self, ids: list[str]) -> tuple[np.ndarray, np.ndarray]:
        """Return stacked embeddings [B,128] and gammas [B] for a batch."""
        embs, gams = [], []
        for i in ids:
            if i not in self.embeddings:
                raise DataError(f"teacher cache has no entry for utterance {i!r}")
            embs.append(self.embeddings[i])
            gams.append(self.gammas[i])
        return np.stack(embs), np.array(gams)

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        ids = sorted(self.embeddings)
        with open(path, "wb") as f:
            f.write(TEACHER_MAGIC)
            f.write(struct.pack("<II", TEACHER_VERSION, len(ids)))
            for i in ids:
                enc = i.encode("utf-8")
                f.write(struct.pack("<I", len(enc)))
                f.write(enc)
                f.write(self.embeddings[i].astype("<f8").tobytes())
                f.write(self.scores[i].astype("<f8").tobytes())
                f.write(struct.pack("<d", self.gammas[i]))

    @classmethod
    def load(cls, path) -> "TeacherCache":
        path = Path(path)
        embeddings, scores, gammas = {}, {}, {}
        with open(path, "rb") as f:
            def need(n: int, what: str) -> bytes:
                buf = f.read(n)
                if len(buf) != n:
                    raise DataError(f"{path}: truncated teacher cache ({what})")
                return buf

            if need(4, "magic") != TEACHER_MAGIC:
                raise DataError(f"{path}: not a teacher cache (bad magic)")
            version, count = struct.unpack("<II", need(8, "header"))
            if version != TEACHER_VERSION:
                raise DataError(f"{path}: unsupported cache version {version}")
            for _ in range(count):
                (id_len,) = struct.unpack("<I", need(4, "id length"))
                uid = need(id_len, "id").decode("utf-8")
                emb = np.frombuffer(need(8 * TEACHER_EMBED_DIM, "embedding"),
                                    dtype="<f8").copy()
                sc = np.frombuffer(need(24, "scores"), dtype="<f8").copy()
                (gam,) = struct.unpack("<d", need(8, "gamma"))
                embeddings[uid] = emb
                scores[uid] = sc
                gammas[uid] = gam
        return cls(embeddings, scores, gammas)


def prepare_teacher_cache(teacher: EmotionModel, manifest: Manifest,
                          out_path=None, batch_size: int = 32) -> TeacherCache:
    """Run the frozen teacher over every training utterance, compute the
    per-sample confidence from its residuals, and (optionally) persist."""
    if teacher.cfg.embed_dim != TEACHER_EMBED_DIM:
        raise ValueError(
            f"teacher embedding dim {teacher.cfg.embed_dim} unsupported; the "
            f"cache format carries {TEACHER_EMBED_DIM}-dim embeddings")
    records = manifest.split("train")
    if not records:
        raise DataError("manifest has no training utterances to cache")
    missing = [str(p) for r in records for p in manifest.resolve(r)
               if not p.exists()]
    if missing:
        raise DataError(f"missing teacher feature files: {missing}")
    cache = FeatureCache(manifest)
    embeddings: dict[str, np.ndarray] = {}
    scores: dict[str, np.ndarray] = {}
    gammas: dict[str, float] = {}
    ordered = sorted(records, key=lambda r: (cache.frames(r), r.id))
    for lo in range(0, len(ordered), batch_size):
        chunk = ordered[lo:lo + batch_size]
        arrays = [cache.load(r) for r in chunk]
        t_max = max(a.shape[0] for a in arrays)
        feats = np.zeros((len(chunk), t_max, arrays[0].shape[1]))
        mask = np.zeros((len(chunk), t_max))
        for i, a in enumerate(arrays):
            feats[i, :a.shape[0]] = a
            mask[i, :a.shape[0]] = 1.0
        emb, sc, _ = teacher.infer_batch(
            np.ascontiguousarray(feats.transpose(1, 0, 2)),
            np.ascontiguousarray(mask.T))
        for i, r in enumerate(chunk):
            embeddings[r.id] = emb[i]
            scores[r.id] = sc[i]
            gammas[r.id] = losses.gamma_confidence(
                GammaInputs(r.labels, sc[i]))
    result = TeacherCache(embeddings, scores, gammas)
    if out_path is not None:
        result.save(out_path)
    return result


# -- epoch loop --------------------------------------------------------------------

@dataclass
class LossBreakdown:
    epoch: int
    kappa: float
    lam: float
    l_ccc: float
    l_ce: float
    l_dis: float
    gamma_mean: float
    train_ccc: dict[str, float] = field(default_factory=dict)
    val_ccc: dict[str, float] = field(default_factory=dict)
    grad_clips: int = 0

    def to_json(self) -> str:
        return json.dumps({
            "epoch": self.epoch, "kappa": self.kappa, "lambda": self.lam,
            "l_ccc": self.l_ccc, "l_ce": self.l_ce, "l_dis": self.l_dis,
            "gamma_mean": self.gamma_mean, "train_ccc": self.train_ccc,
            "val_ccc": self.val_ccc, "grad_clips": self.grad_clips,
        })


def train_epoch(model: EmotionModel, batches, opt: Adam,
                sched: ScheduleState | None,
                teacher_cache: TeacherCache | None = None,
                clip_norm: float = 5.0) -> LossBreakdown:
    """One pass over the batches: forward, combined loss, backward, Adam.
    Returns the epoch-aggregated loss breakdown (val_ccc left empty)."""
    sums = {"ccc": 0.0, "ce": 0.0, "dis": 0.0, "gamma": 0.0}
    n_batches = 0
    clips = 0
    preds_all, labels_all = [], []
    distilling = (teacher_cache is not None and sched is not None
                  and sched.lam != 0.0)
    for batch in batches:
        feats = np.ascontiguousarray(batch.feats.transpose(1, 0, 2))
        mask = np.ascontiguousarray(batch.mask.T)
        emb, score_v, logit_v = model.forward_batch(feats, mask)
        l_ccc = losses.ccc_loss(score_v, batch.labels)
        l_ce = losses.cross_entropy(logit_v, batch.classes)
        l_dis = None
        gamma_mean = 1.0
        if distilling:
            t_emb, gam = teacher_cache.lookup(batch.ids)
            l_dis = losses.distillation_loss(t_emb, emb, gam)
            gamma_mean = float(gam.mean())
        total = losses.total_loss(l_ccc, l_ce, l_dis, sched)
        if not np.isfinite(total.data):
            raise NumericError(f"non-finite training loss at step "
                               f"{opt.step_count}")
        model.zero_grad()
        backward(total)
        if clip_norm and clip_global_norm(opt.params, clip_norm) > clip_norm:
            clips += 1
        opt.step()

        sums["ccc"] += l_ccc.item()
        sums["ce"] += l_ce.item()
        sums["dis"] += l_dis.item() if l_dis is not None else 0.0
        sums["gamma"] += gamma_mean
        n_batches += 1
        preds_all.append(score_v.data.copy())
        labels_all.append(batch.labels)
    if n_batches == 0:
        raise DataError("no batches to train on")
    preds = np.concatenate(preds_all)
    labels = np.concatenate(labels_all)
    train_ccc = {dim: losses.ccc(preds[:, i], labels[:, i])
                 for i, dim in enumerate(("act", "val", "dom"))}
    return LossBreakdown(
        epoch=sched.epoch if sched else 0,
        kappa=sched.kappa if sched else 1.0,
        lam=sched.lam if sched else 0.0,
        l_ccc=sums["ccc"] / n_batches,
        l_ce=sums["ce"] / n_batches,
        l_dis=sums["dis"] / n_batches,
        gamma_mean=sums["gamma"] / n_batches if distilling else 0.0,
        train_ccc=train_ccc,
        grad_clips=clips,
    )


# -- fit ----------------------------------------------------------------------------

@dataclass
class FitConfig:
    max_epochs: int = 100
    patience: int = 10
    batch_size: int = 32
    seed: int = 0
    lr: float = 5e-4
    clip_norm: float = 5.0
    # with a teacher attached, early stopping only arms after the schedule
    # switch (the first phase optimizes distillation, not the CCC metric)
    early_stop_from: int | None = None
    schedule_fn: object = None      # epoch -> ScheduleState, test hook


@dataclass
class FitReport:
    history: list[LossBreakdown]
    best_epoch: int
    best_val_ccc: dict[str, float]
    stopped_early: bool
    diverged: bool

    @property
    def epochs_run(self) -> int:
        return len(self.history)

    def best_mean_ccc(self) -> float:
        return float(np.mean(list(self.best_val_ccc.values())))


def _epoch_seed(seed: int, epoch: int) -> int:
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(1000 + epoch,))
    return int(ss.generate_state(1)[0])


def fit(model: EmotionModel, manifest: Manifest, cfg: FitConfig,
        teacher_cache: TeacherCache | None = None,
        log_path=None) -> FitReport:
    """Train with per-epoch validation CCC tracking and early stopping;
    the model is left holding the best-validation parameters."""
    from emodist.evaluation import evaluate  # local import, no cycle at load

    if not manifest.split("train") or not manifest.split("val"):
        raise DataError("fit needs non-empty train and val splits")
    cache = FeatureCache(manifest)
    opt = Adam(model.parameters(), lr=cfg.lr)
    if cfg.schedule_fn is not None:
        sched_fn = cfg.schedule_fn
    elif teacher_cache is not None:
        sched_fn = losses.schedule
    else:
        sched_fn = lambda e: ScheduleState(e, 1.0, 0.0)  # noqa: E731
    arm_from = cfg.early_stop_from
    if arm_from is None:
        arm_from = losses.SCHEDULE_SWITCH_EPOCH if teacher_cache is not None else 0

    history: list[LossBreakdown] = []
    best_epoch = -1
    best_metric = -np.inf
    best_val: dict[str, float] = {}
    best_state: dict[str, np.ndarray] | None = None
    stopped_early = False
    diverged = False
    log_f = open(log_path, "w") if log_path is not None else None
    try:
        for epoch in range(cfg.max_epochs):
            sched = sched_fn(epoch)
            batches = make_batches(manifest, "train", cfg.batch_size,
                                   _epoch_seed(cfg.seed, epoch), cache)
            try:
                breakdown = train_epoch(model, batches, opt, sched,
                                        teacher_cache, cfg.clip_norm)
            except NumericError:
                diverged = True
                break
            breakdown.epoch = epoch
            val = evaluate(model, manifest, "val", cache)
            if not all(np.isfinite(v) for v in val.values()):
                diverged = True
                break
            breakdown.val_ccc = val
            history.append(breakdown)
            if log_f:
                log_f.write(breakdown.to_json() + "\n")
            metric = float(np.mean(list(val.values())))
            if metric > best_metric:
                best_metric = metric
                best_epoch = epoch
                best_val = val
                best_state = model.state_arrays()
            if epoch >= arm_from and epoch - max(best_epoch, arm_from) > cfg.patience:
                stopped_early = True
                break
    finally:
        if log_f:
            log_f.close()
    if best_state is not None:
        model.load_state_arrays(best_state)
    return FitReport(history=history, best_epoch=best_epoch,
                     best_val_ccc=best_val, stopped_early=stopped_early,
                     diverged=diverged)
