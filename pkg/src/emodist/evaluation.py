"""Split-level CCC reports, RMSE per valence interval, and embedding export.

All numbers come from the frozen model at 64-bit; the CCC formula is the
one from `losses.ccc`, applied to whole-split prediction/label vectors.
"""

from __future__ import annotations

import csv
import os
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from emodist.data import DataError, FeatureCache, Manifest
from emodist.losses import ccc
from emodist.model import EmotionModel

__all__ = ["evaluate", "ccc_report", "predict_split", "bin_rmse_rows",
           "rmse_by_valence_bin", "export_embeddings"]

DIMS = ("act", "val", "dom")


def predict_split(model: EmotionModel, manifest: Manifest, split: str,
                  cache: FeatureCache | None = None, batch_size: int = 32,
                  ) -> tuple[list[str], np.ndarray, np.ndarray, np.ndarray]:
    """Forward every utterance of a split once (graph-free), in deterministic
    id order. Returns (ids, scores [N,3], labels [N,3], embeddings [N,E])."""
    records = manifest.split(split)
    if not records:
        raise DataError(f"split {split!r} is empty")
    cache = cache or FeatureCache(manifest)
    ordered = sorted(records, key=lambda r: (cache.frames(r), r.id))
    chunks = [ordered[lo:lo + batch_size]
              for lo in range(0, len(ordered), batch_size)]

    def forward_chunk(chunk):
        arrays = [cache.load(r) for r in chunk]
        t_max = max(a.shape[0] for a in arrays)
        feats = np.zeros((t_max, len(chunk), arrays[0].shape[1]))
        mask = np.zeros((t_max, len(chunk)))
        for i, a in enumerate(arrays):
            feats[:a.shape[0], i] = a
            mask[:a.shape[0], i] = 1.0
        emb, scores, _ = model.infer_batch(feats, mask)
        return [(r.id, scores[i], emb[i]) for i, r in enumerate(chunk)]

    # utterance-level results are position-independent, so thread count
    # never changes the report (results reduce by id)
    workers = int(os.environ.get("EMODIST_THREADS", "1"))
    by_id: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    if workers > 1:
        for rec in ordered:
            cache.load(rec)   # warm single-threaded; loads mutate shared state
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = pool.map(forward_chunk, chunks)
    else:
        results = map(forward_chunk, chunks)
    for rows in results:
        for uid, sc, em in rows:
            by_id[uid] = (sc, em)
    ids = sorted(by_id)
    scores = np.stack([by_id[i][0] for i in ids])
    embs = np.stack([by_id[i][1] for i in ids])
    labels = np.stack([r.labels for r in sorted(records, key=lambda r: r.id)])
    return ids, scores, labels, embs


def ccc_report(scores: np.ndarray, labels: np.ndarray) -> dict[str, float]:
    """Per-dimension CCC of [N,3] predictions against [N,3] labels, using
    the losses-module formula (single source of truth)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if scores.shape != labels.shape or scores.ndim != 2 or scores.shape[1] != 3:
        raise ValueError("scores and labels must both be [N,3]")
    return {dim: float(ccc(scores[:, i], labels[:, i]))
            for i, dim in enumerate(DIMS)}


def evaluate(model: EmotionModel, manifest: Manifest, split: str,
             cache: FeatureCache | None = None) -> dict[str, float]:
    """Per-dimension CCC of the model over an entire split."""
    records = manifest.split(split)
    if len(records) < 2:
        raise DataError(f"split {split!r} has {len(records)} utterances; "
                        "CCC needs at least 2")
    _, scores, labels, _ = predict_split(model, manifest, split, cache)
    return ccc_report(scores, labels)


def bin_rmse_rows(pred_val: np.ndarray, true_val: np.ndarray,
                  n_bins: int) -> list[dict]:
    """Valence RMSE per equal-width true-valence interval over [1,7];
    empty bins are absent, never reported as zero."""
    if n_bins < 2:
        raise ValueError("n_bins must be at least 2")
    err2 = (np.asarray(pred_val) - np.asarray(true_val)) ** 2
    width = 6.0 / n_bins
    idx = np.minimum(((np.asarray(true_val) - 1.0) / width).astype(int),
                     n_bins - 1)
    rows = []
    for b in range(n_bins):
        sel = idx == b
        count = int(sel.sum())
        if count == 0:
            continue
        mse = float(err2[sel].mean())
        rows.append({"bin": b, "lo": 1.0 + b * width, "hi": 1.0 + (b + 1) * width,
                     "count": count, "mse": mse, "rmse": float(np.sqrt(mse))})
    return rows


def rmse_by_valence_bin(model: EmotionModel, manifest: Manifest, split: str,
                        n_bins: int = 6, cache: FeatureCache | None = None,
                        ) -> list[dict]:
    """RMSE of the model's valence estimate within equal-width true-valence
    intervals over [1,7]."""
    _, scores, labels, _ = predict_split(model, manifest, split, cache)
    return bin_rmse_rows(scores[:, 1], labels[:, 1], n_bins)


def export_embeddings(model: EmotionModel, manifest: Manifest, split: str,
                      path, cache: FeatureCache | None = None) -> int:
    """Write `id, e000.., act, val, dom` rows (sorted by id) as CSV; returns
    the row count. Repeated exports of a frozen model are byte-identical."""
    ids, _, labels, embs = predict_split(model, manifest, split, cache)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            dim = embs.shape[1]
            writer.writerow(["id"] + [f"e{j:03d}" for j in range(dim)]
                            + ["act", "val", "dom"])
            for i, uid in enumerate(ids):
                writer.writerow([uid] + [repr(float(v)) for v in embs[i]]
                                + [repr(float(v)) for v in labels[i]])
    except OSError as e:
        raise DataError(f"cannot write embedding export {path}: {e}") from e
    return len(ids)
