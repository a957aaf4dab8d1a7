"""Feature-file and manifest I/O, stream fusion, batching, and the synthetic
corpus generator used for desk-scale verification.

Feature files ("EMOF") hold one [frames x dim] float32 matrix with its frame
period; manifests are JSON-lines of utterance records. The synthetic corpus
mimics the structure of the real task: per utterance, latent activation /
valence / dominance scores are drawn on the 1-7 scale and woven into
slowly-modulated channel patterns. Three views are written per utterance:

  mfb      - stand-in for low-level acoustic features: activation and
             dominance strongly encoded, valence channels only 0.5-correlated
             with the valence latent (the premise that low-level features
             under-determine valence);
  embed_a  - stand-in for pre-trained embeddings, valence carried as v+u
             with a per-utterance nuisance u;
  embed_b  - complementary view carrying v-u, so the two embed views jointly
             determine valence exactly while each alone is partial.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

__all__ = [
    "DataError",
    "FeatureFileError",
    "BadMagicError",
    "TruncatedFileError",
    "PayloadMismatchError",
    "FeatureSequence",
    "UtteranceRecord",
    "Manifest",
    "Batch",
    "FeatureCache",
    "write_feature_file",
    "read_feature_file",
    "read_feature_header",
    "fuse_streams",
    "make_batches",
    "plan_batches",
    "SynthSpec",
    "generate_records",
    "synth_features",
    "gen_synthetic",
    "SYNTH_VIEWS",
]

FRAME_PERIOD_MS = 20.0
FEATURE_MAGIC = b"EMOF"
FEATURE_VERSION = 1
BUCKET_FRAMES = 50          # utterances within 50 frames share a bucket
FUSE_FRAME_SLACK = 2        # more than this many frames apart = misaligned
SPLITS = ("train", "val", "test")


class DataError(Exception):
    """Bad or inconsistent data inputs."""


class FeatureFileError(DataError):
    pass


class BadMagicError(FeatureFileError):
    pass


class TruncatedFileError(FeatureFileError):
    pass


class PayloadMismatchError(FeatureFileError):
    pass


@dataclass
class FeatureSequence:
    """A [frames x dim] float32 matrix of per-frame features."""

    data: np.ndarray
    frame_period_ms: float = FRAME_PERIOD_MS

    @property
    def frames(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]


# -- EMOF files --------------------------------------------------------------

def write_feature_file(path, seq: FeatureSequence) -> None:
    data = np.asarray(seq.data, dtype="<f4")
    if data.ndim != 2:
        raise ValueError("feature data must be 2-D [frames x dim]")
    frames, dim = data.shape
    if dim < 1:
        raise ValueError("feature dim must be at least 1")
    if frames < 1:
        raise ValueError("feature file needs at least one frame")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(FEATURE_MAGIC)
        f.write(struct.pack("<III", FEATURE_VERSION, dim, frames))
        f.write(struct.pack("<d", float(seq.frame_period_ms)))
        f.write(data.tobytes())


def _read_exact(f, n: int, path, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise TruncatedFileError(f"{path}: truncated while reading {what}")
    return buf


def read_feature_header(path) -> tuple[int, int, float]:
    """Return (dim, frames, frame_period_ms) without reading the payload."""
    path = Path(path)
    try:
        f = open(path, "rb")
    except OSError as e:
        raise DataError(f"cannot open feature file {path}: {e}") from e
    with f:
        if _read_exact(f, 4, path, "magic") != FEATURE_MAGIC:
            raise BadMagicError(f"{path}: not a feature file (bad magic)")
        version, dim, frames = struct.unpack("<III", _read_exact(f, 12, path, "header"))
        if version != FEATURE_VERSION:
            raise FeatureFileError(f"{path}: unsupported version {version}")
        (period,) = struct.unpack("<d", _read_exact(f, 8, path, "frame period"))
        return dim, frames, period


def read_feature_file(path) -> FeatureSequence:
    path = Path(path)
    dim, frames, period = read_feature_header(path)
    with open(path, "rb") as f:
        f.seek(4 + 12 + 8)
        payload = f.read()
    expected = 4 * dim * frames
    if len(payload) < expected:
        raise TruncatedFileError(
            f"{path}: payload holds {len(payload)} bytes, header promises {expected}")
    if len(payload) > expected:
        raise PayloadMismatchError(
            f"{path}: {len(payload) - expected} trailing bytes beyond "
            f"{frames}x{dim} payload")
    data = np.frombuffer(payload, dtype="<f4").reshape(frames, dim)
    return FeatureSequence(data.copy(), period)


def fuse_streams(seqs: list[FeatureSequence]) -> FeatureSequence:
    """Frame-wise concatenation of feature streams, truncated to the
    shortest; streams more than FUSE_FRAME_SLACK frames apart are rejected
    as misaligned."""
    if len(seqs) < 2:
        raise ValueError("fusion needs at least two streams")
    periods = {float(s.frame_period_ms) for s in seqs}
    if len(periods) != 1:
        raise DataError(f"cannot fuse streams with frame periods {sorted(periods)}")
    frames = [s.frames for s in seqs]
    if max(frames) - min(frames) > FUSE_FRAME_SLACK:
        raise DataError(
            f"streams are misaligned: frame counts {frames} differ by more "
            f"than {FUSE_FRAME_SLACK}")
    n = min(frames)
    data = np.concatenate([s.data[:n] for s in seqs], axis=1)
    return FeatureSequence(data, seqs[0].frame_period_ms)


# -- manifests ----------------------------------------------------------------

@dataclass
class UtteranceRecord:
    id: str
    feature_paths: list[str]    # relative to the manifest directory
    act: float
    val: float
    dom: float
    emo_class: int
    split: str

    @property
    def labels(self) -> np.ndarray:
        return np.array([self.act, self.val, self.dom], dtype=np.float64)

    def validate(self) -> None:
        if not self.feature_paths:
            raise DataError(f"{self.id}: record has no feature paths")
        for name in ("act", "val", "dom"):
            v = getattr(self, name)
            if not (1.0 <= v <= 7.0):
                raise DataError(f"{self.id}: {name}={v} outside the 1-7 scale")
        if not (0 <= self.emo_class < 7):
            raise DataError(f"{self.id}: emo_class={self.emo_class} not in [0,7)")
        if self.split not in SPLITS:
            raise DataError(f"{self.id}: unknown split {self.split!r}")


@dataclass
class Manifest:
    records: list[UtteranceRecord]
    base_dir: Path = field(default_factory=Path)

    def validate(self) -> None:
        seen = set()
        for r in self.records:
            r.validate()
            if r.id in seen:
                raise DataError(f"duplicate utterance id {r.id!r}")
            seen.add(r.id)

    def split(self, name: str) -> list[UtteranceRecord]:
        if name not in SPLITS:
            raise DataError(f"unknown split {name!r}")
        return [r for r in self.records if r.split == name]

    def resolve(self, rec: UtteranceRecord) -> list[Path]:
        return [self.base_dir / p for p in rec.feature_paths]

    def with_view(self, view_dirs: list[str]) -> "Manifest":
        """Rewrite every record's feature paths to `<dir>/<id>.emof` for the
        given view directories (relative to the manifest directory)."""
        recs = [UtteranceRecord(r.id, [str(Path(d) / f"{r.id}.emof")
                                       for d in view_dirs],
                                r.act, r.val, r.dom, r.emo_class, r.split)
                for r in self.records]
        return Manifest(recs, self.base_dir)

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as f:
            for r in self.records:
                f.write(json.dumps({
                    "id": r.id, "feature_paths": r.feature_paths,
                    "act": r.act, "val": r.val, "dom": r.dom,
                    "emo_class": r.emo_class, "split": r.split,
                }) + "\n")

    @classmethod
    def load(cls, path) -> "Manifest":
        path = Path(path)
        try:
            lines = path.read_text().splitlines()
        except OSError as e:
            raise DataError(f"cannot read manifest {path}: {e}") from e
        records = []
        for lineno, line in enumerate(lines, 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                records.append(UtteranceRecord(
                    id=d["id"], feature_paths=list(d["feature_paths"]),
                    act=float(d["act"]), val=float(d["val"]), dom=float(d["dom"]),
                    emo_class=int(d["emo_class"]), split=d["split"]))
            except (KeyError, ValueError, TypeError) as e:
                raise DataError(f"{path}:{lineno}: bad manifest record: {e}") from e
        m = cls(records, path.parent)
        m.validate()
        return m


# -- batching ------------------------------------------------------------------

@dataclass
class Batch:
    ids: list[str]
    feats: np.ndarray       # [B, T_max, D] float64, zero-padded
    mask: np.ndarray        # [B, T_max], 1.0 on valid frames
    labels: np.ndarray      # [B, 3]
    classes: np.ndarray     # [B] int

    @property
    def size(self) -> int:
        return len(self.ids)


class FeatureCache:
    """Loads, fuses, and caches per-utterance feature matrices (float64)."""

    def __init__(self, manifest: Manifest):
        self.manifest = manifest
        self._arrays: dict[str, np.ndarray] = {}
        self._frames: dict[str, int] = {}

    def frames(self, rec: UtteranceRecord) -> int:
        n = self._frames.get(rec.id)
        if n is None:
            n = min(read_feature_header(p)[1] for p in self.manifest.resolve(rec))
            self._frames[rec.id] = n
        return n

    def load(self, rec: UtteranceRecord) -> np.ndarray:
        arr = self._arrays.get(rec.id)
        if arr is None:
            paths = self.manifest.resolve(rec)
            missing = [str(p) for p in paths if not p.exists()]
            if missing:
                raise DataError(f"{rec.id}: missing feature files: {missing}")
            seqs = [read_feature_file(p) for p in paths]
            seq = seqs[0] if len(seqs) == 1 else fuse_streams(seqs)
            arr = seq.data.astype(np.float64)
            self._arrays[rec.id] = arr
            self._frames[rec.id] = arr.shape[0]
        return arr


def plan_batches(manifest: Manifest, split: str, batch_size: int, seed: int,
                 cache: FeatureCache | None = None) -> list[list[UtteranceRecord]]:
    """Length-bucketed, seed-shuffled grouping; every utterance exactly once.
    A trailing singleton is folded into the previous batch (the CCC loss
    needs at least two samples)."""
    if batch_size < 2:
        raise DataError("batch_size must be at least 2 (CCC needs 2 samples)")
    records = manifest.split(split)
    if len(records) < 2:
        raise DataError(f"split {split!r} has {len(records)} utterances; need >= 2")
    cache = cache or FeatureCache(manifest)
    buckets: dict[int, list[UtteranceRecord]] = {}
    for r in records:
        buckets.setdefault(cache.frames(r) // BUCKET_FRAMES, []).append(r)
    rng = np.random.default_rng(seed)
    ordered: list[UtteranceRecord] = []
    for key in sorted(buckets):
        group = buckets[key]
        rng.shuffle(group)
        ordered.extend(group)
    plan = [ordered[i:i + batch_size] for i in range(0, len(ordered), batch_size)]
    if len(plan) > 1 and len(plan[-1]) == 1:
        plan[-2].extend(plan.pop())
    return plan


def _materialize(recs: list[UtteranceRecord], cache: FeatureCache) -> Batch:
    arrays = [cache.load(r) for r in recs]
    t_max = max(a.shape[0] for a in arrays)
    b = len(recs)
    d = arrays[0].shape[1]
    feats = np.zeros((b, t_max, d))
    mask = np.zeros((b, t_max))
    for i, a in enumerate(arrays):
        if a.shape[1] != d:
            raise DataError(
                f"{recs[i].id}: width {a.shape[1]} differs from batch width {d}")
        feats[i, :a.shape[0]] = a
        mask[i, :a.shape[0]] = 1.0
    return Batch(
        ids=[r.id for r in recs],
        feats=feats,
        mask=mask,
        labels=np.stack([r.labels for r in recs]),
        classes=np.array([r.emo_class for r in recs], dtype=np.int64),
    )


def make_batches(manifest: Manifest, split: str, batch_size: int, seed: int,
                 cache: FeatureCache | None = None) -> Iterator[Batch]:
    """Yield padded training batches for one epoch (see `plan_batches`)."""
    cache = cache or FeatureCache(manifest)
    for recs in plan_batches(manifest, split, batch_size, seed, cache):
        yield _materialize(recs, cache)


# -- synthetic corpus -----------------------------------------------------------

SYNTH_VIEWS = ("mfb", "embed_a", "embed_b")

# per-channel-group amplitudes; the valence signal in the student view is
# deliberately faint so that plain CCC training struggles to exploit it
_TEACHER_AMP = (1.0, 1.0, 1.0, 1.0)      # act, val, dom, distractor
_STUDENT_AMP = (1.0, 0.2, 1.0, 1.0)
_STUDENT_VAL_MIX = 0.5                   # corr of student v channels w/ latent
_GROUPS = 4                              # act, val, dom, distractor


@dataclass(frozen=True)
class SynthSpec:
    n_utts: int
    seed: int
    teacher_dim: int = 16
    student_dim: int = 8
    noise: float = 0.3

    def validate(self) -> None:
        if self.n_utts < 0:
            raise ValueError("n_utts must be non-negative")
        if self.teacher_dim < 8:
            raise ValueError("teacher_dim must be >= 8 (two views of >= 4)")
        if self.student_dim < 4:
            raise ValueError("student_dim must be >= 4")
        if self.noise < 0:
            raise ValueError("noise must be non-negative")


@dataclass
class SynthRecord:
    id: str
    split: str
    act: float
    val: float
    dom: float
    emo_class: int
    n_frames: int
    nuis_teacher: float      # u: shared +/- nuisance of the embed views
    nuis_student: float      # w: nuisance mixed into student valence
    nuis_distract: float     # e: latent of the distractor channels
    cycles: tuple[int, int, int, int]


def _emo_class(a: float, v: float, d: float) -> int:
    octant = 4 * (a > 4.0) + 2 * (v > 4.0) + (d > 4.0)
    return min(int(octant), 6)


def generate_records(spec: SynthSpec) -> list[SynthRecord]:
    """Draw the per-utterance latent state (no feature synthesis). Splits
    are assigned 2/3 train, 1/6 val, 1/6 test by index."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    n = spec.n_utts
    n_val = n_test = n // 6
    n_train = n - n_val - n_test
    records = []
    for i in range(n):
        a, v, d = rng.uniform(1.0, 7.0, size=3)
        dur = rng.uniform(2.75, 11.0)
        u, w, e = rng.uniform(-1.0, 1.0, size=3)
        cycles = tuple(int(c) for c in rng.integers(1, 4, size=_GROUPS))
        split = ("train" if i < n_train
                 else "val" if i < n_train + n_val else "test")
        records.append(SynthRecord(
            id=f"utt{i:05d}", split=split, act=float(a), val=float(v),
            dom=float(d), emo_class=_emo_class(a, v, d),
            n_frames=int(round(dur * 1000.0 / FRAME_PERIOD_MS)),
            nuis_teacher=float(u), nuis_student=float(w),
            nuis_distract=float(e), cycles=cycles))
    return records


def _envelopes(n_frames: int, cycles: tuple[int, ...]) -> np.ndarray:
    """[T, G] slow modulations 1 + 0.5*cos(...), each averaging exactly 1
    over the utterance (whole cycles)."""
    t = (np.arange(n_frames) + 0.5) / n_frames
    return 1.0 + 0.5 * np.cos(2.0 * np.pi * np.outer(t, np.asarray(cycles)))


def synth_features(rec: SynthRecord, view: str, dim: int,
                   noise: float, rng: np.random.Generator) -> np.ndarray:
    """Synthesize one [T, dim] float32 view of an utterance."""
    a_n = (rec.act - 4.0) / 3.0
    v_n = (rec.val - 4.0) / 3.0
    d_n = (rec.dom - 4.0) / 3.0
    if view == "mfb":
        amps = _STUDENT_AMP
        mix = _STUDENT_VAL_MIX
        v_sig = mix * v_n + np.sqrt(1.0 - mix * mix) * rec.nuis_student
    elif view == "embed_a":
        amps = _TEACHER_AMP
        v_sig = (v_n + rec.nuis_teacher) / np.sqrt(2.0)
    elif view == "embed_b":
        amps = _TEACHER_AMP
        v_sig = (v_n - rec.nuis_teacher) / np.sqrt(2.0)
    else:
        raise ValueError(f"unknown view {view!r}")
    group_sig = np.array([amps[0] * a_n, amps[1] * v_sig,
                          amps[2] * d_n, amps[3] * rec.nuis_distract])
    env = _envelopes(rec.n_frames, rec.cycles)              # [T, G]
    chan_group = np.arange(dim) % _GROUPS
    chan_sign = np.where((np.arange(dim) // _GROUPS) % 2 == 0, 1.0, -1.0)
    data = env[:, chan_group] * (group_sig[chan_group] * chan_sign)
    if noise > 0:
        data = data + noise * rng.standard_normal((rec.n_frames, dim))
    return data.astype(np.float32)


def gen_synthetic(spec: SynthSpec, out_dir) -> Manifest:
    """Write the three-view synthetic corpus and its manifest (student view
    as the default feature paths); returns the loaded manifest."""
    out_dir = Path(out_dir)
    records = generate_records(spec)
    view_dims = {
        "mfb": spec.student_dim,
        "embed_a": spec.teacher_dim // 2,
        "embed_b": spec.teacher_dim - spec.teacher_dim // 2,
    }
    noise_rng = np.random.default_rng(np.random.SeedSequence(
        entropy=spec.seed, spawn_key=(1,)))
    utt_records = []
    for rec in records:
        for view in SYNTH_VIEWS:
            data = synth_features(rec, view, view_dims[view], spec.noise,
                                  noise_rng)
            write_feature_file(out_dir / "features" / view / f"{rec.id}.emof",
                               FeatureSequence(data))
        utt_records.append(UtteranceRecord(
            id=rec.id,
            feature_paths=[str(Path("features") / "mfb" / f"{rec.id}.emof")],
            act=rec.act, val=rec.val, dom=rec.dom,
            emo_class=rec.emo_class, split=rec.split))
    manifest = Manifest(utt_records, out_dir)
    manifest.save(out_dir / "manifest.jsonl")
    return manifest
