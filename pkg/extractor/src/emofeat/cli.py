"""`emofeat extract --config <json> --audio-list <path>`

The config selects the feature kind and output directory:

    {"encoder": "mfb_f0",            # or a pre-trained encoder name
     "out_dir": "features/mfb",
     "layer": -1,                    # encoder layer (encoders only)
     "model_dir": null,              # local weights (encoders only)
     "workers": 1}

The audio list holds one mono WAV path per line (optionally "id<TAB>path").
Every emitted file lands as <out_dir>/<id>.emof, plus a manifest fragment
<out_dir>/fragment.jsonl with one {"id", "feature_paths", "frames"} record
per utterance. Unreadable files are reported and skipped; the exit code is
2 if any file failed.
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

from emofeat.audio import AudioError, read_wav
from emofeat.emof import write_emof
from emofeat.encoders import ENCODERS, EncoderError, load_encoder
from emofeat.mfb import extract_mfb_f0

CHOICES = ("mfb_f0",) + tuple(sorted(ENCODERS))


@dataclass
class ExtractorConfig:
    encoder: str
    out_dir: str
    layer: int = -1
    model_dir: str | None = None
    workers: int = 1

    def validate(self) -> None:
        if self.encoder not in CHOICES:
            raise ValueError(f"unknown encoder {self.encoder!r}; "
                             f"choose from {CHOICES}")
        if self.workers < 1:
            raise ValueError("workers must be at least 1")


def _parse_audio_list(path: Path) -> list[tuple[str, Path]]:
    entries = []
    for line in path.read_text().splitlines():
        line = line.strip()
        if not line:
            continue
        if "\t" in line:
            uid, wav = line.split("\t", 1)
        else:
            wav = line
            uid = Path(line).stem
        entries.append((uid, Path(wav)))
    return entries


def extract_batch(cfg: ExtractorConfig, entries: list[tuple[str, Path]],
                  log=sys.stderr) -> tuple[list[dict], list[str]]:
    """Extract every entry; returns (manifest fragment records, failures)."""
    cfg.validate()
    out_dir = Path(cfg.out_dir)
    session = None
    if cfg.encoder != "mfb_f0":
        session = load_encoder(cfg.encoder, cfg.layer, cfg.model_dir)

    def one(entry):
        uid, wav = entry
        samples, sr = read_wav(wav)
        if session is None:
            feats = extract_mfb_f0(samples, sr)
            period = 20.0
        else:
            feats = session.embed(samples, sr)
            period = session.frame_period_ms
        write_emof(out_dir / f"{uid}.emof", feats, period)
        return {"id": uid, "feature_paths": [f"{uid}.emof"],
                "frames": int(feats.shape[0])}

    records, failures = [], []

    def run(entry):
        try:
            return entry[0], one(entry), None
        except (AudioError, EncoderError, ValueError, OSError) as e:
            return entry[0], None, str(e)

    # encoders hold one big model; file-level threads only help the
    # numpy-bound baseline features
    workers = cfg.workers if session is None else 1
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, entries))
    else:
        results = [run(e) for e in entries]
    for uid, record, err in results:
        if err is not None:
            print(f"emofeat: {uid}: {err}", file=log)
            failures.append(uid)
        else:
            records.append(record)
    records.sort(key=lambda r: r["id"])
    frag = out_dir / "fragment.jsonl"
    frag.parent.mkdir(parents=True, exist_ok=True)
    with open(frag, "w") as f:
        for r in records:
            f.write(json.dumps(r) + "\n")
    return records, failures


def run(argv) -> int:
    parser = argparse.ArgumentParser(prog="emofeat")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("extract", help="extract features for a list of WAVs")
    p.add_argument("--config", required=True)
    p.add_argument("--audio-list", required=True)
    try:
        args = parser.parse_args(argv)
    except SystemExit:
        return 1
    try:
        cfg = ExtractorConfig(**json.loads(Path(args.config).read_text()))
        entries = _parse_audio_list(Path(args.audio_list))
    except (OSError, ValueError, TypeError) as e:
        print(f"emofeat: bad configuration: {e}", file=sys.stderr)
        return 2
    try:
        records, failures = extract_batch(cfg, entries)
    except (EncoderError, ValueError) as e:
        print(f"emofeat: {e}", file=sys.stderr)
        return 2
    print(f"wrote {len(records)} feature files to {cfg.out_dir}"
          + (f"; {len(failures)} failed" if failures else ""))
    return 2 if failures else 0


def main() -> None:
    sys.exit(run(sys.argv[1:]))
