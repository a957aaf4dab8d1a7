"""Cross-package conformance: everything emofeat emits must parse in the
training stack's reader with zero value drift at 32-bit, and re-extraction
must be byte-identical."""

import json

import numpy as np
import pytest

from emofeat.cli import ExtractorConfig, extract_batch, run
from emofeat.emof import read_emof, write_emof
from emofeat.mfb import extract_mfb_f0

emodist_data = pytest.importorskip(
    "emodist.data", reason="conformance check needs the consumer package")


class TestFormatConformance:
    def test_emitted_file_parses_in_consumer_reader(self, tmp_path, tone):
        feats = extract_mfb_f0(tone(250), 16000)
        path = tmp_path / "u.emof"
        write_emof(path, feats, 20.0)
        seq = emodist_data.read_feature_file(path)
        assert seq.frame_period_ms == 20.0
        assert seq.dim == 43
        assert np.array_equal(seq.data, feats.astype(np.float32))

    def test_consumer_written_file_parses_here(self, tmp_path, rng=np.random.default_rng(3)):
        data = rng.standard_normal((30, 8)).astype(np.float32)
        path = tmp_path / "back.emof"
        emodist_data.write_feature_file(
            path, emodist_data.FeatureSequence(data, 20.0))
        got, period = read_emof(path)
        assert period == 20.0
        assert np.array_equal(got, data)


class TestBatchExtraction:
    def make_list(self, tmp_path, wav_writer, tone):
        wavs = [wav_writer("a.wav", tone(180)),
                wav_writer("b.wav", np.zeros(16000)),
                wav_writer("c.wav", tone(320, seconds=2.0))]
        listing = tmp_path / "list.txt"
        listing.write_text("\n".join(str(w) for w in wavs) + "\n")
        return listing

    def test_batch_writes_files_and_fragment(self, tmp_path, wav_writer, tone):
        self.make_list(tmp_path, wav_writer, tone)
        cfg = ExtractorConfig(encoder="mfb_f0", out_dir=str(tmp_path / "out"))
        entries = [(name, tmp_path / f"{name}.wav") for name in ("a", "b", "c")]
        records, failures = extract_batch(cfg, entries)
        assert failures == []
        assert [r["id"] for r in records] == ["a", "b", "c"]
        for r in records:
            seq = emodist_data.read_feature_file(
                tmp_path / "out" / r["feature_paths"][0])
            assert seq.dim == 43
            assert seq.frames == r["frames"]
        frag = (tmp_path / "out" / "fragment.jsonl").read_text().splitlines()
        assert len(frag) == 3
        assert json.loads(frag[0])["id"] == "a"

    def test_cli_end_to_end_and_determinism(self, tmp_path, wav_writer, tone):
        listing = self.make_list(tmp_path, wav_writer, tone)
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps(
            {"encoder": "mfb_f0", "out_dir": str(tmp_path / "o1")}))
        assert run(["extract", "--config", str(cfg_path),
                    "--audio-list", str(listing)]) == 0
        cfg_path.write_text(json.dumps(
            {"encoder": "mfb_f0", "out_dir": str(tmp_path / "o2")}))
        assert run(["extract", "--config", str(cfg_path),
                    "--audio-list", str(listing)]) == 0
        for name in ("a.emof", "b.emof", "c.emof", "fragment.jsonl"):
            assert (tmp_path / "o1" / name).read_bytes() == \
                (tmp_path / "o2" / name).read_bytes()

    def test_unreadable_audio_skipped_batch_continues(self, tmp_path,
                                                      wav_writer, tone):
        good = wav_writer("ok.wav", tone(200))
        bad = tmp_path / "bad.wav"
        bad.write_bytes(b"junk")
        cfg = ExtractorConfig(encoder="mfb_f0", out_dir=str(tmp_path / "out"))
        records, failures = extract_batch(
            cfg, [("ok", good), ("bad", bad)])
        assert [r["id"] for r in records] == ["ok"]
        assert failures == ["bad"]
        assert (tmp_path / "out" / "ok.emof").exists()

    def test_worker_pool_matches_serial(self, tmp_path, wav_writer, tone):
        entries = [(f"u{i}", wav_writer(f"u{i}.wav", tone(100 + 40 * i)))
                   for i in range(4)]
        cfg1 = ExtractorConfig(encoder="mfb_f0",
                               out_dir=str(tmp_path / "serial"), workers=1)
        cfg4 = ExtractorConfig(encoder="mfb_f0",
                               out_dir=str(tmp_path / "pooled"), workers=4)
        extract_batch(cfg1, entries)
        extract_batch(cfg4, entries)
        for uid, _ in entries:
            assert (tmp_path / "serial" / f"{uid}.emof").read_bytes() == \
                (tmp_path / "pooled" / f"{uid}.emof").read_bytes()

    def test_unknown_encoder_is_config_error(self, tmp_path):
        with pytest.raises(ValueError, match="unknown encoder"):
            ExtractorConfig(encoder="mystery", out_dir=str(tmp_path)).validate()
