import numpy as np
import pytest

from emodist.data import (
    BadMagicError,
    DataError,
    FeatureSequence,
    Manifest,
    PayloadMismatchError,
    SynthSpec,
    TruncatedFileError,
    UtteranceRecord,
    FeatureCache,
    fuse_streams,
    gen_synthetic,
    generate_records,
    make_batches,
    plan_batches,
    read_feature_file,
    read_feature_header,
    synth_features,
    write_feature_file,
)


class TestFeatureFiles:
    def test_round_trip_is_exact(self, rng, tmp_path):
        data = rng.standard_normal((100, 43)).astype(np.float32)
        path = tmp_path / "a.emof"
        write_feature_file(path, FeatureSequence(data, 20.0))
        back = read_feature_file(path)
        assert np.array_equal(back.data, data)
        assert back.frame_period_ms == 20.0
        assert read_feature_header(path) == (43, 100, 20.0)

    def test_truncated_payload_detected(self, rng, tmp_path):
        path = tmp_path / "t.emof"
        write_feature_file(path, FeatureSequence(
            rng.standard_normal((10, 4)).astype(np.float32)))
        raw = path.read_bytes()
        path.write_bytes(raw[:-7])
        with pytest.raises(TruncatedFileError):
            read_feature_file(path)

    def test_trailing_garbage_detected(self, rng, tmp_path):
        path = tmp_path / "g.emof"
        write_feature_file(path, FeatureSequence(
            rng.standard_normal((10, 4)).astype(np.float32)))
        path.write_bytes(path.read_bytes() + b"\x00" * 12)
        with pytest.raises(PayloadMismatchError):
            read_feature_file(path)

    def test_bad_magic_detected(self, tmp_path):
        path = tmp_path / "b.emof"
        path.write_bytes(b"NOPE" + b"\x00" * 40)
        with pytest.raises(BadMagicError):
            read_feature_file(path)

    def test_zero_dim_rejected_on_write(self, tmp_path):
        with pytest.raises(ValueError):
            write_feature_file(tmp_path / "z.emof",
                               FeatureSequence(np.zeros((5, 0), np.float32)))


class TestFusion:
    def seqs(self, rng, frames, dims, period=20.0):
        return [FeatureSequence(rng.standard_normal((f, d)).astype(np.float32),
                                period)
                for f, d in zip(frames, dims)]

    def test_dims_add_up(self, rng):
        a, b = self.seqs(rng, [50, 50], [1024, 1024])
        fused = fuse_streams([a, b])
        assert fused.dim == 2048
        assert np.array_equal(fused.data[:, :1024], a.data)

    def test_self_fusion_duplicates_frames(self, rng):
        (a,) = self.seqs(rng, [20], [6])
        fused = fuse_streams([a, a])
        assert np.array_equal(fused.data[:, :6], fused.data[:, 6:])

    def test_truncates_to_shortest(self, rng):
        a, b = self.seqs(rng, [501, 500], [4, 4])
        assert fuse_streams([a, b]).frames == 500

    def test_misalignment_guard(self, rng):
        a, b = self.seqs(rng, [500, 490], [4, 4])
        with pytest.raises(DataError, match="misaligned"):
            fuse_streams([a, b])

    def test_frame_period_mismatch_rejected(self, rng):
        a, b = self.seqs(rng, [10, 10], [4, 4])
        b.frame_period_ms = 10.0
        with pytest.raises(DataError, match="period"):
            fuse_streams([a, b])

    def test_associative_up_to_ordering(self, rng):
        a, b, c = self.seqs(rng, [30, 30, 30], [3, 4, 5])
        left = fuse_streams([fuse_streams([a, b]), c])
        right = fuse_streams([a, fuse_streams([b, c])])
        assert np.array_equal(left.data, right.data)


class TestManifest:
    def record(self, i, split="train"):
        return UtteranceRecord(f"u{i:03d}", [f"feats/u{i:03d}.emof"],
                               2.0, 3.5, 5.0, 2, split)

    def test_round_trip_field_identical(self, tmp_path):
        m = Manifest([self.record(i) for i in range(5)], tmp_path)
        m.records[2].act = 6.123456789012345
        path = tmp_path / "m.jsonl"
        m.save(path)
        again = Manifest.load(path)
        assert again.records == m.records
        again.save(tmp_path / "m2.jsonl")
        assert (tmp_path / "m.jsonl").read_bytes() == \
            (tmp_path / "m2.jsonl").read_bytes()

    def test_duplicate_ids_rejected(self, tmp_path):
        m = Manifest([self.record(1), self.record(1)], tmp_path)
        with pytest.raises(DataError, match="duplicate"):
            m.validate()

    def test_score_range_and_split_checked(self):
        r = self.record(1)
        r.val = 8.0
        with pytest.raises(DataError):
            r.validate()
        r = self.record(2, split="dev")
        with pytest.raises(DataError):
            r.validate()


class TestBatching:
    def test_covers_every_utterance_once(self, tiny_corpus):
        batches = list(make_batches(tiny_corpus, "train", 8, seed=3))
        ids = [i for b in batches for i in b.ids]
        assert sorted(ids) == sorted(r.id for r in tiny_corpus.split("train"))
        assert len(batches) == 4

    def test_same_seed_same_order(self, tiny_corpus):
        a = [b.ids for b in make_batches(tiny_corpus, "train", 8, seed=5)]
        b = [b.ids for b in make_batches(tiny_corpus, "train", 8, seed=5)]
        assert a == b
        c = [b.ids for b in make_batches(tiny_corpus, "train", 8, seed=6)]
        assert a != c

    def test_bucketing_orders_by_length_bucket(self, tiny_corpus):
        cache = FeatureCache(tiny_corpus)
        plan = plan_batches(tiny_corpus, "train", 8, 0, cache)
        keys = [cache.frames(r) // 50 for recs in plan for r in recs]
        assert keys == sorted(keys)
        # a batch can straddle bucket boundaries, but never skip a bucket
        for recs in plan:
            bk = [cache.frames(r) // 50 for r in recs]
            assert max(bk) - min(bk) <= len(set(bk))

    def test_equal_lengths_mean_no_padding(self, rng, tmp_path):
        recs = []
        for i in range(6):
            p = tmp_path / f"u{i}.emof"
            write_feature_file(p, FeatureSequence(
                rng.standard_normal((40, 4)).astype(np.float32)))
            recs.append(UtteranceRecord(f"u{i}", [p.name], 2, 2, 2, 0, "train"))
        m = Manifest(recs, tmp_path)
        (batch,) = list(make_batches(m, "train", 6, seed=0))
        assert batch.mask.all()

    def test_trailing_singleton_folded(self, rng, tmp_path):
        recs = []
        for i in range(5):
            p = tmp_path / f"u{i}.emof"
            write_feature_file(p, FeatureSequence(
                rng.standard_normal((30, 4)).astype(np.float32)))
            recs.append(UtteranceRecord(f"u{i}", [p.name], 2, 2, 2, 0, "train"))
        m = Manifest(recs, tmp_path)
        sizes = [b.size for b in make_batches(m, "train", 2, seed=0)]
        assert sizes == [2, 3] or sizes == [3, 2] or sorted(sizes) == [2, 3]
        assert sum(sizes) == 5
        assert min(sizes) >= 2

    def test_small_batch_size_rejected(self, tiny_corpus):
        with pytest.raises(DataError):
            list(make_batches(tiny_corpus, "train", 1, seed=0))

    def test_mask_matches_lengths(self, tiny_corpus):
        cache = FeatureCache(tiny_corpus)
        for batch in make_batches(tiny_corpus, "train", 8, 0, cache):
            for i, uid in enumerate(batch.ids):
                rec = next(r for r in tiny_corpus.records if r.id == uid)
                n = cache.frames(rec)
                assert batch.mask[i, :n].all()
                assert not batch.mask[i, n:].any()


def ls_decode(pooled, targets):
    """Least-squares linear decode (with intercept) as an oracle."""
    a = np.concatenate([pooled, np.ones((len(pooled), 1))], axis=1)
    coef, *_ = np.linalg.lstsq(a, targets, rcond=None)
    return a @ coef


class TestSynthetic:
    def test_empty_spec_gives_empty_manifest(self, tmp_path):
        m = gen_synthetic(SynthSpec(n_utts=0, seed=1), tmp_path)
        assert m.records == []

    def test_same_seed_identical_corpora(self, tmp_path):
        spec = SynthSpec(n_utts=6, seed=9)
        m1 = gen_synthetic(spec, tmp_path / "a")
        m2 = gen_synthetic(spec, tmp_path / "b")
        for r1, r2 in zip(m1.records, m2.records):
            assert (r1.id, r1.act, r1.val, r1.dom) == (r2.id, r2.act, r2.val, r2.dom)
        for view in ("mfb", "embed_a", "embed_b"):
            f1 = (tmp_path / "a" / "features" / view / "utt00003.emof").read_bytes()
            f2 = (tmp_path / "b" / "features" / view / "utt00003.emof").read_bytes()
            assert f1 == f2

    def test_split_sizes(self):
        recs = generate_records(SynthSpec(n_utts=3000, seed=0))
        by_split = {s: sum(r.split == s for r in recs)
                    for s in ("train", "val", "test")}
        assert by_split == {"train": 2000, "val": 500, "test": 500}

    def test_durations_within_range(self):
        recs = generate_records(SynthSpec(n_utts=200, seed=3))
        frames = np.array([r.n_frames for r in recs])
        assert frames.min() >= int(2.75 * 50)
        assert frames.max() <= int(11.0 * 50)

    def test_label_marginals_uniform_within_5_percent(self):
        recs = generate_records(SynthSpec(n_utts=10000, seed=17))
        for name in ("act", "val", "dom"):
            vals = np.array([getattr(r, name) for r in recs])
            hist, _ = np.histogram(vals, bins=6, range=(1.0, 7.0))
            freqs = hist / len(vals)
            assert np.abs(freqs - 1 / 6).max() < 0.05 / 6 + 0.02

    def test_classes_cover_octants(self):
        recs = generate_records(SynthSpec(n_utts=500, seed=4))
        assert {r.emo_class for r in recs} == set(range(7))

    def test_noiseless_teacher_features_linearly_decode_valence(self):
        from emodist.losses import ccc
        spec = SynthSpec(n_utts=200, seed=21, teacher_dim=16, student_dim=8,
                         noise=0.0)
        recs = generate_records(spec)
        rng = np.random.default_rng(0)
        pooled, val = [], []
        for r in recs:
            a = synth_features(r, "embed_a", 8, 0.0, rng)
            b = synth_features(r, "embed_b", 8, 0.0, rng)
            pooled.append(np.concatenate([a.mean(axis=0), b.mean(axis=0)]))
            val.append(r.val)
        pred = ls_decode(np.array(pooled), np.array(val))
        assert ccc(pred, np.array(val)) > 0.99

    def test_student_valence_channels_correlate_at_half(self):
        spec = SynthSpec(n_utts=4000, seed=5, student_dim=8, noise=0.0)
        recs = generate_records(spec)
        rng = np.random.default_rng(0)
        chans, val = [], []
        for r in recs:
            f = synth_features(r, "mfb", 8, 0.0, rng)
            chans.append(f.mean(axis=0)[1])   # channel 1 carries valence
            val.append(r.val)
        rho = np.corrcoef(np.array(chans), np.array(val))[0, 1]
        assert abs(rho - 0.5) < 0.05

    def test_missing_feature_file_reported(self, tmp_path, rng):
        p = tmp_path / "u0.emof"
        write_feature_file(p, FeatureSequence(
            rng.standard_normal((30, 4)).astype(np.float32)))
        recs = [UtteranceRecord("u0", ["u0.emof"], 2, 2, 2, 0, "train"),
                UtteranceRecord("u1", ["missing.emof"], 2, 2, 2, 0, "train")]
        m = Manifest(recs, tmp_path)
        with pytest.raises(DataError, match="missing"):
            list(make_batches(m, "train", 2, seed=0))
