import math

import numpy as np
import pytest

from emodist.model import ModelConfig, UtteranceOutput, build_model, load_model, param_report
from emodist.nnstack import Value


def scalar_forward(model, seq):
    """From-scratch scalar re-implementation of the whole network."""
    cfg = model.cfg
    t = len(seq)
    x = [list(map(float, row)) for row in seq]

    if model.tconv is not None:
        k = model.tconv.kernel.data
        bias = model.tconv.bias.data
        conv = []
        for ti in range(t):
            row = []
            for c in range(cfg.input_dim):
                acc = bias[c]
                for j in range(3):
                    src = ti + j - 1
                    if 0 <= src < t:
                        acc += k[c, j] * x[src][c]
                row.append(acc)
            conv.append(row)
        x = [x[ti] + conv[ti] for ti in range(t)]

    def sigmoid(v):
        return 1.0 / (1.0 + math.exp(-v))

    def gru_layer(params, inputs):
        hsz = params.hidden
        h = [0.0] * hsz
        outs = []
        for frame in inputs:
            def gate(w, u, b, state):
                return [b.data[j]
                        + sum(frame[i] * w.data[i, j] for i in range(len(frame)))
                        + sum(state[i] * u.data[i, j] for i in range(hsz))
                        for j in range(hsz)]
            z = [sigmoid(v) for v in gate(params.w_z, params.u_z, params.b_z, h)]
            r = [sigmoid(v) for v in gate(params.w_r, params.u_r, params.b_r, h)]
            rh = [r[j] * h[j] for j in range(hsz)]
            c = [math.tanh(v) for v in
                 gate(params.w_c, params.u_c, params.b_c, rh)]
            h = [(1 - z[j]) * h[j] + z[j] * c[j] for j in range(hsz)]
            outs.append(h)
        return outs

    h1 = gru_layer(model.gru1, x)
    h2 = gru_layer(model.gru2, h1)
    pooled = [sum(frame[j] for frame in h2) / t for j in range(model.cfg.hidden)]
    emb = [math.tanh(model.embed.b.data[j]
                     + sum(pooled[i] * model.embed.w.data[i, j]
                           for i in range(cfg.hidden)))
           for j in range(cfg.embed_dim)]
    scores = [model.head_reg.b.data[j]
              + sum(emb[i] * model.head_reg.w.data[i, j]
                    for i in range(cfg.embed_dim))
              for j in range(cfg.n_dims)]
    logits = [model.head_cls.b.data[j]
              + sum(emb[i] * model.head_cls.w.data[i, j]
                    for i in range(cfg.embed_dim))
              for j in range(cfg.n_classes)]
    return np.array(emb), np.array(scores), np.array(logits)


class TestBuild:
    def test_tconv_doubles_recurrent_input_width(self):
        m = build_model(ModelConfig(input_dim=43, use_tconv=True), seed=0)
        assert m.gru1.input_dim == 86

    def test_plain_gru_keeps_input_width(self):
        m = build_model(ModelConfig(input_dim=1024, use_tconv=False), seed=0)
        assert m.gru1.input_dim == 1024

    def test_same_seed_same_parameters(self):
        a = build_model(ModelConfig(input_dim=12, use_tconv=True), seed=5)
        b = build_model(ModelConfig(input_dim=12, use_tconv=True), seed=5)
        for (ka, va), (kb, vb) in zip(a.named_parameters().items(),
                                      b.named_parameters().items()):
            assert ka == kb
            assert np.array_equal(va.data, vb.data)

    def test_invalid_config_rejected(self):
        with pytest.raises(ValueError):
            build_model(ModelConfig(input_dim=0), seed=0)
        with pytest.raises(ValueError):
            build_model(ModelConfig(input_dim=4, hidden=0), seed=0)


class TestForward:
    def test_zero_params_yield_head_bias(self, rng):
        m = build_model(ModelConfig(input_dim=5, hidden=6, embed_dim=4), seed=0)
        for p in m.parameters():
            p.data[:] = 0.0
        m.head_reg.b.data[:] = [1.5, -0.5, 2.0]
        out = m.forward_utterance(rng.standard_normal((1, 5)))
        assert np.allclose(out.scores, [1.5, -0.5, 2.0], atol=0)

    def test_frame_duplication_invariance(self, rng):
        m = build_model(ModelConfig(input_dim=4, hidden=8, embed_dim=8), seed=1)
        seq = rng.standard_normal((6, 4))
        a = m.forward_utterance(seq)
        b = m.forward_utterance(np.repeat(seq, 2, axis=0))
        # mean pooling is invariant when each frame appears equally often,
        # but the recurrence is not, so outputs must differ
        assert not np.allclose(a.scores, b.scores)

    def test_reversal_changes_output(self, rng):
        m = build_model(ModelConfig(input_dim=4, hidden=8, embed_dim=8), seed=1)
        seq = rng.standard_normal((7, 4))
        a = m.forward_utterance(seq)
        b = m.forward_utterance(seq[::-1])
        assert not np.allclose(a.embedding, b.embedding)

    def test_padding_invariance(self, rng):
        m = build_model(ModelConfig(input_dim=3, hidden=6, embed_dim=6), seed=2)
        seq = rng.standard_normal((5, 3))
        base = m.forward_utterance(seq)
        feats = np.zeros((9, 2, 3))
        feats[:5, 0] = seq
        feats[:9, 1] = rng.standard_normal((9, 3))
        mask = np.zeros((9, 2))
        mask[:5, 0] = 1.0
        mask[:, 1] = 1.0
        emb, scores, logits = m.infer_batch(feats, mask)
        assert np.allclose(emb[0], base.embedding, atol=1e-12)
        assert np.allclose(scores[0], base.scores, atol=1e-12)

    def test_matches_scalar_oracle(self, rng):
        for use_tconv in (False, True):
            m = build_model(ModelConfig(input_dim=3, hidden=5, embed_dim=4,
                                        use_tconv=use_tconv), seed=3)
            seq = rng.standard_normal((6, 3))
            got = m.forward_utterance(seq)
            emb, scores, logits = scalar_forward(m, seq)
            assert np.abs(got.embedding - emb).max() < 1e-10
            assert np.abs(got.scores - scores).max() < 1e-10
            assert np.abs(got.class_logits - logits).max() < 1e-10

    def test_training_path_matches_inference_path(self, rng, ):
        m = build_model(ModelConfig(input_dim=4), seed=4)
        feats = rng.standard_normal((12, 3, 4))
        mask = np.ones((12, 3))
        mask[8:, 2] = 0.0
        emb_v, sc_v, lg_v = m.forward_batch(feats, mask)
        emb, sc, lg = m.infer_batch(feats, mask)
        assert np.abs(emb_v.data - emb).max() < 1e-14
        assert np.abs(sc_v.data - sc).max() < 1e-14

    def test_empty_or_mismatched_input_rejected(self, rng):
        m = build_model(ModelConfig(input_dim=4), seed=0)
        with pytest.raises(ValueError):
            m.forward_utterance(np.zeros((0, 4)))
        with pytest.raises(ValueError):
            m.forward_utterance(np.zeros((5, 3)))

    def test_tcgru_with_identity_kernels_equals_gru_on_doubled_input(self, rng):
        cfg_t = ModelConfig(input_dim=5, use_tconv=True, hidden=8, embed_dim=8)
        cfg_g = ModelConfig(input_dim=10, use_tconv=False, hidden=8, embed_dim=8)
        mt = build_model(cfg_t, seed=7)
        mg = build_model(cfg_g, seed=7)
        mt.tconv.kernel.data[:] = [0.0, 1.0, 0.0]
        mt.tconv.bias.data[:] = 0.0
        seq = rng.standard_normal((9, 5))
        a = mt.forward_utterance(seq)
        b = mg.forward_utterance(np.concatenate([seq, seq], axis=1))
        assert np.allclose(a.scores, b.scores, atol=1e-14)
        assert np.allclose(a.embedding, b.embedding, atol=1e-14)

    def test_score_head_is_affine_in_the_embedding(self, rng):
        m = build_model(ModelConfig(input_dim=4), seed=8)
        e1 = rng.standard_normal(128)
        e2 = rng.standard_normal(128)
        s1 = m.head_reg.apply(e1)
        s2 = m.head_reg.apply(e2)
        diff = m.head_reg.apply(e1 - e2) - m.head_reg.b.data
        assert np.allclose(s1 - s2, diff, atol=1e-12)


class TestParamReport:
    def test_head_parameter_count(self):
        m = build_model(ModelConfig(input_dim=4, embed_dim=128), seed=0)
        rep = param_report(m)
        heads = rep["by_part"]["head_reg"] + rep["by_part"]["head_cls"]
        assert heads == 3 * 128 + 3 + 7 * 128 + 7 == 1290

    def test_bytes_are_4x_count(self):
        m = build_model(ModelConfig(input_dim=16), seed=0)
        rep = param_report(m)
        assert rep["bytes_fp32"] == 4 * rep["params"]

    def test_student_vs_teacher_size_ratio(self):
        student = build_model(ModelConfig(input_dim=43, use_tconv=True), seed=0)
        teacher = build_model(ModelConfig(input_dim=2048, use_tconv=False), seed=0)
        ratio = param_report(teacher)["params"] / param_report(student)["params"]
        assert ratio > 4.0


class TestPersistence:
    def test_save_load_round_trip(self, rng, tmp_path):
        m = build_model(ModelConfig(input_dim=6, use_tconv=True), seed=9)
        path = tmp_path / "model.emow"
        m.save(path)
        loaded = load_model(path)
        assert loaded.cfg == m.cfg
        for k, v in m.named_parameters().items():
            assert np.array_equal(loaded.named_parameters()[k].data, v.data)
        seq = rng.standard_normal((5, 6))
        a, b = m.forward_utterance(seq), loaded.forward_utterance(seq)
        assert np.array_equal(a.scores, b.scores)

    def test_missing_sidecar_rejected(self, tmp_path):
        m = build_model(ModelConfig(input_dim=4), seed=0)
        path = tmp_path / "model.emow"
        m.save(path)
        (tmp_path / "model.emow.json").unlink()
        with pytest.raises(FileNotFoundError):
            load_model(path)
