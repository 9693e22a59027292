"""Model tests: init determinism, gate identity, manual forward oracle,
gate-zero weight invariance, causal masking."""

import numpy as np
import pytest

from vibprune.errors import ContractError, DataError
from vibprune.gates import GateInit
from vibprune.model import (
    GatedTransformer,
    ModelConfig,
    build_student,
    build_teacher,
    count_gated_units,
    default_betas,
    forward,
)

CFG = ModelConfig(vocab_size=13, max_seq=10, width=8, layers=2, heads=2,
                  ffn_dim=12, num_classes=3)


def identity_student(teacher):
    return build_student(teacher, GateInit(mu_mean=1.0, mu_std=0.0, sigma_init=0.1, seed=0),
                         default_betas(teacher.config))


def toks(cfg, batch=3, seed=0, seqlen=None):
    rng = np.random.default_rng(seed)
    return rng.integers(0, cfg.vocab_size, size=(batch, seqlen or cfg.max_seq - 2))


# -- independent oracle: plain-numpy float64 forward for the ungated model --

def _ln(x, eps=1e-5):
    m = x.mean(axis=-1, keepdims=True)
    v = x.var(axis=-1, keepdims=True)
    return (x - m) / np.sqrt(v + eps)


def _gelu(x):
    return 0.5 * x * (1.0 + np.tanh(0.7978845608028654 * (x + 0.044715 * x**3)))


def _softmax(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def manual_forward(model, tokens):
    cfg = model.config
    p = {k: v.data.astype(np.float64) for k, v in model.params.items()}
    b, s = tokens.shape
    dh = cfg.head_dim
    x = p["emb.tok"][tokens] + p["emb.pos"][np.arange(s)]
    for i in range(cfg.layers):
        pre = f"layer.{i}."
        xn = _ln(x) * p[pre + "ln1.weight"] + p[pre + "ln1.bias"]
        q = xn @ p[pre + "wq.weight"] + p[pre + "wq.bias"]
        k = xn @ p[pre + "wk.weight"] + p[pre + "wk.bias"]
        v = xn @ p[pre + "wv.weight"] + p[pre + "wv.bias"]
        heads = []
        for h in range(cfg.heads):
            sl = slice(h * dh, (h + 1) * dh)
            scores = q[..., sl] @ np.swapaxes(k[..., sl], -1, -2) / np.sqrt(dh)
            if cfg.causal:
                mask = np.triu(np.ones((s, s), dtype=bool), 1)
                scores = np.where(mask, -1e9, scores)
            heads.append(_softmax(scores) @ v[..., sl])
        a = np.concatenate(heads, axis=-1)
        x = x + a @ p[pre + "wo.weight"] + p[pre + "wo.bias"]
        xn2 = _ln(x) * p[pre + "ln2.weight"] + p[pre + "ln2.bias"]
        x = x + _gelu(xn2 @ p[pre + "wu.weight"] + p[pre + "wu.bias"]) @ p[
            pre + "wd.weight"] + p[pre + "wd.bias"]
    pooled = _ln(x)[:, -1 if cfg.causal else 0, :]
    return pooled @ p["cls.weight"] + p["cls.bias"]


class TestConstruction:
    def test_same_seed_bit_identical(self):
        a = build_teacher(CFG, seed=5)
        b = build_teacher(CFG, seed=5)
        for name, pa in a.params.items():
            np.testing.assert_array_equal(pa.data, b.params[name].data)

    def test_fresh_teacher_finite_logits(self):
        t = build_teacher(CFG, seed=1)
        trace = forward(t, toks(CFG), "eval")
        assert np.isfinite(trace.logits).all()
        assert trace.logits.shape == (3, CFG.num_classes)

    def test_invalid_config(self):
        with pytest.raises(ContractError):
            ModelConfig(vocab_size=8, max_seq=8, width=9, layers=1, heads=2,
                        ffn_dim=8, num_classes=2)

    def test_gate_inventory(self):
        cfg = ModelConfig(vocab_size=64, max_seq=32, width=32, layers=2, heads=4,
                          ffn_dim=64, num_classes=2)
        s = identity_student(build_teacher(cfg, 0))
        n_gates, n_units = count_gated_units(s)
        # per layer: heads, ffn-intermediate, ffn-output, and one 1-unit gate
        # per sub-layer; plus the global width gate
        assert n_gates == 1 + 2 * 5
        assert n_units == 32 + 2 * (4 + 64 + 32 + 1 + 1)

    def test_student_copies_weights(self):
        t = build_teacher(CFG, seed=2)
        s = identity_student(t)
        s.params["cls.weight"].data[0, 0] += 1.0
        assert t.params["cls.weight"].data[0, 0] != s.params["cls.weight"].data[0, 0]


class TestIdentityGates:
    def test_student_equals_teacher_exactly(self):
        t = build_teacher(CFG, seed=3)
        s = identity_student(t)
        tk = toks(CFG, seed=7)
        lt = forward(t, tk, "eval").logits
        ls = forward(s, tk, "eval").logits
        np.testing.assert_array_equal(lt, ls)

    def test_zero_beta_everywhere(self):
        t = build_teacher(CFG, seed=3)
        s = build_student(t, GateInit(mu_std=0.0), {k: 0.0 for k in default_betas(CFG)})
        assert all(g.beta == 0.0 for g in s.gates.all())


class TestForwardValues:
    def test_matches_manual_arithmetic(self):
        cfg = ModelConfig(vocab_size=5, max_seq=4, width=2, layers=1, heads=1,
                          ffn_dim=3, num_classes=2)
        t = build_teacher(cfg, seed=11)
        tk = np.array([[3]])
        got = forward(t, tk, "eval").logits
        want = manual_forward(t, tk)
        np.testing.assert_allclose(got, want, atol=1e-5)

    def test_matches_manual_arithmetic_multilayer(self):
        t = build_teacher(CFG, seed=12)
        tk = toks(CFG, batch=2, seed=13)
        np.testing.assert_allclose(forward(t, tk, "eval").logits,
                                   manual_forward(t, tk), atol=1e-4)

    def test_matches_manual_causal(self):
        cfg = ModelConfig(vocab_size=11, max_seq=8, width=8, layers=2, heads=2,
                          ffn_dim=16, num_classes=2, causal=True)
        t = build_teacher(cfg, seed=14)
        tk = toks(cfg, batch=2, seed=15, seqlen=6)
        np.testing.assert_allclose(forward(t, tk, "eval").logits,
                                   manual_forward(t, tk), atol=1e-4)

    def test_attention_rows_sum_to_one(self):
        t = build_teacher(CFG, seed=16)
        trace = forward(t, toks(CFG), "eval")
        for probs in trace.attention_probs:
            np.testing.assert_allclose(probs.sum(axis=-1), 1.0, atol=1e-5)

    def test_dead_layers_reduce_to_embedding_path(self):
        t = build_teacher(CFG, seed=17)
        s = identity_student(t)
        for g in s.gates.layer_mha + s.gates.layer_ffn:
            g.mu.data[:] = 0.0  # log alpha -> -inf: hard mask 0
        tk = toks(CFG, seed=18)
        got = forward(s, tk, "eval").logits

        zm = s.gates.width.mu.data.astype(np.float64)  # identity here, hard=1
        p = {k: v.data.astype(np.float64) for k, v in s.params.items()}
        x = (p["emb.tok"][tk] + p["emb.pos"][np.arange(tk.shape[1])]) * zm
        pooled = (_ln(x) * zm)[:, 0, :]
        want = pooled @ p["cls.weight"] + p["cls.bias"]
        np.testing.assert_allclose(got, want, atol=1e-5)

    def test_token_id_out_of_range(self):
        t = build_teacher(CFG, seed=19)
        bad = toks(CFG)
        bad[0, 0] = CFG.vocab_size
        with pytest.raises(DataError):
            forward(t, bad, "eval")

    def test_eval_mode_deterministic(self):
        t = build_teacher(CFG, seed=20)
        s = identity_student(t)
        tk = toks(CFG, seed=21)
        np.testing.assert_array_equal(forward(s, tk, "eval").logits,
                                      forward(s, tk, "eval").logits)


def _perturb(arr, rng, rows=None, cols=None):
    if rows is not None:
        arr[rows] += rng.normal(0, 1.0, size=arr[rows].shape).astype(arr.dtype)
    else:
        arr[..., cols] += rng.normal(0, 1.0, size=arr[..., cols].shape).astype(arr.dtype)


class TestGateZeroInvariance:
    """Zeroing a gate entry must make the weights it gates irrelevant."""

    def setup_method(self):
        self.t = build_teacher(CFG, seed=30)
        self.tk = toks(CFG, seed=31)
        self.rng = np.random.default_rng(32)

    def test_dropped_head_weights_irrelevant(self):
        s = identity_student(self.t)
        s.gates.heads[0].mu.data[1] = 0.0
        base = forward(s, self.tk, "eval").logits
        dh = CFG.head_dim
        sl = slice(1 * dh, 2 * dh)
        for w in ("wq", "wk", "wv"):
            _perturb(s.params[f"layer.0.{w}.weight"].data, self.rng, cols=sl)
            _perturb(s.params[f"layer.0.{w}.bias"].data, self.rng, rows=sl)
        _perturb(s.params["layer.0.wo.weight"].data, self.rng, rows=sl)
        np.testing.assert_array_equal(base, forward(s, self.tk, "eval").logits)

    def test_dropped_inter_unit_weights_irrelevant(self):
        s = identity_student(self.t)
        s.gates.inter[1].mu.data[4] = 0.0
        base = forward(s, self.tk, "eval").logits
        _perturb(s.params["layer.1.wu.weight"].data, self.rng, cols=[4])
        _perturb(s.params["layer.1.wu.bias"].data, self.rng, rows=[4])
        _perturb(s.params["layer.1.wd.weight"].data, self.rng, rows=[4])
        np.testing.assert_array_equal(base, forward(s, self.tk, "eval").logits)

    def test_dropped_ffn_output_weights_irrelevant(self):
        s = identity_student(self.t)
        s.gates.out[0].mu.data[2] = 0.0
        base = forward(s, self.tk, "eval").logits
        _perturb(s.params["layer.0.wd.weight"].data, self.rng, cols=[2])
        _perturb(s.params["layer.0.wd.bias"].data, self.rng, rows=[2])
        np.testing.assert_array_equal(base, forward(s, self.tk, "eval").logits)

    def test_dropped_width_dim_weights_irrelevant(self):
        s = identity_student(self.t)
        j = 5
        s.gates.width.mu.data[j] = 0.0
        base = forward(s, self.tk, "eval").logits
        _perturb(s.params["emb.tok"].data, self.rng, cols=[j])
        _perturb(s.params["emb.pos"].data, self.rng, cols=[j])
        _perturb(s.params["cls.weight"].data, self.rng, rows=[j])
        for i in range(CFG.layers):
            for w in ("wq", "wk", "wv", "wu"):
                _perturb(s.params[f"layer.{i}.{w}.weight"].data, self.rng, rows=[j])
            for w in ("wo", "wd"):
                _perturb(s.params[f"layer.{i}.{w}.weight"].data, self.rng, cols=[j])
                _perturb(s.params[f"layer.{i}.{w}.bias"].data, self.rng, rows=[j])
            for ln in ("ln1", "ln2"):
                _perturb(s.params[f"layer.{i}.{ln}.weight"].data, self.rng, rows=[j])
                _perturb(s.params[f"layer.{i}.{ln}.bias"].data, self.rng, rows=[j])
        np.testing.assert_array_equal(base, forward(s, self.tk, "eval").logits)

    def test_dead_sublayer_weights_irrelevant(self):
        s = identity_student(self.t)
        s.gates.layer_mha[1].mu.data[:] = 0.0
        base = forward(s, self.tk, "eval").logits
        for w in ("wq", "wk", "wv", "wo"):
            _perturb(s.params[f"layer.1.{w}.weight"].data, self.rng,
                     rows=np.arange(CFG.width))
        _perturb(s.params["layer.1.ln1.weight"].data, self.rng, rows=np.arange(CFG.width))
        np.testing.assert_array_equal(base, forward(s, self.tk, "eval").logits)


class TestCausal:
    def test_future_tokens_do_not_leak(self):
        cfg = ModelConfig(vocab_size=17, max_seq=12, width=8, layers=2, heads=2,
                          ffn_dim=16, num_classes=2, causal=True)
        t = build_teacher(cfg, seed=40)
        tk = toks(cfg, batch=2, seed=41, seqlen=8)
        h1 = forward(t, tk, "eval").hidden_states[-1].data
        p = 3
        tk2 = tk.copy()
        tk2[:, p + 1:] = (tk2[:, p + 1:] + 1) % cfg.vocab_size
        h2 = forward(t, tk2, "eval").hidden_states[-1].data
        np.testing.assert_allclose(h1[:, : p + 1], h2[:, : p + 1], atol=1e-6)
        assert np.abs(h1[:, p + 1:] - h2[:, p + 1:]).max() > 1e-4


class TestTrainMode:
    def test_train_mode_needs_rng(self):
        s = identity_student(build_teacher(CFG, seed=50))
        with pytest.raises(ContractError):
            forward(s, toks(CFG), "train", rng=None)

    def test_train_forward_runs_and_differs_from_eval(self):
        s = identity_student(build_teacher(CFG, seed=51))
        tk = toks(CFG, seed=52)
        rng = np.random.default_rng(53)
        lt = forward(s, tk, "train", rng=rng).logits
        le = forward(s, tk, "eval").logits
        assert np.isfinite(lt).all()
        assert np.abs(lt - le).max() > 0

    def test_layer_gate_noise_is_per_sample(self):
        # all-ones weights would hide it; check the sampled mask directly
        s = identity_student(build_teacher(CFG, seed=54))
        from vibprune.model import _MaskPack

        mp = _MaskPack(s, "train", np.random.default_rng(0), 0.0)
        mp.build(batch=2, seqlen=5)
        lm = mp.lmha[0].data  # (2, 5, width)
        for b in range(2):
            assert np.ptp(lm[b]) == 0.0  # constant across tokens and dims
