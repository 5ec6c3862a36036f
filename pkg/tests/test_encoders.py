"""Encoder semantics: shape laws, prompt injection, masking, stage partitions.

The forward passes are checked against an independent numpy reference
implementation written directly from the layer definitions (no autodiff).
"""

import math

import numpy as np
import pytest

from navprompt.encoders import (
    CrossModalOutput,
    EncoderConfig,
    PromptBank,
    apply_stage_freeze,
    classify,
    classify_logits,
    cross_modal_encode,
    cross_modal_encode_batch,
    init_cross_params,
    init_text_params,
    init_visual_params,
    param_shapes,
    text_encode,
    trainable_parameters,
    visual_encode,
)
from navprompt.errors import AlignmentError, ConfigurationError, InputError, ParameterError
from navprompt.optim import OptimConfig, Optimizer, ParamStore, backward
from navprompt.prompts import PAD_ID, Vocabulary, tokenize
from navprompt.tensor import Tensor, gather_index, log_softmax


def tiny_config(**overrides) -> EncoderConfig:
    base = dict(
        d=8, heads=2, ff_mult=2, visual_layers=2, text_layers=1, cross_layers=1,
        prompt_count=3, prompt_layers=2, num_patches=2, feature_dim=4,
        num_classes=3, max_text_len=12, max_viewpoints=8, max_subpaths=4,
    )
    base.update(overrides)
    return EncoderConfig(**base)


def build_store(cfg, seed=0, vocab_size=None):
    store = ParamStore()
    rng = np.random.default_rng(seed)
    init_visual_params(store, cfg, rng)
    if vocab_size is not None:
        init_text_params(store, cfg, vocab_size, rng)
        init_cross_params(store, cfg, rng)
    return store


# -- numpy reference implementation (forward only) ---------------------------------


def ref_gelu(x):
    c = math.sqrt(2.0 / math.pi)
    return 0.5 * x * (1.0 + np.tanh(c * (x + 0.044715 * x ** 3)))


def ref_layer_norm(x, g, b, eps=1e-6):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def ref_softmax(x, axis=-1):
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def ref_layer(x, p, cfg, store, mask=None):
    def w(name):
        return store[name].data

    h = ref_layer_norm(x, w(f"{p}.ln1.g"), w(f"{p}.ln1.b"))
    b, s, d = x.shape
    nh, dk = cfg.heads, cfg.d // cfg.heads
    q = (h @ w(f"{p}.attn.wq") + w(f"{p}.attn.bq")).reshape(b, s, nh, dk).transpose(0, 2, 1, 3)
    k = (h @ w(f"{p}.attn.wk") + w(f"{p}.attn.bk")).reshape(b, s, nh, dk).transpose(0, 2, 1, 3)
    v = (h @ w(f"{p}.attn.wv") + w(f"{p}.attn.bv")).reshape(b, s, nh, dk).transpose(0, 2, 1, 3)
    scores = q @ k.transpose(0, 1, 3, 2) / np.sqrt(dk)
    if mask is not None:
        scores = scores + mask
    ctx = (ref_softmax(scores) @ v).transpose(0, 2, 1, 3).reshape(b, s, d)
    x = x + ctx @ w(f"{p}.attn.wo") + w(f"{p}.attn.bo")
    h = ref_layer_norm(x, w(f"{p}.ln2.g"), w(f"{p}.ln2.b"))
    h = ref_gelu(h @ w(f"{p}.ff.w1") + w(f"{p}.ff.b1")) @ w(f"{p}.ff.w2") + w(f"{p}.ff.b2")
    return x + h


def ref_plain_visual(patches, cfg, store):
    """[CLS | patches] through the backbone with no prompt slots."""
    b = patches.shape[0]
    emb = patches @ store["visual.patch_embed.w"].data + store["visual.patch_embed.b"].data
    cls = np.broadcast_to(store["visual.cls"].data, (b, 1, cfg.d))
    x = np.concatenate([cls, emb], axis=1)
    for i in range(cfg.visual_layers):
        x = ref_layer(x, f"visual.layer{i}", cfg, store)
    return x


class TestVisualEncode:
    def test_sequence_shape_law_every_layer(self):
        cfg = tiny_config(prompt_count=10, num_patches=4, feature_dim=4)
        store = build_store(cfg)
        patches = np.random.default_rng(1).normal(size=(2, 4, 4))
        final, states = visual_encode(patches, store, cfg, return_states=True)
        assert len(states) == cfg.visual_layers
        for state in states:
            assert state.cls.shape == (2, 1, cfg.d)
            assert state.prompt_block.shape == (2, 10, cfg.d)
            assert state.patch_block.shape == (2, 4, cfg.d)

    def test_promptless_matches_reference(self):
        cfg = tiny_config(prompt_count=0, prompt_layers=0)
        store = build_store(cfg, seed=3)
        patches = np.random.default_rng(2).normal(size=(3, cfg.num_patches, cfg.feature_dim))
        final = visual_encode(patches, store, cfg)
        ref = ref_plain_visual(patches, cfg, store)
        np.testing.assert_allclose(final.cls.data, ref[:, :1], atol=1e-12)
        np.testing.assert_allclose(final.patch_block.data, ref[:, 1:], atol=1e-12)
        assert final.prompt_block.shape == (3, 0, cfg.d)

    def test_prompt_perturbation_changes_output(self):
        cfg = tiny_config()
        store = build_store(cfg, seed=4)
        patches = np.random.default_rng(5).normal(size=(1, cfg.num_patches, cfg.feature_dim))
        before = visual_encode(patches, store, cfg).cls.data.copy()
        store["visual.prompt.0"].data[0, 0] += 0.37
        after = visual_encode(patches, store, cfg).cls.data
        assert not np.allclose(before, after)

    def test_frozen_backbone_never_updated(self):
        cfg = tiny_config()
        store = build_store(cfg, seed=6)
        apply_stage_freeze(store, "stage1")
        name = "visual.layer0.attn.wq"
        baseline = store[name].data.tobytes()
        opt = Optimizer(OptimConfig(algorithm="adam", learning_rate=0.1))
        opt.step(store, {name: np.ones_like(store[name].data), "visual.prompt.0": np.ones_like(store["visual.prompt.0"].data)})
        assert store[name].data.tobytes() == baseline
        assert not np.allclose(store["visual.prompt.0"].data, build_store(cfg, seed=6)["visual.prompt.0"].data)

    def test_replace_mode_uses_fresh_prompts_per_layer(self):
        cfg = tiny_config()
        store = build_store(cfg, seed=7)
        patches = np.random.default_rng(8).normal(size=(1, cfg.num_patches, cfg.feature_dim))
        base = visual_encode(patches, store, cfg).cls.data.copy()
        # Layer-1 prompts participate in replace mode ...
        store["visual.prompt.1"].data[0, 0] += 0.5
        replaced = visual_encode(patches, store, cfg).cls.data.copy()
        assert not np.allclose(base, replaced)
        # ... but are ignored in propagate mode, which only reads prompt 0.
        cfg2 = tiny_config(deep_prompt_mode="propagate")
        store2 = build_store(cfg2, seed=7)
        prop_base = visual_encode(patches, store2, cfg2).cls.data.copy()
        store2["visual.prompt.1"].data[0, 0] += 0.5
        prop_after = visual_encode(patches, store2, cfg2).cls.data
        np.testing.assert_array_equal(prop_base, prop_after)

    def test_bank_config_mismatch(self):
        cfg = tiny_config()
        store = build_store(cfg)
        bad = PromptBank(layer_names=["visual.prompt.0"], prompt_count=cfg.prompt_count, width=cfg.d)
        with pytest.raises(ConfigurationError):
            visual_encode(np.zeros((1, 2, 4)), store, cfg, bank=bad)


class TestClassify:
    def test_zero_head_uniform(self):
        cfg = tiny_config()
        store = build_store(cfg)
        for name in ("head.w1", "head.b1", "head.w2", "head.b2"):
            store[name].data[:] = 0.0
        probs = classify(Tensor(np.random.default_rng(0).normal(size=(4, cfg.d))), store)
        np.testing.assert_allclose(probs.data, 1.0 / cfg.num_classes, atol=1e-12)

    def test_softmax_oracle(self):
        cfg = tiny_config(num_classes=2)
        store = build_store(cfg)
        logits = Tensor(np.array([[math.log(1.0), math.log(3.0)]]))
        from navprompt.tensor import softmax

        np.testing.assert_allclose(softmax(logits, axis=-1).data, [[0.25, 0.75]], atol=1e-15)
        probs = classify(Tensor(np.zeros((1, cfg.d))), store)
        assert probs.shape == (1, 2)
        np.testing.assert_allclose(probs.data.sum(axis=-1), 1.0, atol=1e-12)

    def test_missing_head(self):
        store = ParamStore()
        with pytest.raises(ConfigurationError):
            classify_logits(Tensor(np.zeros((1, 4))), store)


class TestTextEncode:
    def _setup(self):
        cfg = tiny_config()
        vocab = Vocabulary.build(["walk out of the bathroom", "turn left"])
        store = build_store(cfg, seed=9, vocab_size=len(vocab))
        return cfg, vocab, store

    def test_deterministic(self):
        cfg, vocab, store = self._setup()
        ids = tokenize("turn left", vocab, cfg.max_text_len)
        _, a = text_encode([ids], store, cfg)
        _, b = text_encode([ids], store, cfg)
        np.testing.assert_array_equal(a.data, b.data)

    def test_padding_masked_out(self):
        cfg, vocab, store = self._setup()
        ids = tokenize("turn left", vocab, cfg.max_text_len)
        shorter = ids[:6]
        assert PAD_ID in shorter  # both rows end in padding
        _, a = text_encode([ids], store, cfg)
        _, b = text_encode([shorter], store, cfg)
        np.testing.assert_allclose(a.data, b.data, atol=1e-12)

    def test_matches_reference(self):
        cfg, vocab, store = self._setup()
        ids = np.array([tokenize("walk out of the bathroom", vocab, cfg.max_text_len)])
        seq, pooled = text_encode(ids, store, cfg)
        x = store["text.tok_embed"].data[ids] + store["text.pos_embed"].data[: ids.shape[1]]
        mask = np.where(ids == PAD_ID, -1e9, 0.0)[:, None, None, :]
        for i in range(cfg.text_layers):
            x = ref_layer(x, f"text.layer{i}", cfg, store, mask=mask)
        np.testing.assert_allclose(seq.data, x, atol=1e-12)
        np.testing.assert_allclose(pooled.data, x[:, 0], atol=1e-12)

    def test_id_out_of_range(self):
        cfg, vocab, store = self._setup()
        with pytest.raises(InputError):
            text_encode(np.array([[0, 1, len(vocab)]]), store, cfg)

    def test_pooled_width(self):
        cfg, vocab, store = self._setup()
        for text in ("turn left", "walk out of the bathroom please now"):
            _, pooled = text_encode([tokenize(text, vocab, cfg.max_text_len)], store, cfg)
            assert pooled.shape == (1, cfg.d)


class TestCrossModal:
    def _setup(self, seed=11):
        cfg = tiny_config()
        store = build_store(cfg, seed=seed, vocab_size=8)
        return cfg, store

    def test_single_element_mean(self):
        cfg, store = self._setup()
        vp = Tensor(np.random.default_rng(1).normal(size=(1, cfg.d)))
        pf = Tensor(np.random.default_rng(2).normal(size=(1, cfg.d)))
        out = cross_modal_encode(vp, pf, [(0, 1)], store, cfg)
        np.testing.assert_allclose(out.subpath_features[0].data, out.overall_visual.data, atol=1e-12)

    def test_zero_weights_identity_pooling(self):
        # With every cross parameter zeroed the layers reduce to the identity,
        # so pooled sub-path features equal plain means of the raw features.
        cfg, store = self._setup()
        for name in store.names():
            if name.startswith("cross."):
                store[name].data[:] = 0.0
        rng = np.random.default_rng(3)
        vp = rng.normal(size=(4, cfg.d))
        pf = rng.normal(size=(2, cfg.d))
        out = cross_modal_encode(Tensor(vp), Tensor(pf), [(0, 2), (2, 4)], store, cfg)
        np.testing.assert_allclose(out.subpath_features[0].data, vp[0:2].mean(axis=0), atol=1e-12)
        np.testing.assert_allclose(out.subpath_features[1].data, vp[2:4].mean(axis=0), atol=1e-12)
        np.testing.assert_allclose(out.overall_visual.data, vp.mean(axis=0), atol=1e-12)
        np.testing.assert_allclose(out.count_feature.data, 0.0, atol=1e-12)

    def test_permutation_consistency(self):
        cfg, store = self._setup(seed=12)
        rng = np.random.default_rng(4)
        vp = Tensor(rng.normal(size=(6, cfg.d)))
        pf = Tensor(rng.normal(size=(3, cfg.d)))
        bounds = [(0, 2), (2, 3), (3, 6)]
        out = cross_modal_encode(vp, pf, bounds, store, cfg)
        feats = np.stack([f.data for f in out.subpath_features])
        # Pooling is per-boundary: recomputing any boundary's mean from the
        # transformer output directly must match, in any order.
        for j, (s, e) in enumerate(bounds):
            same = cross_modal_encode(vp, pf, bounds, store, cfg).subpath_features[j].data
            np.testing.assert_allclose(feats[j], same, atol=1e-12)

    def test_batch_matches_single(self):
        cfg, store = self._setup(seed=13)
        rng = np.random.default_rng(5)
        vps = [Tensor(rng.normal(size=(4, cfg.d))), Tensor(rng.normal(size=(6, cfg.d)))]
        pfs = [Tensor(rng.normal(size=(2, cfg.d))), Tensor(rng.normal(size=(3, cfg.d)))]
        bounds = [[(0, 2), (2, 4)], [(0, 1), (1, 4), (4, 6)]]
        batched = cross_modal_encode_batch(vps, pfs, bounds, store, cfg)
        for i in range(2):
            single = cross_modal_encode(vps[i], pfs[i], bounds[i], store, cfg)
            np.testing.assert_allclose(single.overall_visual.data, batched[i].overall_visual.data, atol=1e-10)
            for a, b in zip(single.subpath_features, batched[i].subpath_features):
                np.testing.assert_allclose(a.data, b.data, atol=1e-10)

    def test_boundary_gap_rejected(self):
        cfg, store = self._setup()
        vp = Tensor(np.zeros((4, cfg.d)))
        pf = Tensor(np.zeros((2, cfg.d)))
        with pytest.raises(AlignmentError):
            cross_modal_encode(vp, pf, [(0, 1), (2, 4)], store, cfg)
        with pytest.raises(AlignmentError):
            cross_modal_encode(vp, pf, [(0, 3), (3, 3)], store, cfg)

    def test_without_count_token(self):
        cfg, store = self._setup()
        vp = Tensor(np.random.default_rng(6).normal(size=(3, cfg.d)))
        out = cross_modal_encode(vp, None, [(0, 3)], store, cfg, include_count=False)
        assert out.count_feature is None
        assert isinstance(out, CrossModalOutput)


class TestStagePartitions:
    def test_stage1_trainable_count_closed_form(self):
        cfg = tiny_config()
        store = build_store(cfg)
        trainable = trainable_parameters("stage1", store)
        total = sum(store[n].size for n in trainable)
        head = cfg.d * cfg.d + cfg.d + cfg.d * cfg.num_classes + cfg.num_classes
        assert total == cfg.prompt_layers * cfg.prompt_count * cfg.d + head

    def test_stage1_backbone_frozen(self):
        cfg = tiny_config()
        store = build_store(cfg)
        apply_stage_freeze(store, "stage1")
        for name in store.names():
            if name.startswith("visual.") and not name.startswith("visual.prompt."):
                assert name in store.frozen

    def test_stage2_partition(self):
        cfg = tiny_config()
        store = build_store(cfg, vocab_size=10)
        trainable = apply_stage_freeze(store, "stage2")
        assert "cross.cnt" in trainable
        assert "proj.text.w" in trainable
        assert all(not n.startswith("visual.") for n in trainable)
        assert "head.w1" in store.frozen
        joint = trainable_parameters("stage2", store, joint_prompt_tuning=True)
        assert "visual.prompt.0" in joint

    def test_unknown_stage(self):
        with pytest.raises(ParameterError):
            trainable_parameters("stage3", ParamStore())


class TestGradientFidelity:
    def test_stage1_loss_grads_match_finite_differences(self):
        from navprompt.optim import finite_difference_check

        cfg = tiny_config(prompt_count=2, prompt_layers=1, visual_layers=2, num_classes=2)
        store = build_store(cfg, seed=20)
        apply_stage_freeze(store, "stage1")
        rng = np.random.default_rng(21)
        patches = rng.normal(size=(3, cfg.num_patches, cfg.feature_dim))
        labels = np.array([0, 1, 0])

        def loss_fn(s):
            state = visual_encode(patches, s, cfg)
            logits = classify_logits(state.cls.reshape(patches.shape[0], cfg.d), s)
            logp = log_softmax(logits, axis=-1)
            return -gather_index(logp, labels).mean()

        report = finite_difference_check(loss_fn, store, eps=1e-5)
        assert report.max_rel_error < 1e-4, report.per_param


def test_param_shapes_layout():
    cfg = tiny_config()
    shapes = param_shapes(cfg, vocab_size=10)
    assert shapes["visual.prompt.0"] == (cfg.prompt_count, cfg.d)
    assert shapes["text.tok_embed"] == (10, cfg.d)
    assert shapes["cross.cnt"] == (1, cfg.d)
    assert shapes["proj.visual.w"] == (cfg.d, cfg.d)
