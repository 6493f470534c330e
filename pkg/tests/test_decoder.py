import numpy as np
import pytest

from boxref import autodiff as ad
from boxref import decoder as dec
from boxref.autodiff import ParamStore, ShapeError, finite_difference_check, tensor
from boxref.decoder import DecoderConfig, decoder_stage, forward, init_decoder_params, init_queries
from boxref.encoder import encode_scene, init_encoder_params
from boxref.matching import set_loss
from boxref.scenes import SceneSpec, generate_scene


def build_model(config, seed=0, encoder=False):
    rng = np.random.default_rng(seed)
    store = ParamStore()
    if encoder:
        init_encoder_params(store, config.dim, rng, attn_layer=False)
    init_decoder_params(config, rng, store)
    state = init_queries(store, config, rng)
    return store, state


def random_memory(config, K, seed=1):
    rng = np.random.default_rng(seed)
    from boxref.attention import sinusoidal_embed

    content = tensor(rng.standard_normal((K, config.dim)))
    key_pos = tensor(sinusoidal_embed(tensor(rng.uniform(0, 1, (K, 2))), config.dim).data)
    return content, key_pos


class TestConfig:
    def test_validation(self):
        with pytest.raises(ShapeError):
            DecoderConfig(dim=30, heads=4)
        with pytest.raises(ValueError):
            DecoderConfig(stages=0)
        with pytest.raises(ValueError):
            DecoderConfig(mode="warp")
        with pytest.raises(ValueError):
            DecoderConfig(whm="sometimes")

    def test_center_whm_mode_resolution(self):
        c = DecoderConfig(mode="center+whm")
        assert c.reference_mode == "center"
        assert c.whm_mode == "original"
        c2 = DecoderConfig(mode="center+whm", whm="scale-free")
        assert c2.whm_mode == "scale-free"


class TestInitQueries:
    def test_smallest_case(self):
        config = DecoderConfig(queries=1, dim=16, heads=4, stages=1)
        store, state = build_model(config)
        assert state.logits.data.shape == (1, 4)
        assert state.embeddings.data.shape == (1, 16)
        np.testing.assert_array_equal(state.embeddings.data, np.zeros((1, 16)))

    def test_determinism(self):
        config = DecoderConfig(queries=4, dim=16, heads=4, stages=1)
        _, s1 = build_model(config, seed=7)
        _, s2 = build_model(config, seed=7)
        np.testing.assert_array_equal(s1.logits.data, s2.logits.data)

    def test_anchor_range(self):
        config = DecoderConfig(queries=1000, dim=16, heads=4, stages=1)
        store, state = build_model(config)
        boxes = 1 / (1 + np.exp(-state.logits.data))
        assert np.all(boxes > 0.05) and np.all(boxes < 0.95)


class TestDecoderStage:
    def test_output_shapes_and_trace(self):
        config = DecoderConfig(stages=2, queries=5, dim=16, heads=4, classes=3)
        store, state = build_model(config)
        mem, pos = random_memory(config, K=12)
        new_state, (boxes, logits), trace = decoder_stage(state, mem, pos, store, config,
                                                          collect_trace=True)
        assert boxes.data.shape == (5, 4)
        assert logits.data.shape == (5, 4)  # classes + no-object
        assert new_state.stage == 1
        assert trace.attn_weights.shape == (4, 5, 12)
        assert trace.agents.shape == (5, 4, 2)
        np.testing.assert_allclose(trace.attn_weights.sum(axis=-1), np.ones((4, 5)), atol=1e-12)
        assert np.all(boxes.data > 0) and np.all(boxes.data < 1)

    def test_zeroed_box_head_keeps_boxes(self):
        config = DecoderConfig(stages=1, queries=4, dim=16, heads=4)
        store, state = build_model(config)
        store["head.box.3.w"].data[:] = 0.0
        store["head.box.3.b"].data[:] = 0.0
        mem, pos = random_memory(config, K=9)
        _, (boxes, _), _ = decoder_stage(state, mem, pos, store, config)
        np.testing.assert_array_equal(boxes.data, ad.sigmoid(state.logits).data)

    def test_memory_width_mismatch_rejected(self):
        config = DecoderConfig(stages=1, queries=4, dim=16, heads=4)
        store, state = build_model(config)
        bad = tensor(np.zeros((9, 8)))
        with pytest.raises(ShapeError):
            decoder_stage(state, bad, bad, store, config)

    def test_reduction_zero_walker_equals_center_bitwise(self):
        base = dict(stages=2, queries=5, dim=16, heads=4, classes=3)
        cfg_agent = DecoderConfig(mode="agent-unnormalized", **base)
        cfg_center = DecoderConfig(mode="center", **base)
        store_a, state_a = build_model(cfg_agent, seed=3)
        store_c, state_c = build_model(cfg_center, seed=3)
        mem, pos = random_memory(cfg_agent, K=10, seed=4)
        out_a, tr_a = forward(state_a, mem, pos, store_a, cfg_agent, collect_traces=True)
        out_c, tr_c = forward(state_c, mem, pos, store_c, cfg_center, collect_traces=True)
        for (ba, la), (bc, lc) in zip(out_a, out_c):
            np.testing.assert_array_equal(ba.data, bc.data)
            np.testing.assert_array_equal(la.data, lc.data)
        for ta, tc in zip(tr_a, tr_c):
            np.testing.assert_array_equal(ta.attn_weights, tc.attn_weights)
            np.testing.assert_array_equal(ta.agents, tc.agents)

    def test_fixed_grid_no_walker_gradient(self):
        config = DecoderConfig(stages=1, queries=4, dim=16, heads=8, mode="agent-fixed-grid")
        store, state = build_model(config)
        mem, pos = random_memory(config, K=9)
        _, (boxes, logits), _ = decoder_stage(state, mem, pos, store, config)
        ((boxes * boxes).sum() + (logits * logits).sum()).backward()
        assert store["stage0.walker.w"].grad is None
        assert store["stage0.lam.w1"].grad is not None


class TestForward:
    def test_single_stage(self):
        config = DecoderConfig(stages=1, queries=4, dim=16, heads=4)
        store, state = build_model(config)
        mem, pos = random_memory(config, K=9)
        outputs, traces = forward(state, mem, pos, store, config)
        assert len(outputs) == 1 and traces is None

    def test_deterministic(self):
        config = DecoderConfig(stages=3, queries=4, dim=16, heads=4)
        outs = []
        for _ in range(2):
            store, state = build_model(config, seed=11)
            mem, pos = random_memory(config, K=9, seed=12)
            outputs, _ = forward(state, mem, pos, store, config)
            outs.append(outputs)
        for (b1, l1), (b2, l2) in zip(*outs):
            np.testing.assert_array_equal(b1.data, b2.data)
            np.testing.assert_array_equal(l1.data, l2.data)

    def test_trace_count_matches_stages(self):
        config = DecoderConfig(stages=3, queries=4, dim=16, heads=4, mode="agent-tanh")
        store, state = build_model(config)
        mem, pos = random_memory(config, K=9)
        _, traces = forward(state, mem, pos, store, config, collect_traces=True)
        assert len(traces) == 3
        for t in traces:
            assert t.agents.shape == (4, 4, 2)
            assert t.walker is not None


class TestEndToEndGradient:
    def test_full_loss_gradient_small(self):
        # encoder -> 2-stage decoder -> matched set loss, all parameters
        config = DecoderConfig(stages=2, queries=3, dim=8, heads=2, classes=2,
                               detach_boxes=False, ffn_ratio=2,
                               mode="agent-unnormalized", whm="original")
        rng = np.random.default_rng(5)
        store = ParamStore()
        init_encoder_params(store, config.dim, rng)
        init_decoder_params(config, rng, store)
        state0 = init_queries(store, config, rng)
        # jitter every parameter: at the pristine init the zero biases put
        # stage-0 activations exactly on relu kinks, where central
        # differences and subgradients legitimately disagree
        for _, p in store.items():
            p.data = p.data + rng.normal(0, 0.05, p.data.shape)
        scene = generate_scene(np.random.default_rng(6),
                               SceneSpec(grid_h=5, grid_w=5, k_min=1, k_max=2, classes=2))

        fixed = None

        def loss():
            mem = encode_scene(scene, store, config.dim, config.temperature)
            state = dec.DecoderState(logits=store["anchors"], embeddings=state0.embeddings,
                                     stage=0)
            outputs, _ = forward(state, mem.content, mem.key_pos, store, config)
            out, _ = set_loss(outputs, scene.boxes, scene.classes, assignments=fixed)
            return out

        # freeze the matching first so the loss is smooth
        mem = encode_scene(scene, store, config.dim, config.temperature)
        outputs, _ = forward(dec.DecoderState(logits=store["anchors"],
                                              embeddings=state0.embeddings, stage=0),
                             mem.content, mem.key_pos, store, config)
        _, fixed = set_loss(outputs, scene.boxes, scene.classes)

        err = finite_difference_check(loss, dict(store.items()), eps=1e-6)
        assert err < 1e-4
