"""Streaming session semantics and streaming/offline equivalence."""

import numpy as np
import pytest

from repstream import netspec as ns
from repstream.errors import ContractError, NumericError
from repstream.runtime import Network, open_session, run_offline, stream_clip

from util import make_random_spec, naive_network_forward, random_clip, rel_err


def reference_net(input_size=64, dtype=np.float32, seed=0):
    spec = ns.build_reference_backbone(input_size=input_size)
    spec = ns.inflate(spec, ns.reference_inflation())
    return Network.build(spec, seed=seed, dtype=dtype)


def pointwise_only_spec():
    """All kernels 1x1 so activations stay spatially constant."""
    return ns.NetworkSpec(
        ns.InputContract(2, 4, 4, 16.0),
        ns.StemSpec(3, 1, 1),
        [ns.BlockSpec(0, 3, 3, 2.0, 1, 1, True, expand_kt=3, expand_tstride=1)],
        ns.HeadSpec(5, 3, "temporal"),
    ).validate()


class TestSession:
    def test_reference_recipe_has_8_ring_buffers(self):
        session = open_session(reference_net(input_size=32))
        assert session.ring_buffer_count == 8

    def test_uninflated_has_none(self):
        spec = ns.build_reference_backbone(input_size=32)
        session = open_session(Network.build(spec, seed=0))
        assert session.ring_buffer_count == 0

    def test_reset_restores_zero_state(self):
        net = reference_net(input_size=32)
        session = open_session(net)
        clip = np.random.default_rng(0).random((3, 5, 32, 32)).astype(np.float32)
        for t in range(5):
            session.push_frame(clip[:, t])
        session.close()
        with pytest.raises(ContractError):
            session.push_frame(clip[:, 0])
        session.reset()
        assert session.frames_consumed == 0
        out = session.push_frame(clip[:, 0])
        fresh = open_session(net).push_frame(clip[:, 0])
        np.testing.assert_array_equal(out.probabilities, fresh.probabilities)

    def test_outputs_every_fourth_frame_from_zero(self):
        net = reference_net(input_size=32)
        session = open_session(net)
        rng = np.random.default_rng(1)
        fired = []
        for t in range(16):
            out = session.push_frame(rng.random((3, 32, 32)).astype(np.float32))
            if out is not None:
                fired.append(out.frame_index)
        assert fired == [0, 4, 8, 12]

    def test_63_frames_16_outputs(self):
        net = reference_net(input_size=32)
        clip = np.random.default_rng(2).random((3, 63, 32, 32)).astype(np.float32)
        probs, idx, session = stream_clip(net, clip)
        assert probs.shape[0] == 16
        assert session.outputs_emitted == 16

    def test_uninflated_one_output_per_frame(self):
        rng = np.random.default_rng(3)
        spec = make_random_spec(np.random.default_rng(42))
        while spec.inflated_layer_ids():
            spec = make_random_spec(rng)
        net = Network.build(spec, seed=0)
        clip = random_clip(rng, spec, 7)
        probs, idx, _ = stream_clip(net, clip)
        assert probs.shape[0] == 7
        np.testing.assert_array_equal(idx, np.arange(7))

    def test_frame_shape_contract(self):
        session = open_session(reference_net(input_size=32))
        with pytest.raises(ContractError, match="input contract"):
            session.push_frame(np.zeros((3, 16, 16), dtype=np.float32))

    def test_nonfinite_frame_rejected(self):
        session = open_session(reference_net(input_size=32))
        bad = np.full((3, 32, 32), np.nan, dtype=np.float32)
        with pytest.raises(NumericError):
            session.push_frame(bad)

    def test_clone_preserves_state(self):
        net = reference_net(input_size=32)
        rng = np.random.default_rng(4)
        clip = rng.random((3, 9, 32, 32)).astype(np.float32)
        a = open_session(net)
        for t in range(5):
            a.push_frame(clip[:, t])
        b = a.clone()
        outs_a = [a.push_frame(clip[:, t]) for t in range(5, 9)]
        outs_b = [b.push_frame(clip[:, t]) for t in range(5, 9)]
        for oa, ob in zip(outs_a, outs_b):
            assert (oa is None) == (ob is None)
            if oa is not None:
                np.testing.assert_array_equal(oa.probabilities, ob.probabilities)


class TestEquivalence:
    def test_random_networks_float32(self):
        rng = np.random.default_rng(10)
        for _ in range(10):
            spec = make_random_spec(rng)
            net = Network.build(spec, seed=int(rng.integers(1 << 30)), dtype=np.float32)
            clip = random_clip(rng, spec, int(rng.integers(1, 40)))
            off = run_offline(net, clip)
            sp, idx, _ = stream_clip(net, clip)
            assert sp.shape == off.probabilities.shape
            np.testing.assert_array_equal(idx, off.step_frame_indices)
            assert rel_err(sp, off.probabilities) <= 1e-5

    def test_random_networks_float64(self):
        rng = np.random.default_rng(11)
        for _ in range(5):
            spec = make_random_spec(rng)
            net = Network.build(spec, seed=int(rng.integers(1 << 30)), dtype=np.float64)
            clip = random_clip(rng, spec, int(rng.integers(1, 40))).astype(np.float64)
            off = run_offline(net, clip)
            sp, _, _ = stream_clip(net, clip)
            assert rel_err(sp, off.probabilities) <= 1e-10

    def test_single_frame_uninflated_equals_2d_pass(self):
        rng = np.random.default_rng(12)
        spec = toy = pointwise_only_spec()
        spec = ns.NetworkSpec(toy.input, toy.stem,
                              [ns.BlockSpec(0, 3, 3, 2.0, 1, 1, True)], toy.head).validate()
        net = Network.build(spec, seed=5)
        clip = random_clip(rng, spec, 1)
        off = run_offline(net, clip)
        probs = net.forward_steps(clip)
        assert off.probabilities.shape == (1, 3)
        np.testing.assert_array_equal(off.probabilities, probs)

    def test_zero_clip_constant_propagation(self):
        # bias-propagated constants: both modes agree with the naive oracle,
        # and on a pointwise-only network the steady state matches closed form
        spec = pointwise_only_spec()
        net = Network.build(spec, seed=7, dtype=np.float64)
        clip = np.zeros((2, 9, 4, 4))
        off = run_offline(net, clip)
        sp, _, _ = stream_clip(net, clip)
        naive_probs, _ = naive_network_forward(net, clip)
        assert rel_err(off.probabilities, naive_probs) < 1e-12
        assert rel_err(sp, naive_probs) < 1e-12

        def const_forward(layer, c):
            w = layer.weights
            taps = w.kernel.sum(axis=(2, 3, 4)).astype(np.float64)  # (O, I/groups)
            og = w.out_channels // w.groups
            out = np.empty(w.out_channels)
            for o in range(w.out_channels):
                grp = o // og
                ig = w.kernel.shape[1]
                out[o] = taps[o] @ c[grp * ig : (grp + 1) * ig] + w.bias[o]
            return np.clip(out, 0, 6) if layer.activation == "relu6" else out

        c = const_forward(net.stem, np.zeros(2))
        block = net.blocks[0]
        h = const_forward(block.expand, c)
        h = const_forward(block.depthwise, h)
        h = const_forward(block.project, h)
        c_after = h + c  # skip
        c_head = const_forward(net.head_conv, c_after)
        logits = net.head_fc.weight @ c_head + net.head_fc.bias
        expected = np.exp(logits - logits.max())
        expected /= expected.sum()
        # steady state holds once the temporal transient has passed
        np.testing.assert_allclose(off.probabilities[-1], expected, rtol=1e-10)

    def test_online_causality_appending_frames(self):
        rng = np.random.default_rng(13)
        spec = make_random_spec(rng)
        net = Network.build(spec, seed=9)
        clip = random_clip(rng, spec, 24)
        full = run_offline(net, clip).probabilities
        prefix = run_offline(net, clip[:, :13]).probabilities
        np.testing.assert_array_equal(full[: prefix.shape[0]], prefix)

    def test_work_accounting_matches_trace(self):
        rng = np.random.default_rng(14)
        for _ in range(5):
            spec = make_random_spec(rng)
            net = Network.build(spec, seed=3)
            T = int(rng.integers(1, 30))
            clip = random_clip(rng, spec, T)
            _, _, session = stream_clip(net, clip)
            rows = {r.layer_id: r for r in ns.shape_trace(spec, T=T)}
            for lid, count in session.exec_counts.items():
                assert count == rows[lid].out_t, lid


class TestInflationFidelity:
    def test_identity_tap_preserves_2d_behavior(self):
        rng = np.random.default_rng(15)
        for _ in range(5):
            spec = make_random_spec(rng)
            while spec.inflated_layer_ids():
                spec = make_random_spec(rng)
            net = Network.build(spec, seed=int(rng.integers(1 << 30)))
            targets = [
                ns.InflationTarget(b.index, 3, 1) for b in spec.blocks if b.has_expand
            ]
            if not targets:
                continue
            inflated = net.inflated(ns.InflationSpec(targets=targets), init="identity_tap")
            clip = random_clip(rng, spec, 11)
            base = net.forward_steps(clip)
            got = inflated.forward_steps(clip)
            assert rel_err(got, base) <= 1e-6

    def test_averaged_init_differs_but_matches_on_constant_input(self):
        rng = np.random.default_rng(16)
        spec = pointwise_only_spec()
        base_spec = ns.NetworkSpec(
            spec.input, spec.stem,
            [ns.BlockSpec(0, 3, 3, 2.0, 1, 1, True)], spec.head,
        ).validate()
        net = Network.build(base_spec, seed=2, dtype=np.float64)
        inflated = net.inflated(
            ns.InflationSpec(targets=[ns.InflationTarget(0, 3, 1)]), init="averaged"
        )
        const = np.ones((2, 9, 4, 4)) * 0.3
        base = net.forward_steps(const)
        got = inflated.forward_steps(const)
        # once the causal transient passes, averaged taps reproduce 2D outputs
        np.testing.assert_allclose(got[2:], base[2:], rtol=1e-10)
        varied = rng.random((2, 9, 4, 4))
        assert rel_err(inflated.forward_steps(varied), net.forward_steps(varied)) > 1e-6


class TestRunOffline:
    def test_rejects_empty_clip(self):
        net = reference_net(input_size=32)
        with pytest.raises(ContractError, match="non-empty"):
            run_offline(net, np.zeros((3, 0, 32, 32), dtype=np.float32))

    def test_accepts_tensor_wrapper(self):
        from repstream.tensor import TensorND

        net = reference_net(input_size=32)
        clip = np.random.default_rng(17).random((3, 4, 32, 32)).astype(np.float32)
        a = run_offline(net, clip)
        b = run_offline(net, TensorND(clip, "CTHW"))
        np.testing.assert_array_equal(a.probabilities, b.probabilities)

    def test_checkpointable_params_roundtrip(self):
        net = reference_net(input_size=32, seed=11)
        params = net.get_params()
        other = Network.build(net.spec, seed=99, dtype=net.dtype)
        other.set_params(params)
        clip = np.random.default_rng(18).random((3, 5, 32, 32)).astype(np.float32)
        np.testing.assert_array_equal(
            net.forward_steps(clip), other.forward_steps(clip)
        )
