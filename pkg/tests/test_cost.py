"""MAC accounting against hand formulas and the instrumented naive oracle."""

import numpy as np
import pytest

from repstream import cost, netspec as ns
from repstream.errors import ContractError
from repstream.runtime import Network

from util import make_random_spec, naive_network_forward, random_clip, rel_err


def _row(layer_id, rows):
    return [r for r in rows if r.layer_id == layer_id][0]


class TestLayerMacs:
    def _spec(self, expand_kt=1):
        return ns.NetworkSpec(
            ns.InputContract(3, 16, 16, 16.0),
            ns.StemSpec(16, 3, 2),
            [ns.BlockSpec(0, 16, 32, 2.0, 3, 1, False,
                          expand_kt=expand_kt)],
            ns.HeadSpec(8, 2),
        ).validate()

    def test_pointwise_16_to_32_at_8x8(self):
        rows = ns.shape_trace(self._spec())
        row = _row("block0.expand", rows)
        assert (row.in_ch, row.out_ch, row.out_h, row.out_w) == (16, 32, 8, 8)
        assert cost.layer_macs(row) == 32768  # 8*8*16*32

    def test_inflated_kt3_triples(self):
        rows = ns.shape_trace(self._spec(expand_kt=3))
        assert cost.layer_macs(_row("block0.expand", rows)) == 98304

    def test_depthwise_3x3_32ch_8x8(self):
        rows = ns.shape_trace(self._spec())
        row = _row("block0.depthwise", rows)
        assert row.groups == 32
        assert cost.layer_macs(row) == 18432  # 8*8*32*9

    def test_fc_macs(self):
        rows = ns.shape_trace(self._spec())
        assert cost.layer_macs(_row("head.fc", rows)) == 8 * 2


class TestPerSecondCost:
    def test_uninflated_totals_16x_per_frame(self):
        spec = ns.build_reference_backbone()
        report = cost.per_second_cost(spec, 16.0)
        per_frame = sum(cost.layer_macs(r) for r in ns.shape_trace(spec))
        assert report.total_macs_per_s == pytest.approx(16 * per_frame)

    def test_rate_reduction_after_block_14(self):
        spec = ns.inflate(ns.build_reference_backbone(), ns.reference_inflation())
        report = cost.per_second_cost(spec, 16.0)
        rates = {l.layer_id: l.rate_hz for l in report.layers}
        assert rates["block15.expand"] == 4.0
        assert rates["block7.expand"] == 8.0  # the strided conv bills at its output rate
        assert rates["block6.project"] == 16.0
        assert rates["head.fc"] == 4.0

    def test_reference_lands_in_published_envelope(self):
        spec = ns.inflate(ns.build_reference_backbone(), ns.reference_inflation())
        report = cost.per_second_cost(spec, 16.0)
        assert 3.0 <= report.total_gmacs_per_s <= 5.0

    def test_uninflated_strictly_more_expensive(self):
        base = ns.build_reference_backbone()
        inflated = ns.inflate(base, ns.reference_inflation())
        assert (
            cost.per_second_cost(base, 16.0).total_macs_per_s
            > cost.per_second_cost(inflated, 16.0).total_macs_per_s
        )

    def test_adding_stride_halves_downstream_rates(self):
        spec = ns.build_reference_backbone()
        with_stride = ns.inflate(
            spec, ns.InflationSpec(targets=[ns.InflationTarget(5, 3, 2)])
        )
        before = {l.layer_id: l.rate_hz for l in cost.per_second_cost(spec, 16.0).layers}
        after = {l.layer_id: l.rate_hz for l in cost.per_second_cost(with_stride, 16.0).layers}
        ids = list(before)
        boundary = ids.index("block5.expand")
        for lid in ids[:boundary]:
            assert after[lid] == before[lid]
        for lid in ids[boundary:]:
            assert after[lid] == before[lid] / 2

    def test_invalid_fps_rejected(self):
        with pytest.raises(ContractError):
            cost.per_second_cost(ns.build_reference_backbone(), 0)

    def test_reference_constants(self):
        assert cost.REFERENCE_STREAM_GMACS == 4.0
        assert cost.REFERENCE_POSE_BACKBONE_GMACS == 6.7
        report = cost.per_second_cost(ns.build_reference_backbone(), 16.0)
        assert '"reference_stream_gmacs": 4.0' in report.to_json()

    def test_toy_single_layer_hand_formula(self):
        table = {
            "input": {"channels": 3, "height": 8, "width": 8, "fps": 16},
            "stem": {"out_ch": 4, "kernel": 3, "stride": 1},
            "stages": [{"expansion": 2, "out_ch": 4, "repeats": 1, "kernel": 3, "stride": 1}],
            "head": {"conv_ch": 4, "num_classes": 2},
        }
        spec = ns.build_reference_backbone(table)
        report = cost.per_second_cost(spec, 16.0)
        by_id = {l.layer_id: l.macs_per_exec for l in report.layers}
        assert by_id["stem.conv"] == 8 * 8 * 4 * 3 * 9
        assert by_id["block0.expand"] == 8 * 8 * 8 * 4
        assert by_id["block0.depthwise"] == 8 * 8 * 8 * 9
        assert by_id["block0.project"] == 8 * 8 * 4 * 8
        assert by_id["head.conv"] == 8 * 8 * 4 * 4
        assert by_id["head.fc"] == 4 * 2


class TestInstrumentedOracle:
    def test_analytic_equals_counted_multiplies(self):
        rng = np.random.default_rng(77)
        for _ in range(6):
            spec = make_random_spec(rng)
            net = Network.build(spec, seed=int(rng.integers(1 << 30)))
            T = int(rng.integers(1, 7))
            clip = random_clip(rng, spec, T)
            probs, counted = naive_network_forward(net, clip)
            rows = {r.layer_id: r for r in ns.shape_trace(spec, T=T)}
            for lid, macs in counted.items():
                expected = cost.layer_macs(rows[lid]) * rows[lid].out_t
                assert macs == expected, lid
            # the fast path agrees with the naive forward as well
            fast = net.forward_steps(clip)
            assert rel_err(fast, probs) < 1e-5
