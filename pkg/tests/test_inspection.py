import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ltc import inspection as ins
from ltc import network as nw
from ltc.data import Record, VideoVolume
from ltc.network import NetworkSpec

SPEC = NetworkSpec("flow", 32, 32, 16, 3, conv_channels=(4, 4, 6, 6, 6), fc_sizes=(16, 16))


def rec(i, label, group=None):
    return Record(f"v{i}", f"v{i}.ltcv", label, "test", 24, group)


def videos(n=6, seed=0, labels=("a", "b", "c"), groups=False, frames=24):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        g = f"g{i // 2}" if groups else None
        vol = VideoVolume(rng.standard_normal((2, frames, 34, 36)), "flow")
        out.append((rec(i, labels[i % len(labels)], g), vol))
    return out


def ar(label, value=1.0, vid="x"):
    return ins.ActivationRecord(vid, label, value, 0, 0, 0, 0, (0, 0, 0))


class TestFilterFields:
    def test_vectors_are_the_weights(self):
        net = nw.build(SPEC, seed=0)
        fields = ins.export_filter_fields(net)
        assert len(fields) == 4
        w = net.convs[0].weight
        assert fields[2].vectors.shape == (3, 3, 3, 2)
        assert fields[2].vectors[1, 0, 2, 0] == w[2, 0, 1, 0, 2]
        assert fields[2].vectors[1, 0, 2, 1] == w[2, 1, 1, 0, 2]

    def test_json_roundtrip(self):
        fields = ins.export_filter_fields(nw.build(SPEC, seed=1))
        back = ins.fields_from_json(ins.fields_to_json(fields))
        for a, b in zip(fields, back):
            assert a.index == b.index
            np.testing.assert_array_equal(a.vectors, b.vectors)
        assert json.loads(ins.fields_to_json(fields))[0]["colours"] == ["blue", "red", "green"]

    def test_svg_deterministic(self):
        fields = ins.export_filter_fields(nw.build(SPEC, seed=1))
        svg = ins.fields_to_svg(fields)
        assert svg == ins.fields_to_svg(fields)
        assert svg.count("<line") == 4 * 27

    def test_rgb_rejected(self):
        with pytest.raises(ValueError):
            ins.export_filter_fields(nw.build(NetworkSpec("rgb", 32, 32, 16, 3, conv_channels=(4, 4, 6, 6, 6), fc_sizes=(16, 16))))


class TestTopActivations:
    def test_recomputation_oracle(self):
        net = nw.build(SPEC, seed=2)
        vids = videos()
        per = ins.layer_top_activations(net, "conv4", vids, k=4, one_per_group=False)
        for f, records in per.items():
            assert len(records) == 4
            assert [r.value for r in records] == sorted((r.value for r in records), reverse=True)
            for r in records:
                vol = dict((rc.id, v) for rc, v in vids)[r.video_id]
                # independently rebuild the centre crop of the recorded clip
                s = r.clip_start
                clip = vol.data[:, s:s + 16, 1:33, 2:34]
                feats = net.features(clip[None], 4)[0, f]
                assert feats[r.index] == r.value
                assert r.value == feats.max()
                # conv4 sits behind three pools: cumulative stride (4, 8, 8)
                t, y, x = r.index
                assert (r.frame, r.y, r.x) == (s + 4 * t, 1 + 8 * y, 2 + 8 * x)

    def test_video_max_over_all_clips(self):
        net = nw.build(SPEC, seed=3)
        vids = videos(n=2)
        per = ins.layer_top_activations(net, "conv3", vids, k=2, one_per_group=False)
        for f, records in per.items():
            for r in records:
                vol = dict((rc.id, v) for rc, v in vids)[r.video_id]
                best = max(net.features(vol.data[None, :, s:s + 16, 1:33, 2:34], 3)[0, f].max() for s in (0, 4, 8))
                assert r.value == best

    def test_indices_within_layer(self):
        net = nw.build(SPEC, seed=4)
        for layer, stage in (("conv3", 3), ("conv4", 4), ("conv5", 5)):
            shape = nw.stage_shapes(SPEC)[stage - 1][1:]
            for records in ins.layer_top_activations(net, layer, videos(n=3), k=3).values():
                for r in records:
                    assert all(0 <= i < n for i, n in zip(r.index, shape))

    def test_one_video_per_group(self):
        net = nw.build(SPEC, seed=5)
        per = ins.layer_top_activations(net, "conv5", videos(n=6, groups=True), k=7)
        for records in per.values():
            assert len(records) == 3
            assert {r.video_id for r in records} <= {"v0", "v2", "v4"}

    def test_single_filter_helper(self):
        net = nw.build(SPEC, seed=5)
        vids = videos(n=3)
        assert ins.top_activations(net, "conv4", 1, vids, k=2) == ins.layer_top_activations(net, "conv4", vids, k=2)[1]

    def test_bad_layer_and_filter(self):
        net = nw.build(SPEC)
        with pytest.raises(ValueError):
            ins.layer_top_activations(net, "conv1", videos(n=1))
        with pytest.raises(ValueError):
            ins.top_activations(net, "conv3", 6, videos(n=1))

    def test_reproducible(self):
        net = nw.build(SPEC, seed=6)
        a = ins.layer_top_activations(net, "conv5", videos(n=4), k=3)
        b = ins.layer_top_activations(net, "conv5", videos(n=4), k=3)
        assert json.dumps({f: [r.to_dict() for r in v] for f, v in a.items()}) == \
            json.dumps({f: [r.to_dict() for r in v] for f, v in b.items()})

    def test_cumulative_stride(self):
        assert ins.cumulative_stride(3) == (2, 4, 4)
        assert ins.cumulative_stride(5) == (8, 16, 16)


class TestPurity:
    def test_two_of_three(self):
        assert ins.filter_purity([ar("a"), ar("a"), ar("b")]) == (2 / 3, "a")

    def test_all_same(self):
        assert ins.filter_purity([ar("z")] * 7) == (1.0, "z")

    def test_tie_lexicographic(self):
        recs = [ar("b")] * 3 + [ar("a")] * 3 + [ar("c")]
        assert ins.filter_purity(recs) == (3 / 7, "a")

    def test_empty(self):
        with pytest.raises(ValueError):
            ins.filter_purity([])

    def test_sort_ties_by_index(self):
        per = {0: [ar("a"), ar("b")], 1: [ar("a"), ar("a")], 2: [ar("a"), ar("a")]}
        assert ins.sort_filters_by_purity(per) == [1, 2, 0]

    @given(st.lists(st.sampled_from("abcd"), min_size=1, max_size=20))
    def test_purity_bounds(self, labels):
        p, dom = ins.filter_purity([ar(x) for x in labels])
        assert 1 / len(set(labels)) <= p <= 1
        assert labels.count(dom) == round(p * len(labels))


class TestPurityGrid:
    def test_cells_follow_sorted_filters(self):
        per = {f: [ar("ab"[(f + r) % 2]) for r in range(7)] for f in range(5)}
        per[3] = [ar("a")] * 7
        g = ins.purity_grid(per)
        assert g["filters"][0] == 3
        for c, f in enumerate(g["filters"]):
            for r in range(7):
                assert g["grid"][r][c] == per[f][r].label

    @given(st.integers(1, 40), st.integers(1, 9))
    def test_dimensions_bounded(self, n_filters, k):
        per = {f: [ar("a")] * k for f in range(n_filters)}
        g = ins.purity_grid(per)
        assert len(g["grid"]) == 7
        assert all(len(row) == min(n_filters, 30) for row in g["grid"])

    def test_single_class_monochrome(self, tmp_path):
        per = {f: [ar("only")] * 7 for f in range(3)}
        doc, svg = ins.purity_grid_export({"conv5": ins.purity_grid(per)}, ["only"],
                                          tmp_path / "g.json", tmp_path / "g.svg")
        colours = {c for row in doc["layers"]["conv5"]["grid"] for c in row}
        assert colours == {"only"}
        assert svg.count(doc["colours"]["only"]) == 21
        assert json.loads((tmp_path / "g.json").read_text()) == json.loads(json.dumps(doc))

    def test_unique_colours(self):
        cols = ins.class_colours([f"c{i}" for i in range(10)])
        assert len(set(cols.values())) == 10
