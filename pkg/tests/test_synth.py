import hashlib
from dataclasses import replace

import numpy as np
import pytest

from ltc import synth as sy
from ltc.data import Manifest, read_volume
from ltc.synth import SynthConfig

SMALL = SynthConfig(clips_per_class=3, width=32, height=32, frames=80)


def tree_digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


class TestConfig:
    @pytest.mark.parametrize("kw", [
        dict(num_classes=0), dict(prefix_fraction=0.0), dict(prefix_fraction=1.0),
        dict(train_fraction=1.0), dict(frames=10), dict(clips_per_class=1),
    ])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            SynthConfig(**kw)

    def test_strokes_fit_after_prefix(self):
        cfg = SynthConfig()
        a, b, half = sy.stroke_layout(cfg)
        assert a == cfg.prefix_frames == 40
        assert b + 2 * half <= cfg.frames
        # no 16-frame window contains motion from both strokes
        assert b - (a + 2 * half - 1) >= 16


class TestVelocities:
    @pytest.mark.parametrize("label", range(4))
    def test_relation_defines_class(self, label):
        cfg = SynthConfig()
        a, b, half = sy.stroke_layout(cfg)
        opposite, offset = sy.class_relation(label, cfg)
        rng = np.random.default_rng(label)
        for _ in range(20):
            v = sy.velocities(cfg, label, rng)
            s1, s2 = v[a], v[b]
            d1, d2 = s1 / np.abs(s1).max(), s2 / np.abs(s2).max()
            assert np.array_equal(d2, -d1 if opposite else d1)
            i1 = cfg.speeds.index(np.abs(s1).max())
            assert np.abs(s2).max() == cfg.speeds[(i1 + offset) % len(cfg.speeds)]

    def test_strokes_return_home(self):
        cfg = SynthConfig()
        v = sy.velocities(cfg, 3, np.random.default_rng(0))
        assert np.all(v[cfg.prefix_frames:].sum(axis=0) == 0)

    def test_single_stroke_marginal_is_class_free(self):
        # the first stroke's direction and speed are drawn the same way for every class
        cfg = SynthConfig()
        a, _, _ = sy.stroke_layout(cfg)
        seen = {}
        for label in range(4):
            rng = np.random.default_rng(0)
            seen[label] = [tuple(sy.velocities(cfg, label, rng)[a]) for _ in range(50)]
        assert all(seen[c] == seen[0] for c in range(4))


class TestRender:
    def test_analytic_flow_of_translating_blob(self):
        cfg = replace(SMALL, noise_sigma=0.0)
        vel = np.zeros((cfg.frames, 2))
        vel[:, 0] = 1.0
        flow, _ = sy.render(cfg, vel, np.random.default_rng(0))
        support = np.abs(flow[0]) > 0
        assert support.any()
        assert np.all(flow[0][support] == 1.0)
        assert np.all(flow[1] == 0)

    def test_shapes(self):
        cfg = SMALL
        flow, rgb = sy.render(cfg, np.zeros((cfg.frames, 2)), np.random.default_rng(0))
        assert flow.shape == (2, 80, 32, 32) and rgb.shape == (3, 80, 32, 32)


class TestGenerate:
    def test_loadable_and_counts(self, tmp_path):
        sy.synth_generate(SMALL, 0, tmp_path)
        for modality in ("flow", "rgb"):
            m = Manifest.load(tmp_path, manifest=f"manifest_{modality}.tsv")
            assert len(m.records) == SMALL.num_classes * SMALL.clips_per_class
            assert m.classes == ["c0", "c1", "c2", "c3"]
            assert m.read(m.records[0]).modality == modality
        assert "seed=0" in (tmp_path / "synth.cfg").read_text()

    def test_split_sizes(self, tmp_path):
        cfg = replace(SMALL, clips_per_class=10, train_fraction=0.7)
        sy.synth_generate(cfg, 0, tmp_path)
        m = Manifest.load(tmp_path, manifest="manifest_flow.tsv")
        assert len(m.split("train")) == 28 and len(m.split("test")) == 12

    def test_same_seed_identical_tree(self, tmp_path):
        sy.synth_generate(SMALL, 5, tmp_path / "a")
        sy.synth_generate(SMALL, 5, tmp_path / "b")
        assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")

    def test_prefix_shared_suffix_differs(self, tmp_path):
        cfg = replace(SMALL, noise_sigma=0.0, rgb_clutter=0.0)
        sy.synth_generate(cfg, 0, tmp_path)
        a = read_volume(tmp_path / "volumes" / "c0_v000_flow.ltcv").data
        b = read_volume(tmp_path / "volumes" / "c1_v000_flow.ltcv").data
        P = cfg.prefix_frames
        np.testing.assert_array_equal(a[:, :P], b[:, :P])
        assert not np.array_equal(a[:, P:], b[:, P:])

    def test_noisy_prefix_agrees_within_noise(self, tmp_path):
        sy.synth_generate(SMALL, 1, tmp_path)
        a = read_volume(tmp_path / "volumes" / "c0_v000_flow.ltcv").data
        b = read_volume(tmp_path / "volumes" / "c3_v001_flow.ltcv").data
        P = SMALL.prefix_frames
        diff = a[:, :P] - b[:, :P]
        # the difference of two independent noise fields has std sigma * sqrt(2)
        assert abs(diff.std() - SMALL.noise_sigma * np.sqrt(2)) < 0.02
        assert abs(diff.mean()) < 0.01
