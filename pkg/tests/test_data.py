import json

import numpy as np
import pytest
import torch
from PIL import Image

from physuie import data, physics
from physuie.data import DatasetLayout, SyntheticSpec
from physuie.errors import ConfigError, DataError


def write_png(path, h, w, seed=0):
    arr = np.random.default_rng(seed).integers(0, 256, (h, w, 3), dtype=np.uint8)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path)
    return arr


@pytest.fixture
def paired_root(tmp_path):
    for i, stem in enumerate(["c", "a", "b"]):
        write_png(tmp_path / "input" / f"{stem}.png", 16, 16, seed=i)
        write_png(tmp_path / "reference" / f"{stem}.png", 16, 16, seed=10 + i)
    return tmp_path


class TestLoadDataset:
    def test_pairs_ordered_by_stem(self, paired_root):
        ds = data.load_dataset(paired_root, DatasetLayout(size=16))
        assert [s.id for s in ds] == ["a", "b", "c"]
        assert not ds.skipped
        for s in ds:
            assert s.input.shape == s.reference.shape == (3, 16, 16)
            assert s.input.min() >= 0 and s.input.max() <= 1

    def test_decoding_is_exact(self, tmp_path):
        arr = write_png(tmp_path / "input" / "x.png", 8, 8)
        write_png(tmp_path / "reference" / "x.png", 8, 8)
        s = data.load_dataset(tmp_path, DatasetLayout(size=8))[0]
        expect = torch.from_numpy(arr.astype(np.float32) / 255.0).permute(2, 0, 1)
        assert torch.equal(s.input, expect)

    def test_missing_reference_is_reported(self, paired_root):
        (paired_root / "reference" / "b.png").unlink()
        ds = data.load_dataset(paired_root, DatasetLayout(size=16))
        assert [s.id for s in ds] == ["a", "c"]
        assert ds.skipped == ["b"]

    def test_unpaired_mode(self, paired_root):
        (paired_root / "reference" / "b.png").unlink()
        ds = data.load_dataset(paired_root, DatasetLayout(size=16, paired=False))
        assert [s.id for s in ds] == ["a", "b", "c"]
        assert ds[1].reference is None

    def test_resized_to_square(self, tmp_path):
        write_png(tmp_path / "input" / "big.png", 384, 512)
        write_png(tmp_path / "reference" / "big.png", 384, 512)
        s = data.load_dataset(tmp_path)[0]
        assert s.input.shape == (3, 256, 256)
        assert s.input.min() >= 0 and s.input.max() <= 1

    def test_unreadable_file(self, paired_root):
        (paired_root / "input" / "a.png").write_bytes(b"not an image")
        with pytest.raises(DataError, match="a.png"):
            data.load_dataset(paired_root, DatasetLayout(size=16))

    def test_missing_root(self, tmp_path):
        with pytest.raises(DataError, match="nowhere"):
            data.load_dataset(tmp_path / "nowhere")

    def test_idempotent(self, paired_root):
        a = data.load_dataset(paired_root, DatasetLayout(size=16))
        b = data.load_dataset(paired_root, DatasetLayout(size=16))
        assert all(torch.equal(x.input, y.input) for x, y in zip(a, b))

    def test_layout_from_yaml(self, tmp_path):
        path = tmp_path / "layout.yaml"
        path.write_text("input_dir: raw\nreference_dir: gt\nsize: 64\n")
        layout = DatasetLayout.from_yaml(path)
        assert (layout.input_dir, layout.reference_dir, layout.size) == ("raw", "gt", 64)
        path.write_text("inputs: raw\n")
        with pytest.raises(ConfigError):
            DatasetLayout.from_yaml(path)


class TestSynthetic:
    def test_seeded_runs_are_bitwise_identical(self):
        cleans = data.toy_scenes(3, size=16, seed=0)
        a = data.generate_synthetic(cleans, seed=7)
        b = data.generate_synthetic(cleans, seed=7)
        for x, y in zip(a, b):
            assert torch.equal(x.degraded, y.degraded) and torch.equal(x.depth, y.depth)
        c = data.generate_synthetic(cleans, seed=8)
        assert not torch.equal(a[0].degraded, c[0].degraded)

    def test_degraded_matches_physics(self):
        for s in data.generate_synthetic(data.toy_scenes(2, size=16), seed=1):
            assert torch.equal(s.degraded, physics.degrade(s.clean, s.depth, s.veiling, s.coeffs))

    def test_parameters_within_ranges(self):
        spec = SyntheticSpec(depth_range=(1.0, 3.0), exp_neg_beta_D=(0.6, 0.7))
        for s in data.generate_synthetic(data.toy_scenes(4, size=16), spec, seed=2):
            assert s.depth.min() >= 1.0 - 1e-6 and s.depth.max() <= 3.0 + 1e-6
            assert bool((s.coeffs.exp_neg_beta_D >= 0.6).all())
            assert bool((s.coeffs.exp_neg_beta_D <= 0.7).all())

    def test_shared_coefficients_and_constant_veiling_give_convex_mix(self):
        spec = SyntheticSpec(shared_beta=True, spatial_veiling=False)
        for s in data.generate_synthetic(data.toy_scenes(4, size=16), spec, seed=3):
            lo = torch.minimum(s.clean, s.veiling)
            hi = torch.maximum(s.clean, s.veiling)
            assert bool((s.degraded >= lo - 1e-7).all()) and bool((s.degraded <= hi + 1e-7).all())

    def test_invert_recovers_clean(self):
        for s in data.generate_synthetic(data.toy_scenes(3, size=16), seed=4):
            unclamped = physics.degrade(s.clean, s.depth, s.veiling, s.coeffs, clamp=False)
            rec = physics.invert(unclamped, s.depth, s.veiling, s.coeffs)
            assert (rec - s.clean).abs().max() <= 1e-5

    def test_empty_input(self):
        with pytest.raises(DataError):
            data.generate_synthetic([])

    @pytest.mark.parametrize("bad", [
        {"depth_range": (0.0, 5.0)},
        {"depth_range": (1.0, 12.0)},
        {"exp_neg_beta_D": (0.5, 1.0)},
        {"veiling_range": (-0.1, 0.5)},
    ])
    def test_spec_validation(self, bad):
        with pytest.raises(ConfigError):
            SyntheticSpec(**bad)

    def test_spec_from_dict(self):
        spec = SyntheticSpec.from_dict({"depth_range": [1, 2]})
        assert spec.depth_range == (1, 2)
        with pytest.raises(ConfigError):
            SyntheticSpec.from_dict({"depth": [1, 2]})

    def test_sidecar_round_trip(self, tmp_path):
        s = data.generate_synthetic(data.toy_scenes(1, size=16), seed=5)[0]
        path = tmp_path / "p.npz"
        data.save_synthetic_params(s, path)
        back = data.load_synthetic_params(path)
        for name in ("clean", "degraded", "veiling", "depth"):
            assert torch.equal(getattr(back, name), getattr(s, name))
        assert torch.equal(back.coeffs.exp_neg_beta_B, s.coeffs.exp_neg_beta_B)

    def test_write_synthetic_layout(self, tmp_path):
        spec = SyntheticSpec()
        samples = data.generate_synthetic(data.toy_scenes(2, size=16), spec, seed=6)
        data.write_synthetic(samples, tmp_path, spec, seed=6)
        manifest = json.loads((tmp_path / "synthetic.json").read_text())
        assert manifest["seed"] == 6 and manifest["ids"] == ["syn_00000", "syn_00001"]
        ds = data.load_dataset(tmp_path, DatasetLayout(size=16))
        assert [s.id for s in ds] == manifest["ids"]
        # 8-bit quantization bounds the difference to the float original
        assert (ds[0].input - samples[0].degraded).abs().max() <= 0.5 / 255 + 1e-6


def test_toy_scenes_deterministic_and_bounded():
    a = data.toy_scenes(3, size=32, seed=9)
    b = data.toy_scenes(3, size=32, seed=9)
    assert all(torch.equal(x, y) for x, y in zip(a, b))
    assert all(x.min() >= 0 and x.max() <= 1 and x.shape == (3, 32, 32) for x in a)
