import json

import numpy as np
import pytest

from nevae.models import init_vae
from nevae.traverse import (
    SEPARATOR,
    TraverseSpec,
    grid_shape,
    quantize,
    read_pgm,
    tile_images,
    traverse_codes,
    write_pgm,
    write_traverse,
    zero_top_active,
)


class TestCodes:
    def test_single_dim_grid(self):
        codes = traverse_codes(TraverseSpec("single_dim", dim=3), n_z=8)
        assert codes.shape == (100, 8)
        assert codes[0, 3] == -10.0 and codes[-1, 3] == 10.0
        np.testing.assert_allclose(np.diff(codes[:, 3]), 20 / 99, rtol=1e-12)
        assert not np.delete(codes, 3, axis=1).any()

    def test_random_direction_endpoint(self):
        for seed in range(20):
            codes = traverse_codes(TraverseSpec("random_direction", seed=seed), n_z=32)
            assert abs(np.linalg.norm(codes[-1]) - 10.0) < 1e-9
            assert not codes[0].any()

    def test_random_direction_is_a_ray(self):
        codes = traverse_codes(TraverseSpec("random_direction", seed=4), n_z=5)
        unit = codes[-1] / np.linalg.norm(codes[-1])
        np.testing.assert_allclose(codes[1:] / np.linalg.norm(codes[1:], axis=1, keepdims=True),
                                   np.tile(unit, (99, 1)), atol=1e-12)

    def test_zero_dims_masked(self):
        codes = traverse_codes(TraverseSpec("random_direction", zero_dims=(0, 2), seed=1), n_z=4)
        assert not codes[:, [0, 2]].any()
        assert abs(np.linalg.norm(codes[-1]) - 10.0) < 1e-9

    def test_errors(self):
        with pytest.raises(ValueError):
            traverse_codes(TraverseSpec("single_dim", dim=8), n_z=8)
        with pytest.raises(ValueError):
            traverse_codes(TraverseSpec("random_direction", zero_dims=(0, 1)), n_z=2)
        with pytest.raises(ValueError):
            TraverseSpec("spiral")


class TestImages:
    def test_quantize_round_half_up(self):
        p = np.array([0.0, 1.0, 0.5, 127.5 / 255, 0.2 / 255, -0.1, 1.2])
        np.testing.assert_array_equal(quantize(p), [0, 255, 128, 128, 0, 0, 255])

    def test_tile_layout(self):
        imgs = np.stack([np.full(6, i / 10) for i in range(5)])
        out = tile_images(imgs, (2, 3), rows=2, cols=3)
        assert out.shape == (2 * 3 + 1, 3 * 4 + 1)
        assert (out[0] == SEPARATOR).all() and (out[:, 0] == SEPARATOR).all()
        np.testing.assert_array_equal(out[4:6, 5:8], quantize(np.full((2, 3), 0.4)))
        # unused last cell stays separator-filled
        assert (out[4:6, 9:12] == SEPARATOR).all()

    def test_tile_too_small(self):
        with pytest.raises(ValueError):
            tile_images(np.zeros((5, 4)), (2, 2), 2, 2)

    def test_grid_shape(self):
        assert grid_shape(100) == (10, 10)
        assert grid_shape(100, cols=20) == (5, 20)
        assert grid_shape(7) == (3, 3)

    def test_pgm_roundtrip(self, tmp_path):
        img = np.random.default_rng(0).integers(0, 256, (5, 7)).astype(np.uint8)
        path = write_pgm(tmp_path / "a.pgm", img)
        assert path.read_bytes().startswith(b"P5\n7 5\n255\n")
        np.testing.assert_array_equal(read_pgm(path), img)


class TestZeroTop:
    def test_picks_largest(self):
        assert zero_top_active([0.1, 5.0, 0.0, 3.0, 2.0], 2) == [1, 3]

    def test_ties_lower_index(self):
        assert zero_top_active([1.0, 2.0, 2.0, 2.0], 2) == [1, 2]

    def test_k_bounds(self):
        assert zero_top_active([1.0, 2.0], 0) == []
        with pytest.raises(ValueError):
            zero_top_active([1.0, 2.0], 3)


def test_write_traverse_files(tmp_path):
    m = init_vae(16, n_z=3, hidden=(8,), seed=0)
    spec = TraverseSpec("single_dim", dim=1)
    pgm = write_traverse(tmp_path, spec, traverse_codes(spec, 3), m.decoder)
    assert pgm.name == "traverse_single_dim_1.pgm"
    assert read_pgm(pgm).shape == (10 * 5 + 1, 10 * 5 + 1)
    index = json.loads((tmp_path / "traverse_single_dim_1.json").read_text())
    assert len(index["tiles"]) == 100 and index["tiles"][0] == [0.0, -10.0, 0.0]
    first = pgm.read_bytes()
    write_traverse(tmp_path, spec, traverse_codes(spec, 3), m.decoder)
    assert pgm.read_bytes() == first
