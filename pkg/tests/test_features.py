import numpy as np
import pytest

from openworld.features import (
    ErrorMap,
    FeatureMap,
    FormatError,
    Level,
    NonFiniteDataError,
    TruncatedFileError,
    grid_cell_span,
    read_error_map,
    read_feature_map,
    write_error_map,
    write_feature_map,
)


def small_map(rng, level=Level.P3, h=2, w=2, c=3) -> FeatureMap:
    data = rng.standard_normal((h, w, c)).astype(np.float32)
    return FeatureMap(level=level, data=data)


class TestContainers:
    def test_shape_properties(self):
        fmap = small_map(np.random.default_rng(0), h=4, w=5, c=6)
        assert (fmap.height, fmap.width, fmap.channels) == (4, 5, 6)
        assert fmap.stride == 8

    def test_wrong_stride_rejected(self):
        with pytest.raises(ValueError):
            FeatureMap(level=Level.P3, data=np.zeros((2, 2, 3)), stride=16)

    def test_non_finite_rejected(self):
        data = np.zeros((2, 2, 2))
        data[0, 0, 0] = np.nan
        with pytest.raises(NonFiniteDataError):
            FeatureMap(level=Level.P4, data=data)

    def test_immutable_after_construction(self):
        fmap = small_map(np.random.default_rng(1))
        with pytest.raises(ValueError):
            fmap.data[0, 0, 0] = 3.0

    def test_error_map_rejects_negative(self):
        with pytest.raises(ValueError):
            ErrorMap(level=Level.P3, data=np.array([[-1.0, 0.0]]))


class TestRoundTrip:
    def test_exact_round_trip(self, tmp_path):
        fmap = small_map(np.random.default_rng(2))
        path = tmp_path / "map.rfm"
        write_feature_map(fmap, path)
        again = read_feature_map(path)
        assert again.level == fmap.level
        assert np.array_equal(again.data, fmap.data)

    def test_hundred_random_maps_bit_exact(self, tmp_path):
        rng = np.random.default_rng(3)
        for k in range(100):
            level = list(Level)[int(rng.integers(0, 4))]
            fmap = small_map(
                rng,
                level=level,
                h=int(rng.integers(1, 7)),
                w=int(rng.integers(1, 7)),
                c=int(rng.integers(1, 9)),
            )
            path = tmp_path / f"m{k}.rfm"
            write_feature_map(fmap, path)
            again = read_feature_map(path)
            assert again.data.tobytes() == fmap.data.tobytes()

    def test_error_map_round_trip(self, tmp_path):
        emap = ErrorMap(level=Level.P5, data=np.abs(np.random.default_rng(4).standard_normal((3, 4))))
        path = tmp_path / "e.rfm"
        write_error_map(emap, path)
        again = read_error_map(path)
        assert np.allclose(again.data, emap.data, atol=1e-6)


class TestCorruptFiles:
    def _valid_bytes(self, tmp_path):
        fmap = small_map(np.random.default_rng(5))
        path = tmp_path / "ok.rfm"
        write_feature_map(fmap, path)
        return path.read_bytes()

    def test_bad_magic(self, tmp_path):
        raw = b"XXXX" + self._valid_bytes(tmp_path)[4:]
        bad = tmp_path / "bad.rfm"
        bad.write_bytes(raw)
        with pytest.raises(FormatError):
            read_feature_map(bad)

    def test_truncated_payload(self, tmp_path):
        raw = self._valid_bytes(tmp_path)
        bad = tmp_path / "short.rfm"
        bad.write_bytes(raw[:-4])
        with pytest.raises(TruncatedFileError):
            read_feature_map(bad)

    def test_truncated_header(self, tmp_path):
        bad = tmp_path / "tiny.rfm"
        bad.write_bytes(b"RFM1\x03\x00")
        with pytest.raises(TruncatedFileError):
            read_feature_map(bad)

    def test_trailing_bytes(self, tmp_path):
        raw = self._valid_bytes(tmp_path)
        bad = tmp_path / "long.rfm"
        bad.write_bytes(raw + b"\x00\x00\x00\x00")
        with pytest.raises(FormatError):
            read_feature_map(bad)

    def test_non_finite_payload(self, tmp_path):
        raw = bytearray(self._valid_bytes(tmp_path))
        raw[24:28] = np.array([np.inf], dtype="<f4").tobytes()
        bad = tmp_path / "inf.rfm"
        bad.write_bytes(bytes(raw))
        with pytest.raises(NonFiniteDataError):
            read_feature_map(bad)

    def test_bad_level_code(self, tmp_path):
        raw = bytearray(self._valid_bytes(tmp_path))
        raw[4:8] = (9).to_bytes(4, "little")
        bad = tmp_path / "lvl.rfm"
        bad.write_bytes(bytes(raw))
        with pytest.raises(FormatError):
            read_feature_map(bad)


class TestGridCellSpan:
    def test_left_half_box_covers_exactly_half(self):
        # 8x8 grid at stride 8: box over the left half claims columns 0..3
        i0, i1, j0, j1 = grid_cell_span(0, 0, 32, 64, 8, 8, 8)
        assert (i0, i1, j0, j1) == (0, 8, 0, 4)

    def test_tiny_box_between_centers_claims_nothing(self):
        i0, i1, j0, j1 = grid_cell_span(0.0, 0.0, 3.0, 3.0, 8, 4, 4)
        assert i1 <= i0 or j1 <= j0

    def test_matches_center_membership(self):
        rng = np.random.default_rng(6)
        for _ in range(200):
            x, y = rng.uniform(0, 50, 2)
            w, h = rng.uniform(1, 60, 2)
            i0, i1, j0, j1 = grid_cell_span(x, y, w, h, 8, 12, 12)
            for i in range(12):
                for j in range(12):
                    cx, cy = (j + 0.5) * 8, (i + 0.5) * 8
                    inside = x <= cx < x + w and y <= cy < y + h
                    assert inside == (i0 <= i < i1 and j0 <= j < j1)
