import numpy as np
import pytest

from interseg.data import (
    DatasetSplit, NtsrError, Sample, SynthSpec, generate, generate_sample,
    load_dataset, load_tensor, save_dataset, save_tensor, split,
)

from .oracles import bfs_label

# pixel counts of rasterized disks at the spec's radius extremes
AREA_R2, AREA_R4 = 13, 49
AREA_R8, AREA_R12 = 197, 441


class TestNtsrFormat:
    @pytest.mark.parametrize("shape", [(), (5,), (3, 4), (2, 1, 8, 8)])
    def test_float32_roundtrip_bit_exact(self, tmp_path, rng, shape):
        arr = rng.normal(size=shape).astype(np.float32)
        save_tensor(tmp_path / "a.ntsr", arr)
        back = load_tensor(tmp_path / "a.ntsr")
        assert back.dtype == np.dtype("<f4")
        assert back.shape == arr.shape
        np.testing.assert_array_equal(back, arr)

    def test_float64_roundtrip(self, tmp_path, rng):
        arr = rng.normal(size=(4, 3))
        save_tensor(tmp_path / "a.ntsr", arr)
        np.testing.assert_array_equal(load_tensor(tmp_path / "a.ntsr"), arr)

    def test_header_layout_is_pinned(self, tmp_path):
        save_tensor(tmp_path / "a.ntsr", np.zeros((2, 3), dtype=np.float32))
        raw = (tmp_path / "a.ntsr").read_bytes()
        assert raw[:4] == b"NTSR"
        assert raw[4] == 1  # version
        assert raw[5] == 1  # float32
        assert raw[6] == 2  # rank
        assert raw[7:15] == (2).to_bytes(4, "little") + (3).to_bytes(4, "little")
        assert len(raw) == 15 + 2 * 3 * 4

    def test_integer_arrays_rejected_on_save(self, tmp_path):
        with pytest.raises(ValueError):
            save_tensor(tmp_path / "a.ntsr", np.zeros(3, dtype=np.int32))

    def test_bad_magic_rejected_at_offset_zero(self, tmp_path):
        p = tmp_path / "bad.ntsr"
        p.write_bytes(b"JUNKxxxxxxxx")
        with pytest.raises(NtsrError) as exc:
            load_tensor(p)
        assert exc.value.offset == 0
        assert "NTSR" in str(exc.value)

    def test_empty_file_rejected(self, tmp_path):
        p = tmp_path / "empty.ntsr"
        p.write_bytes(b"")
        with pytest.raises(NtsrError) as exc:
            load_tensor(p)
        assert exc.value.offset == 0

    def test_unsupported_version_rejected(self, tmp_path):
        p = tmp_path / "a.ntsr"
        save_tensor(p, np.zeros(2, dtype=np.float32))
        raw = bytearray(p.read_bytes())
        raw[4] = 9
        p.write_bytes(bytes(raw))
        with pytest.raises(NtsrError) as exc:
            load_tensor(p)
        assert exc.value.offset == 4
        assert "9" in str(exc.value)

    def test_unknown_dtype_code_rejected(self, tmp_path):
        p = tmp_path / "a.ntsr"
        save_tensor(p, np.zeros(2, dtype=np.float32))
        raw = bytearray(p.read_bytes())
        raw[5] = 7
        p.write_bytes(bytes(raw))
        with pytest.raises(NtsrError) as exc:
            load_tensor(p)
        assert exc.value.offset == 5

    def test_truncated_extents_rejected(self, tmp_path):
        p = tmp_path / "a.ntsr"
        save_tensor(p, np.zeros((2, 3), dtype=np.float32))
        raw = p.read_bytes()
        p.write_bytes(raw[:9])  # inside the extents block
        with pytest.raises(NtsrError) as exc:
            load_tensor(p)
        assert "truncated" in str(exc.value)

    def test_short_payload_rejected_with_expected_length(self, tmp_path):
        p = tmp_path / "a.ntsr"
        save_tensor(p, np.zeros((2, 3), dtype=np.float32))
        raw = p.read_bytes()
        p.write_bytes(raw[:-4])
        with pytest.raises(NtsrError) as exc:
            load_tensor(p)
        assert str(len(raw)) in str(exc.value)

    def test_trailing_garbage_rejected(self, tmp_path):
        p = tmp_path / "a.ntsr"
        save_tensor(p, np.zeros((2, 3), dtype=np.float32))
        p.write_bytes(p.read_bytes() + b"\x00\x00")
        with pytest.raises(NtsrError):
            load_tensor(p)


class TestSynthSpec:
    def test_defaults_validate(self):
        SynthSpec().validate()

    def test_zero_count_rejected(self):
        with pytest.raises(ValueError):
            SynthSpec(count=0).validate()

    def test_oversized_radius_rejected(self):
        with pytest.raises(ValueError):
            SynthSpec(large_radius_px=(8, 16)).validate()

    def test_out_of_range_intensity_rejected(self):
        with pytest.raises(ValueError):
            SynthSpec(intensity_fg=1.5).validate()

    def test_inverted_radius_range_rejected(self):
        with pytest.raises(ValueError):
            SynthSpec(small_radius_px=(4, 2)).validate()


class TestGeneration:
    def test_same_seed_reproduces_bit_exactly(self):
        spec = SynthSpec(count=5)
        a = generate(spec, seed=3)
        b = generate(spec, seed=3)
        for sa, sb in zip(a, b):
            np.testing.assert_array_equal(sa.x, sb.x)
            np.testing.assert_array_equal(sa.m, sb.m)
            assert sa.areas == sb.areas

    def test_different_seeds_differ(self):
        a = generate(SynthSpec(count=3), seed=1)
        b = generate(SynthSpec(count=3), seed=2)
        assert any(not np.array_equal(sa.m, sb.m) for sa, sb in zip(a, b))

    def test_shapes_and_value_ranges(self):
        for s in generate(SynthSpec(count=4), seed=0):
            assert s.x.shape == (1, 64, 64) and s.x.dtype == np.float32
            assert s.m.shape == (1, 64, 64) and s.m.dtype == np.float32
            assert s.x.min() >= 0.0 and s.x.max() <= 1.0
            assert set(np.unique(s.m)) <= {0.0, 1.0}
            assert s.m.sum() >= 1

    def test_noise_free_images_are_two_level(self):
        spec = SynthSpec(count=3, noise_std=0.0)
        for s in generate(spec, seed=5):
            assert set(np.unique(s.x)) == {np.float32(0.2), np.float32(0.8)}
            np.testing.assert_array_equal(s.x == np.float32(0.8), s.m.astype(bool))

    def test_recorded_areas_match_connected_components(self):
        # separation keeps every disk its own 8-connected component
        for index in range(20):
            s = generate_sample(SynthSpec(), seed=9, index=index)
            labels, count = bfs_label(s.m[0].astype(bool))
            assert count == len(s.areas)
            sizes = sorted(int((labels == lab).sum()) for lab in range(1, count + 1))
            assert sizes == sorted(s.areas)

    def test_area_buckets_are_cleanly_separated(self):
        # radii 2..4 land in [13,49] px, radii 8..12 in [197,441] px, so the
        # 50 px threshold never misclassifies either bucket
        small_seen = large_seen = 0
        for index in range(100):
            s = generate_sample(SynthSpec(), seed=123, index=index)
            for a in s.areas:
                assert AREA_R2 <= a <= AREA_R4 or AREA_R8 <= a <= AREA_R12
                if a <= 50:
                    small_seen += 1
                else:
                    large_seen += 1
        assert small_seen > 0 and large_seen > 0

    def test_small_object_count_respects_range(self):
        for index in range(50):
            s = generate_sample(SynthSpec(), seed=7, index=index)
            n_small = sum(1 for a in s.areas if a <= 50)
            n_large = sum(1 for a in s.areas if a > 50)
            assert 1 <= n_small <= 3
            assert n_large <= 1

    def test_an_object_is_always_present(self):
        spec = SynthSpec(small_objects_per_image=(0, 0), large_object_prob=0.0)
        for index in range(10):
            s = generate_sample(spec, seed=2, index=index)
            assert len(s.areas) == 1 and s.m.sum() > 0

    def test_impossible_packing_raises(self):
        spec = SynthSpec(height=16, width=16,
                         small_objects_per_image=(12, 12),
                         small_radius_px=(3, 3), large_object_prob=0.0,
                         large_radius_px=(3, 3))
        with pytest.raises(RuntimeError):
            generate(spec, seed=0)


class TestDatasetIo:
    def test_save_load_roundtrip(self, tmp_path):
        samples = generate(SynthSpec(count=4), seed=1)
        save_dataset(samples, tmp_path / "d")
        back = load_dataset(tmp_path / "d")
        assert len(back) == 4
        for orig, got in zip(samples, back):
            np.testing.assert_array_equal(orig.x, got.x)
            np.testing.assert_array_equal(orig.m, got.m)
            assert orig.areas == got.areas

    def test_manifest_lists_every_pair(self, tmp_path):
        save_dataset(generate(SynthSpec(count=3), seed=1), tmp_path / "d")
        lines = (tmp_path / "d" / "manifest.tsv").read_text().splitlines()
        assert lines[0] == "index\timage\tmask\tareas"
        assert len(lines) == 4
        assert (tmp_path / "d" / "img_00000.ntsr").exists()
        assert (tmp_path / "d" / "msk_00002.ntsr").exists()

    def test_missing_manifest_raises(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_dataset(tmp_path)

    def test_external_intensities_get_normalized(self, tmp_path):
        d = tmp_path / "d"
        d.mkdir()
        x = np.linspace(-2.0, 6.0, 16, dtype=np.float32).reshape(1, 4, 4)
        m = np.zeros((1, 4, 4), dtype=np.float32)
        m[0, 0, 0] = 1.0
        save_tensor(d / "img_00000.ntsr", x)
        save_tensor(d / "msk_00000.ntsr", m)
        (d / "manifest.tsv").write_text(
            "index\timage\tmask\tareas\n0\timg_00000.ntsr\tmsk_00000.ntsr\t1\n")
        s = load_dataset(d)[0]
        assert s.x.min() == pytest.approx(0.0)
        assert s.x.max() == pytest.approx(1.0)


class TestSplit:
    def test_ten_samples_split_7_1_2(self):
        ds = split(10, seed=0)
        assert (len(ds.train), len(ds.val), len(ds.test)) == (7, 1, 2)

    def test_hundred_samples_split_70_10_20(self):
        ds = split(100, seed=0)
        assert (len(ds.train), len(ds.val), len(ds.test)) == (70, 10, 20)

    def test_awkward_size_uses_largest_remainder(self):
        # 97 -> exact 67.9/9.7/19.4; the two largest remainders get the
        # leftover samples
        ds = split(97, seed=4)
        assert (len(ds.train), len(ds.val), len(ds.test)) == (68, 10, 19)

    @pytest.mark.parametrize("n", [10, 37, 97, 300])
    def test_partition_is_exact(self, n):
        ds = split(n, seed=8)
        combined = sorted(ds.all_indices())
        assert combined == list(range(n))
        assert not (set(ds.train) & set(ds.val))
        assert not (set(ds.train) & set(ds.test))
        assert not (set(ds.val) & set(ds.test))

    def test_deterministic_per_seed(self):
        assert split(50, seed=3) == split(50, seed=3)
        assert split(50, seed=3) != split(50, seed=4)

    def test_shuffles_rather_than_slices(self):
        ds = split(100, seed=0)
        assert ds.train != list(range(70))

    def test_too_few_samples_rejected(self):
        with pytest.raises(ValueError):
            split(9, seed=0)

    def test_split_is_a_plain_record(self):
        ds = DatasetSplit(train=[0], val=[1], test=[2])
        assert ds.all_indices() == [0, 1, 2]
