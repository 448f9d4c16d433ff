import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from optmrf.imaging import (NOISE_STREAM, PGMError, add_gaussian_noise, load_pgm, make_dataset,
                            parse_pgm, patch_offsets, philox, psnr, read_dataset, sample_patches,
                            save_pgm, split_counts, standard_normal, synthetic_image, to_uint8,
                            write_dataset)


# -- PGM ----------------------------------------------------------------------------

def test_p5_bytes():
    img = parse_pgm(b"P5\n2 2\n255\n" + bytes([0, 128, 255, 64]))
    np.testing.assert_array_equal(img, [[0, 128], [255, 64]])
    assert img.dtype == float


def test_p2_and_comments():
    img = parse_pgm(b"P2 # a comment\n2 2\n# another\n255\n0 128\n255 64\n")
    np.testing.assert_array_equal(img, [[0, 128], [255, 64]])


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 9), st.integers(1, 9), st.integers(0, 2**32 - 1))
def test_p2_p5_round_trip(h, w, seed):
    import tempfile
    from pathlib import Path
    img = np.random.default_rng(seed).integers(0, 256, (h, w)).astype(float)
    with tempfile.TemporaryDirectory() as d:
        save_pgm(Path(d) / "a.pgm", img, binary=True)
        save_pgm(Path(d) / "b.pgm", img, binary=False)
        a, b = load_pgm(Path(d) / "a.pgm"), load_pgm(Path(d) / "b.pgm")
    np.testing.assert_array_equal(a, img)
    np.testing.assert_array_equal(b, img)


def test_save_clamps_and_rounds(tmp_path):
    save_pgm(tmp_path / "c.pgm", np.array([[-3.0, 12.5], [13.6, 300.0]]))
    assert (tmp_path / "c.pgm").read_bytes() == b"P5\n2 2\n255\n" + bytes([0, 12, 14, 255])
    np.testing.assert_array_equal(to_uint8([[254.5, 255.5]]), [[254, 255]])


@pytest.mark.parametrize("data, offset", [
    (b"P6\n2 2\n255\n", "byte 0"),
    (b"P5\n2 x\n255\n", "byte 5"),
    (b"P5\n2 2\n65535\n", "byte 7"),
    (b"P5\n2 2\n255\n\x00\x01", "byte 11"),
    (b"P5\n2 2", "byte 6"),
    (b"P2\n2 1\n255\n3 300\n", "byte 13"),
    (b"P2\n2 1\n255\n3", "byte 12"),
])
def test_parse_errors_name_offsets(data, offset):
    with pytest.raises(PGMError, match=offset):
        parse_pgm(data)


def test_load_error_names_file(tmp_path):
    p = tmp_path / "bad.pgm"
    p.write_bytes(b"P5\n1 1\n100\n\x00")
    with pytest.raises(PGMError, match="bad.pgm"):
        load_pgm(p)


# -- noise ----------------------------------------------------------------------------

def test_standard_normal_frozen_values():
    np.testing.assert_array_equal(standard_normal(5, 0, 0), [
        0.15853383451844166, 2.9828792826170734, -1.925691981917186,
        -0.8249255452762637, -0.20250327969123155])


def test_standard_normal_matches_scalar_box_muller():
    raw = [int(v) for v in np.random.Philox(key=11 + (3 << 64)).random_raw(6)]
    expected = []
    for r1, r2 in zip(raw[::2], raw[1::2]):
        u1 = ((r1 >> 11) + 1) / 2 ** 53
        u2 = (r2 >> 11) / 2 ** 53
        rad = math.sqrt(-2 * math.log(u1))
        expected += [rad * math.cos(2 * math.pi * u2), rad * math.sin(2 * math.pi * u2)]
    np.testing.assert_allclose(standard_normal(6, 11, 3), expected, rtol=1e-15, atol=1e-15)


def test_odd_count_is_prefix_of_even():
    np.testing.assert_array_equal(standard_normal(7, 4), standard_normal(8, 4)[:7])


def test_noise_sigma_zero_is_identity():
    img = np.arange(12.0).reshape(3, 4)
    np.testing.assert_array_equal(add_gaussian_noise(img, 0.0, 5), img)
    with pytest.raises(ValueError):
        add_gaussian_noise(img, -1.0, 5)


def test_noise_moments():
    img = np.full((256, 256), 128.0)
    n = add_gaussian_noise(img, 25.0, seed=1) - img
    assert abs(n.mean()) <= 0.5
    assert abs(n.std() - 25.0) <= 0.02 * 25.0


def test_noise_is_deterministic_and_stream_dependent():
    img = np.zeros((8, 8))
    a = add_gaussian_noise(img, 25.0, 3)
    np.testing.assert_array_equal(a, add_gaussian_noise(img, 25.0, 3))
    assert not np.array_equal(a, add_gaussian_noise(img, 25.0, 3, stream=1))
    assert not np.array_equal(a, add_gaussian_noise(img, 25.0, 4))
    np.testing.assert_array_equal(a.ravel(), 25.0 * standard_normal(64, 3, NOISE_STREAM))


def test_noise_is_not_clamped():
    out = add_gaussian_noise(np.zeros((64, 64)), 25.0, 0)
    assert out.min() < 0


def test_philox_rejects_negative():
    with pytest.raises(ValueError):
        philox(-1)


# -- patches --------------------------------------------------------------------------

def test_frozen_offsets():
    assert patch_offsets((64, 64), 24, 3, 7) == [(14, 11), (10, 20), (31, 32)]


def test_full_size_patches_are_the_image():
    img = np.arange(20.0).reshape(4, 5)
    for p in sample_patches(img[:, :4], 4, 3, seed=0):
        np.testing.assert_array_equal(p, img[:, :4])


def test_offsets_in_bounds():
    offs = patch_offsets((50, 37), 9, 1000, seed=2)
    assert len(offs) == 1000
    assert all(0 <= r <= 41 and 0 <= c <= 28 for r, c in offs)
    assert {r for r, _ in offs} == set(range(42))
    assert offs == patch_offsets((50, 37), 9, 1000, seed=2)


def test_patch_too_large():
    with pytest.raises(ValueError):
        sample_patches(np.zeros((5, 8)), 6, 1, seed=0)


# -- psnr ------------------------------------------------------------------------------

def test_psnr_values():
    a = np.zeros((4, 4))
    assert psnr(a, a + 25.0) == pytest.approx(20.17, abs=0.005)
    assert psnr(a, a + 25.0) == pytest.approx(10 * math.log10(65025 / 625), rel=1e-15)
    assert psnr(a, a) == math.inf
    with pytest.raises(ValueError):
        psnr(a, np.zeros((4, 5)))


def test_psnr_matches_loop():
    rng = np.random.default_rng(0)
    a, b = rng.uniform(0, 255, (2, 7, 5))
    mse = sum((a[i, j] - b[i, j]) ** 2 for i in range(7) for j in range(5)) / 35
    assert psnr(a, b) == pytest.approx(10 * math.log10(255 ** 2 / mse), rel=1e-12)


def test_noisy_baseline_psnr_near_20_17():
    g = synthetic_image(128, 0)
    assert abs(psnr(add_gaussian_noise(g, 25.0, 0), g) - 20.17) <= 0.1


# -- datasets --------------------------------------------------------------------------

def test_split_counts():
    assert split_counts(16, 3) == [6, 5, 5]
    assert split_counts(2, 4) == [1, 1, 0, 0]


def test_synthetic_image():
    img = synthetic_image(64, 3)
    assert img.shape == (64, 64)
    assert img.min() >= 16 and img.max() <= 239
    np.testing.assert_array_equal(img, np.rint(img))
    np.testing.assert_array_equal(img, synthetic_image(64, 3))
    assert not np.array_equal(img, synthetic_image(64, 4))
    assert len(np.unique(img)) > 20


def test_dataset_round_trip_and_regeneration(tmp_path):
    srcs = []
    for k in range(2):
        p = tmp_path / f"src{k}.pgm"
        save_pgm(p, synthetic_image(40, k))
        srcs.append(p)
    ds = make_dataset([load_pgm(p) for p in srcs], 12, 5, 25.0, 9, names=[str(p) for p in srcs])
    assert [r.source for r in ds.provenance] == [str(srcs[0])] * 3 + [str(srcs[1])] * 2
    assert [r.noise_stream for r in ds.provenance] == list(range(5))
    out = tmp_path / "ds"
    write_dataset(ds, out)
    back = read_dataset(out, verify_sources=True)
    for a, b in zip(ds.noisy + ds.clean, back.noisy + back.clean):
        np.testing.assert_array_equal(a, b)
    assert back.sigma == 25.0 and back.seed == 9
    # tampering with a noisy patch is detected on regeneration
    np.save(out / "f_0003.npy", ds.noisy[3] + 1e-9)
    with pytest.raises(ValueError, match="patch 3"):
        read_dataset(out / "manifest.json", verify_sources=True)
