"""PGM I/O, reproducible noise, patch sampling, PSNR and toy images.

Random streams
--------------
Every random quantity comes from numpy's ``Philox`` bit generator (the
Philox4x64-10 counter-based generator) keyed with
``seed + (stream << 64)``, read through ``random_raw`` so the numbers depend
only on the Philox algorithm and not on numpy's distribution code.

* Gaussian noise: standard Box-Muller on pairs of raw draws,
  ``u1 = ((r1 >> 11) + 1) / 2**53`` in (0, 1], ``u2 = (r2 >> 11) / 2**53``,
  ``z0 = sqrt(-2 ln u1) cos(2 pi u2)``, ``z1 = sqrt(-2 ln u1) sin(2 pi u2)``,
  filled row-major.
* Integer offsets: ``r % n`` on one raw draw (bias below 2**-50 for the
  sizes used here).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

# stream tags keep the generators for different purposes disjoint
NOISE_STREAM = 1 << 32
SYNTH_STREAM = 2 << 32


class PGMError(ValueError):
    pass


# -- PGM ----------------------------------------------------------------------

def _read_token(data: bytes, pos: int):
    """Next whitespace-delimited header token, skipping ``#`` comments."""
    n = len(data)
    while pos < n:
        c = data[pos:pos + 1]
        if c == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise PGMError(f"unexpected end of header at byte {start}")
    return data[start:pos], start, pos


def parse_pgm(data: bytes) -> np.ndarray:
    magic, _, pos = _read_token(data, 0)
    if magic not in (b"P2", b"P5"):
        raise PGMError(f"bad magic {magic!r} at byte 0, expected P2 or P5")
    dims = []
    for name in ("width", "height", "maxval"):
        tok, start, pos = _read_token(data, pos)
        if not tok.isdigit() or int(tok) <= 0:
            raise PGMError(f"invalid {name} {tok!r} at byte {start}")
        dims.append(int(tok))
    width, height, maxval = dims
    if maxval != 255:
        raise PGMError(f"maxval {maxval} at byte {start} is not supported (need 255)")
    count = width * height

    if magic == b"P5":
        if pos >= len(data) or not data[pos:pos + 1].isspace():
            raise PGMError(f"missing whitespace after header at byte {pos}")
        pos += 1
        payload = data[pos:pos + count]
        if len(payload) < count:
            raise PGMError(f"truncated raster: expected {count} bytes from byte {pos}, "
                           f"file ends at byte {len(data)}")
        values = np.frombuffer(payload, dtype=np.uint8)
    else:
        values = np.empty(count, dtype=np.uint8)
        for k in range(count):
            try:
                tok, start, pos = _read_token(data, pos)
            except PGMError:
                raise PGMError(f"truncated raster: got {k} of {count} samples, "
                               f"file ends at byte {len(data)}") from None
            if not tok.isdigit() or int(tok) > 255:
                raise PGMError(f"invalid sample {tok!r} at byte {start}")
            values[k] = int(tok)
    return values.reshape(height, width).astype(float)


def load_pgm(path) -> np.ndarray:
    """Read a P2 or P5 graymap with maxval 255 as a float array."""
    try:
        return parse_pgm(Path(path).read_bytes())
    except PGMError as exc:
        raise PGMError(f"{path}: {exc}") from None


def to_uint8(img) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img, dtype=float)), 0, 255).astype(np.uint8)


def save_pgm(path, img, binary: bool = True) -> None:
    """Write ``img`` clamped and rounded to [0, 255] integers."""
    pixels = to_uint8(img)
    if pixels.ndim != 2:
        raise ValueError(f"expected a 2-D image, got shape {pixels.shape}")
    h, w = pixels.shape
    if binary:
        Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + pixels.tobytes())
    else:
        rows = "\n".join(" ".join(str(v) for v in row) for row in pixels)
        Path(path).write_text(f"P2\n{w} {h}\n255\n{rows}\n")


# -- randomness ---------------------------------------------------------------

def philox(seed: int, stream: int = 0) -> np.random.Philox:
    if seed < 0 or stream < 0:
        raise ValueError("seed and stream must be nonnegative")
    return np.random.Philox(key=(int(seed) % (1 << 64)) + (int(stream) << 64))


def standard_normal(n: int, seed: int, stream: int = 0) -> np.ndarray:
    """``n`` standard normal draws by Box-Muller on Philox output."""
    pairs = (n + 1) // 2
    raw = philox(seed, stream).random_raw(2 * pairs).reshape(pairs, 2)
    u1 = ((raw[:, 0] >> np.uint64(11)).astype(float) + 1.0) * 2.0 ** -53
    u2 = (raw[:, 1] >> np.uint64(11)).astype(float) * 2.0 ** -53
    r = np.sqrt(-2.0 * np.log(u1))
    z = np.stack([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)], axis=1)
    return z.ravel()[:n]


def add_gaussian_noise(img, sigma: float, seed: int, stream: int = 0) -> np.ndarray:
    """``img + sigma * n`` with ``n`` i.i.d. standard normal; not clamped."""
    img = np.asarray(img, dtype=float)
    if sigma < 0:
        raise ValueError(f"sigma must be nonnegative, got {sigma}")
    if sigma == 0:
        return img.copy()
    noise = standard_normal(img.size, seed, NOISE_STREAM + stream).reshape(img.shape)
    return img + sigma * noise


def patch_offsets(shape, size: int, count: int, seed: int, stream: int = 0):
    """``count`` uniform top-left corners of ``size x size`` windows inside ``shape``."""
    h, w = shape
    if size < 1 or size > min(h, w):
        raise ValueError(f"patch size {size} does not fit a {h}x{w} image")
    raw = philox(seed, stream).random_raw(2 * count).reshape(count, 2) if count else []
    return [(int(r % np.uint64(h - size + 1)), int(c % np.uint64(w - size + 1))) for r, c in raw]


def sample_patches(img, size: int, count: int, seed: int, stream: int = 0):
    img = np.asarray(img, dtype=float)
    return [img[r:r + size, c:c + size].copy()
            for r, c in patch_offsets(img.shape, size, count, seed, stream)]


# -- evaluation ---------------------------------------------------------------

def psnr(a, b) -> float:
    """``10 log10(255^2 / MSE)`` in dB; ``inf`` for identical images."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean(np.square(a - b)))
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(255.0 ** 2 / mse)


# -- datasets -----------------------------------------------------------------

@dataclass
class PatchRecord:
    source: str
    row: int
    col: int
    size: int
    sigma: float
    seed: int
    noise_stream: int


@dataclass
class Dataset:
    """Training pairs plus what is needed to regenerate them bit-exactly."""

    clean: list
    noisy: list
    sigma: float
    seed: int
    provenance: list = field(default_factory=list)

    def samples(self):
        from .trainer import TrainingSample
        return [TrainingSample(f, g) for f, g in zip(self.noisy, self.clean)]

    def manifest(self) -> dict:
        return {"format": "optmrf-dataset v1", "sigma": self.sigma, "seed": self.seed,
                "patches": [asdict(p) for p in self.provenance]}


def split_counts(total: int, n_sources: int):
    """Even split of ``total`` over sources, remainder to the earliest ones."""
    base, extra = divmod(total, n_sources)
    return [base + (k < extra) for k in range(n_sources)]


def make_dataset(sources, patch_size: int, count: int, sigma: float, seed: int,
                 names=None) -> Dataset:
    """Sample ``count`` patches over ``sources`` and add noise.

    Image ``k`` draws its offsets from stream ``k``; patch ``n`` (global
    index) gets noise from noise stream ``n``.
    """
    sources = [np.asarray(s, dtype=float) for s in sources]
    if not sources:
        raise ValueError("need at least one source image")
    names = names or [f"image{k}" for k in range(len(sources))]
    clean, noisy, prov = [], [], []
    for k, (img, n_k) in enumerate(zip(sources, split_counts(count, len(sources)))):
        for r, c in patch_offsets(img.shape, patch_size, n_k, seed, stream=k):
            n = len(clean)
            g = img[r:r + patch_size, c:c + patch_size].copy()
            clean.append(g)
            noisy.append(add_gaussian_noise(g, sigma, seed, stream=n))
            prov.append(PatchRecord(str(names[k]), r, c, patch_size, float(sigma), int(seed), n))
    return Dataset(clean, noisy, float(sigma), int(seed), prov)


def write_dataset(ds: Dataset, out_dir) -> Path:
    """Write ``manifest.json`` plus ``g_NNNN.pgm`` (clean) and ``f_NNNN.npy`` (noisy, unclamped)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for n, (g, f) in enumerate(zip(ds.clean, ds.noisy)):
        save_pgm(out / f"g_{n:04d}.pgm", g)
        with open(out / f"f_{n:04d}.npy", "wb") as fh:
            np.save(fh, f, allow_pickle=False)
    path = out / "manifest.json"
    path.write_text(json.dumps(ds.manifest(), indent=2, sort_keys=True) + "\n")
    return path


def read_dataset(manifest_path, verify_sources: bool = False) -> Dataset:
    """Load a dataset written by :func:`write_dataset`.

    With ``verify_sources`` the patches are regenerated from the source
    images named in the manifest and compared bit-for-bit.
    """
    path = Path(manifest_path)
    if path.is_dir():
        path = path / "manifest.json"
    meta = json.loads(path.read_text())
    prov = [PatchRecord(**p) for p in meta["patches"]]
    clean, noisy = [], []
    for n, rec in enumerate(prov):
        clean.append(load_pgm(path.parent / f"g_{n:04d}.pgm"))
        noisy.append(np.load(path.parent / f"f_{n:04d}.npy", allow_pickle=False))
        if verify_sources:
            src = load_pgm(rec.source)
            g = src[rec.row:rec.row + rec.size, rec.col:rec.col + rec.size]
            f = add_gaussian_noise(g, rec.sigma, rec.seed, rec.noise_stream)
            if not (np.array_equal(g, clean[-1]) and np.array_equal(f, noisy[-1])):
                raise ValueError(f"patch {n} does not match its regeneration from {rec.source}")
    return Dataset(clean, noisy, meta["sigma"], meta["seed"], prov)


# -- toy images ---------------------------------------------------------------

def synthetic_image(size: int, seed: int, shapes: int = 12) -> np.ndarray:
    """Integer-valued piecewise-smooth test image in [16, 239].

    A shaded background with overlapping rectangles and ellipses of random
    gray levels; stands in for natural images where none are supplied.
    """
    u = philox(seed, SYNTH_STREAM).random_raw(8 * (shapes + 1)).astype(float) * 2.0 ** -64
    u = u.reshape(shapes + 1, 8)
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    base, gx, gy, fx, fy = u[0, :5]
    img = 60 + 120 * base + 50 * (gx - 0.5) * xx + 50 * (gy - 0.5) * yy
    img = img + 10 * np.sin(2 * np.pi * (2 * fx * xx + fy * yy))
    for kind, cy, cx, ry, rx, level, tilt, shade in u[1:]:
        ry, rx = 0.05 + 0.3 * ry, 0.05 + 0.3 * rx
        if kind < 0.5:
            mask = (np.abs(yy - cy) < ry) & (np.abs(xx - cx) < rx)
        else:
            mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 < 1
        value = 20 + 215 * level + 40 * (shade - 0.5) * (np.cos(tilt * np.pi) * (xx - cx)
                                                         + np.sin(tilt * np.pi) * (yy - cy))
        img = np.where(mask, value, img)
    return np.clip(np.rint(img), 16, 239)
