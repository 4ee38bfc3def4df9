"""Synthetic small-object dataset generation, the NTSR on-disk tensor
format, dataset loading, and the 70/10/20 split.

NTSR layout, all little-endian: magic ``NTSR``, version byte (1), dtype
byte (1 = float32, 2 = float64), rank byte, rank uint32 extents, then
the row-major payload.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

MAGIC = b"NTSR"
VERSION = 1
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_DTYPE_CODES = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}


class NtsrError(ValueError):
    """Malformed NTSR content; ``offset`` is the failing byte position."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


def save_tensor(path, array: np.ndarray):
    arr = np.asarray(array, order="C")  # keeps rank 0, unlike ascontiguousarray
    code = _DTYPE_CODES.get(arr.dtype)
    if code is None:
        raise ValueError(f"NTSR stores float32/float64 arrays, got dtype {arr.dtype}")
    if arr.ndim > 255:
        raise ValueError(f"rank {arr.ndim} exceeds the format's 255 limit")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(bytes([VERSION, code, arr.ndim]))
    for extent in arr.shape:
        if extent > 0xFFFFFFFF:
            raise ValueError(f"extent {extent} exceeds uint32")
        buf.write(struct.pack("<I", extent))
    buf.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_tensor(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise NtsrError(f"bad magic {raw[:4]!r}, expected {MAGIC!r}", 0)
    if len(raw) < 7:
        raise NtsrError(f"truncated header: {len(raw)} bytes", len(raw))
    version, dtype_code, rank = raw[4], raw[5], raw[6]
    if version != VERSION:
        raise NtsrError(f"unsupported version {version}", 4)
    if dtype_code not in _DTYPES:
        raise NtsrError(f"unknown dtype code {dtype_code}", 5)
    offset = 7
    need = offset + 4 * rank
    if len(raw) < need:
        raise NtsrError(f"truncated extents: expected {need} bytes, got {len(raw)}", len(raw))
    shape = struct.unpack_from(f"<{rank}I", raw, offset) if rank else ()
    offset = need
    dtype = _DTYPES[dtype_code]
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    need = offset + count * dtype.itemsize
    if len(raw) != need:
        raise NtsrError(
            f"payload length mismatch: expected {need} bytes total, got {len(raw)}",
            min(len(raw), offset),
        )
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=offset)
    return data.reshape(shape).copy()


@dataclass
class SynthSpec:
    """Knobs of the disk-on-background generator."""

    count: int = 100
    height: int = 64
    width: int = 64
    small_objects_per_image: tuple = (1, 3)
    small_radius_px: tuple = (2, 4)
    large_object_prob: float = 0.5
    large_radius_px: tuple = (8, 12)
    noise_std: float = 0.05
    intensity_fg: float = 0.8
    intensity_bg: float = 0.2

    def validate(self):
        if self.count < 1:
            raise ValueError(f"count must be >= 1, got {self.count}")
        limit = min(self.height, self.width) / 4
        for lo, hi in (self.small_radius_px, self.large_radius_px):
            if not (1 <= lo <= hi):
                raise ValueError(f"bad radius range {lo}..{hi}")
            if hi >= limit:
                raise ValueError(
                    f"radius {hi} too large for {self.height}x{self.width} canvas "
                    f"(limit {limit})"
                )
        for v in (self.intensity_fg, self.intensity_bg):
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"intensity {v} outside [0,1]")
        lo, hi = self.small_objects_per_image
        if not (0 <= lo <= hi):
            raise ValueError(f"bad object-count range {lo}..{hi}")
        if not 0.0 <= self.large_object_prob <= 1.0:
            raise ValueError(f"bad large_object_prob {self.large_object_prob}")
        if self.noise_std < 0:
            raise ValueError(f"noise_std must be >= 0, got {self.noise_std}")
        return self


@dataclass
class Sample:
    """One image/mask pair: x in [0,1], m binary, per-object pixel areas."""

    x: np.ndarray  # (1, H, W) float32
    m: np.ndarray  # (1, H, W) float32, values in {0, 1}
    areas: list = field(default_factory=list)
    meta: str = ""


_PLACEMENT_ATTEMPTS = 200
_SEPARATION_PX = 3  # min gap between disks keeps objects distinct components


def _disk(h, w, ci, cj, r):
    ii, jj = np.ogrid[:h, :w]
    return (ii - ci) ** 2 + (jj - cj) ** 2 <= r * r


def _place_disks(rng, spec: SynthSpec, radii) -> tuple:
    h, w = spec.height, spec.width
    mask = np.zeros((h, w), dtype=bool)
    blocked = np.zeros((h, w), dtype=bool)  # mask dilated by the separation gap
    areas = []
    for r in radii:
        placed = False
        for _ in range(_PLACEMENT_ATTEMPTS):
            ci = int(rng.integers(r, h - r))
            cj = int(rng.integers(r, w - r))
            disk = _disk(h, w, ci, cj, r)
            if not (disk & blocked).any():
                mask |= disk
                blocked |= ndimage.binary_dilation(disk, iterations=_SEPARATION_PX)
                areas.append(int(disk.sum()))
                placed = True
                break
        if not placed:
            raise RuntimeError(
                f"could not place a radius-{r} object after "
                f"{_PLACEMENT_ATTEMPTS} attempts on a {h}x{w} canvas"
            )
    return mask, areas


def generate_sample(spec: SynthSpec, seed: int, index: int) -> Sample:
    rng = np.random.default_rng((seed, index))
    lo, hi = spec.small_objects_per_image
    n_small = int(rng.integers(lo, hi + 1))
    radii = [int(rng.integers(spec.small_radius_px[0], spec.small_radius_px[1] + 1))
             for _ in range(n_small)]
    if rng.random() < spec.large_object_prob:
        radii.append(int(rng.integers(spec.large_radius_px[0],
                                      spec.large_radius_px[1] + 1)))
    if not radii:
        radii = [int(rng.integers(spec.small_radius_px[0],
                                  spec.small_radius_px[1] + 1))]
    # large objects claim space first so the guaranteed small ones fit around them
    order = np.argsort([-r for r in radii], kind="stable")
    mask, areas_sorted = _place_disks(rng, spec, [radii[i] for i in order])
    areas = [0] * len(radii)
    for pos, i in enumerate(order):
        areas[i] = areas_sorted[pos]

    img = np.where(mask, spec.intensity_fg, spec.intensity_bg)
    if spec.noise_std > 0:
        img = img + rng.normal(0.0, spec.noise_std, size=img.shape)
    img = np.clip(img, 0.0, 1.0)
    return Sample(
        x=img[None].astype(np.float32),
        m=mask[None].astype(np.float32),
        areas=areas,
        meta=f"synth:{seed}:{index}",
    )


def generate(spec: SynthSpec, seed: int) -> list:
    spec.validate()
    return [generate_sample(spec, seed, i) for i in range(spec.count)]


# -- dataset directory layout ------------------------------------------


def save_dataset(samples, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, s in enumerate(samples):
        img_name, msk_name = f"img_{i:05d}.ntsr", f"msk_{i:05d}.ntsr"
        save_tensor(out / img_name, s.x)
        save_tensor(out / msk_name, s.m)
        rows.append(f"{i}\t{img_name}\t{msk_name}\t{','.join(map(str, s.areas))}")
    (out / "manifest.tsv").write_text(
        "index\timage\tmask\tareas\n" + "".join(r + "\n" for r in rows)
    )


def load_dataset(data_dir) -> list:
    root = Path(data_dir)
    manifest = root / "manifest.tsv"
    if not manifest.exists():
        raise FileNotFoundError(f"no manifest.tsv in {root}")
    samples = []
    lines = manifest.read_text().splitlines()
    for line in lines[1:]:
        if not line.strip():
            continue
        idx, img_name, msk_name, areas_s = line.split("\t")
        x = load_tensor(root / img_name)
        m = load_tensor(root / msk_name)
        if x.min() < 0.0 or x.max() > 1.0:
            # externally produced data: min-max normalize per image
            lo, hi = x.min(), x.max()
            x = (x - lo) / (hi - lo) if hi > lo else np.zeros_like(x)
        areas = [int(a) for a in areas_s.split(",")] if areas_s else []
        samples.append(Sample(x=x.astype(np.float32), m=m.astype(np.float32),
                              areas=areas, meta=str(root / img_name)))
    return samples


@dataclass
class DatasetSplit:
    train: list
    val: list
    test: list

    def all_indices(self):
        return [*self.train, *self.val, *self.test]


def split(n: int, seed: int) -> DatasetSplit:
    """Seeded shuffle, then a 70/10/20 partition by largest remainder."""
    if n < 10:
        raise ValueError(f"need at least 10 samples to split, got {n}")
    perm = np.random.default_rng(seed).permutation(n)
    fractions = (0.7, 0.1, 0.2)
    exact = [f * n for f in fractions]
    sizes = [int(e) for e in exact]
    remainders = [e - s for e, s in zip(exact, sizes)]
    short = n - sum(sizes)
    for i in sorted(range(3), key=lambda i: -remainders[i])[:short]:
        sizes[i] += 1
    a, b = sizes[0], sizes[0] + sizes[1]
    return DatasetSplit(
        train=[int(i) for i in perm[:a]],
        val=[int(i) for i in perm[a:b]],
        test=[int(i) for i in perm[b:]],
    )
