"""Dataset ingestion and preparation.

On-disk convention: `<root>/images/*.png|*.pgm` with masks (when present) at
`<root>/masks/<same-stem>.png|.pgm`. A dataset without a masks directory is a
generation dataset (mask-less rows). Manifests persist as UTF-8 TSV with
header `id\timage\tmask\tsplit`, preceded by `# key=value` comment lines that
record the split seed and ratio.

Images load as float (C,H,W) in [0,1] (bilinear resize, half-pixel centers);
masks as {0,1} in (1,H,W) (nearest resize, so binarity is exact).
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .tensor import _interp_indices

IMAGE_SUFFIXES = (".png", ".pgm")


@dataclass(frozen=True)
class ManifestRow:
    id: str
    image: str
    mask: str  # empty string for generation datasets
    split: str


@dataclass
class DatasetManifest:
    rows: list
    seed: int
    split_ratio: float

    def split(self, name: str) -> list:
        if name not in ("train", "val"):
            raise ValueError(f"unknown split {name!r}")
        return [r for r in self.rows if r.split == name]

    def save(self, path) -> None:
        lines = [f"# seed={self.seed}", f"# split_ratio={self.split_ratio!r}",
                 "id\timage\tmask\tsplit"]
        lines += [f"{r.id}\t{r.image}\t{r.mask}\t{r.split}" for r in self.rows]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_manifest(path) -> DatasetManifest:
    meta = {"seed": 0, "split_ratio": 0.8}
    rows = []
    header_seen = False
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        if line.startswith("#"):
            key, _, value = line[1:].partition("=")
            meta[key.strip()] = value.strip()
            continue
        cells = line.split("\t")
        if not header_seen:
            if cells != ["id", "image", "mask", "split"]:
                raise ValueError(f"bad manifest header {cells}")
            header_seen = True
            continue
        if len(cells) != 4:
            raise ValueError(f"bad manifest row {line!r}")
        rows.append(ManifestRow(*cells))
    if not header_seen:
        raise ValueError(f"{path} has no manifest header")
    return DatasetManifest(rows=rows, seed=int(meta["seed"]),
                           split_ratio=float(meta["split_ratio"]))


def build_manifest(root, split_ratio: float = 0.8, seed: int = 0) -> DatasetManifest:
    """Scan a dataset directory and deterministically split it.

    The shuffle is fixed by `seed`; the first round(n * split_ratio) shuffled
    rows become the training split.
    """
    root = Path(root)
    if not 0.0 < split_ratio <= 1.0:
        raise ValueError(f"split_ratio must lie in (0, 1], got {split_ratio}")
    image_dir = root / "images"
    if not image_dir.is_dir():
        raise FileNotFoundError(f"no images directory under {root}")
    images = sorted(p for p in image_dir.iterdir()
                    if p.suffix.lower() in IMAGE_SUFFIXES)
    if not images:
        raise ValueError(f"empty dataset: no {'/'.join(IMAGE_SUFFIXES)} files "
                         f"in {image_dir}")
    mask_dir = root / "masks"
    rows = []
    for img in images:
        mask = ""
        if mask_dir.is_dir():
            candidates = [mask_dir / (img.stem + ext) for ext in IMAGE_SUFFIXES]
            found = [c for c in candidates if c.exists()]
            if not found:
                raise FileNotFoundError(f"missing mask for {img.name} in {mask_dir}")
            mask = str(found[0])
        rows.append(ManifestRow(id=img.stem, image=str(img), mask=mask, split=""))

    order = np.random.default_rng(seed).permutation(len(rows))
    n_train = int(round(len(rows) * split_ratio))
    if n_train == len(rows) and split_ratio < 1.0:
        n_train = len(rows) - 1  # tiny datasets still get a val row
    if n_train == len(rows):
        warnings.warn("split_ratio leaves the validation split empty", stacklevel=2)
    split_rows = []
    for rank, idx in enumerate(order):
        r = rows[idx]
        split_rows.append(ManifestRow(r.id, r.image, r.mask,
                                      "train" if rank < n_train else "val"))
    return DatasetManifest(rows=split_rows, seed=seed, split_ratio=split_ratio)


# --------------------------------------------------------------------------
# decoding / resizing
# --------------------------------------------------------------------------

def _resize_axis_linear(arr: np.ndarray, n_out: int, axis: int) -> np.ndarray:
    n_in = arr.shape[axis]
    if n_in == n_out:
        return arr
    lo, hi, w = _interp_indices(n_in, n_out)
    a = np.moveaxis(arr, axis, 0)
    shape = (-1,) + (1,) * (a.ndim - 1)
    out = a[lo] * (1.0 - w.reshape(shape)) + a[hi] * w.reshape(shape)
    return np.moveaxis(out, 0, axis)


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize over the trailing two axes, half-pixel centers (same
    convention as the network's upsampling)."""
    return _resize_axis_linear(_resize_axis_linear(img, out_h, -2), out_w, -1)


def _nearest_indices(n_in: int, n_out: int) -> np.ndarray:
    return np.clip(((np.arange(n_out) + 0.5) * (n_in / n_out)).astype(np.int64),
                   0, n_in - 1)


def resize_nearest(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbour resize over the trailing two axes; value-preserving,
    so binary masks stay binary."""
    out = np.take(img, _nearest_indices(img.shape[-2], out_h), axis=-2)
    return np.take(out, _nearest_indices(img.shape[-1], out_w), axis=-1)


def _decode(path: str) -> Image.Image:
    try:
        img = Image.open(path)
        img.load()
        return img
    except Exception as exc:
        raise ValueError(f"cannot decode image {path}: {exc}") from exc


def load_image(path: str, size: int, channels: int) -> np.ndarray:
    """Decode an 8-bit image to float (channels, size, size) in [0, 1];
    grayscale files are expanded when a 3-channel image is requested."""
    img = _decode(path)
    img = img.convert("RGB" if channels == 3 else "L")
    arr = np.asarray(img, dtype=np.float64) / 255.0
    arr = arr.transpose(2, 0, 1) if arr.ndim == 3 else arr[None]
    return resize_bilinear(arr, size, size)


def load_mask(path: str, size: int) -> np.ndarray:
    """Decode a {0, 255} mask to {0, 1} in (1, size, size)."""
    arr = np.asarray(_decode(path).convert("L"))
    bad = np.setdiff1d(np.unique(arr), [0, 255])
    if bad.size:
        raise ValueError(f"mask {path} has values outside {{0,255}}: {bad[:8]}")
    binary = (arr == 255).astype(np.float64)[None]
    return resize_nearest(binary, size, size)


@dataclass
class SampleRecord:
    id: str
    image: np.ndarray           # (C, H, W) in [0, 1]
    mask: np.ndarray | None     # (1, H, W) in {0, 1}


def load_sample(row: ManifestRow, size: int, channels: int) -> SampleRecord:
    image = load_image(row.image, size, channels)
    mask = load_mask(row.mask, size) if row.mask else None
    return SampleRecord(id=row.id, image=image, mask=mask)


# --------------------------------------------------------------------------
# augmentation
# --------------------------------------------------------------------------

def rotate_arbitrary(arr: np.ndarray, angle_deg: float,
                     nearest: bool = False) -> np.ndarray:
    """Rotate (…, H, W) counter-clockwise about the center. Inverse mapping
    with bilinear (images) or nearest (masks) sampling; outside pixels are 0."""
    h, w = arr.shape[-2:]
    th = np.deg2rad(angle_deg)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(h) - cy, np.arange(w) - cx, indexing="ij")
    # rotate output coords backwards into the source frame
    sy = np.cos(th) * yy + np.sin(th) * xx + cy
    sx = -np.sin(th) * yy + np.cos(th) * xx + cx
    if nearest:
        iy = np.rint(sy).astype(np.int64)
        ix = np.rint(sx).astype(np.int64)
        valid = (iy >= 0) & (iy < h) & (ix >= 0) & (ix < w)
        out = np.zeros_like(arr)
        out[..., valid] = arr[..., iy[valid], ix[valid]]
        return out
    y0 = np.floor(sy).astype(np.int64)
    x0 = np.floor(sx).astype(np.int64)
    wy = sy - y0
    wx = sx - x0
    out = np.zeros(arr.shape[:-2] + (h, w), dtype=arr.dtype)
    for dy in (0, 1):
        for dx in (0, 1):
            iy = y0 + dy
            ix = x0 + dx
            weight = (wy if dy else 1 - wy) * (wx if dx else 1 - wx)
            valid = (iy >= 0) & (iy < h) & (ix >= 0) & (ix < w)
            vals = np.zeros_like(out)
            vals[..., valid] = arr[..., iy[valid], ix[valid]]
            out += vals * weight
    return out


def augment(sample: SampleRecord, rng: np.random.Generator,
            rotate: bool = True, rotation_mode: str = "right_angle") -> SampleRecord:
    """Random 50% horizontal flip, 50% vertical flip, and rotation (uniform
    right angle by default; `rotation_mode='any'` draws a uniform angle and
    resamples, keeping masks nearest). Image and mask get the same transform."""
    image, mask = sample.image, sample.mask

    def both(fn_img, fn_mask=None):
        nonlocal image, mask
        image = fn_img(image)
        if mask is not None:
            mask = (fn_mask or fn_img)(mask)

    if rng.random() < 0.5:
        both(lambda a: np.flip(a, axis=-1).copy())
    if rng.random() < 0.5:
        both(lambda a: np.flip(a, axis=-2).copy())
    if rotate:
        if rotation_mode == "right_angle":
            k = int(rng.integers(0, 4))
            if k:
                both(lambda a: np.rot90(a, k, axes=(-2, -1)).copy())
        elif rotation_mode == "any":
            angle = float(rng.uniform(0.0, 360.0))
            both(lambda a: rotate_arbitrary(a, angle, nearest=False),
                 lambda a: rotate_arbitrary(a, angle, nearest=True))
        else:
            raise ValueError(f"unknown rotation_mode {rotation_mode!r}")
    return SampleRecord(id=sample.id, image=image, mask=mask)


# --------------------------------------------------------------------------
# synthetic datasets for desk-scale training fixtures
# --------------------------------------------------------------------------

def save_image(path, array: np.ndarray) -> None:
    """Write float [0,1] (H,W) or (C,H,W) data as an 8-bit PNG/PGM."""
    arr = np.asarray(array)
    if arr.ndim == 3:
        arr = arr.transpose(1, 2, 0)
        if arr.shape[-1] == 1:
            arr = arr[..., 0]
    data = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(data).save(path)


def make_blob_dataset(root, n: int = 8, size: int = 32, seed: int = 0,
                      channels: int = 3,
                      split_ratio: float = 0.75) -> DatasetManifest:
    """Random bright ellipse blobs on a dark noisy background, with exact
    ellipse-union masks; the overfit fixture uses split_ratio=1.0."""
    root = Path(root)
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    for i in range(n):
        mask = np.zeros((size, size), dtype=bool)
        for _ in range(int(rng.integers(1, 4))):
            cy, cx = rng.uniform(0.25 * size, 0.75 * size, size=2)
            ry, rx = rng.uniform(0.12 * size, 0.28 * size, size=2)
            mask |= ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        image = np.where(mask, 0.8, 0.15) + rng.normal(0.0, 0.04, (size, size))
        image = np.clip(image, 0.0, 1.0)
        stack = np.repeat(image[None], channels, axis=0)
        save_image(root / "images" / f"blob_{i:03d}.png", stack)
        save_image(root / "masks" / f"blob_{i:03d}.png", mask.astype(np.float64))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        manifest = build_manifest(root, split_ratio=split_ratio, seed=seed)
    manifest.save(root / "manifest.tsv")
    return manifest


def two_mode_images(size: int = 8) -> np.ndarray:
    """The two fixed patterns of the toy generation dataset, in [0, 1]."""
    a = np.full((size, size), 0.1)
    a[size // 2 - 1:size // 2 + 1, :] = 0.9       # horizontal bar
    a[:, size // 2 - 1:size // 2 + 1] = 0.9       # -> bright cross
    b = np.full((size, size), 0.9)
    q = size // 4
    b[q:-q, q:-q] = 0.1                           # dark box on bright field
    return np.stack([a, b])


def make_two_mode_dataset(root, size: int = 8, seed: int = 0,
                          copies: int = 1) -> DatasetManifest:
    """Two fixed patterns (optionally replicated so an epoch carries several
    noise draws per mode), no masks; the diffusion training fixture."""
    root = Path(root)
    for c in range(copies):
        for i, img in enumerate(two_mode_images(size)):
            save_image(root / "images" / f"mode_{i}_{c}.png", img[None])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        manifest = build_manifest(root, split_ratio=1.0, seed=seed)
    manifest.save(root / "manifest.tsv")
    return manifest


# --------------------------------------------------------------------------
# batch iteration
# --------------------------------------------------------------------------

class SegDataset:
    """Decoded, resized, cached samples for one split."""

    def __init__(self, manifest: DatasetManifest, split: str, size: int,
                 channels: int):
        self.rows = manifest.split(split)
        self.size = size
        self.channels = channels
        self._cache: dict[str, SampleRecord] = {}

    def __len__(self):
        return len(self.rows)

    def __getitem__(self, i: int) -> SampleRecord:
        row = self.rows[i]
        if row.id not in self._cache:
            self._cache[row.id] = load_sample(row, self.size, self.channels)
        return self._cache[row.id]


def epoch_batches(n: int, batch_size: int, rng: np.random.Generator):
    """Deterministic shuffled index batches for one epoch."""
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]
