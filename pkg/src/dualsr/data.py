"""LR/HR pair generation: bicubic degradation, patch sampling, folder datasets."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterator, List, Optional, Sequence

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

SCALES = (2, 4, 8)
BICUBIC_A = -0.5
# identity, horizontal flip, rotations by 90/180/270 degrees
AUGMENTATIONS = ("identity", "hflip", "rot90", "rot180", "rot270")


def cubic(x: np.ndarray, a: float = BICUBIC_A) -> np.ndarray:
    x = np.abs(x)
    x2, x3 = x * x, x * x * x
    near = (a + 2) * x3 - (a + 3) * x2 + 1
    far = a * x3 - 5 * a * x2 + 8 * a * x - 4 * a
    return np.where(x <= 1, near, np.where(x < 2, far, 0.0))


def reflect101(idx: np.ndarray, n: int) -> np.ndarray:
    """Mirror indices about the edge pixels (…, 2, 1, | 0, 1, …, n-1 |, n-2, …)."""
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * (n - 1)
    idx = np.mod(idx, period)
    return np.where(idx >= n, period - idx, idx)


@lru_cache(maxsize=64)
def _resample_matrix(n_in: int, scale: int) -> np.ndarray:
    n_out = n_in // scale
    centres = (np.arange(n_out) + 0.5) * scale - 0.5
    base = np.floor(centres).astype(int)
    m = np.zeros((n_out, n_in))
    for tap in range(-1, 3):
        src = base + tap
        w = cubic(centres - src)
        np.add.at(m, (np.arange(n_out), reflect101(src, n_in)), w)
    m.setflags(write=False)
    return m


def crop_to_multiple(img: np.ndarray, scale: int) -> np.ndarray:
    h, w = img.shape[:2]
    return img[: h - h % scale, : w - w % scale]


def bicubic_downsample(img: np.ndarray, scale: int) -> np.ndarray:
    """Downscale an (H, W, C) image by an integer factor.

    Separable 4-tap cubic convolution (a = -0.5) sampled at pixel centres,
    with reflect-101 borders. Linear in the input; no clipping.
    """
    if scale not in SCALES:
        raise ValueError(f"scale must be one of {SCALES}, got {scale}")
    img = np.asarray(img)
    h, w = img.shape[:2]
    if h % scale or w % scale:
        raise ValueError(f"image {h}x{w} is not divisible by scale {scale}; crop first")
    x = img.astype(np.float64)
    out = np.einsum("ih,hwc->iwc", _resample_matrix(h, scale), x.reshape(h, w, -1))
    out = np.einsum("jw,iwc->ijc", _resample_matrix(w, scale), out)
    out = out.reshape((h // scale, w // scale) + img.shape[2:])
    return out.astype(img.dtype) if np.issubdtype(img.dtype, np.floating) else out


def augment(img: np.ndarray, op: str) -> np.ndarray:
    if op == "identity":
        return img
    if op == "hflip":
        return img[:, ::-1]
    k = {"rot90": 1, "rot180": 2, "rot270": 3}[op]
    return np.rot90(img, k, axes=(0, 1))


@dataclass(frozen=True)
class ImagePair:
    lr: np.ndarray
    hr: np.ndarray
    scale: int
    id: str

    def __post_init__(self):
        lh, lw = self.lr.shape[:2]
        if self.hr.shape[:2] != (lh * self.scale, lw * self.scale):
            raise ValueError(f"{self.id}: HR {self.hr.shape[:2]} is not {self.scale}x LR {(lh, lw)}")


@dataclass(frozen=True)
class PatchBatch:
    lr_patches: np.ndarray  # (B, p, p, 3)
    hr_patches: np.ndarray  # (B, p*s, p*s, 3)
    scale: int

    def __len__(self):
        return len(self.lr_patches)

    def tensors(self, dtype=None):
        """(lr, hr) as NCHW torch tensors."""
        import torch
        lr = torch.from_numpy(np.ascontiguousarray(self.lr_patches.transpose(0, 3, 1, 2)))
        hr = torch.from_numpy(np.ascontiguousarray(self.hr_patches.transpose(0, 3, 1, 2)))
        if dtype is not None:
            lr, hr = lr.to(dtype), hr.to(dtype)
        return lr, hr


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float32)
    a.setflags(write=False)
    return a


def _crop_patch(pair: ImagePair, rng: np.random.Generator, patch: int):
    s = pair.scale
    lh, lw = pair.lr.shape[:2]
    if lh < patch or lw < patch:
        raise ValueError(f"{pair.id}: LR {lh}x{lw} is smaller than patch size {patch}")
    y = int(rng.integers(0, lh - patch + 1))
    x = int(rng.integers(0, lw - patch + 1))
    op = AUGMENTATIONS[int(rng.integers(len(AUGMENTATIONS)))]
    lr = pair.lr[y:y + patch, x:x + patch]
    hr = pair.hr[y * s:(y + patch) * s, x * s:(x + patch) * s]
    return augment(lr, op), augment(hr, op)


def _stack(patches, pair_scale: int, patch: int) -> PatchBatch:
    if not patches:
        hp = patch * pair_scale
        return PatchBatch(_frozen(np.zeros((0, patch, patch, 3))),
                          _frozen(np.zeros((0, hp, hp, 3))), pair_scale)
    lr, hr = zip(*patches)
    return PatchBatch(_frozen(np.stack(lr)), _frozen(np.stack(hr)), pair_scale)


def sample_patches(pair: ImagePair, n: int, rng_seed: int, patch_size: int = 48) -> PatchBatch:
    """``n`` aligned, identically augmented LR/HR patches from one pair."""
    lh, lw = pair.lr.shape[:2]
    if lh < patch_size or lw < patch_size:
        raise ValueError(f"{pair.id}: LR {lh}x{lw} is smaller than patch size {patch_size}")
    rng = np.random.default_rng(rng_seed)
    return _stack([_crop_patch(pair, rng, patch_size) for _ in range(n)], pair.scale, patch_size)


def sample_batch(pairs: Sequence[ImagePair], batch_size: int, rng: np.random.Generator,
                 patch_size: int = 48) -> PatchBatch:
    """One random patch from each of ``batch_size`` images drawn with replacement."""
    if not pairs:
        raise ValueError("cannot sample from an empty dataset")
    idx = rng.integers(0, len(pairs), size=batch_size)
    return _stack([_crop_patch(pairs[i], rng, patch_size) for i in idx], pairs[0].scale, patch_size)


def worker_rng(global_seed: int, worker_index: int, epoch: int) -> np.random.Generator:
    """Independent stream per (seed, worker, epoch); independent of worker count."""
    return np.random.default_rng([global_seed, worker_index, epoch])


def read_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def write_png(path, img: np.ndarray) -> None:
    arr = np.clip(np.round(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path)


def make_pair(hr: np.ndarray, scale: int, id: str, lr: Optional[np.ndarray] = None) -> ImagePair:
    hr = crop_to_multiple(np.asarray(hr, dtype=np.float32), scale)
    if lr is None:
        lr = np.clip(bicubic_downsample(hr, scale), 0.0, 1.0)
    return ImagePair(_frozen(lr), _frozen(hr), scale, id)


@dataclass
class Dataset:
    """Sorted sequence of pairs plus the number of files skipped on load."""
    pairs: List[ImagePair] = field(default_factory=list)
    warnings: int = 0

    def __len__(self):
        return len(self.pairs)

    def __getitem__(self, i):
        return self.pairs[i]

    def __iter__(self) -> Iterator[ImagePair]:
        return iter(self.pairs)


def load_pairs(root, scale: int) -> Dataset:
    """Read ``root/HR/*.png`` (and ``root/LRx{scale}/*.png`` when present)."""
    if scale not in SCALES:
        raise ValueError(f"scale must be one of {SCALES}, got {scale}")
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root {root} does not exist")
    hr_dir, lr_dir = root / "HR", root / f"LRx{scale}"
    files = sorted(hr_dir.glob("*.png")) if hr_dir.is_dir() else []
    ds = Dataset()
    for f in files:
        try:
            hr = read_png(f)
            lr = read_png(lr_dir / f.name) if (lr_dir / f.name).exists() else None
            ds.pairs.append(make_pair(hr, scale, f.stem, lr))
        except Exception as e:  # corrupt or mismatched image
            ds.warnings += 1
            log.warning("skipping %s: %s", f, e)
    ds.pairs.sort(key=lambda p: p.id)
    return ds


def split_train_val(ds: Dataset, val_fraction: float = 0.1):
    """Every ``round(1/val_fraction)``-th image (by sorted id) goes to validation."""
    stride = max(1, round(1 / val_fraction))
    val = [p for i, p in enumerate(ds.pairs) if i % stride == 0]
    train = [p for i, p in enumerate(ds.pairs) if i % stride != 0]
    return Dataset(train, ds.warnings), Dataset(val, 0)


def load_dataset(root, split: str, scale: int = 4, val_fraction: float = 0.1) -> Dataset:
    """Pairs for ``split`` in {train, val, test}.

    ``root/<split>/HR`` is used when it exists. Otherwise ``root/HR`` is the
    pool: ``test`` returns all of it and train/val are carved from it.
    """
    if split not in ("train", "val", "test"):
        raise ValueError(f"unknown split {split!r}")
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root {root} does not exist")
    if (root / split / "HR").is_dir():
        return load_pairs(root / split, scale)
    pool = load_pairs(root, scale)
    if split == "test":
        return pool
    train, val = split_train_val(pool, val_fraction)
    return train if split == "train" else val


# Desk dataset: tiles cut from the sample photographs bundled with scikit-image.
DESK_TRAIN_IMAGES = ("astronaut", "coffee", "rocket", "immunohistochemistry", "retina",
                     "stereo_motorcycle", "brick", "grass")
DESK_VAL_IMAGES = ("chelsea", "hubble_deep_field", "camera", "gravel")


def _sample_image(name: str) -> np.ndarray:
    from skimage import data as skdata
    img = getattr(skdata, name)()
    if isinstance(img, tuple):
        img = img[0]
    img = np.asarray(img)
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=2)
    return img[..., :3].astype(np.float32) / 255.0


def _tiles(names, n: int, size: int, rng: np.random.Generator):
    images = [_sample_image(name) for name in names]
    for i in range(n):
        img = images[i % len(images)]
        y = int(rng.integers(0, img.shape[0] - size + 1))
        x = int(rng.integers(0, img.shape[1] - size + 1))
        yield f"{names[i % len(names)]}_{i:03d}", img[y:y + size, x:x + size]


def make_desk_dataset(root, n_train: int = 32, n_val: int = 8, train_size: int = 192,
                      val_size: int = 96, seed: int = 0) -> Path:
    """Write ``root/train/HR`` and ``root/val/HR`` tiles from disjoint source photos."""
    root = Path(root)
    rng = np.random.default_rng(seed)
    for split, names, n, size in (("train", DESK_TRAIN_IMAGES, n_train, train_size),
                                  ("val", DESK_VAL_IMAGES, n_val, val_size)):
        out = root / split / "HR"
        out.mkdir(parents=True, exist_ok=True)
        for id, tile in _tiles(names, n, size, rng):
            write_png(out / f"{id}.png", tile)
    return root
