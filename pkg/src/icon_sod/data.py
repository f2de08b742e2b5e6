"""Dataset handling: image/mask I/O, pairing, synthesis, augmentation.

Images are 8-bit RGB/grayscale PNG or PGM; masks are 8-bit grayscale,
binarized at 128.  The synthetic set paints 1-3 high-contrast geometric
shapes over a textured dark background with exact masks, so a small model
can actually learn it, and roughly a third of the scenes carry several
objects to exercise whole-scene coverage.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

IMAGE_EXTS = (".png", ".pgm", ".jpg", ".jpeg")

# per-channel normalization constants (standard image statistics)
IMAGE_MEAN = np.array([0.485, 0.456, 0.406])
IMAGE_STD = np.array([0.229, 0.224, 0.225])


def load_image(path) -> np.ndarray:
    """8-bit RGB array (H, W, 3); grayscale inputs are replicated."""
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8)
    except FileNotFoundError:
        raise
    except OSError as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc


def load_mask(path) -> np.ndarray:
    """8-bit grayscale array (H, W)."""
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("L"), dtype=np.uint8)
    except FileNotFoundError:
        raise
    except OSError as exc:
        raise OSError(f"cannot read mask {path}: {exc}") from exc


def save_gray_png(values01: np.ndarray, path) -> None:
    """Write a [0, 1] map as an 8-bit grayscale PNG (round(v * 255))."""
    data = np.round(np.asarray(values01, dtype=np.float64) * 255.0)
    Image.fromarray(data.clip(0, 255).astype(np.uint8), mode="L").save(path)


@dataclass
class DatasetIndex:
    """Matched (image path, mask path) pairs plus a split tag."""

    pairs: list[tuple[Path, Path]]
    tag: str = ""

    def __len__(self) -> int:
        return len(self.pairs)

    @classmethod
    def from_dirs(cls, image_dir, mask_dir, tag: str = "") -> "DatasetIndex":
        image_dir, mask_dir = Path(image_dir), Path(mask_dir)
        if not image_dir.is_dir():
            raise FileNotFoundError(f"image directory not found: {image_dir}")
        if not mask_dir.is_dir():
            raise FileNotFoundError(f"mask directory not found: {mask_dir}")
        masks = {
            p.stem: p
            for p in sorted(mask_dir.iterdir())
            if p.suffix.lower() in IMAGE_EXTS
        }
        pairs = []
        missing = []
        for p in sorted(image_dir.iterdir()):
            if p.suffix.lower() not in IMAGE_EXTS:
                continue
            if p.stem in masks:
                pairs.append((p, masks[p.stem]))
            else:
                missing.append(p.name)
        if missing:
            raise ValueError(
                f"{len(missing)} image(s) without a matching mask, e.g. {missing[:3]}"
            )
        if not pairs:
            raise ValueError(f"no image/mask pairs under {image_dir} and {mask_dir}")
        return cls(pairs=pairs, tag=tag)


# -- loading + augmentation -----------------------------------------------------


def _resize_uint8(arr: np.ndarray, size_hw, resample_mode) -> np.ndarray:
    im = Image.fromarray(arr)
    return np.asarray(im.resize((size_hw[1], size_hw[0]), resample=resample_mode))


def load_pair(
    image_path,
    mask_path,
    size: int,
    train: bool = False,
    rng: np.random.Generator | None = None,
    crop_pad: int = 4,
):
    """One (image, mask) sample as float arrays (3, S, S) and (1, S, S).

    The image is resized bilinearly and normalized per channel; the mask
    is resized with nearest neighbor and binarized at 128.  In training
    mode a joint random horizontal flip and a random crop from a
    ``size + crop_pad`` resize are applied (rng required).
    """
    img = load_image(image_path)
    msk = load_mask(mask_path)
    if img.shape[:2] != msk.shape[:2]:
        raise OSError(
            f"size mismatch between {image_path} {img.shape[:2]} and "
            f"{mask_path} {msk.shape[:2]}"
        )

    if train:
        if rng is None:
            raise ValueError("training-mode loading needs an rng")
        big = size + crop_pad
        img = _resize_uint8(img, (big, big), Image.BILINEAR)
        msk = _resize_uint8(msk, (big, big), Image.NEAREST)
        oy = int(rng.integers(0, crop_pad + 1))
        ox = int(rng.integers(0, crop_pad + 1))
        img = img[oy : oy + size, ox : ox + size]
        msk = msk[oy : oy + size, ox : ox + size]
        if rng.random() < 0.5:
            img = img[:, ::-1]
            msk = msk[:, ::-1]
    else:
        img = _resize_uint8(img, (size, size), Image.BILINEAR)
        msk = _resize_uint8(msk, (size, size), Image.NEAREST)

    x = img.astype(np.float64) / 255.0
    x = (x - IMAGE_MEAN) / IMAGE_STD
    x = np.ascontiguousarray(x.transpose(2, 0, 1))
    y = (msk.astype(np.float64) >= 128.0).astype(np.float64)[None]
    return x, y


def load_batch(index: DatasetIndex, order, size: int, train: bool, rng=None):
    """Stack samples for the given index positions into (B,3,S,S)/(B,1,S,S)."""
    xs, ys = [], []
    for i in order:
        x, y = load_pair(*index.pairs[i], size=size, train=train, rng=rng)
        xs.append(x)
        ys.append(y)
    return np.stack(xs), np.stack(ys)


# -- synthetic shapes -------------------------------------------------------------


def _textured_background(rng: np.random.Generator, size: int) -> np.ndarray:
    """Dark low-frequency texture in [0.05, 0.4], (H, W, 3)."""
    coarse = rng.random((size // 8 + 2, size // 8 + 2, 3))
    im = np.stack(
        [
            _resize_uint8(
                np.round(coarse[:, :, c] * 255).astype(np.uint8),
                (size, size),
                Image.BILINEAR,
            )
            for c in range(3)
        ],
        axis=2,
    ).astype(np.float64) / 255.0
    return 0.05 + 0.35 * im


def _shape_mask(rng: np.random.Generator, size: int) -> np.ndarray:
    """One random filled shape (circle / rectangle / triangle) as a bool mask."""
    yy, xx = np.mgrid[0:size, 0:size]
    kind = rng.integers(0, 3)
    margin = size // 5
    cy = rng.integers(margin, size - margin)
    cx = rng.integers(margin, size - margin)
    if kind == 0:  # circle
        r = rng.integers(size // 10, size // 4)
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    if kind == 1:  # axis-aligned rectangle
        hh = rng.integers(size // 12, size // 5)
        hw = rng.integers(size // 12, size // 5)
        return (np.abs(yy - cy) <= hh) & (np.abs(xx - cx) <= hw)
    # isosceles triangle pointing up
    half = int(rng.integers(size // 8, size // 4))
    height = int(rng.integers(size // 8, size // 3))
    rel_y = yy - (cy - height // 2)
    inside_rows = (rel_y >= 0) & (rel_y <= height)
    spread = half * (rel_y / max(height, 1))
    return inside_rows & (np.abs(xx - cx) <= spread)


def synth_scene(rng: np.random.Generator, size: int) -> tuple[np.ndarray, np.ndarray]:
    """One synthetic (image uint8 RGB, mask uint8 {0,255}) scene."""
    img = _textured_background(rng, size)
    # 1 object two thirds of the time, several otherwise
    n_obj = int(rng.choice([1, 2, 3], p=[2.0 / 3.0, 2.0 / 9.0, 1.0 / 9.0]))
    mask = np.zeros((size, size), dtype=bool)
    for _ in range(n_obj):
        shape = _shape_mask(rng, size)
        while not shape.any():
            shape = _shape_mask(rng, size)
        color = 0.65 + 0.35 * rng.random(3)
        img[shape] = color
        mask |= shape
    img_u8 = np.round(img * 255).astype(np.uint8)
    return img_u8, mask.astype(np.uint8) * 255


def synth_dataset(n: int, size: int, seed: int, out_dir) -> DatasetIndex:
    """Generate ``n`` scenes under out_dir/images and out_dir/masks.

    Deterministic for a fixed (n, size, seed): regeneration is
    bit-identical.  Every mask is nonempty by construction.
    """
    if n < 1:
        raise ValueError(f"need at least one scene, got n={n}")
    out_dir = Path(out_dir)
    img_dir = out_dir / "images"
    msk_dir = out_dir / "masks"
    img_dir.mkdir(parents=True, exist_ok=True)
    msk_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    pairs = []
    for i in range(n):
        img, msk = synth_scene(rng, size)
        ip = img_dir / f"scene_{i:04d}.png"
        mp = msk_dir / f"scene_{i:04d}.png"
        Image.fromarray(img).save(ip)
        Image.fromarray(msk, mode="L").save(mp)
        pairs.append((ip, mp))
    return DatasetIndex(pairs=pairs, tag=f"synth-{seed}")
