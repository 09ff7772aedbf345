"""Datasets and augmentation.

Synthetic shape scenes stand in for real data at desk scale: colored
disks/rectangles/triangles on a textured background, with image-level
labels derived from the rendered mask. A VOC-layout loader handles real
data (``root/images/*.png`` + ``root/labels.txt`` + optional
``root/masks/*.png``). Ground-truth masks ride along for evaluation only;
losses never see them.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .config import DataConfig, SyntheticSpec
from .errors import DataError
from .pseudo import IGNORE_INDEX

IMAGE_MEAN = 0.5
IMAGE_STD = 0.25


@dataclass
class SampleRecord:
    """One image with weak labels; gt_mask is for evaluation only."""

    id: str
    image: torch.Tensor          # 3 x H x W, normalized
    labels: torch.Tensor         # K, entries 0/1
    gt_mask: torch.Tensor | None = None


def normalize_image(rgb: torch.Tensor) -> torch.Tensor:
    """[0,1] RGB -> normalized float tensor."""
    return (rgb - IMAGE_MEAN) / IMAGE_STD


def denormalize_image(image: torch.Tensor) -> torch.Tensor:
    """Normalized tensor -> [0,1] RGB (clamped)."""
    return (image * IMAGE_STD + IMAGE_MEAN).clamp(0.0, 1.0)


def _class_color(k: int, K: int) -> np.ndarray:
    base = np.array([
        (0.85, 0.20, 0.20),
        (0.20, 0.78, 0.25),
        (0.25, 0.35, 0.85),
        (0.85, 0.75, 0.20),
        (0.70, 0.25, 0.80),
        (0.20, 0.75, 0.75),
    ])
    if k < len(base):
        return base[k]
    # evenly spaced hues for any extra classes
    h = (k / K) * 6.0
    i = int(h) % 6
    f = h - int(h)
    p, q, t = 0.2, 0.8 * (1 - f) + 0.2 * f, 0.2 * (1 - f) + 0.8 * f
    wheel = [(0.8, t, p), (q, 0.8, p), (p, 0.8, t), (p, q, 0.8), (t, p, 0.8), (0.8, p, q)]
    return np.array(wheel[i])


def _low_freq_noise(rng: np.random.Generator, h: int, w: int, amp: float) -> np.ndarray:
    coarse = rng.uniform(-1.0, 1.0, size=(3, max(2, h // 8), max(2, w // 8)))
    t = torch.from_numpy(coarse).unsqueeze(0)
    up = F.interpolate(t, size=(h, w), mode="bilinear", align_corners=False)
    return amp * up.squeeze(0).numpy()


def _draw_shape(rng: np.random.Generator, shape: str, h: int, w: int) -> np.ndarray:
    """Boolean occupancy map for one object."""
    yy, xx = np.mgrid[0:h, 0:w]
    m = min(h, w)
    if shape == "disk":
        r = rng.uniform(0.20, 0.32) * m
        cy = rng.uniform(r, h - r)
        cx = rng.uniform(r, w - r)
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    if shape == "rect":
        rh = rng.uniform(0.30, 0.55) * h
        rw = rng.uniform(0.30, 0.55) * w
        y0 = rng.uniform(0, h - rh)
        x0 = rng.uniform(0, w - rw)
        return (yy >= y0) & (yy < y0 + rh) & (xx >= x0) & (xx < x0 + rw)
    if shape == "tri":
        # centroid + spread angles so every triangle has usable area
        for _ in range(32):
            r = rng.uniform(0.24, 0.38) * m
            c = np.array([rng.uniform(r, h - 1 - r), rng.uniform(r, w - 1 - r)])
            theta = rng.uniform(0.0, 2.0 * np.pi)
            ang = theta + np.array([0.0, 2.0, 4.0]) * np.pi / 3.0
            ang = ang + rng.uniform(-0.35, 0.35, size=3)
            rad = rng.uniform(0.7, 1.0, size=3) * r
            v = c[None, :] + np.stack([rad * np.sin(ang), rad * np.cos(ang)], axis=1)
            area2 = abs((v[1, 0] - v[0, 0]) * (v[2, 1] - v[0, 1])
                        - (v[2, 0] - v[0, 0]) * (v[1, 1] - v[0, 1]))
            if area2 >= 0.04 * h * w:
                break
        def side(a, b):
            return (yy - a[0]) * (b[1] - a[1]) - (xx - a[1]) * (b[0] - a[0])
        s0 = side(v[0], v[1])
        s1 = side(v[1], v[2])
        s2 = side(v[2], v[0])
        neg = (s0 <= 0) & (s1 <= 0) & (s2 <= 0)
        pos = (s0 >= 0) & (s1 >= 0) & (s2 >= 0)
        return neg | pos
    raise DataError(f"unknown shape kind {shape!r}")


def _render_scene(rng: np.random.Generator, spec: SyntheticSpec) -> tuple[np.ndarray, np.ndarray]:
    h, w = spec.canvas
    bg = rng.uniform(0.30, 0.55)
    img = np.full((3, h, w), bg, dtype=np.float64)
    img += _low_freq_noise(rng, h, w, spec.noise_amp)
    mask = np.zeros((h, w), dtype=np.int64)
    n_obj = int(rng.integers(spec.objects_min, spec.objects_max + 1))
    for _ in range(n_obj):
        k = int(rng.integers(0, spec.num_classes))
        shape = spec.shapes[k % len(spec.shapes)]
        occ = _draw_shape(rng, shape, h, w)
        color = _class_color(k, spec.num_classes) + rng.uniform(-0.06, 0.06, size=3)
        shade = 1.0 + _low_freq_noise(rng, h, w, spec.noise_amp * 0.5)[0]
        for c in range(3):
            img[c][occ] = color[c] * shade[occ]
        mask[occ] = k + 1
    img = np.clip(img, 0.0, 1.0)
    return img.astype(np.float32), mask


def _record_from_scene(img: np.ndarray, mask: np.ndarray, sample_id: str, K: int) -> SampleRecord:
    labels = torch.zeros(K)
    present = np.unique(mask)
    for v in present:
        if v > 0:
            labels[int(v) - 1] = 1.0
    return SampleRecord(
        id=sample_id,
        image=normalize_image(torch.from_numpy(img)),
        labels=labels,
        gt_mask=torch.from_numpy(mask),
    )


def generate_synthetic(spec: SyntheticSpec) -> tuple[list[SampleRecord], list[SampleRecord]]:
    """Deterministic (train, val) sample lists for a given spec."""
    spec.validate()
    splits = []
    for split_tag, count, prefix in ((0, spec.train_count, "train"), (1, spec.val_count, "val")):
        records = []
        for i in range(count):
            rng = np.random.default_rng(np.random.SeedSequence([spec.rng_seed, split_tag, i]))
            # redraw empty scenes so every record carries at least one label
            for _ in range(16):
                img, mask = _render_scene(rng, spec)
                if mask.max() > 0:
                    break
            records.append(_record_from_scene(img, mask, f"{prefix}_{i:05d}", spec.num_classes))
        splits.append(records)
    return splits[0], splits[1]


def augment(sample: SampleRecord, rng: np.random.Generator, cfg: DataConfig) -> SampleRecord:
    """Random scale, horizontal flip, crop to cfg.crop.

    Labels pass through untouched (weak supervision contract); the mask is
    transformed with nearest-neighbor and padded with the ignore value.
    """
    img = sample.image
    mask = sample.gt_mask
    _, h, w = img.shape
    lo, hi = cfg.scale_range
    s = float(rng.uniform(lo, hi))
    nh, nw = max(1, round(h * s)), max(1, round(w * s))
    if (nh, nw) != (h, w):
        img = F.interpolate(img.unsqueeze(0), size=(nh, nw), mode="bilinear",
                            align_corners=False).squeeze(0)
        if mask is not None:
            mask = F.interpolate(mask.unsqueeze(0).unsqueeze(0).float(), size=(nh, nw),
                                 mode="nearest").squeeze(0).squeeze(0).long()
    if rng.random() < cfg.hflip_prob:
        img = torch.flip(img, dims=[2])
        if mask is not None:
            mask = torch.flip(mask, dims=[1])
    crop = cfg.crop
    _, nh, nw = img.shape
    if nh < crop or nw < crop:
        ph, pw = max(0, crop - nh), max(0, crop - nw)
        # zero in normalized space is the dataset mean pixel
        img = F.pad(img, (0, pw, 0, ph), value=0.0)
        if mask is not None:
            mask = F.pad(mask, (0, pw, 0, ph), value=IGNORE_INDEX)
        _, nh, nw = img.shape
    top = int(rng.integers(0, nh - crop + 1))
    left = int(rng.integers(0, nw - crop + 1))
    img = img[:, top:top + crop, left:left + crop]
    if mask is not None:
        mask = mask[top:top + crop, left:left + crop]
    return replace(sample, image=img, gt_mask=mask)


class VocStyleDataset:
    """Lazily loaded records from the on-disk layout.

    ``root/labels.txt`` lines are ``id k1 k2 ...`` with 0-based class
    indices; images live at ``root/images/<id>.png`` and optional masks at
    ``root/masks/<id>.png`` (class-index PNG, 255 ignore).
    """

    def __init__(self, root: str | Path, num_classes: int):
        self.root = Path(root)
        self.num_classes = num_classes
        labels_file = self.root / "labels.txt"
        if not labels_file.exists():
            raise DataError(f"missing labels file: {labels_file}")
        self.entries: list[tuple[str, list[int]]] = []
        for lineno, line in enumerate(labels_file.read_text().splitlines(), 1):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            sample_id, raw = parts[0], parts[1:]
            try:
                classes = [int(t) for t in raw]
            except ValueError as exc:
                raise DataError(f"{labels_file}:{lineno}: bad class index in {line!r}") from exc
            for k in classes:
                if not 0 <= k < num_classes:
                    raise DataError(
                        f"{labels_file}:{lineno}: class {k} out of range for K={num_classes}")
            img_path = self.root / "images" / f"{sample_id}.png"
            if not img_path.exists():
                raise DataError(f"listed id {sample_id!r} has no image at {img_path}")
            self.entries.append((sample_id, classes))
        self._warned: set[str] = set()

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, idx: int) -> SampleRecord:
        sample_id, classes = self.entries[idx]
        img_path = self.root / "images" / f"{sample_id}.png"
        try:
            with Image.open(img_path) as im:
                rgb = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
        except OSError as exc:
            raise DataError(f"cannot read image for id {sample_id!r}: {exc}") from exc
        image = normalize_image(torch.from_numpy(rgb).permute(2, 0, 1).contiguous())
        labels = torch.zeros(self.num_classes)
        labels[classes] = 1.0
        mask_path = self.root / "masks" / f"{sample_id}.png"
        gt_mask = None
        if mask_path.exists():
            with Image.open(mask_path) as im:
                gt_mask = torch.from_numpy(np.asarray(im, dtype=np.int64))
            mask_classes = {int(v) - 1 for v in torch.unique(gt_mask).tolist()
                            if 0 < v < IGNORE_INDEX}
            if mask_classes != set(classes) and sample_id not in self._warned:
                self._warned.add(sample_id)
                warnings.warn(
                    f"id {sample_id!r}: mask classes {sorted(mask_classes)} disagree with "
                    f"label file {sorted(classes)}; keeping label file", stacklevel=2)
        return SampleRecord(id=sample_id, image=image, labels=labels, gt_mask=gt_mask)

    def records(self) -> list[SampleRecord]:
        return [self[i] for i in range(len(self))]


def load_voc_style(root: str | Path, num_classes: int) -> VocStyleDataset:
    return VocStyleDataset(root, num_classes)


def export_voc_style(records: list[SampleRecord], root: str | Path) -> None:
    """Write records in the on-disk layout (images as 8-bit RGB PNG)."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    lines = []
    for rec in records:
        rgb = denormalize_image(rec.image).permute(1, 2, 0).numpy()
        arr = np.round(rgb * 255.0).astype(np.uint8)
        Image.fromarray(arr).save(root / "images" / f"{rec.id}.png")
        if rec.gt_mask is not None:
            Image.fromarray(rec.gt_mask.numpy().astype(np.uint8)).save(
                root / "masks" / f"{rec.id}.png")
        classes = " ".join(str(k) for k in torch.nonzero(rec.labels).flatten().tolist())
        lines.append(f"{rec.id} {classes}".rstrip())
    (root / "labels.txt").write_text("\n".join(lines) + "\n")
