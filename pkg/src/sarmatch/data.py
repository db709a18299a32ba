"""Image pairs, manifests, template cropping, synthetic pairs and batch scheduling."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
import torch
from PIL import Image, ImageDraw
from scipy import ndimage

from .backbone import to_grayscale

log = logging.getLogger(__name__)

REFERENCE_SIZE = 256
TEMPLATE_SIZE = 192
GAPS = ("none", "mild", "harsh")
MANIFEST_HEADER = ["optical", "sar", "row", "col"]


class ManifestError(ValueError):
    pass


@dataclass
class ImagePair:
    """Optical reference, SAR template and the template's top-left offset in the reference."""

    optical: np.ndarray
    sar: np.ndarray
    gt_offset: tuple[int, int] | None = None
    labeled: bool = False

    def __post_init__(self):
        if self.labeled and self.gt_offset is None:
            raise ValueError("labeled pair needs a ground-truth offset")
        if self.gt_offset is not None:
            r, c = self.gt_offset
            H, W = self.optical.shape
            h, w = self.sar.shape
            if not (0 <= r <= H - h and 0 <= c <= W - w):
                raise ValueError(f"offset {self.gt_offset} outside valid range for {H}x{W} / {h}x{w}")


@dataclass
class AlignedPair:
    """Co-registered optical/SAR images of equal size; templates are cut on demand."""

    optical: np.ndarray
    sar: np.ndarray
    labeled: bool = True


@dataclass
class ManifestEntry:
    optical_path: Path
    sar_path: Path
    gt_offset: tuple[int, int] | None = None

    @property
    def labeled(self) -> bool:
        return self.gt_offset is not None


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry] = field(default_factory=list)
    split: str = "train"
    seed: int = 0
    path: Path | None = None

    def __len__(self):
        return len(self.entries)


# ---------------------------------------------------------------------------
# manifests and images

def load_manifest(path, split: str = "train", seed: int = 0, check_files: bool = True) -> DatasetManifest:
    """Read an ``optical,sar,row,col`` CSV; rows without row/col are unlabeled.

    Relative image paths resolve against the manifest's directory.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    base = path.parent
    entries: list[ManifestEntry] = []
    seen: set[tuple[str, str]] = set()
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip().lower() for h in header[:2]] != ["optical", "sar"]:
            raise ManifestError(f"{path}:1: expected header {','.join(MANIFEST_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            cells = [c.strip() for c in row] + [""] * (4 - len(row))
            if len(row) > 4 or not cells[0] or not cells[1]:
                raise ManifestError(f"{path}:{lineno}: malformed line {row!r}")
            r, c = cells[2], cells[3]
            if bool(r) != bool(c):
                raise ManifestError(f"{path}:{lineno}: row and col must both be present or both absent")
            offset = None
            if r:
                try:
                    offset = (int(r), int(c))
                except ValueError:
                    raise ManifestError(f"{path}:{lineno}: non-integer offset {r!r},{c!r}") from None
                if offset[0] < 0 or offset[1] < 0:
                    raise ManifestError(f"{path}:{lineno}: negative offset {offset}")
            opt_path, sar_path = base / cells[0], base / cells[1]
            if check_files:
                for p in (opt_path, sar_path):
                    if not p.exists():
                        raise ManifestError(f"{path}:{lineno}: missing image {p}")
            key = (str(opt_path), str(sar_path))
            if key in seen:
                log.warning("%s:%d: duplicate entry %s, %s", path, lineno, cells[0], cells[1])
            seen.add(key)
            entries.append(ManifestEntry(opt_path, sar_path, offset))
    return DatasetManifest(entries, split, seed, path)


def save_manifest(manifest: DatasetManifest | list[ManifestEntry], path) -> None:
    path = Path(path)
    entries = manifest.entries if isinstance(manifest, DatasetManifest) else manifest
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_HEADER)
        for e in entries:
            rel = [_relative(p, path.parent) for p in (e.optical_path, e.sar_path)]
            offset = [str(v) for v in e.gt_offset] if e.gt_offset is not None else ["", ""]
            writer.writerow(rel + offset)


def _relative(p: Path, base: Path) -> str:
    try:
        return str(Path(p).resolve().relative_to(base.resolve()))
    except ValueError:
        return str(p)


def load_image(path) -> np.ndarray:
    """8-bit PNG/PGM to float32 ``[H,W]`` in [0,1]; RGB converted to luma."""
    with Image.open(path) as img:
        if img.mode in ("RGB", "RGBA", "P"):
            arr = to_grayscale(np.asarray(img.convert("RGB"), dtype=np.float32))
        else:
            arr = np.asarray(img.convert("L"), dtype=np.float32)
    return (arr / 255.0).astype(np.float32)


def save_image(path, image: np.ndarray) -> None:
    arr = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path)


def load_pair(entry: ManifestEntry, labeled: bool | None = None) -> ImagePair | AlignedPair:
    """Load one manifest entry; an SAR image the size of the optical one is an aligned pair."""
    opt = load_image(entry.optical_path)
    sar = load_image(entry.sar_path)
    is_labeled = entry.labeled if labeled is None else labeled
    if sar.shape == opt.shape and entry.gt_offset is None:
        return AlignedPair(opt, sar, labeled=False if labeled is None else labeled)
    return ImagePair(opt, sar, entry.gt_offset, is_labeled and entry.gt_offset is not None)


# ---------------------------------------------------------------------------
# cropping and synthesis

def crop_template(optical: np.ndarray, sar: np.ndarray, template_size: int = TEMPLATE_SIZE,
                  rng: np.random.Generator | None = None, offset: tuple[int, int] | None = None,
                  labeled: bool = True) -> ImagePair:
    """Cut a ``template_size`` SAR template at a uniform random offset (or ``offset``)."""
    optical = np.asarray(optical, dtype=np.float32)
    sar = np.asarray(sar, dtype=np.float32)
    if optical.shape != sar.shape:
        raise ValueError(f"aligned pair must have equal sizes, got {optical.shape} and {sar.shape}")
    H, W = optical.shape
    if H < template_size or W < template_size:
        raise ValueError(f"images {H}x{W} smaller than template {template_size}")
    if offset is None:
        rng = rng if rng is not None else np.random.default_rng()
        offset = (int(rng.integers(0, H - template_size + 1)), int(rng.integers(0, W - template_size + 1)))
    r, c = offset
    if not (0 <= r <= H - template_size and 0 <= c <= W - template_size):
        raise ValueError(f"offset {offset} out of range for {H}x{W} / {template_size}")
    template = sar[r:r + template_size, c:c + template_size].copy()
    return ImagePair(optical, template, (r, c), labeled)


_GAP_PARAMS = {
    # corr_*: correlation between optical and SAR region/background intensities;
    # looks: speckle looks (variance 1/looks); gamma: remap exponent range
    "mild": dict(corr_region=0.5, corr_field=0.5, looks=4.0, gamma=(0.6, 1.6)),
    "harsh": dict(corr_region=0.0, corr_field=0.0, looks=1.0, gamma=(0.35, 2.8)),
}


def _smooth_field(rng, size):
    out = np.zeros((size, size))
    for sigma, weight in ((size / 10, 1.0), (size / 32, 0.6), (size / 96, 0.3)):
        layer = ndimage.gaussian_filter(rng.standard_normal((size, size)), max(sigma, 0.8), mode="wrap")
        out += weight * layer / (layer.std() + 1e-12)
    return out / out.std()


def _unit(x):
    return (x - x.min()) / (np.ptp(x) + 1e-12)


def synth_pair(seed: int, size: int = REFERENCE_SIZE, modality_gap: str = "mild") -> AlignedPair:
    """Pixel-aligned optical-like and SAR-like images, a pure function of the arguments.

    Both images share geometry: random polygons (land-cover regions) and line
    features over a smooth multi-scale background. Region and background
    intensities are only partly correlated between the two (per-region
    backscatter), lines are bright in SAR, and the SAR image gets a monotone
    gamma remap, multiplicative gamma speckle (mean 1) and a 3x3 blur.
    ``modality_gap`` sets the correlations and the speckle strength.
    """
    if size % 8:
        raise ValueError(f"size {size} must be divisible by 8")
    if modality_gap not in GAPS:
        raise ValueError(f"modality_gap must be one of {GAPS}")
    rng = np.random.default_rng([seed, size])
    field_opt = _smooth_field(rng, size)
    field_alt = _smooth_field(rng, size)

    n_regions = int(rng.integers(5, 10))
    labels = Image.new("L", (size, size), 0)
    draw = ImageDraw.Draw(labels)
    for k in range(1, n_regions + 1):
        cx, cy = rng.uniform(0, size, 2)
        radius = rng.uniform(size / 12, size / 4)
        angles = np.sort(rng.uniform(0, 2 * np.pi, int(rng.integers(3, 7))))
        pts = [(cx + radius * np.cos(a) * rng.uniform(0.6, 1.0), cy + radius * np.sin(a) * rng.uniform(0.6, 1.0))
               for a in angles]
        draw.polygon(pts, fill=k)
    lines = Image.new("L", (size, size), 0)
    ldraw = ImageDraw.Draw(lines)
    for _ in range(int(rng.integers(2, 5))):
        x0, y0, x1, y1 = rng.uniform(0, size, 4)
        ldraw.line([(x0, y0), (x1, y1)], fill=255, width=int(rng.integers(1, max(2, size // 48) + 1)))
    labels = np.asarray(labels)
    line_mask = np.asarray(lines) > 0

    region_opt = rng.standard_normal(n_regions + 1)
    region_alt = rng.standard_normal(n_regions + 1)
    region_opt[0] = region_alt[0] = 0.0
    line_sign = rng.choice([-1.0, 1.0])

    optical = 0.5 * field_opt + 1.2 * region_opt[labels] + 1.5 * line_sign * line_mask
    optical = _unit(optical).astype(np.float32)
    if modality_gap == "none":
        return AlignedPair(optical, optical.copy())

    p = _GAP_PARAMS[modality_gap]
    rho_r, rho_f = p["corr_region"], p["corr_field"]
    field_sar = rho_f * field_opt + np.sqrt(1 - rho_f ** 2) * field_alt
    region_sar = rho_r * region_opt + np.sqrt(1 - rho_r ** 2) * region_alt
    sar = 0.5 * field_sar + 1.2 * region_sar[labels] + 1.5 * line_mask
    sar = _unit(sar) ** rng.uniform(*p["gamma"])
    looks = p["looks"]
    sar = sar * rng.gamma(looks, 1.0 / looks, size=sar.shape) + 0.02
    sar = ndimage.uniform_filter(sar, size=3, mode="reflect")
    sar = np.clip(sar / np.quantile(sar, 0.995), 0.0, 1.0)
    return AlignedPair(optical, sar.astype(np.float32))


def synth_dataset(n: int, seed: int, size: int, modality_gap: str) -> list[AlignedPair]:
    return [synth_pair(seed * 1_000_003 + i, size, modality_gap) for i in range(n)]


def write_synthetic_dataset(out_dir, n_train: int, n_test: int, size: int = REFERENCE_SIZE,
                            template_size: int = TEMPLATE_SIZE, modality_gap: str = "mild",
                            labeled_fraction: float = 0.0625, seed: int = 0) -> dict[str, Path]:
    """Write PNG pairs with pre-cut templates plus manifests.

    ``train.csv`` carries offsets only for the labeled subset; ``train_truth.csv``
    and ``test.csv`` carry every offset.
    """
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng([seed, 7])
    n_labeled = int(round(labeled_fraction * n_train))
    train, truth, test = [], [], []
    for i in range(n_train + n_test):
        pair = synth_pair(seed * 1_000_003 + i, size, modality_gap)
        cut = crop_template(pair.optical, pair.sar, template_size, rng)
        opt_p = out / "images" / f"{i:06d}_opt.png"
        sar_p = out / "images" / f"{i:06d}_sar.png"
        save_image(opt_p, cut.optical)
        save_image(sar_p, cut.sar)
        if i < n_train:
            truth.append(ManifestEntry(opt_p, sar_p, cut.gt_offset))
            train.append(ManifestEntry(opt_p, sar_p, cut.gt_offset if i < n_labeled else None))
        else:
            test.append(ManifestEntry(opt_p, sar_p, cut.gt_offset))
    paths = {"train": out / "train.csv", "train_truth": out / "train_truth.csv", "test": out / "test.csv"}
    save_manifest(train, paths["train"])
    save_manifest(truth, paths["train_truth"])
    save_manifest(test, paths["test"])
    return paths


# ---------------------------------------------------------------------------
# batching

@dataclass
class Batch:
    kind: str
    pairs: list[ImagePair]
    epoch: int = 0

    @property
    def labeled(self) -> bool:
        return self.kind == "labeled"

    def tensors(self) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor | None]:
        opt = torch.from_numpy(np.stack([p.optical for p in self.pairs])[:, None]).float()
        sar = torch.from_numpy(np.stack([p.sar for p in self.pairs])[:, None]).float()
        gts = [p.gt_offset for p in self.pairs]
        gt = torch.tensor(gts, dtype=torch.long) if all(g is not None for g in gts) else None
        return opt, sar, gt


def parse_ratio(ratio) -> tuple[int, int]:
    """``"1:15"`` or ``(1, 15)`` or ``15`` (unlabeled batches per labeled batch)."""
    if isinstance(ratio, str):
        a, _, b = ratio.partition(":")
        out = (int(a), int(b)) if b else (1, int(a))
    elif isinstance(ratio, int):
        out = (1, ratio)
    else:
        out = (int(ratio[0]), int(ratio[1]))
    if out[0] < 0 or out[1] < 0 or out == (0, 0):
        raise ValueError(f"invalid labeled ratio {ratio!r}")
    return out


def materialize(sample, seed: int, epoch: int, index: int, template_size: int,
                static_crops: bool = False, labeled: bool | None = None) -> ImagePair:
    """Concrete pair for one epoch; aligned pairs are re-cut each epoch unless static."""
    if isinstance(sample, ImagePair):
        return sample
    rng = np.random.default_rng([seed, 0 if static_crops else epoch, index])
    flag = sample.labeled if labeled is None else labeled
    return crop_template(sample.optical, sample.sar, template_size, rng, labeled=flag)


def batch_iterator(labeled: list, unlabeled: list, batch_size: int = 16, labeled_ratio="1:15",
                   seed: int = 0, epoch: int = 0, template_size: int = TEMPLATE_SIZE,
                   static_crops: bool = False) -> Iterator[Batch]:
    """One epoch of batches interleaved ``n_l`` labeled then ``n_u`` unlabeled per cycle.

    The epoch ends when the unlabeled pool is used up (or, with no unlabeled
    batches in the ratio, when the labeled pool is). The labeled pool
    recycles. Order depends only on ``seed``, ``epoch`` and pool order.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    n_l, n_u = parse_ratio(labeled_ratio)
    if n_l > 0 and not labeled:
        raise ValueError("labeled batches requested but the labeled pool is empty")
    if n_u > 0 and not unlabeled and n_l == 0:
        raise ValueError("unlabeled batches requested but the unlabeled pool is empty")
    rng = np.random.default_rng([seed, epoch, 11])
    u_order = rng.permutation(len(unlabeled)) if n_u > 0 else np.array([], dtype=int)
    l_perm = rng.permutation(len(labeled)) if labeled else np.array([], dtype=int)

    def labeled_stream():
        perm, k, cycle = l_perm, 0, 0
        while True:
            if k == len(perm):
                cycle += 1
                perm = np.random.default_rng([seed, epoch, 13, cycle]).permutation(len(labeled))
                k = 0
            yield int(perm[k])
            k += 1

    lstream = labeled_stream()
    if n_u == 0 or not unlabeled:
        n_batches = math.ceil(len(labeled) / batch_size) if n_u == 0 else 0
        for _ in range(n_batches):
            idx = [next(lstream) for _ in range(batch_size)]
            yield Batch("labeled", [materialize(labeled[i], seed, epoch, i, template_size, static_crops, True)
                                    for i in idx], epoch)
        return
    u_batches = [u_order[i:i + batch_size] for i in range(0, len(u_order), batch_size)]
    ub = 0
    while ub < len(u_batches):
        for _ in range(n_l):
            idx = [next(lstream) for _ in range(batch_size)]
            yield Batch("labeled", [materialize(labeled[i], seed, epoch, i, template_size, static_crops, True)
                                    for i in idx], epoch)
        for _ in range(n_u):
            if ub == len(u_batches):
                break
            yield Batch("unlabeled",
                        [materialize(unlabeled[i], seed, epoch, len(labeled) + int(i), template_size, static_crops,
                                     False) for i in u_batches[ub]], epoch)
            ub += 1
