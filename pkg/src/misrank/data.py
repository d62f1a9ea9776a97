"""Identity datasets: synthetic generation, reid_dir / manifest ingestion and PK batching."""
from __future__ import annotations

import math
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
import torch
from PIL import Image

SPLITS = ("train", "query", "gallery")
DEFAULT_SIZE = (64, 32)
_NAME_RE = re.compile(r"^(-?\d+)_c(\d+)_(\d+)\.(png|jpg|jpeg|bmp)$", re.IGNORECASE)


class ConfigurationError(ValueError):
    pass


class IngestionError(RuntimeError):
    pass


@dataclass(frozen=True)
class Record:
    path: str  # relative to the manifest root
    person_id: int
    camera_id: int
    split: str


@dataclass
class DatasetManifest:
    """Records plus the decoded pixels.

    ``images`` is uint8 [N, 3, H, W] aligned with ``records``. ``figure_masks`` is a
    bool [N, H, W] foreground map, only known for synthetic data.
    """

    root: str | None
    records: list[Record]
    num_ids: int
    size: tuple[int, int]
    images: np.ndarray
    figure_masks: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def indices(self, split: str) -> np.ndarray:
        return np.array([i for i, r in enumerate(self.records) if r.split == split], dtype=np.int64)

    def person_ids(self, split: str | None = None) -> np.ndarray:
        return np.array([r.person_id for r in self.records if split is None or r.split == split], dtype=np.int64)

    def camera_ids(self, split: str | None = None) -> np.ndarray:
        return np.array([r.camera_id for r in self.records if split is None or r.split == split], dtype=np.int64)

    def tensor(self, split: str | None = None, idx: np.ndarray | None = None) -> torch.Tensor:
        """Float pixels in [0, 1] for a split (or explicit indices)."""
        if idx is None:
            idx = self.indices(split) if split is not None else np.arange(len(self.records))
        return torch.from_numpy(self.images[idx].astype(np.float32) / 255.0)

    def validate(self) -> None:
        h, w = self.size
        check_size(h, w)
        if self.images.shape != (len(self.records), 3, h, w):
            raise ConfigurationError(f"pixel array shape {self.images.shape} does not match {len(self.records)} records at {h}x{w}")
        if self.images.dtype != np.uint8:
            raise ConfigurationError("pixels must be stored as uint8")
        train = set(self.person_ids("train").tolist())
        test = set(self.person_ids("query").tolist()) | set(self.person_ids("gallery").tolist())
        if train & test:
            raise ConfigurationError(f"train and test identities overlap: {sorted(train & test)[:5]}")
        if len(train) != self.num_ids:
            raise ConfigurationError(f"num_ids={self.num_ids} but {len(train)} distinct train identities")


def check_size(h: int, w: int) -> None:
    if h <= 0 or w <= 0 or h % 32 or w % 32:
        raise ConfigurationError(f"image size must be positive multiples of 32, got {h}x{w}")


# ---------------------------------------------------------------------------
# synthetic identities


def _hsv_to_rgb(h: np.ndarray, s: np.ndarray, v: np.ndarray) -> np.ndarray:
    i = np.floor(h * 6.0).astype(int) % 6
    f = h * 6.0 - np.floor(h * 6.0)
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    table = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)]
    out = np.empty(h.shape + (3,))
    for k, (r, g, b) in enumerate(table):
        sel = i == k
        out[sel] = np.stack([r, g, b], -1)[sel]
    return out


def _identity_palettes(rng: np.random.Generator, n: int) -> dict[str, np.ndarray]:
    def colors(s_lo, s_hi, v_lo, v_hi):
        return _hsv_to_rgb(rng.random(n), rng.uniform(s_lo, s_hi, n), rng.uniform(v_lo, v_hi, n))

    return {
        "shirt": colors(0.45, 1.0, 0.35, 0.95),
        "shirt2": colors(0.2, 1.0, 0.15, 0.95),
        "pants": colors(0.2, 0.9, 0.15, 0.8),
        "hair": colors(0.1, 0.6, 0.05, 0.5),
        "skin": _hsv_to_rgb(rng.uniform(0.02, 0.1, n), rng.uniform(0.25, 0.6, n), rng.uniform(0.45, 0.95, n)),
        "texture": rng.integers(0, 4, n),  # solid, horizontal stripes, vertical stripes, check
        "period": rng.choice([4, 6, 8], n),
        "bag": rng.random(n) < 0.5,
    }


def _render_figure(pal: dict, pid: int, h: int, w: int, dy: int, dx: int) -> tuple[np.ndarray, np.ndarray]:
    """Identity-specific figure on the shared silhouette. Returns (rgb [H,W,3], mask [H,W])."""
    y, x = np.mgrid[0:h, 0:w].astype(np.float64)
    y = (y - dy) / h
    x = (x - dx) / w
    rgb = np.zeros((h, w, 3))
    mask = np.zeros((h, w), dtype=bool)

    def paint(region, color):
        rgb[region] = color
        mask[region] = True

    torso = (y >= 0.25) & (y < 0.58) & (x >= 0.27) & (x < 0.73)
    arms = (y >= 0.27) & (y < 0.55) & (((x >= 0.14) & (x < 0.27)) | ((x >= 0.73) & (x < 0.86)))
    legs = (y >= 0.58) & (y < 0.93) & (((x >= 0.3) & (x < 0.48)) | ((x >= 0.52) & (x < 0.7)))
    head = ((y - 0.15) / 0.09) ** 2 + ((x - 0.5) / 0.17) ** 2 <= 1.0
    hair = head & (y < 0.12)

    period = int(pal["period"][pid])
    yy, xx = np.mgrid[0:h, 0:w]
    yy, xx = yy - dy, xx - dx
    tex = int(pal["texture"][pid])
    if tex == 0:
        alt = np.zeros((h, w), dtype=bool)
    elif tex == 1:
        alt = (yy // (period // 2)) % 2 == 1
    elif tex == 2:
        alt = (xx // (period // 2)) % 2 == 1
    else:
        alt = ((yy // (period // 2)) + (xx // (period // 2))) % 2 == 1

    paint(legs, pal["pants"][pid])
    paint(torso | arms, pal["shirt"][pid])
    paint((torso | arms) & alt, pal["shirt2"][pid])
    paint(head, pal["skin"][pid])
    paint(hair, pal["hair"][pid])
    if pal["bag"][pid]:
        paint((y >= 0.32) & (y < 0.5) & (x >= 0.62) & (x < 0.78), pal["shirt2"][pid] * 0.5)
    return rgb, mask


def gen_synthetic_dataset(num_ids: int = 32, imgs_per_id: int = 16, size: tuple[int, int] = DEFAULT_SIZE,
                          seed: int = 0, num_cameras: int = 4, lighting: float = 1.0) -> DatasetManifest:
    """Procedural person-like identities rendered under per-image nuisance.

    ``lighting`` scales the half-widths of the camera tint, camera gain and per-image
    brightness jitter (1.0: tint +-7%, gain 0.85-1.1, brightness +-15%).

    The first half of the identities form the train split; the rest are held out,
    with camera 0 images as queries and the other cameras as gallery.
    """
    h, w = size
    check_size(h, w)
    if num_ids < 4:
        raise ConfigurationError("num_ids must be >= 4")
    if imgs_per_id < 4:
        raise ConfigurationError("imgs_per_id must be >= 4")
    num_cameras = max(2, min(num_cameras, imgs_per_id))

    rng = np.random.default_rng(seed)
    pal = _identity_palettes(rng, num_ids)
    cam_tint = 1.0 + lighting * rng.uniform(-0.07, 0.07, (num_cameras, 3))
    cam_gain = 0.975 + lighting * rng.uniform(-0.125, 0.125, num_cameras)
    n_train = num_ids // 2

    images, masks, records = [], [], []
    for pid in range(num_ids):
        for idx in range(imgs_per_id):
            cam = idx % num_cameras
            dy, dx = rng.integers(-3, 4), rng.integers(-2, 3)
            fig, fmask = _render_figure(pal, pid, h, w, int(dy), int(dx))
            top, bottom = rng.uniform(0.15, 0.85, 3), rng.uniform(0.15, 0.85, 3)
            ramp = np.linspace(0.0, 1.0, h)[:, None, None]
            bg = top * (1 - ramp) + bottom * ramp + rng.normal(0.0, 0.04, (h, w, 3))
            img = np.where(fmask[..., None], fig + rng.normal(0.0, 0.02, (h, w, 3)), bg)
            img = img * cam_tint[cam] * cam_gain[cam] * (1.0 + lighting * rng.uniform(-0.15, 0.15))
            images.append(np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8).transpose(2, 0, 1))
            masks.append(fmask)
            if pid < n_train:
                split = "train"
            else:
                split = "query" if cam == 0 else "gallery"
            records.append(Record(f"{split}/{pid:04d}_c{cam}_{idx}.png", pid, cam, split))

    manifest = DatasetManifest(
        root=None, records=records, num_ids=n_train, size=(h, w),
        images=np.stack(images), figure_masks=np.stack(masks),
        meta={"generator": "synthetic", "seed": seed, "num_ids": num_ids, "imgs_per_id": imgs_per_id},
    )
    manifest.validate()
    return manifest


# ---------------------------------------------------------------------------
# disk formats


def export_reid_dir(manifest: DatasetManifest, root: str | os.PathLike) -> Path:
    """Write PNGs in the reid_dir layout plus ``manifest.tsv`` (and figure masks when known)."""
    root = Path(root)
    for split in SPLITS:
        (root / split).mkdir(parents=True, exist_ok=True)
    for i, rec in enumerate(manifest.records):
        Image.fromarray(manifest.images[i].transpose(1, 2, 0)).save(root / rec.path)
        if manifest.figure_masks is not None:
            mpath = root / "masks" / rec.path
            mpath.parent.mkdir(parents=True, exist_ok=True)
            Image.fromarray(manifest.figure_masks[i]).save(mpath)
    write_manifest_file(manifest, root / "manifest.tsv")
    return root


def write_manifest_file(manifest: DatasetManifest, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in manifest.records:
            fh.write(f"{r.path}\t{r.person_id}\t{r.camera_id}\t{r.split}\n")


def _read_image(path: Path, size: tuple[int, int]) -> np.ndarray:
    with Image.open(path) as im:
        im = im.convert("RGB")
        if im.size != (size[1], size[0]):
            im = im.resize((size[1], size[0]), Image.BILINEAR)
        return np.asarray(im, dtype=np.uint8).transpose(2, 0, 1).copy()


def _read_mask(path: Path, size: tuple[int, int]) -> np.ndarray:
    with Image.open(path) as im:
        im = im.convert("L")
        if im.size != (size[1], size[0]):
            im = im.resize((size[1], size[0]), Image.NEAREST)
        return np.asarray(im) > 0


def _scan_reid_dir(root: Path) -> list[tuple[str, int, int, str]]:
    rows = []
    for split in SPLITS:
        folder = root / split
        if not folder.is_dir():
            raise IngestionError(f"missing split directory {folder}")
        names = sorted(n for n in os.listdir(folder) if not n.startswith("."))
        if not names:
            raise IngestionError(f"empty split: {folder}")
        for name in names:
            m = _NAME_RE.match(name)
            if m is None:
                raise IngestionError(f"cannot parse identity from file name {name!r} in {folder}")
            pid = int(m.group(1))
            if pid < 0:  # Market1501 junk / distractor images
                continue
            rows.append((f"{split}/{name}", pid, int(m.group(2)), split))
    return rows


def _read_manifest_file(path: Path) -> list[tuple[str, int, int, str]]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 4 or parts[3] not in SPLITS:
                raise IngestionError(f"{path}:{lineno}: expected 'path<TAB>person_id<TAB>camera_id<TAB>split'")
            try:
                rows.append((parts[0], int(parts[1]), int(parts[2]), parts[3]))
            except ValueError as exc:
                raise IngestionError(f"{path}:{lineno}: {exc}") from None
    for split in SPLITS:
        if not any(r[3] == split for r in rows):
            raise IngestionError(f"empty split: {split}")
    return rows


def load_dataset(root: str | os.PathLike, layout: str = "reid_dir",
                 size: tuple[int, int] = DEFAULT_SIZE) -> DatasetManifest:
    """Read a reid_dir tree or a manifest file.

    Identities are re-indexed densely: train ids become 0..K-1, held-out ids follow.
    ``root`` is the dataset directory for reid_dir, and either the directory holding
    ``manifest.tsv`` or the file itself for manifest_file.
    """
    check_size(*size)
    root = Path(root)
    if layout == "reid_dir":
        rows = _scan_reid_dir(root)
    elif layout == "manifest_file":
        path = root / "manifest.tsv" if root.is_dir() else root
        root = path.parent
        rows = _read_manifest_file(path)
    else:
        raise ConfigurationError(f"unknown layout {layout!r}")

    train_ids = sorted({r[1] for r in rows if r[3] == "train"})
    test_ids = sorted({r[1] for r in rows if r[3] != "train"} - set(train_ids))
    if {r[1] for r in rows if r[3] != "train"} & set(train_ids):
        raise IngestionError("train and query/gallery identities overlap")
    remap = {pid: i for i, pid in enumerate(train_ids + test_ids)}

    records, images, masks = [], [], []
    have_masks = (root / "masks").is_dir()
    for path, pid, cam, split in rows:
        full = root / path
        if not full.is_file():
            raise IngestionError(f"referenced image does not exist: {full}")
        records.append(Record(path, remap[pid], cam, split))
        images.append(_read_image(full, size))
        if have_masks:
            mpath = root / "masks" / path
            have_masks = mpath.is_file()
            if have_masks:
                masks.append(_read_mask(mpath, size))

    manifest = DatasetManifest(
        root=str(root), records=records, num_ids=len(train_ids), size=tuple(size),
        images=np.stack(images), figure_masks=np.stack(masks) if have_masks else None,
        meta={"layout": layout},
    )
    manifest.validate()
    return manifest


# ---------------------------------------------------------------------------
# PK sampling


@dataclass
class PKBatch:
    images: torch.Tensor  # [P*C, 3, H, W] in [0, 1]
    person_ids: torch.Tensor  # [P*C]
    camera_ids: torch.Tensor
    indices: np.ndarray  # rows of the manifest
    P: int
    C: int


def pk_batches(manifest: DatasetManifest, P: int, C: int, seed: int, epoch: int = 0) -> Iterator[PKBatch]:
    """One epoch of identity-balanced batches: P identities times C images each.

    An epoch makes enough passes over the shuffled identities to draw roughly every
    train image once. Every identity appears in each pass; a short last group is topped up
    with the least-used other identities. Identities with fewer than C images are
    sampled with replacement.
    """
    if P < 2 or C < 2:
        raise ConfigurationError("P and C must both be >= 2")
    train_idx = manifest.indices("train")
    pids = manifest.person_ids("train")
    ids = np.unique(pids)
    if P > len(ids):
        raise ConfigurationError(f"P={P} exceeds the {len(ids)} train identities")
    by_id = {pid: train_idx[pids == pid] for pid in ids}

    rng = np.random.default_rng([seed, epoch])
    passes = max(1, round(len(train_idx) / (len(ids) * C)))
    groups = []
    used = dict.fromkeys(ids.tolist(), 0)
    for _ in range(passes):
        order = rng.permutation(ids)
        for b in range(math.ceil(len(order) / P)):
            group = [int(v) for v in order[b * P:(b + 1) * P]]
            if len(group) < P:
                # top up with the least-used identities so counts stay balanced
                rest = np.setdiff1d(ids, group)
                keys = rng.random(len(rest))
                rest = sorted(rest.tolist(), key=lambda pid, k=dict(zip(rest.tolist(), keys)): (used[pid], k[pid]))
                group += rest[:P - len(group)]
            for pid in group:
                used[pid] += 1
            groups.append(group)
    for group in groups:
        rows = []
        for pid in group:
            pool = by_id[pid]
            rows.append(rng.choice(pool, C, replace=len(pool) < C))
        rows = np.concatenate(rows)
        yield PKBatch(
            images=manifest.tensor(idx=rows),
            person_ids=torch.tensor([manifest.records[i].person_id for i in rows]),
            camera_ids=torch.tensor([manifest.records[i].camera_id for i in rows]),
            indices=rows, P=P, C=C,
        )
