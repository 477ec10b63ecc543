"""Identity-labelled image datasets: synthetic generation, augmentation,
preprocessing, and a plain raster + manifest interchange format."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import ContractError, DatasetError


@dataclass
class ReidDataset:
    """Images ``K x C x H x W`` with identity and camera labels per image."""

    images: np.ndarray
    ids: np.ndarray
    cams: np.ndarray
    mean: np.ndarray | None = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.ids = np.asarray(self.ids, dtype=np.int64).reshape(-1)
        self.cams = np.asarray(self.cams, dtype=np.int64).reshape(-1)
        if self.images.ndim != 4 or not (len(self.images) == len(self.ids) == len(self.cams)):
            raise DatasetError(f"inconsistent dataset arrays: images {self.images.shape}, "
                               f"{len(self.ids)} ids, {len(self.cams)} cams")

    def __len__(self) -> int:
        return len(self.ids)

    def __iter__(self) -> Iterator[tuple[np.ndarray, int, int]]:
        for img, pid, cam in zip(self.images, self.ids, self.cams):
            yield img, int(pid), int(cam)

    @property
    def num_ids(self) -> int:
        return int(self.ids.max()) + 1 if len(self) else 0

    @property
    def num_cams(self) -> int:
        return int(self.cams.max()) + 1 if len(self) else 0

    @property
    def image_size(self) -> tuple[int, int]:
        return self.images.shape[2], self.images.shape[3]

    def validate(self, check_cameras: bool = True) -> None:
        if len(self) == 0:
            raise DatasetError("dataset is empty")
        present = np.unique(self.ids)
        if present[0] != 0 or present[-1] != len(present) - 1:
            missing = sorted(set(range(int(present[-1]) + 1)) - set(present.tolist()))
            raise DatasetError(f"identity labels must be contiguous from 0; missing {missing[:10]}")
        if self.cams.min() < 0:
            raise DatasetError("camera labels must be non-negative")
        if check_cameras:
            cams = np.unique(self.cams)
            for pid in present:
                seen = np.unique(self.cams[self.ids == pid])
                if len(seen) != len(cams):
                    raise DatasetError(f"identity {pid} lacks images from cameras "
                                       f"{sorted(set(cams.tolist()) - set(seen.tolist()))}")

    def subset(self, index, relabel: bool = True) -> "ReidDataset":
        """Select records; with ``relabel`` identities are renumbered 0..n-1
        in order of their original label."""
        index = np.asarray(index)
        ids = self.ids[index]
        if relabel:
            _, ids = np.unique(ids, return_inverse=True)
        return ReidDataset(self.images[index], ids, self.cams[index],
                           None if self.mean is None else self.mean.copy())

    def select_ids(self, identities, relabel: bool = True) -> "ReidDataset":
        return self.subset(np.flatnonzero(np.isin(self.ids, np.asarray(identities))), relabel)


def split_identities(dataset: ReidDataset, num_train: int, seed: int) -> tuple[ReidDataset, ReidDataset]:
    """Randomly partition identities into a training and a held-out set."""
    n = dataset.num_ids
    if not 0 <= num_train <= n:
        raise ContractError(f"cannot take {num_train} training identities out of {n}")
    perm = np.random.default_rng(seed).permutation(n)
    return dataset.select_ids(np.sort(perm[:num_train])), dataset.select_ids(np.sort(perm[num_train:]))


# ----------------------------------------------------------------------------
# synthetic identities


def _from_u8(u8: np.ndarray) -> np.ndarray:
    return u8.astype(np.float32) / np.float32(255)


def _quantize(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(img * 255), 0, 255).astype(np.uint8)


def _identity_appearance(rng: np.random.Generator) -> dict:
    return {
        "shirt": rng.uniform(0.05, 0.95, 3),
        "pants": rng.uniform(0.05, 0.95, 3),
        "skin": rng.uniform(0.35, 0.85) * np.array([1.0, 0.8, 0.65]),
        "hair": rng.uniform(0.0, 0.5, 3),
        "pattern": int(rng.integers(0, 4)),  # plain, h-stripes, v-stripes, checker
        "pattern_color": rng.uniform(0.0, 1.0, 3),
        "period": int(rng.integers(2, 5)),
        "waist": rng.uniform(0.5, 0.62),
        "bag": int(rng.integers(0, 3)),  # none, left, right
        "bag_color": rng.uniform(0.0, 1.0, 3),
        "width": rng.uniform(0.55, 0.8),
    }


def _camera_view(rng: np.random.Generator) -> dict:
    return {
        "gain": rng.uniform(0.65, 1.35, 3),
        "offset": rng.uniform(-0.08, 0.08, 3),
        "background": rng.uniform(0.2, 0.8, 3),
        "noise": rng.uniform(0.03, 0.07),
        "dx": int(rng.integers(-1, 2)),
    }


def _render_person(app: dict, H: int, W: int, rng: np.random.Generator, view: dict) -> np.ndarray:
    img = np.empty((3, H, W))
    img[:] = view["background"][:, None, None]
    # background clutter: a few random soft blocks
    for _ in range(int(rng.integers(1, 4))):
        y0, x0 = int(rng.integers(0, H)), int(rng.integers(0, W))
        h, w = int(rng.integers(2, H // 3)), int(rng.integers(2, W // 2))
        img[:, y0:y0 + h, x0:x0 + w] = rng.uniform(0, 1, 3)[:, None, None]

    yy, xx = np.mgrid[0:H, 0:W]
    cx = W / 2 + view["dx"] + rng.uniform(-1.5, 1.5)
    top = 1 + rng.uniform(-1.0, 1.5)
    scale = rng.uniform(0.92, 1.05)
    head_r = 0.09 * H * scale
    head_cy = top + head_r
    half_w = app["width"] * W / 2 * scale
    body_top = head_cy + head_r
    waist = top + app["waist"] * H * scale
    feet = min(H - 0.5, top + 0.97 * H * scale)

    head = (yy - head_cy) ** 2 + ((xx - cx) * 1.3) ** 2 <= head_r ** 2
    hair = head & (yy < head_cy - head_r * 0.2)
    torso = (yy >= body_top) & (yy < waist) & (np.abs(xx - cx) <= half_w)
    legs = (yy >= waist) & (yy < feet) & (np.abs(xx - cx) <= half_w * 0.8) & (np.abs(xx - cx) >= 0.6)

    shirt = np.broadcast_to(app["shirt"][:, None, None], img.shape).copy()
    p = app["period"]
    if app["pattern"] == 1:
        mark = (yy // p) % 2 == 0
    elif app["pattern"] == 2:
        mark = ((xx - int(cx)) // p) % 2 == 0
    elif app["pattern"] == 3:
        mark = ((yy // p) + ((xx - int(cx)) // p)) % 2 == 0
    else:
        mark = np.zeros_like(torso)
    shirt[:, mark] = app["pattern_color"][:, None]

    img[:, torso] = shirt[:, torso]
    img[:, legs] = app["pants"][:, None]
    img[:, head] = app["skin"][:, None]
    img[:, hair] = app["hair"][:, None]
    if app["bag"]:
        side = -1 if app["bag"] == 1 else 1
        bx = cx + side * (half_w + 1)
        bag = (np.abs(xx - bx) <= 1.6) & (yy >= body_top + 0.1 * H) & (yy < waist + 0.05 * H)
        img[:, bag] = app["bag_color"][:, None]

    brightness = rng.uniform(0.85, 1.15)
    img = img * view["gain"][:, None, None] * brightness + view["offset"][:, None, None]
    img += rng.normal(0, view["noise"], img.shape)
    return np.clip(img, 0, 1)


def generate_synthetic(num_ids: int, cams: int = 2, shots_per_cam: int = 4, size: tuple[int, int] = (32, 16),
                       seed: int = 0) -> ReidDataset:
    """Procedural pedestrians: each identity has a fixed clothing layout and
    colors; each camera applies its own color cast, background and offset;
    each shot adds pose jitter, clutter and noise.  Deterministic per seed."""
    if num_ids < 2:
        raise ContractError(f"need at least 2 identities, got {num_ids}")
    if cams < 2:
        raise ContractError(f"need at least 2 cameras, got {cams}")
    H, W = size
    if shots_per_cam < 1 or H < 8 or W < 4:
        raise ContractError(f"degenerate generator settings: shots={shots_per_cam}, size={size}")
    views = [_camera_view(np.random.default_rng([seed, 2, c])) for c in range(cams)]
    images, ids, cam_labels = [], [], []
    for pid in range(num_ids):
        app = _identity_appearance(np.random.default_rng([seed, 1, pid]))
        for c in range(cams):
            for s in range(shots_per_cam):
                rng = np.random.default_rng([seed, 3, pid, c, s])
                images.append(_from_u8(_quantize(_render_person(app, H, W, rng, views[c]))))
                ids.append(pid)
                cam_labels.append(c)
    return ReidDataset(np.stack(images), ids, cam_labels)


# ----------------------------------------------------------------------------
# augmentation and preprocessing


@dataclass
class AugmentConfig:
    translations_per_image: int = 3
    max_shift: tuple[float, float] = (0.05, 0.05)
    horizontal_flip: bool = True
    target_size: tuple[int, int] | None = None

    def __post_init__(self):
        self.max_shift = tuple(float(v) for v in self.max_shift)
        if any(not 0 <= f < 0.5 for f in self.max_shift):
            raise ContractError(f"shift fractions must lie in [0, 0.5), got {self.max_shift}")
        if self.translations_per_image < 0:
            raise ContractError("translations_per_image must be non-negative")
        if self.target_size is not None and min(self.target_size) < 1:
            raise ContractError(f"target size must be positive, got {self.target_size}")


def translate(img: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """Shift content by (dy, dx) pixels, zero-filling exposed borders."""
    out = np.zeros_like(img)
    H, W = img.shape[-2:]
    src_y = slice(max(0, -dy), min(H, H - dy))
    dst_y = slice(max(0, dy), min(H, H + dy))
    src_x = slice(max(0, -dx), min(W, W - dx))
    dst_x = slice(max(0, dx), min(W, W + dx))
    out[..., dst_y, dst_x] = img[..., src_y, src_x]
    return out


def hflip(img: np.ndarray) -> np.ndarray:
    return img[..., ::-1].copy()


def augment(dataset: ReidDataset, cfg: AugmentConfig | None = None, seed: int = 0) -> ReidDataset:
    """Expand every image into the original, ``translations_per_image``
    randomly shifted copies and (optionally) one mirrored copy of the
    original.  Labels are carried over unchanged."""
    cfg = cfg or AugmentConfig()
    if cfg.target_size is not None and tuple(cfg.target_size) != dataset.image_size:
        dataset = ReidDataset(resize_bilinear(dataset.images, tuple(cfg.target_size)), dataset.ids,
                              dataset.cams, dataset.mean)
    H, W = dataset.image_size
    max_dy = int(round(cfg.max_shift[0] * H))
    max_dx = int(round(cfg.max_shift[1] * W))
    rng = np.random.default_rng(seed)
    per = 1 + cfg.translations_per_image + int(cfg.horizontal_flip)
    out = np.empty((len(dataset) * per, *dataset.images.shape[1:]), dtype=np.float32)
    k = 0
    for img in dataset.images:
        out[k] = img
        k += 1
        for _ in range(cfg.translations_per_image):
            dy = int(rng.integers(-max_dy, max_dy + 1))
            dx = int(rng.integers(-max_dx, max_dx + 1))
            out[k] = translate(img, dy, dx)
            k += 1
        if cfg.horizontal_flip:
            out[k] = hflip(img)
            k += 1
    return ReidDataset(out, np.repeat(dataset.ids, per), np.repeat(dataset.cams, per),
                       None if dataset.mean is None else dataset.mean.copy())


def _interp_axis(n_src: int, n_dst: int):
    src = (np.arange(n_dst) + 0.5) * (n_src / n_dst) - 0.5
    src = np.clip(src, 0, n_src - 1)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_src - 1)
    return i0, i1, (src - i0).astype(np.float32)


def resize_bilinear(images: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Half-pixel-centred bilinear resize of ``... x H x W`` arrays."""
    H, W = images.shape[-2:]
    if (H, W) == tuple(size):
        return images.copy()
    y0, y1, wy = _interp_axis(H, size[0])
    x0, x1, wx = _interp_axis(W, size[1])
    rows = images[..., y0, :] * (1 - wy)[:, None] + images[..., y1, :] * wy[:, None]
    return (rows[..., x0] * (1 - wx) + rows[..., x1] * wx).astype(np.float32)


def preprocess(dataset: ReidDataset, target_size: tuple[int, int] | None = None,
               mean: np.ndarray | None = None) -> ReidDataset:
    """Resize, then subtract a per-channel mean.  Without ``mean`` it is
    computed from ``dataset`` (the training partition) and stored on the
    result, so held-out data can be processed with the same value."""
    if len(dataset) == 0:
        raise DatasetError("cannot preprocess an empty dataset")
    images = dataset.images
    if target_size is not None:
        images = resize_bilinear(images, tuple(target_size))
    if mean is None:
        mean = images.astype(np.float64).mean(axis=(0, 2, 3))
    mean = np.asarray(mean, dtype=np.float64)
    out = (images - mean[None, :, None, None]).astype(np.float32)
    return ReidDataset(out, dataset.ids, dataset.cams, mean.copy())


# ----------------------------------------------------------------------------
# raster + manifest interchange


def write_ppm(path, img: np.ndarray) -> None:
    """``img`` is ``3 x H x W`` in [0, 1]; written as binary P6."""
    u8 = _quantize(np.asarray(img))
    if u8.ndim != 3 or u8.shape[0] != 3:
        raise DatasetError(f"expected a 3 x H x W image, got {u8.shape}")
    _, H, W = u8.shape
    header = f"P6\n{W} {H}\n255\n".encode()
    Path(path).write_bytes(header + u8.transpose(1, 2, 0).tobytes())


def _ppm_tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DatasetError("truncated raster header")
        tokens.append(data[start:pos])
    return tokens, pos + 1


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    (magic, w, h, maxval), pos = _ppm_tokens(data, 4)
    if magic != b"P6" or int(maxval) != 255:
        raise DatasetError(f"{path}: unsupported raster (magic {magic!r}, maxval {maxval!r})")
    W, H = int(w), int(h)
    body = data[pos:pos + 3 * W * H]
    if len(body) != 3 * W * H:
        raise DatasetError(f"{path}: raster body truncated")
    return _from_u8(np.frombuffer(body, dtype=np.uint8).reshape(H, W, 3).transpose(2, 0, 1))


def export_directory(dataset: ReidDataset, path, manifest_name: str = "manifest.txt") -> Path:
    """Write every image as a raster plus a ``relative_path identity camera``
    manifest.  Files are written under temporary names and renamed."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    lines = []
    for k, (img, pid, cam) in enumerate(dataset):
        rel = f"id{pid:05d}_c{cam}_{k:06d}.ppm"
        tmp = root / (rel + ".tmp")
        write_ppm(tmp, img)
        os.replace(tmp, root / rel)
        lines.append(f"{rel} {pid} {cam}\n")
    manifest = root / manifest_name
    tmp = root / (manifest_name + ".tmp")
    tmp.write_text("".join(lines))
    os.replace(tmp, manifest)
    return manifest


def load_directory(path, manifest: str = "manifest.txt") -> ReidDataset:
    root = Path(path)
    manifest_path = root / manifest if not Path(manifest).is_absolute() else Path(manifest)
    if not manifest_path.exists():
        raise DatasetError(f"manifest {manifest_path} not found")
    images, ids, cams, seen = [], [], [], {}
    for lineno, raw in enumerate(manifest_path.read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 3:
            raise DatasetError(f"{manifest_path}:{lineno}: expected 'path identity camera', got {raw!r}")
        rel, pid, cam = parts
        try:
            pid, cam = int(pid), int(cam)
        except ValueError:
            raise DatasetError(f"{manifest_path}:{lineno}: identity and camera must be integers") from None
        if rel in seen:
            raise DatasetError(f"{manifest_path}:{lineno}: duplicate entry {rel!r} (first on line {seen[rel]})")
        seen[rel] = lineno
        file = root / rel
        if not file.exists():
            raise DatasetError(f"{manifest_path}:{lineno}: missing image file {rel!r}")
        images.append(read_ppm(file))
        ids.append(pid)
        cams.append(cam)
    if not images:
        raise DatasetError(f"{manifest_path}: no records")
    shapes = {img.shape for img in images}
    if len(shapes) != 1:
        raise DatasetError(f"{manifest_path}: images have differing sizes {sorted(shapes)}")
    ds = ReidDataset(np.stack(images), ids, cams)
    ds.validate(check_cameras=False)
    return ds


@dataclass
class Benchmark:
    train: ReidDataset
    test: ReidDataset
    holdout: ReidDataset


def desk_benchmark(num_train_ids: int = 50, num_test_ids: int = 50, cams: int = 2, shots_per_cam: int = 4,
                   size: tuple[int, int] = (32, 16), seed: int = 0, augment_cfg: AugmentConfig | None = None,
                   holdout_shots: int = 1) -> Benchmark:
    """Synthetic train / held-out benchmark.

    Identities are split into disjoint training and test sets.  For every
    training identity, ``holdout_shots`` extra shots per camera are kept out
    of training (a fixed batch for monitoring intra-class spread).  The
    training set is augmented, then the training mean is subtracted from all
    three parts.
    """
    per_cam = shots_per_cam + holdout_shots
    full = generate_synthetic(num_train_ids + num_test_ids, cams, per_cam, size, seed)
    shot = np.tile(np.arange(per_cam), len(full) // per_cam)
    is_train_id = full.ids < num_train_ids
    train = full.subset(np.flatnonzero(is_train_id & (shot < shots_per_cam)))
    holdout = full.subset(np.flatnonzero(is_train_id & (shot >= shots_per_cam)))
    test = full.subset(np.flatnonzero(~is_train_id & (shot < shots_per_cam)))
    if augment_cfg is not None:
        train = augment(train, augment_cfg, seed)
    train = preprocess(train)
    return Benchmark(train, preprocess(test, mean=train.mean), preprocess(holdout, mean=train.mean)
                     if len(holdout) else holdout)
