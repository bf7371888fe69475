"""Synthetic vessel-like datasets and PGM/PFM file I/O."""
from __future__ import annotations

import hashlib
import re
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError, FormatError

SPLIT_IDS = {"train": 0, "test": 1}


class ClampWarning(UserWarning):
    """Probability map values outside [0, 1] were clamped on read."""


# PGM

_PNM_HEADER = re.compile(rb"(P[0-9a-zA-Z])\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s")


def write_pgm(path, array: np.ndarray, mask: bool = False) -> None:
    """Write an ``H x W`` array as binary P5.

    Images in [0, 1] are scaled by 255 and rounded; masks must be {0, 1} and
    map to bytes {0, 255}.
    """
    a = np.asarray(array, dtype=np.float64)
    if a.ndim != 2:
        raise ContractError(f"PGM needs a 2-d array, got shape {a.shape}")
    if mask:
        if not np.isin(a, (0.0, 1.0)).all():
            raise ContractError("mask values must be 0 or 1")
        raw = (a * 255).astype(np.uint8)
    else:
        if a.min() < 0 or a.max() > 1:
            raise ContractError("image values must lie in [0, 1]")
        raw = np.rint(a * 255).astype(np.uint8)
    h, w = a.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + raw.tobytes())


def read_pgm(path, mask: bool = False) -> np.ndarray:
    """Read a binary P5 file with maxval 255 into float64 values in [0, 1]."""
    raw = Path(path).read_bytes()
    m = _PNM_HEADER.match(raw)
    if m is None:
        raise FormatError(f"{path}: malformed PGM header at offset 0")
    magic, w, h, maxval = m.group(1), int(m.group(2)), int(m.group(3)), int(m.group(4))
    if magic != b"P5":
        raise FormatError(f"{path}: expected magic P5 at offset 0, got {magic.decode(errors='replace')}")
    if maxval != 255:
        raise FormatError(f"{path}: maxval must be 255, got {maxval} (header ends at offset {m.end()})")
    body = raw[m.end():]
    if len(body) != w * h:
        raise FormatError(f"{path}: expected {w * h} bytes of pixel data at offset {m.end()}, got {len(body)}")
    pix = np.frombuffer(body, dtype=np.uint8).reshape(h, w)
    if mask:
        if not np.isin(pix, (0, 255)).all():
            bad = int(np.flatnonzero(~np.isin(pix, (0, 255)))[0])
            raise FormatError(f"{path}: mask byte not in {{0,255}} at offset {m.end() + bad}")
        return (pix == 255).astype(np.float64)
    return pix.astype(np.float64) / 255.0


# PFM

def write_pfm(path, probs: np.ndarray) -> None:
    """Grayscale little-endian PFM, rows stored bottom-up."""
    a = np.asarray(probs, dtype=np.float64)
    if a.ndim != 2:
        raise ContractError(f"PFM needs a 2-d array, got shape {a.shape}")
    h, w = a.shape
    body = np.ascontiguousarray(np.flipud(a), dtype="<f4").tobytes()
    Path(path).write_bytes(f"Pf\n{w} {h}\n-1.0\n".encode() + body)


def read_pfm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    lines = []
    off = 0
    for _ in range(3):
        nl = raw.find(b"\n", off)
        if nl < 0:
            raise FormatError(f"{path}: header line missing at offset {off}")
        lines.append(raw[off:nl].strip())
        off = nl + 1
    if lines[0] != b"Pf":
        raise FormatError(f"{path}: expected grayscale magic 'Pf' at offset 0, got {lines[0][:8]!r}")
    try:
        w, h = (int(v) for v in lines[1].split())
        scale = float(lines[2])
    except ValueError as exc:
        raise FormatError(f"{path}: unparsable dimensions or scale before offset {off}") from exc
    if scale == 0:
        raise FormatError(f"{path}: scale field must be nonzero")
    dtype = "<f4" if scale < 0 else ">f4"
    body = raw[off:]
    if len(body) != 4 * w * h:
        raise FormatError(f"{path}: expected {4 * w * h} bytes of float data at offset {off}, got {len(body)}")
    a = np.flipud(np.frombuffer(body, dtype=dtype).reshape(h, w)).astype(np.float64)
    if not np.isfinite(a).all():
        raise FormatError(f"{path}: non-finite values in float data")
    outside = int(((a < 0) | (a > 1)).sum())
    if outside:
        warnings.warn(f"{path}: clamped {outside} values into [0, 1]", ClampWarning, stacklevel=2)
        a = np.clip(a, 0.0, 1.0)
    return a


# datasets

@dataclass
class Dataset:
    root: Path
    items: list[tuple[str, str]]
    split: str = "train"

    def __len__(self) -> int:
        return len(self.items)

    def paths(self) -> list[tuple[Path, Path]]:
        return [(self.root / a, self.root / b) for a, b in self.items]

    def load(self) -> tuple[np.ndarray, np.ndarray]:
        """All images and masks stacked as ``N x H x W`` float arrays."""
        imgs, masks = [], []
        for ip, mp in self.paths():
            im, mk = read_pgm(ip), read_pgm(mp, mask=True)
            if im.shape != mk.shape:
                raise ContractError(f"{ip} is {im.shape} but its mask {mp} is {mk.shape}")
            imgs.append(im)
            masks.append(mk)
        return np.stack(imgs), np.stack(masks)

    def manifest_text(self) -> str:
        return "".join(f"{a}\t{b}\n" for a, b in self.items)

    def checksum(self) -> str:
        """sha256 over the manifest and every referenced file, in manifest order."""
        h = hashlib.sha256(self.manifest_text().encode())
        for ip, mp in self.paths():
            h.update(ip.read_bytes())
            h.update(mp.read_bytes())
        return h.hexdigest()


def load_manifest(path, split: str | None = None) -> Dataset:
    path = Path(path)
    items = []
    seen = set()
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise FormatError(f"{path}:{lineno}: expected 'image<TAB>mask'")
        pair = (parts[0], parts[1])
        if pair in seen:
            raise FormatError(f"{path}:{lineno}: duplicate entry {pair[0]}")
        for p in pair:
            if not (path.parent / p).is_file():
                raise FileNotFoundError(f"{path}:{lineno}: {p} does not exist")
        seen.add(pair)
        items.append(pair)
    return Dataset(path.parent, items, split or path.stem)


def write_manifest(ds: Dataset, path) -> None:
    Path(path).write_text(ds.manifest_text(), encoding="utf-8")


@dataclass
class SynthConfig:
    n_images: int = 30
    H: int = 64
    W: int = 64
    n_curves: int = 6
    thickness: tuple[float, float] = (1.0, 2.5)
    noise_sigma: float = 0.05
    seed: int = 7
    fg_range: tuple[float, float] = field(default=(0.02, 0.4))
    max_retries: int = 200

    def validate(self) -> None:
        if self.n_images < 1 or self.H < 4 or self.W < 4 or self.n_curves < 0:
            raise ConfigError(f"invalid synthetic config {self}")
        lo, hi = self.thickness
        if not 0 < lo <= hi:
            raise ConfigError(f"thickness range must satisfy 0 < lo <= hi, got {self.thickness}")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be nonnegative")


def _curve_mask(rng: np.random.Generator, cfg: SynthConfig) -> np.ndarray:
    h, w = cfg.H, cfg.W
    yy, xx = np.mgrid[0:h, 0:w]
    pix = np.stack([yy.ravel(), xx.ravel()], axis=1).astype(np.float64)
    mask = np.zeros(h * w, dtype=bool)
    t = np.linspace(0.0, 1.0, 4 * max(h, w))[:, None]
    for _ in range(cfg.n_curves):
        # endpoints on the border region, control point anywhere: long vessel-like arcs
        p0 = rng.uniform([0, 0], [h - 1, w - 1])
        p2 = rng.uniform([0, 0], [h - 1, w - 1])
        p1 = rng.uniform([-0.25 * h, -0.25 * w], [1.25 * h, 1.25 * w])
        pts = (1 - t) ** 2 * p0 + 2 * (1 - t) * t * p1 + t ** 2 * p2
        radius = rng.uniform(*cfg.thickness) / 2.0
        d2 = ((pix[:, :1] - pts[:, 0]) ** 2 + (pix[:, 1:] - pts[:, 1]) ** 2).min(axis=1)
        mask |= d2 <= radius ** 2
    return mask.reshape(h, w).astype(np.float64)


def _background(rng: np.random.Generator, cfg: SynthConfig) -> np.ndarray:
    yy, xx = np.mgrid[0:cfg.H, 0:cfg.W]
    u, v = yy / max(cfg.H - 1, 1), xx / max(cfg.W - 1, 1)
    a, b, c = rng.uniform(-0.15, 0.15, 3)
    cy, cx = rng.uniform(0.3, 0.7, 2)
    vignette = ((u - cy) ** 2 + (v - cx) ** 2)
    return 0.7 + a * u + b * v + c * np.sin(np.pi * u) * np.cos(np.pi * v) - 0.3 * vignette


def synthesize(cfg: SynthConfig, split: str = "train") -> tuple[np.ndarray, np.ndarray]:
    """Generate ``(images, masks)`` as ``N x H x W`` arrays; images are min-max scaled to [0, 1]."""
    cfg.validate()
    rng = np.random.default_rng([cfg.seed, SPLIT_IDS.get(split, 2)])
    lo, hi = cfg.fg_range
    images, masks = [], []
    for _ in range(cfg.n_images):
        for _attempt in range(cfg.max_retries):
            mask = _curve_mask(rng, cfg)
            if cfg.n_curves == 0 or lo <= mask.mean() <= hi:
                break
        else:
            raise ConfigError(f"could not reach foreground fraction in [{lo}, {hi}] "
                              f"after {cfg.max_retries} attempts; adjust n_curves/thickness")
        contrast = rng.uniform(0.25, 0.4)
        img = _background(rng, cfg) - contrast * mask
        img = img + rng.normal(0.0, cfg.noise_sigma, img.shape)
        img = (img - img.min()) / (img.max() - img.min())
        images.append(img)
        masks.append(mask)
    return np.stack(images), np.stack(masks)


def write_dataset(root, split: str, images: np.ndarray, masks: np.ndarray) -> Dataset:
    root = Path(root)
    (root / split / "images").mkdir(parents=True, exist_ok=True)
    (root / split / "masks").mkdir(parents=True, exist_ok=True)
    items = []
    for i, (img, mk) in enumerate(zip(images, masks)):
        ip, mp = f"{split}/images/{i:04d}.pgm", f"{split}/masks/{i:04d}.pgm"
        write_pgm(root / ip, img)
        write_pgm(root / mp, mk, mask=True)
        items.append((ip, mp))
    ds = Dataset(root, items, split)
    write_manifest(ds, root / f"{split}.txt")
    return ds


def generate_synthetic(cfg: SynthConfig, root, split: str = "train") -> Dataset:
    images, masks = synthesize(cfg, split)
    return write_dataset(root, split, images, masks)
