"""Synthetic testbeds, PGM ingestion and the quality proxies used by the monitor."""
from __future__ import annotations

import functools
import logging
import os
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)


# -- 8-Gaussian ring -------------------------------------------------------------
@dataclass(frozen=True)
class RingDataset:
    modes: int = 8
    radius: float = 2.0
    std: float = 0.02

    def __post_init__(self):
        if self.modes < 2:
            raise ValueError("ring needs at least 2 modes")

    def centers(self):
        ang = 2 * np.pi * np.arange(self.modes) / self.modes
        return self.radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)

    @property
    def hq_radius(self):
        return 3 * self.std * 10

    def sample(self, n, rng, return_modes=False):
        if n < 1:
            raise ValueError("n must be >= 1")
        idx = rng.integers(self.modes, size=n)
        pts = self.centers()[idx] + self.std * rng.standard_normal((n, 2))
        return (pts, idx) if return_modes else pts

    def quality(self, samples):
        cov, frac = mode_coverage(samples, self)
        return cov / self.modes * frac, cov


def generate_ring(n, config, seed):
    return config.sample(n, np.random.default_rng(seed))


def mode_coverage(samples, ring):
    """``(covered_modes, high_quality_fraction)``.

    A sample is high quality when it lies within ``30*std`` of some center; a
    mode is covered when at least ``max(1, n/(10*M))`` high-quality samples
    sit nearest to it.
    """
    samples = np.asarray(samples, dtype=np.float64).reshape(-1, 2)
    n = len(samples)
    if n == 0:
        return 0, 0.0
    c = ring.centers()
    d = np.sqrt(((samples[:, None, :] - c[None, :, :]) ** 2).sum(-1))
    nearest = d.argmin(axis=1)
    good = d[np.arange(n), nearest] <= ring.hq_radius
    counts = np.bincount(nearest[good], minlength=ring.modes)
    need = max(1, n / (10 * ring.modes))
    return int((counts >= need).sum()), float(good.mean())


# -- procedural shapes ----------------------------------------------------------------
SHAPE_CLASSES = ("square", "circle", "cross")


@dataclass(frozen=True)
class ShapesDataset:
    size: int = 16

    def render(self, label, rng):
        s = self.size
        img = -np.ones((s, s))
        yy, xx = np.mgrid[0:s, 0:s]
        if label == 0:
            w = int(rng.integers(4, 9))
            y0, x0 = rng.integers(0, s - w + 1, size=2)
            img[y0:y0 + w, x0:x0 + w] = 1
        elif label == 1:
            r = rng.uniform(2.5, 4.5)
            cy, cx = rng.uniform(r, s - r, size=2)
            img[(yy - cy) ** 2 + (xx - cx) ** 2 <= r * r] = 1
        else:
            half = int(rng.integers(3, 6))
            cy, cx = rng.integers(half, s - half, size=2)
            img[cy - 1:cy + 1, cx - half:cx + half] = 1
            img[cy - half:cy + half, cx - 1:cx + 1] = 1
        return img

    def sample(self, n, rng, return_labels=False):
        labels = rng.integers(len(SHAPE_CLASSES), size=n)
        imgs = np.stack([self.render(int(k), rng) for k in labels])[:, None]
        return (imgs, labels) if return_labels else imgs

    def prototypes(self):
        return _shape_prototypes(self.size)

    def quality(self, samples, threshold=0.5):
        """Coverage of shape classes by nearest prototype, times the share of
        samples correlating above ``threshold`` with their prototype."""
        protos = self.prototypes()
        x = np.asarray(samples, dtype=np.float64).reshape(len(samples), -1)
        corr = _corr(x, protos)
        best = corr.argmax(axis=1)
        good = corr.max(axis=1) > threshold
        counts = np.bincount(best[good], minlength=len(SHAPE_CLASSES))
        need = max(1, len(x) / (10 * len(SHAPE_CLASSES)))
        covered = int((counts >= need).sum())
        return covered / len(SHAPE_CLASSES) * float(good.mean()), covered


@functools.lru_cache(maxsize=4)
def _shape_prototypes(size, n=300, seed=12345):
    imgs, labels = ShapesDataset(size).sample(n, np.random.default_rng(seed), return_labels=True)
    return np.stack([imgs[labels == k].mean(axis=0).ravel() for k in range(len(SHAPE_CLASSES))])


def _corr(x, protos):
    xc = x - x.mean(axis=1, keepdims=True)
    pc = protos - protos.mean(axis=1, keepdims=True)
    xn = np.linalg.norm(xc, axis=1, keepdims=True)
    pn = np.linalg.norm(pc, axis=1, keepdims=True)
    return (xc @ pc.T) / np.maximum(xn * pn.T, 1e-12)


# -- ingested images ---------------------------------------------------------------------
class IngestError(ValueError):
    pass


def read_pgm(path):
    """Parse a binary (P5) PGM file into a float array scaled to [0, 1]."""
    with open(path, "rb") as fh:
        raw = fh.read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise IngestError(f"{path}: truncated header")
        tokens.append(raw[start:pos])
    if tokens[0] != b"P5":
        raise IngestError(f"{path}: not a binary PGM")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise IngestError(f"{path}: bad header") from None
    if w < 1 or h < 1 or not 0 < maxval < 65536:
        raise IngestError(f"{path}: bad dimensions")
    pos += 1
    dt = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    need = w * h * dt.itemsize
    if len(raw) - pos < need:
        raise IngestError(f"{path}: truncated raster")
    px = np.frombuffer(raw, dtype=dt, count=w * h, offset=pos).reshape(h, w)
    return px.astype(np.float64) / maxval


def write_pgm(path, img01):
    img = np.clip(np.round(np.asarray(img01) * 255), 0, 255).astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode() + img.tobytes())


def center_crop(img, size):
    h, w = img.shape
    if h < size or w < size:
        raise IngestError(f"image {h}x{w} smaller than {size}x{size}")
    top, left = (h - size) // 2, (w - size) // 2
    return img[top:top + size, left:left + size]


@dataclass
class ImageFolder:
    images: np.ndarray       # [N,1,S,S] in [-1,1]
    skipped: int
    files: list

    def sample(self, n, rng):
        idx = rng.integers(len(self.images), size=n)
        return self.images[idx]

    def quality(self, samples):
        """Crude proxy: agreement of per-pixel mean and global spread with the corpus."""
        x = np.asarray(samples, dtype=np.float64)
        mu_r, mu_f = self.images.mean(axis=0), x.mean(axis=0)
        gap = float(((mu_r - mu_f) ** 2).mean()) + (float(self.images.std()) - float(x.std())) ** 2
        return float(np.exp(-4 * gap)), 0


def ingest_images(directory, size=16):
    """Load every ``.pgm`` under ``directory``; unreadable or undersized files are skipped."""
    if not os.path.isdir(directory):
        raise IngestError(f"{directory} is not a directory")
    names = sorted(n for n in os.listdir(directory) if not n.startswith("."))
    if not names:
        raise IngestError(f"{directory} is empty")
    imgs, kept, skipped = [], [], 0
    for name in names:
        path = os.path.join(directory, name)
        if not os.path.isfile(path):
            continue
        try:
            img = center_crop(read_pgm(path), size)
        except (IngestError, OSError) as exc:
            log.info("skipping %s: %s", name, exc)
            skipped += 1
            continue
        imgs.append(img * 2 - 1)
        kept.append(name)
    if not imgs:
        raise IngestError(f"no valid PGM images in {directory} ({skipped} skipped)")
    return ImageFolder(np.stack(imgs)[:, None], skipped, kept)


def make_dataset(cfg):
    if cfg.dataset == "ring":
        return RingDataset(cfg.ring_modes, cfg.ring_radius, cfg.ring_std)
    if cfg.dataset == "shapes":
        return ShapesDataset()
    return ingest_images(cfg.dataset[len("dir:"):])
