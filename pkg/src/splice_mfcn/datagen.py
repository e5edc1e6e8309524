"""Synthetic spliced images with exact surface masks.

A host texture and a donor texture are generated from value noise with
different statistics; the donor is pasted inside a random ellipse or
star-shaped polygon.
"""

import csv
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from PIL import Image
from scipy import ndimage

from .masks import MANIPULATED_IS_BLACK, boundary, save_mask

REGION_KINDS = ("ellipse", "polygon", "mixed")
MAX_RETRIES = 200


class GenerationError(RuntimeError):
    pass


@dataclass
class TextureStats:
    noise_amplitude: float
    correlation_length: float


@dataclass
class GenParams:
    size: tuple = (64, 64)
    region: str = "mixed"
    area_range: tuple = (0.05, 0.30)
    host: TextureStats = field(default_factory=lambda: TextureStats(12.0, 8.0))
    donor: TextureStats = field(default_factory=lambda: TextureStats(5.0, 2.0))
    min_color_distance: float = 40.0
    blend: bool = False
    seed: int = 0

    def validate(self):
        lo, hi = self.area_range
        if not 0 < lo <= hi < 1:
            raise ValueError(f"area_range must satisfy 0 < lo <= hi < 1, got {self.area_range}")
        if self.region not in REGION_KINDS:
            raise ValueError(f"region must be one of {REGION_KINDS}, got {self.region!r}")
        h, w = self.size
        if h < 8 or w < 8:
            raise ValueError(f"image size too small: {self.size}")
        if self.min_color_distance < 0:
            raise ValueError("min_color_distance must be >= 0")
        return self


def value_noise(rng, shape, correlation_length):
    """Smooth zero-mean, unit-std noise with features about ``correlation_length`` pixels wide."""
    h, w = shape
    cl = max(float(correlation_length), 1.0)
    gh = int(np.ceil(h / cl)) + 2
    gw = int(np.ceil(w / cl)) + 2
    grid = rng.standard_normal((gh, gw))
    ys = np.arange(h) / cl + 0.5
    xs = np.arange(w) / cl + 0.5
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    out = ndimage.map_coordinates(grid, [yy, xx], order=3, mode="nearest")
    std = out.std()
    return (out - out.mean()) / std if std > 0 else out


def texture(rng, shape, base_color, stats):
    h, w = shape
    chans = [base_color[c] + stats.noise_amplitude * value_noise(rng, shape, stats.correlation_length)
             for c in range(3)]
    return np.stack(chans, axis=-1).reshape(h, w, 3)


def _ellipse(rng, h, w):
    cy, cx = rng.uniform(0.2 * h, 0.8 * h), rng.uniform(0.2 * w, 0.8 * w)
    ay, ax = rng.uniform(0.12, 0.4) * h, rng.uniform(0.12, 0.4) * w
    theta = rng.uniform(0, np.pi)
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    dy, dx = yy - cy, xx - cx
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    return (u / ax) ** 2 + (v / ay) ** 2 <= 1.0


def _polygon(rng, h, w):
    k = int(rng.integers(3, 9))
    cy, cx = rng.uniform(0.25 * h, 0.75 * h), rng.uniform(0.25 * w, 0.75 * w)
    angles = np.sort(rng.uniform(0, 2 * np.pi, k))
    radius = rng.uniform(0.15, 0.45, k) * min(h, w)
    vy = cy + radius * np.sin(angles)
    vx = cx + radius * np.cos(angles)
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    inside = np.zeros((h, w), dtype=bool)
    j = k - 1
    for i in range(k):
        # even-odd crossing test against edge (j -> i)
        yi, xi, yj, xj = vy[i], vx[i], vy[j], vx[j]
        crosses = (yi > yy) != (yj > yy)
        with np.errstate(divide="ignore", invalid="ignore"):
            x_at = (xj - xi) * (yy - yi) / (yj - yi) + xi
        inside ^= crosses & (xx < x_at)
        j = i
    return inside


def _region(rng, params):
    h, w = params.size
    kind = params.region
    if kind == "mixed":
        kind = "ellipse" if rng.random() < 0.5 else "polygon"
    return _ellipse(rng, h, w) if kind == "ellipse" else _polygon(rng, h, w)


def _single_component(mask):
    _, n = ndimage.label(mask, structure=np.ones((3, 3), bool))
    return n == 1


def generate_sample(params):
    """Return ``(image uint8 (h, w, 3), surface mask uint8 (h, w))`` for ``params.seed``."""
    params.validate()
    rng = np.random.default_rng(params.seed)
    h, w = params.size
    lo, hi = params.area_range
    for _ in range(MAX_RETRIES):
        region = _region(rng, params)
        frac = region.mean()
        if not (lo <= frac <= hi) or not _single_component(region):
            continue
        host_color = rng.uniform(40, 215, 3)
        donor_color = rng.uniform(40, 215, 3)
        if np.linalg.norm(host_color - donor_color) < params.min_color_distance:
            continue
        host = texture(rng, (h, w), host_color, params.host)
        donor = texture(rng, (h, w), donor_color, params.donor)
        img = np.where(region[..., None], donor, host)
        if params.blend:
            ring = boundary(region) | boundary(~region)
            img[ring] = 0.5 * (host[ring] + donor[ring])
        img = np.clip(np.rint(img), 0, 255).astype(np.uint8)
        inside = img[region].astype(np.float64).mean(axis=0)
        outside = img[~region].astype(np.float64).mean(axis=0)
        if np.linalg.norm(inside - outside) < params.min_color_distance:
            continue
        return img, region.astype(np.uint8)
    raise GenerationError(f"could not generate a valid sample for seed {params.seed} in {MAX_RETRIES} tries")


def sample_seed(root_seed, index):
    return int(np.random.SeedSequence([int(root_seed), int(index)]).generate_state(1)[0])


def sample_id(index):
    return f"{index:05d}"


def _write_sample(i, params, img_dir, mask_dir, convention):
    seed = sample_seed(params.seed, i)
    img, mask = generate_sample(GenParams(**{**params.__dict__, "seed": seed}))
    sid = sample_id(i)
    Image.fromarray(img).save(os.path.join(img_dir, sid + ".png"))
    save_mask(mask, os.path.join(mask_dir, sid + ".png"), convention)
    return {"id": sid, "seed": seed, "area_fraction": float(mask.mean())}


def generate_corpus(n, params, out_dir, convention=MANIPULATED_IS_BLACK, workers=1):
    """Write ``n`` image/mask PNG pairs and ``manifest.csv``; returns manifest rows.

    Samples are independent per seed, so ``workers > 1`` only changes speed.
    """
    if n < 1:
        raise ValueError(f"corpus size must be >= 1, got {n}")
    params.validate()
    img_dir = os.path.join(out_dir, "images")
    mask_dir = os.path.join(out_dir, "masks")
    os.makedirs(img_dir, exist_ok=True)
    os.makedirs(mask_dir, exist_ok=True)
    job = lambda i: _write_sample(i, params, img_dir, mask_dir, convention)
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            rows = list(pool.map(job, range(n)))
    else:
        rows = [job(i) for i in range(n)]
    with open(os.path.join(out_dir, "manifest.csv"), "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["id", "seed", "area_fraction"])
        for r in rows:
            wr.writerow([r["id"], r["seed"], repr(r["area_fraction"])])
    return rows
