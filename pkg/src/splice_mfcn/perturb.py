"""Robustness perturbations: JPEG recompression, Gaussian blur, AWGN."""

import io
import math

import numpy as np
from PIL import Image

# ITU-T T.81 Annex K example tables, natural (row-major) order.
ANNEX_K_LUMA = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.int64)

ANNEX_K_CHROMA = np.array([
    [17, 18, 24, 47, 99, 99, 99, 99],
    [18, 21, 26, 66, 99, 99, 99, 99],
    [24, 26, 56, 99, 99, 99, 99, 99],
    [47, 66, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
], dtype=np.int64)


def _check_rgb(img):
    arr = np.asarray(img)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected an (h, w, 3) RGB image, got shape {arr.shape}")
    return arr


def quality_scale(quality):
    if not 1 <= quality <= 100:
        raise ValueError(f"JPEG quality must be in 1..100, got {quality}")
    return 5000 // quality if quality < 50 else 200 - 2 * quality


def scaled_table(base, quality):
    s = quality_scale(quality)
    return np.clip((base * s + 50) // 100, 1, 255)


def quant_tables(quality):
    """(luma, chroma) quantization tables for an IJG-style quality factor."""
    return scaled_table(ANNEX_K_LUMA, quality), scaled_table(ANNEX_K_CHROMA, quality)


def jpeg_encode(img, quality):
    """Baseline JPEG bytes with 4:2:0 subsampling and the scaled Annex K tables."""
    arr = _check_rgb(img).astype(np.uint8)
    luma, chroma = quant_tables(quality)
    buf = io.BytesIO()
    Image.fromarray(arr).save(
        buf, format="JPEG",
        qtables=[luma.ravel().tolist(), chroma.ravel().tolist()],
        subsampling=2, optimize=False, progressive=False,
    )
    return buf.getvalue()


def jpeg_recompress(img, quality):
    data = jpeg_encode(img, quality)
    with Image.open(io.BytesIO(data)) as dec:
        return np.asarray(dec.convert("RGB")).copy()


def gaussian_kernel(sigma):
    """Sampled 1-D Gaussian, radius ceil(3 sigma), normalized to sum 1."""
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    radius = int(math.ceil(3 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _convolve_axis(a, k, axis):
    r = k.size // 2
    pad = [(0, 0)] * a.ndim
    pad[axis] = (r, r)
    p = np.pad(a, pad, mode="symmetric")
    out = np.zeros_like(a)
    n = a.shape[axis]
    for i, w in enumerate(k):
        out += w * np.take(p, np.arange(i, i + n), axis=axis)
    return out


def gaussian_blur_float(img, sigma):
    """Separable blur with reflect padding, no rounding."""
    k = gaussian_kernel(sigma)
    a = np.asarray(img, dtype=np.float64)
    return _convolve_axis(_convolve_axis(a, k, 0), k, 1)


def gaussian_blur(img, sigma):
    _check_rgb(img)
    return np.clip(np.rint(gaussian_blur_float(img, sigma)), 0, 255).astype(np.uint8)


def noise_sigma(img, snr_db):
    """Noise std giving ``snr_db`` relative to the image variance."""
    power = float(np.var(np.asarray(img, dtype=np.float64)))
    if power <= 0:
        raise ValueError("image is constant; SNR is undefined")
    return math.sqrt(power / 10 ** (snr_db / 10))


def awgn_float(img, snr_db, seed):
    """Image plus white Gaussian noise, before clamping and rounding."""
    arr = _check_rgb(img).astype(np.float64)
    sigma = noise_sigma(arr, snr_db)
    rng = np.random.default_rng(seed)
    return arr + sigma * rng.standard_normal(arr.shape)


def add_awgn(img, snr_db, seed):
    return np.clip(np.rint(awgn_float(img, snr_db, seed)), 0, 255).astype(np.uint8)


def measure_snr(clean, noisy):
    """10 log10(var(clean) / mean squared difference); +inf for zero noise."""
    c = np.asarray(clean, dtype=np.float64)
    n = np.asarray(noisy, dtype=np.float64)
    if c.shape != n.shape:
        raise ValueError(f"shape mismatch: {c.shape} vs {n.shape}")
    mse = float(np.mean((n - c) ** 2))
    if mse == 0:
        return math.inf
    return 10 * math.log10(float(np.var(c)) / mse)
