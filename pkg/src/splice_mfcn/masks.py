"""Binary masks: file I/O, edge labels, class weights, donor/host ground truth.

Internally a mask is an (h, w) uint8 array with 1 = spliced (or edge) and
0 = authentic. On disk the convention is configurable; CASIA/Columbia
style files mark the manipulated region black.
"""

from typing import NamedTuple

import numpy as np
from PIL import Image
from scipy import ndimage

MANIPULATED_IS_BLACK = "manipulated-is-black"
MANIPULATED_IS_WHITE = "manipulated-is-white"
CONVENTIONS = (MANIPULATED_IS_BLACK, MANIPULATED_IS_WHITE)

_SQUARE = ndimage.generate_binary_structure(2, 2)


class ClassWeights(NamedTuple):
    authentic: float
    spliced: float


def as_mask(a):
    arr = np.asarray(a)
    if arr.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {arr.shape}")
    if not np.isin(arr, (0, 1)).all():
        raise ValueError("mask values must be 0 or 1")
    return arr.astype(np.uint8)


def boundary(surface):
    """Spliced pixels with at least one in-bounds authentic 4-neighbour."""
    m = as_mask(surface).astype(bool)
    auth = ~m
    touch = np.zeros_like(m)
    touch[1:, :] |= auth[:-1, :]
    touch[:-1, :] |= auth[1:, :]
    touch[:, 1:] |= auth[:, :-1]
    touch[:, :-1] |= auth[:, 1:]
    return m & touch


def derive_edge_label(surface, band_halfwidth=1):
    """Edge band: the region boundary dilated by a (2r+1)^2 square."""
    if band_halfwidth < 0:
        raise ValueError(f"band_halfwidth must be >= 0, got {band_halfwidth}")
    edge = boundary(surface)
    if band_halfwidth and edge.any():
        size = 2 * band_halfwidth + 1
        edge = ndimage.binary_dilation(edge, structure=np.ones((size, size), bool))
    return edge.astype(np.uint8)


def median_freq_weights(masks):
    """Median-frequency class weights over a collection of masks.

    freq_c = pixels of class c / total pixels of images that contain c;
    weight_c = median(freq) / freq_c. A class absent everywhere gets 1.
    """
    masks = list(masks)
    if not masks:
        raise ValueError("median_freq_weights needs at least one mask")
    count = [0, 0]
    denom = [0, 0]
    for m in masks:
        m = as_mask(m)
        ones = int(m.sum())
        zeros = m.size - ones
        for c, k in ((0, zeros), (1, ones)):
            if k:
                count[c] += k
                denom[c] += m.size
    freqs = [count[c] / denom[c] if denom[c] else None for c in (0, 1)]
    present = [f for f in freqs if f is not None]
    if not present:
        raise ValueError("masks contain no pixels")
    med = float(np.median(present))
    w = [med / f if f is not None else 1.0 for f in freqs]
    return ClassWeights(*w)


def mask_from_pair(spliced, host, diff_threshold=16, min_component_area=64):
    """Ground truth from a spliced image and its host.

    Pixels whose channel-max absolute difference exceeds ``diff_threshold``
    (8-bit units) become candidates; the candidate set is closed (3x3, two
    iterations), opened (3x3, one iteration), and 8-connected components
    smaller than ``min_component_area`` are dropped.
    """
    a = np.asarray(spliced)
    b = np.asarray(host)
    if a.shape != b.shape:
        raise ValueError(f"image dims differ: {a.shape} vs {b.shape}")
    diff = np.abs(a.astype(np.int16) - b.astype(np.int16))
    if diff.ndim == 3:
        diff = diff.max(axis=2)
    cand = diff > diff_threshold
    # pad so closing does not erode regions touching the border
    pad = 2
    padded = np.pad(cand, pad, mode="edge")
    padded = ndimage.binary_closing(padded, structure=_SQUARE, iterations=2)
    cand = padded[pad:-pad, pad:-pad]
    cand = ndimage.binary_opening(cand, structure=_SQUARE, iterations=1)
    labels, n = ndimage.label(cand, structure=_SQUARE)
    if n:
        sizes = np.bincount(labels.ravel(), minlength=n + 1)
        keep = sizes >= min_component_area
        keep[0] = False
        cand = keep[labels]
    return cand.astype(np.uint8)


def _check_convention(convention):
    if convention not in CONVENTIONS:
        raise ValueError(f"mask convention must be one of {CONVENTIONS}, got {convention!r}")


def load_mask(path, convention=MANIPULATED_IS_BLACK):
    """Read an 8-bit grayscale mask; file values < 128 count as black."""
    _check_convention(convention)
    try:
        img = Image.open(path)
        img.load()
    except (OSError, ValueError) as exc:
        raise ValueError(f"cannot read mask {path}: {exc}") from exc
    if img.mode in ("1", "L"):
        arr = np.asarray(img.convert("L"))
    elif img.mode == "LA":
        arr = np.asarray(img)[..., 0]
    elif img.mode in ("RGB", "RGBA"):
        rgb = np.asarray(img)[..., :3]
        if not (np.array_equal(rgb[..., 0], rgb[..., 1]) and np.array_equal(rgb[..., 1], rgb[..., 2])):
            raise ValueError(f"mask {path} is a colour image; cannot binarize unambiguously")
        arr = rgb[..., 0]
    else:
        raise ValueError(f"mask {path} has unsupported mode {img.mode}")
    black = arr < 128
    mask = black if convention == MANIPULATED_IS_BLACK else ~black
    return mask.astype(np.uint8)


def save_mask(mask, path, convention=MANIPULATED_IS_BLACK):
    _check_convention(convention)
    m = as_mask(mask).astype(bool)
    if convention == MANIPULATED_IS_BLACK:
        m = ~m
    Image.fromarray(np.where(m, 255, 0).astype(np.uint8)).save(path)
