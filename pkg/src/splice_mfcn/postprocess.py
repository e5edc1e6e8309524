"""Probability maps to binary output masks, including edge-enhanced inference."""

import numpy as np
from PIL import Image

from . import _kernels
from .masks import MANIPULATED_IS_BLACK, load_mask


def softmax_to_map(logits):
    """Spliced-class probability from (1, 2, h, w) or (2, h, w) logits."""
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim == 4:
        if z.shape[0] != 1:
            raise ValueError(f"expected a single image, got logits shape {z.shape}")
        z = z[0]
    if z.ndim != 3 or z.shape[0] != 2:
        raise ValueError(f"logits must have 2 channels, got shape {z.shape}")
    m = z.max(axis=0)
    e0 = np.exp(z[0] - m)
    e1 = np.exp(z[1] - m)
    return e1 / (e0 + e1)


def threshold(prob, t):
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"threshold must lie in [0, 1], got {t}")
    return (np.asarray(prob) >= t).astype(np.uint8)


def hole_fill(mask):
    """Set background pixels that cannot reach the border (4-connected) to 1."""
    m = np.asarray(mask).astype(bool)
    reach = _kernels.border_reach(~m)
    return (~reach).astype(np.uint8)


def edge_enhanced_combine(surface, edge, t_surface=0.5, t_edge=0.5):
    """threshold(surface) AND hole_fill(threshold(edge))."""
    surface = np.asarray(surface)
    edge = np.asarray(edge)
    if surface.shape != edge.shape:
        raise ValueError(f"surface map {surface.shape} and edge map {edge.shape} differ in size")
    return threshold(surface, t_surface) & hole_fill(threshold(edge, t_edge))


def save_prob_map(prob, path):
    """16-bit grayscale PNG, value = round(p * 65535)."""
    p = np.asarray(prob, dtype=np.float64)
    if p.min() < 0 or p.max() > 1:
        raise ValueError("probabilities must lie in [0, 1]")
    Image.fromarray(np.rint(p * 65535).astype(np.uint16)).save(path)


def load_prob_map(path, convention=MANIPULATED_IS_BLACK):
    """Read a probability map; 8-bit files are taken as binary masks."""
    img = Image.open(path)
    img.load()
    if img.mode in ("I;16", "I;16B", "I;16L", "I"):
        arr = np.asarray(img)
        if arr.dtype != np.uint16:
            arr = arr.astype(np.int64)
            if arr.min() < 0 or arr.max() > 65535:
                raise ValueError(f"{path}: values outside the 16-bit range")
        return arr.astype(np.float64) / 65535.0
    return load_mask(path, convention).astype(np.float64)
