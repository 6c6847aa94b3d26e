"""Synthetic 2-D query/sample pairs with a known ground-truth relation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PATTERNS = ("rings", "checkerboard", "ball")


@dataclass
class PairSet:
    q: np.ndarray       # [n, 2]
    s: np.ndarray       # [n, 2]
    match: np.ndarray   # [n] of 0/1

    def __len__(self) -> int:
        return len(self.match)

    @property
    def inputs(self) -> np.ndarray:
        """Query and sample concatenated, ``[n, 4]``."""
        return np.concatenate([self.q, self.s], axis=1)


def relation_truth(pattern: str, q: np.ndarray, s: np.ndarray, ring_width: float) -> np.ndarray:
    """Ground-truth match (0/1) of each query/sample pair.

    rings: even distance band, ``floor(|s - q| / r)`` even.
    checkerboard: the offset ``s - q`` lies in an even cell of an r-grid.
    ball: ``|s - q| < r``, the one pattern a quadratic threshold can express.
    """
    if ring_width <= 0:
        raise ValueError(f"ring width must be positive, got {ring_width}")
    diff = np.asarray(s, dtype=np.float64) - np.asarray(q, dtype=np.float64)
    if pattern == "rings":
        band = np.floor(np.hypot(diff[..., 0], diff[..., 1]) / ring_width)
        return (band % 2 == 0).astype(np.int64)
    if pattern == "checkerboard":
        cells = np.floor(diff / ring_width).sum(axis=-1)
        return (cells % 2 == 0).astype(np.int64)
    if pattern == "ball":
        return (np.hypot(diff[..., 0], diff[..., 1]) < ring_width).astype(np.int64)
    raise ValueError(f"unknown pattern {pattern!r}; choose from {', '.join(PATTERNS)}")


def gen_synthetic_relation(n_pairs: int, rng: np.random.Generator, pattern: str = "rings",
                           ring_width: float = 1.0, box: tuple = (-2.0, 2.0)) -> PairSet:
    """Sample ``q`` and ``s`` uniformly from ``box`` squared and label them."""
    if n_pairs < 1:
        raise ValueError(f"n_pairs must be >= 1, got {n_pairs}")
    if ring_width <= 0:
        raise ValueError(f"ring width must be positive, got {ring_width}")
    lo, hi = box
    if not hi > lo:
        raise ValueError(f"empty domain box {box}")
    q = rng.uniform(lo, hi, size=(n_pairs, 2))
    s = rng.uniform(lo, hi, size=(n_pairs, 2))
    return PairSet(q, s, relation_truth(pattern, q, s, ring_width))
