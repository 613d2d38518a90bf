"""Colour-statistics features standing in for CNN embeddings."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

N_FEATURES = 30
HIST_BINS = 8


def extract_features(tile) -> np.ndarray:
    """30-vector: per-channel mean (3), std (3), then 8-bin histograms for R, G, B (24).

    Pixels are scaled to [0, 1]; bin ``k`` holds raw values ``32k .. 32k+31``.
    """
    pixels = np.asarray(getattr(tile, "pixels", tile))
    flat = pixels.reshape(-1, 3)
    scaled = flat.astype(np.float64) / 255.0
    means = scaled.mean(axis=0)
    stds = scaled.std(axis=0)
    bins = flat.astype(np.intp) // (256 // HIST_BINS)
    hist = np.stack([np.bincount(bins[:, c], minlength=HIST_BINS) for c in range(3)]).astype(np.float64)
    hist /= flat.shape[0]
    return np.concatenate([means, stds, hist.ravel()])


class TileFeatureExtractor(TransformerMixin, BaseEstimator):
    """Stateless transformer from tiles (or an ``(n, h, w, 3)`` array) to features."""

    def fit(self, X, y=None):
        return self

    def transform(self, X) -> np.ndarray:
        tiles = list(X) if not isinstance(X, np.ndarray) or X.ndim == 4 else [X]
        if not tiles:
            return np.empty((0, N_FEATURES))
        return np.stack([extract_features(t) for t in tiles])

    def __sklearn_tags__(self):
        tags = super().__sklearn_tags__()
        tags.requires_fit = False
        return tags
