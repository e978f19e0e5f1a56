from __future__ import annotations

from dataclasses import dataclass

import numpy as np

STD_FLOOR = 1e-6


@dataclass
class NormStats:
    """Per-dimension z-score statistics of agent head frames.

    ``feat_mean``/``feat_std`` optionally standardise the raw speech features
    as well; without them :meth:`normalize_features` is the identity.
    """

    mean: np.ndarray
    std: np.ndarray
    feat_mean: np.ndarray | None = None
    feat_std: np.ndarray | None = None

    def normalize(self, x):
        return (x - self.mean) / self.std

    def denormalize(self, x):
        return x * self.std + self.mean

    def normalize_features(self, feats):
        if self.feat_mean is None:
            return feats
        return ((feats - self.feat_mean) / self.feat_std).astype(np.asarray(feats).dtype)


def _pooled(frames) -> np.ndarray:
    seqs = [np.asarray(f, dtype=np.float64).reshape(-1, np.shape(f)[-1]) for f in frames]
    if not seqs or sum(len(s) for s in seqs) == 0:
        raise ValueError("cannot compute normalisation statistics of an empty dataset")
    return np.concatenate(seqs)


def compute_norm_stats(frames, features=None) -> NormStats:
    """Population mean/std over all frames of all sequences, std floored at 1e-6.

    ``frames`` is an iterable of ``[L, 56]`` arrays (or one stacked array);
    ``features`` likewise holds ``[L, d_raw]`` speech features, if given.
    """
    allf = _pooled(frames)
    stats = NormStats(mean=allf.mean(axis=0), std=np.maximum(allf.std(axis=0), STD_FLOOR))
    if features is not None:
        feats = _pooled(features)
        stats.feat_mean, stats.feat_std = feats.mean(axis=0), np.maximum(feats.std(axis=0), STD_FLOOR)
    return stats
