"""Evaluation metrics: FD, P-FD, MSE, SID and rPCC per FLAME component.

Features are the raw per-frame component parameters. Fréchet statistics are
pooled over every frame of every sequence.
"""

from __future__ import annotations

import numpy as np

from .config import COMPONENTS
from .rng import seeded_rng

COV_EPS = 1e-6
SID_EPS = 1e-12
VAR_FLOOR = 1e-12
SCHEMA_VERSION = 1


class MetricError(ValueError):
    pass


def _finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise MetricError("non-finite values in metric input")


def _stats(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    mu = x.mean(axis=0)
    cov = np.atleast_2d(np.cov(x, rowvar=False, bias=True))
    return mu, cov + COV_EPS * np.eye(len(mu))


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((m + m.T) / 2)
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def gaussian_frechet(mu1, cov1, mu2, cov2) -> float:
    """``|mu1 - mu2|^2 + Tr(S1 + S2 - 2 (S1 S2)^(1/2))`` for PSD covariances."""
    cov1, cov2 = np.asarray(cov1, dtype=np.float64), np.asarray(cov2, dtype=np.float64)
    s1_half = _psd_sqrt(cov1)
    cross = np.linalg.eigvalsh(s1_half @ cov2 @ s1_half)
    tr_sqrt = np.sqrt(np.clip(cross, 0, None)).sum()
    diff = np.asarray(mu1) - np.asarray(mu2)
    return float(diff @ diff + np.trace(cov1) + np.trace(cov2) - 2 * tr_sqrt)


def frechet_distance(A, B) -> float:
    """Fréchet distance between Gaussians fitted to the rows of ``A`` and ``B``.

    Population covariances, regularised with ``1e-6 * I``.
    """
    _finite(A, B)
    return max(gaussian_frechet(*_stats(A), *_stats(B)), 0.0)


def paired_frechet(A_agent, A_user, B_agent, B_user) -> float:
    """FD on per-frame ``[agent | user]`` concatenations."""
    pairs = []
    for agent, user in ((A_agent, A_user), (B_agent, B_user)):
        agent, user = np.atleast_2d(np.asarray(agent).T).T, np.atleast_2d(np.asarray(user).T).T
        if len(agent) != len(user):
            raise MetricError(f"agent/user length mismatch: {len(agent)} vs {len(user)}")
        pairs.append(np.concatenate([agent, user], axis=1))
    return frechet_distance(*pairs)


def mse(pred, gt) -> float:
    """Mean over frames of the squared Euclidean error."""
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise MetricError(f"shape mismatch {pred.shape} vs {gt.shape}")
    d = (pred - gt).reshape(-1, pred.shape[-1]) if pred.ndim > 1 else (pred - gt)[:, None]
    return float(np.mean(np.sum(d**2, axis=-1)))


def kmeans(X: np.ndarray, k: int, seed: int, max_iter: int = 100, tol: float = 1e-6) -> np.ndarray:
    """Lloyd's algorithm with k-means++ seeding; returns ``[k, d]`` centroids."""
    X = np.asarray(X, dtype=np.float64)
    rng = seeded_rng(seed, "kmeans")
    n = len(X)
    centers = np.empty((k, X.shape[1]))
    centers[0] = X[rng.integers(n)]
    d2 = np.sum((X - centers[0]) ** 2, axis=1)
    for j in range(1, k):
        total = d2.sum()
        idx = rng.choice(n, p=d2 / total) if total > 0 else rng.integers(n)
        centers[j] = X[idx]
        d2 = np.minimum(d2, np.sum((X - centers[j]) ** 2, axis=1))
    for _ in range(max_iter):
        labels = assign(X, centers)
        new = centers.copy()
        for j in range(k):
            members = X[labels == j]
            if len(members):
                new[j] = members.mean(axis=0)
        shift = np.max(np.sum((new - centers) ** 2, axis=1))
        centers = new
        if shift <= tol:
            break
    return centers


def assign(X, centers) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    d2 = (X**2).sum(1)[:, None] - 2 * X @ centers.T + (centers**2).sum(1)[None, :]
    return np.argmin(d2, axis=1)


def histogram_entropy(labels, k: int) -> float:
    p = np.bincount(labels, minlength=k) / len(labels)
    return max(float(-np.sum(p * np.log2(p + SID_EPS))), 0.0)


def sid(generated, reference, k: int = 40, seed: int = 0) -> float:
    """Entropy (bits) of generated frames over a k-means partition fitted on ``reference``."""
    generated, reference = np.asarray(generated), np.asarray(reference)
    if generated.ndim == 1:
        generated, reference = generated[:, None], reference[:, None]
    if len(reference) < k:
        raise MetricError(f"need at least k={k} reference frames, got {len(reference)}")
    _finite(generated, reference)
    return histogram_entropy(assign(generated, kmeans(reference, k, seed)), k)


def _pearson_columns(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Per-column Pearson correlation; 0 where either column has no variance."""
    a = a - a.mean(axis=0)
    b = b - b.mean(axis=0)
    va, vb = (a**2).mean(axis=0), (b**2).mean(axis=0)
    ok = (va > VAR_FLOOR) & (vb > VAR_FLOOR)
    rho = np.zeros(a.shape[1])
    rho[ok] = (a * b).mean(axis=0)[ok] / np.sqrt(va[ok] * vb[ok])
    return rho


def rpcc(pairs) -> float:
    """Mean over samples of ``mean_j |rho(gen_j, user_j) - rho(gt_j, user_j)|``."""
    scores = []
    for gen, gt, user in pairs:
        gen, gt, user = (np.asarray(x, dtype=np.float64) for x in (gen, gt, user))
        gen, gt, user = (x[:, None] if x.ndim == 1 else x for x in (gen, gt, user))
        if not len(gen) == len(gt) == len(user):
            raise MetricError("streams must be frame-aligned")
        if len(gen) < 2:
            raise MetricError("rPCC needs at least 2 frames")
        scores.append(np.mean(np.abs(_pearson_columns(gen, user) - _pearson_columns(gt, user))))
    if not scores:
        raise MetricError("no samples")
    return float(np.mean(scores))


def evaluate(generated: list, ground_truth: list, user: list, sid_k: int = 40, seed: int = 0) -> dict:
    """Full metric report: ``{component: {fd, pfd, mse, sid, rpcc}}`` plus ``n_samples``.

    Each list holds one ``[L_i, 56]`` array per sample.
    """
    if not len(generated) == len(ground_truth) == len(user):
        raise MetricError("generated, ground truth and user lists differ in length")
    for g, t, u in zip(generated, ground_truth, user):
        if not np.shape(g) == np.shape(t) == np.shape(u):
            raise MetricError("per-sample arrays must share shape")
    gen_all, gt_all, user_all = (np.concatenate(x, axis=0) for x in (generated, ground_truth, user))
    report = {}
    for name, sl in COMPONENTS.items():
        report[name] = {
            "fd": frechet_distance(gen_all[:, sl], gt_all[:, sl]),
            "pfd": paired_frechet(gen_all[:, sl], user_all[:, sl], gt_all[:, sl], user_all[:, sl]),
            "mse": mse(gen_all[:, sl], gt_all[:, sl]),
            "sid": sid(gen_all[:, sl], gt_all[:, sl], k=sid_k, seed=seed),
            "rpcc": rpcc([(g[:, sl], t[:, sl], u[:, sl]) for g, t, u in zip(generated, ground_truth, user)]),
        }
    report["n_samples"] = len(generated)
    return report
