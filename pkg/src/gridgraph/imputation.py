"""Imputation baselines feeding the CNN comparisons: zero+mask channel, per-pixel mean, k-NN."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class NotFittedError(RuntimeError):
    pass


def _as_batch(values, missing):
    v = np.asarray(values, dtype=np.float64)
    mk = np.asarray(missing, dtype=bool)
    single = mk.ndim == 2
    if single:
        v, mk = v[None], mk[None]
    if v.ndim == 3:
        v = v[..., None]
    return v, mk, single


def zero_mask_impute(values, missing) -> np.ndarray:
    """Observed values, zeros in the hole, plus a channel that is 1 at missing pixels."""
    v, mk, single = _as_batch(values, missing)
    out = np.concatenate([np.where(mk[..., None], 0.0, v), mk[..., None].astype(np.float64)], axis=-1)
    return out[0] if single else out


@dataclass
class MeanStats:
    """Per-pixel, per-channel running sum and count over observed training values."""
    sums: np.ndarray | None = None
    counts: np.ndarray | None = None

    def update(self, values, missing) -> "MeanStats":
        v, mk, _ = _as_batch(values, missing)
        obs = (~mk)[..., None].astype(np.float64)
        s = (v * obs).sum(axis=0)
        c = np.broadcast_to(obs, v.shape).sum(axis=0)
        if self.sums is None:
            self.sums, self.counts = s, c
        else:
            self.sums = self.sums + s
            self.counts = self.counts + c
        return self

    @classmethod
    def fit(cls, values, missing) -> "MeanStats":
        return cls().update(values, missing)

    @property
    def mean(self) -> np.ndarray:
        if self.sums is None:
            raise NotFittedError("MeanStats has not seen any training image")
        total = self.counts.sum()
        fallback = self.sums.sum() / total if total else 0.0
        return np.where(self.counts > 0, self.sums / np.maximum(self.counts, 1), fallback)


def mean_impute(stats: MeanStats, values, missing) -> np.ndarray:
    v, mk, single = _as_batch(values, missing)
    out = np.where(mk[..., None], stats.mean[None], v)
    return out[0] if single else out


@dataclass
class KnnPool:
    """Candidate images for k-NN imputation; ``missing`` None means the candidates are complete."""
    values: np.ndarray
    missing: np.ndarray | None = None
    k: int = 5
    fallback: MeanStats | None = None
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim == 3:
            v = v[..., None]
        self.values = v
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if len(v) == 0:
            raise ValueError("k-NN pool is empty")
        if len(v) < self.k:
            raise ValueError(f"pool of {len(v)} candidates is smaller than k={self.k}")
        if self.missing is not None:
            self.missing = np.asarray(self.missing, dtype=bool)

    def __len__(self):
        return len(self.values)

    def _flat(self):
        if not self._cache:
            P = len(self.values)
            C = self.values.reshape(P, -1)
            if self.missing is None:
                Mc = np.ones_like(C)
            else:
                Mc = np.broadcast_to(~self.missing[..., None], self.values.shape).reshape(P, -1)
                Mc = Mc.astype(np.float64)
            C = C * Mc
            self._cache.update(C=C, Mc=Mc, C2=C * C)
        return self._cache["C"], self._cache["Mc"], self._cache["C2"]

    def distances(self, values, missing) -> np.ndarray:
        """Mean squared difference over coordinates observed in both query and candidate."""
        v, mk, _ = _as_batch(values, missing)
        C, Mc, C2 = self._flat()
        Mq = np.broadcast_to(~mk[..., None], v.shape).reshape(len(v), -1).astype(np.float64)
        Q = v.reshape(len(v), -1) * Mq
        sq = (Q * Q) @ Mc.T - 2.0 * (Q @ C.T) + Mq @ C2.T
        count = Mq @ Mc.T
        with np.errstate(divide="ignore", invalid="ignore"):
            dist = np.where(count > 0, np.maximum(sq, 0.0) / count, np.inf)
        return dist


def knn_impute_batch(pool: KnnPool, values, missing, k: int | None = None, exclude=None,
                     chunk: int = 500) -> np.ndarray:
    """k-NN fill for a batch of images.

    ``exclude[i]`` (optional) is a pool index that query i may not use, e.g.
    the query's own slot when the pool is the training set itself.
    """
    k = pool.k if k is None else k
    v, mk, single = _as_batch(values, missing)
    C, Mc, _ = pool._flat()
    P = len(pool)
    if k > P - (exclude is not None):
        raise ValueError(f"k={k} exceeds the usable pool size")
    fallback = pool.fallback.mean if pool.fallback is not None else None
    out = np.empty_like(v)
    for start in range(0, len(v), chunk):
        sl = slice(start, start + chunk)
        dist = pool.distances(v[sl], mk[sl])
        if exclude is not None:
            ex = np.asarray(exclude[sl])
            ok = ex >= 0
            dist[np.flatnonzero(ok), ex[ok]] = np.inf
        nearest = np.argsort(dist, axis=1, kind="stable")[:, :k]
        sums = C[nearest].sum(axis=1)
        cnt = Mc[nearest].sum(axis=1)
        shape = v[sl].shape
        sums = sums.reshape(shape)
        cnt = cnt.reshape(shape)
        if fallback is None:
            fb = (C.sum(axis=0) / np.maximum(Mc.sum(axis=0), 1)).reshape(shape[1:])
        else:
            fb = fallback
        fill = np.where(cnt > 0, sums / np.maximum(cnt, 1), fb[None])
        out[sl] = np.where(mk[sl][..., None], fill, v[sl])
    return out[0] if single else out


def knn_impute(pool: KnnPool, values, missing, k: int | None = None) -> np.ndarray:
    return knn_impute_batch(pool, values, missing, k=k)
