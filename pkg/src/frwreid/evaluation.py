"""Embedding normalization, pairwise distances and the single-shot CMC
protocol over repeated random splits."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .data import ReidDataset
from .errors import ContractError, DimensionError, ProtocolError


@dataclass
class DistanceMatrix:
    values: np.ndarray
    probe_ids: np.ndarray
    gallery_ids: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.probe_ids = np.asarray(self.probe_ids).reshape(-1)
        self.gallery_ids = np.asarray(self.gallery_ids).reshape(-1)
        if self.values.shape != (len(self.probe_ids), len(self.gallery_ids)):
            raise DimensionError(f"distance matrix {self.values.shape} vs {len(self.probe_ids)} probes, "
                                 f"{len(self.gallery_ids)} gallery entries")
        if not np.all(np.isfinite(self.values)) or np.any(self.values < 0):
            raise ContractError("distances must be finite and non-negative")


@dataclass
class CMCurve:
    """Match rate at ranks 1..max_rank.  For multi-split evaluation ``rates``
    is the per-rank mean and ``stddev`` its spread across splits."""

    rates: np.ndarray
    num_probes: int
    stddev: np.ndarray | None = None
    per_split: np.ndarray | None = None

    def rank(self, k: int) -> float:
        return float(self.rates[k - 1])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["rank", "mean_rate", "stddev"])
        std = self.stddev if self.stddev is not None else np.zeros_like(self.rates)
        for k, (r, s) in enumerate(zip(self.rates, std), start=1):
            w.writerow([k, f"{r:.6f}", f"{s:.6f}"])
        return buf.getvalue()


def normalize_embeddings(x) -> np.ndarray:
    x = np.asarray(getattr(x, "data", x), dtype=np.float64)
    norms = np.linalg.norm(x, axis=1)
    zero = np.flatnonzero(norms == 0)
    if zero.size:
        raise ContractError(f"cannot normalize zero-norm embedding at row {int(zero[0])}")
    return x / norms[:, None]


def pairwise_distances(probe, gallery, probe_ids=None, gallery_ids=None) -> DistanceMatrix:
    p = np.asarray(getattr(probe, "data", probe), dtype=np.float64)
    g = np.asarray(getattr(gallery, "data", gallery), dtype=np.float64)
    if p.ndim != 2 or g.ndim != 2 or p.shape[1] != g.shape[1]:
        raise DimensionError(f"probe {p.shape} and gallery {g.shape} have different embedding sizes")
    d = np.empty((len(p), len(g)))
    step = max(1, 2 ** 20 // max(1, g.size))
    for i in range(0, len(p), step):
        diff = p[i:i + step, None, :] - g[None, :, :]
        d[i:i + step] = np.sqrt((diff * diff).sum(axis=2))
    probe_ids = np.arange(len(p)) if probe_ids is None else probe_ids
    gallery_ids = np.arange(len(g)) if gallery_ids is None else gallery_ids
    return DistanceMatrix(d, probe_ids, gallery_ids)


def match_ranks(dist: DistanceMatrix) -> np.ndarray:
    """0-based rank of each probe's true match; ties go to the lower gallery index."""
    gallery_ids = dist.gallery_ids
    ranks = np.empty(len(dist.probe_ids), dtype=np.int64)
    for i, pid in enumerate(dist.probe_ids):
        hits = np.flatnonzero(gallery_ids == pid)
        if hits.size == 0:
            raise ProtocolError(f"probe {i} (identity {pid}) has no match in the gallery")
        if hits.size > 1:
            raise ProtocolError(f"identity {pid} appears {hits.size} times in a single-shot gallery")
        order = np.argsort(dist.values[i], kind="stable")
        ranks[i] = int(np.flatnonzero(order == hits[0])[0])
    return ranks


def cmc_single_shot(dist: DistanceMatrix, max_rank: int | None = None) -> CMCurve:
    max_rank = len(dist.gallery_ids) if max_rank is None else max_rank
    if max_rank < 1:
        raise ContractError("max_rank must be at least 1")
    ranks = match_ranks(dist)
    rates = np.array([(ranks < k).mean() for k in range(1, max_rank + 1)])
    return CMCurve(rates, len(ranks))


# ----------------------------------------------------------------------------
# split protocol


@dataclass
class Protocol:
    num_splits: int = 10
    train_frac: float = 0.0
    seed: int = 0
    max_rank: int = 20
    num_test_ids: int | None = None
    swap_views: bool = False
    probe_cam: int = 0
    gallery_cam: int = 1


# Published protocols, encoded for reference; the real datasets are not bundled.
PROTOCOLS = {
    "cuhk03": Protocol(num_splits=20, train_frac=1160 / 1360, num_test_ids=100),
    "cuhk01": Protocol(num_splits=10, train_frac=485 / 971, num_test_ids=486),
    "viper": Protocol(num_splits=10, train_frac=0.5, num_test_ids=316),
}


@dataclass
class SplitAssignment:
    test_ids: np.ndarray
    probe_index: np.ndarray
    gallery_index: np.ndarray


def make_split(dataset: ReidDataset, protocol: Protocol, split: int) -> SplitAssignment:
    """Pick the test identities for one split, then one probe image from the
    probe camera and one gallery image from the gallery camera per identity."""
    rng = np.random.default_rng([protocol.seed, split])
    n = dataset.num_ids
    n_train = int(round(protocol.train_frac * n))
    n_test = n - n_train if protocol.num_test_ids is None else protocol.num_test_ids
    if n_test < 1 or n_train + n_test > n:
        raise ContractError(f"split needs {n_train} train + {n_test} test identities, dataset has {n}")
    perm = rng.permutation(n)
    test_ids = np.sort(perm[n_train:n_train + n_test])
    pcam, gcam = (protocol.gallery_cam, protocol.probe_cam) if protocol.swap_views else \
        (protocol.probe_cam, protocol.gallery_cam)
    probe_index, gallery_index = [], []
    for pid in test_ids:
        for cam, bucket in ((pcam, probe_index), (gcam, gallery_index)):
            candidates = np.flatnonzero((dataset.ids == pid) & (dataset.cams == cam))
            if candidates.size == 0:
                raise ProtocolError(f"identity {pid} has no image from camera {cam}")
            bucket.append(candidates[rng.integers(candidates.size)])
    return SplitAssignment(test_ids, np.array(probe_index), np.array(gallery_index))


def evaluate_embeddings(embeddings: np.ndarray, dataset: ReidDataset, protocol: Protocol) -> CMCurve:
    """CMC statistics over ``protocol.num_splits`` splits given one embedding
    per dataset record."""
    if dataset.num_cams < 2:
        raise ContractError("evaluation needs at least two camera views")
    if protocol.num_splits < 1:
        raise ContractError("num_splits must be at least 1")
    unit = normalize_embeddings(embeddings)
    curves = []
    num_probes = 0
    for s in range(protocol.num_splits):
        sp = make_split(dataset, protocol, s)
        dist = pairwise_distances(unit[sp.probe_index], unit[sp.gallery_index],
                                  dataset.ids[sp.probe_index], dataset.ids[sp.gallery_index])
        max_rank = min(protocol.max_rank, len(sp.gallery_index))
        curves.append(cmc_single_shot(dist, max_rank).rates)
        num_probes = len(sp.probe_index)
    per_split = np.stack(curves)
    return CMCurve(per_split.mean(axis=0), num_probes, per_split.std(axis=0), per_split)


def evaluate_splits(model, dataset: ReidDataset, protocol: Protocol) -> CMCurve:
    from .model import embed

    return evaluate_embeddings(embed(model, dataset.images), dataset, protocol)
