"""Retrieval evaluation: Euclidean ranking, CMC Rank-1 and mAP.

Ties in distance are broken by gallery index (stable sort), so results are
deterministic. There is no camera filtering: synthetic domains have no
cameras.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class RetrievalSplit:
    query: np.ndarray  # (n_q, d)
    query_ids: np.ndarray  # (n_q,)
    gallery: np.ndarray  # (n_g, d)
    gallery_ids: np.ndarray  # (n_g,)

    def __post_init__(self):
        self.query = np.atleast_2d(np.asarray(self.query, dtype=np.float64))
        self.gallery = np.atleast_2d(np.asarray(self.gallery, dtype=np.float64))
        self.query_ids = np.asarray(self.query_ids)
        self.gallery_ids = np.asarray(self.gallery_ids)
        if len(self.gallery) == 0:
            raise ValueError("gallery is empty")


def euclidean_distances(query: np.ndarray, gallery: np.ndarray) -> np.ndarray:
    diff = query[:, None, :] - gallery[None, :, :]
    return np.sqrt((diff**2).sum(-1))


def rank_gallery(query: np.ndarray, gallery: np.ndarray) -> np.ndarray:
    """Gallery indices by ascending distance to one query vector."""
    gallery = np.atleast_2d(gallery)
    if len(gallery) == 0:
        raise ValueError("gallery is empty")
    dist = euclidean_distances(np.atleast_2d(query), gallery)[0]
    return np.argsort(dist, kind="stable")


def _ranked_matches(split: RetrievalSplit) -> np.ndarray:
    dist = euclidean_distances(split.query, split.gallery)
    order = np.argsort(dist, axis=1, kind="stable")
    return split.gallery_ids[order] == split.query_ids[:, None]


def cmc_rank1(split: RetrievalSplit) -> float:
    matches = _ranked_matches(split)
    return float(matches[:, 0].mean())


def average_precision(relevant: np.ndarray) -> float:
    """AP of one ranked relevance vector (True = relevant)."""
    relevant = np.asarray(relevant, dtype=bool)
    hits = np.flatnonzero(relevant)
    if len(hits) == 0:
        raise ValueError("query has no relevant gallery item")
    precision_at_hits = np.arange(1, len(hits) + 1) / (hits + 1)
    return float(precision_at_hits.mean())


def mean_ap(split: RetrievalSplit) -> float:
    matches = _ranked_matches(split)
    missing = ~matches.any(1)
    if missing.any():
        raise ValueError(f"query identities {split.query_ids[missing].tolist()} absent from gallery")
    return float(np.mean([average_precision(row) for row in matches]))


def evaluate(split: RetrievalSplit) -> dict:
    return {
        "mAP": mean_ap(split),
        "rank1": cmc_rank1(split),
        "n_query": int(len(split.query)),
        "n_gallery": int(len(split.gallery)),
    }
