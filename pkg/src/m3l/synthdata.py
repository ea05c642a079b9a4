"""Synthetic multi-domain identity data, PK batches and meta episodes.

Every domain owns a disjoint set of identities. An identity is a Gaussian
cluster around a centre in input space; a domain pushes its samples through
its own affine map ``x -> A @ x + b`` and adds nuisance variation along a few
domain-specific "style" directions. Labels are local to a domain.

Text format (``save_domains`` / ``load_domains``): one sample per line,
whitespace separated, ``domain_id identity f_0 ... f_{d-1}``, floats written
with 17 significant digits so a round trip is bit-exact.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np


@dataclass
class DomainShiftSpec:
    domain_id: int
    transform: np.ndarray  # (d_in, d_in)
    offset: np.ndarray  # (d_in,)
    centers: np.ndarray  # (n_identities, d_in)
    noise_scale: float
    samples_per_id: int
    seed: int
    # (d_in, r) directions along which samples vary per domain, or None
    style_basis: np.ndarray | None = None

    @property
    def n_identities(self) -> int:
        return self.centers.shape[0]

    @property
    def input_dim(self) -> int:
        return self.centers.shape[1]


@dataclass
class DomainDataset:
    domain_id: int
    features: np.ndarray  # (n, d_in)
    labels: np.ndarray  # (n,) local identity labels 0..n_identities-1
    n_identities: int
    _index: list[np.ndarray] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.shape[0] != self.labels.shape[0]:
            raise ValueError("features and labels disagree on sample count")
        counts = np.bincount(self.labels, minlength=self.n_identities)
        if len(counts) != self.n_identities or np.any(counts < 2):
            raise ValueError(
                f"domain {self.domain_id}: labels must cover 0..{self.n_identities - 1} "
                "with at least 2 samples each"
            )
        self._index = [np.flatnonzero(self.labels == k) for k in range(self.n_identities)]

    def __len__(self) -> int:
        return len(self.labels)

    def indices_of(self, identity: int) -> np.ndarray:
        return self._index[identity]

    def subset_identities(self, identities: Sequence[int]) -> "DomainDataset":
        """Restrict to ``identities`` and relabel them 0..len-1 in the given order."""
        identities = list(identities)
        remap = {old: new for new, old in enumerate(identities)}
        idx = np.concatenate([self._index[k] for k in identities])
        labels = np.array([remap[k] for k in self.labels[idx]])
        return DomainDataset(self.domain_id, self.features[idx], labels, len(identities))


@dataclass
class Batch:
    domain_id: int
    features: np.ndarray  # (P*K, d_in)
    labels: np.ndarray  # (P*K,)


@dataclass
class MetaEpisode:
    meta_test_domain: int
    meta_train_domains: list[int]
    train_batches: list[Batch]
    test_batch: Batch


def make_shift_specs(
    n_domains: int,
    ids_per_domain: int,
    samples_per_id: int,
    input_dim: int = 32,
    shift: float = 0.6,
    offset: float = 1.0,
    style: float = 1.0,
    noise: float = 0.5,
    style_rank: int = 4,
    seed: int = 0,
    shortcut: float = 0.0,
    shortcut_rank: int = 4,
) -> list[DomainShiftSpec]:
    """Draw random per-domain affine maps, identity centres and style directions.

    With ``shortcut > 0`` each domain's centres also get an identity code in a
    domain-specific rank-``shortcut_rank`` subspace: discriminative inside the
    domain, meaningless in any other.
    """
    root = np.random.SeedSequence(seed)
    specs = []
    for d, child in enumerate(root.spawn(n_domains)):
        rng = np.random.default_rng(child)
        g = rng.standard_normal((input_dim, input_dim)) / np.sqrt(input_dim)
        transform = np.eye(input_dim) + shift * g
        off = offset * rng.standard_normal(input_dim)
        centers = rng.standard_normal((ids_per_domain, input_dim))
        basis = None
        if style > 0:
            q, _ = np.linalg.qr(rng.standard_normal((input_dim, style_rank)))
            basis = style * q
        if shortcut > 0:
            q, _ = np.linalg.qr(rng.standard_normal((input_dim, shortcut_rank)))
            centers = centers + shortcut * rng.standard_normal((ids_per_domain, shortcut_rank)) @ q.T
        specs.append(
            DomainShiftSpec(
                domain_id=d,
                transform=transform,
                offset=off,
                centers=centers,
                noise_scale=noise,
                samples_per_id=samples_per_id,
                seed=int(child.generate_state(1)[0]),
                style_basis=basis,
            )
        )
    return specs


def generate_domain(spec: DomainShiftSpec) -> DomainDataset:
    if spec.n_identities < 2:
        raise ValueError(f"domain {spec.domain_id}: need at least 2 identities")
    if spec.samples_per_id < 2:
        raise ValueError(f"domain {spec.domain_id}: need at least 2 samples per identity")
    if spec.noise_scale < 0:
        raise ValueError("noise scale must be non-negative")
    rng = np.random.default_rng(spec.seed)
    n, d = spec.n_identities, spec.input_dim
    labels = np.repeat(np.arange(n), spec.samples_per_id)
    latent = spec.centers[labels] + spec.noise_scale * rng.standard_normal((len(labels), d))
    x = latent @ spec.transform.T + spec.offset
    if spec.style_basis is not None:
        s = rng.standard_normal((len(labels), spec.style_basis.shape[1]))
        x = x + s @ spec.style_basis.T
    return DomainDataset(spec.domain_id, x, labels, n)


def generate_domains(specs: Sequence[DomainShiftSpec]) -> list[DomainDataset]:
    if len(specs) < 3:
        raise ValueError("multi-source generation expects at least 3 domain specs")
    return [generate_domain(s) for s in specs]


def retrieval_split(dataset: DomainDataset, seed: int = 0):
    """Query/gallery protocol for a held-out domain.

    Half of the identities (chosen at random) form the evaluation side; each
    contributes one query and the rest of its samples go to the gallery.
    Returns ``(query_x, query_y, gallery_x, gallery_y)`` with the original
    local labels.
    """
    rng = np.random.default_rng(seed)
    perm = rng.permutation(dataset.n_identities)
    eval_ids = np.sort(perm[dataset.n_identities // 2 :])
    q_idx, g_idx = [], []
    for k in eval_ids:
        members = dataset.indices_of(k)
        pick = rng.integers(len(members))
        q_idx.append(members[pick])
        g_idx.extend(np.delete(members, pick))
    q_idx, g_idx = np.array(q_idx), np.array(g_idx)
    return (
        dataset.features[q_idx],
        dataset.labels[q_idx],
        dataset.features[g_idx],
        dataset.labels[g_idx],
    )


def sample_pk_batch(dataset: DomainDataset, P: int, K: int, rng: np.random.Generator) -> Batch:
    """P distinct identities times K instances (with replacement if an identity is short)."""
    if P > dataset.n_identities:
        raise ValueError(f"P={P} exceeds the {dataset.n_identities} identities of domain {dataset.domain_id}")
    if P < 1 or K < 1:
        raise ValueError("P and K must be positive")
    ids = rng.choice(dataset.n_identities, size=P, replace=False)
    idx = []
    for k in ids:
        members = dataset.indices_of(k)
        idx.append(rng.choice(members, size=K, replace=len(members) < K))
    idx = np.concatenate(idx)
    return Batch(dataset.domain_id, dataset.features[idx], dataset.labels[idx])


def split_episode(
    domains: Sequence[DomainDataset], rng: np.random.Generator, P: int = 16, K: int = 4
) -> MetaEpisode:
    """Pick one meta-test domain uniformly; the rest are meta-train. One PK batch each."""
    if len(domains) < 2:
        raise ValueError("an episode needs at least 2 source domains")
    t = int(rng.integers(len(domains)))
    train = [d for i, d in enumerate(domains) if i != t]
    episode = MetaEpisode(
        meta_test_domain=domains[t].domain_id,
        meta_train_domains=[d.domain_id for d in train],
        train_batches=[sample_pk_batch(d, P, K, rng) for d in train],
        test_batch=sample_pk_batch(domains[t], P, K, rng),
    )
    ids = set(episode.meta_train_domains)
    assert episode.meta_test_domain not in ids
    assert ids | {episode.meta_test_domain} == {d.domain_id for d in domains}
    return episode


def save_domains(domains: Sequence[DomainDataset], path: str | Path) -> None:
    rows = []
    for ds in domains:
        head = np.column_stack([np.full(len(ds), ds.domain_id), ds.labels])
        rows.append(np.column_stack([head, ds.features]))
    table = np.vstack(rows)
    d = table.shape[1] - 2
    fmt = ["%d", "%d"] + ["%.17g"] * d
    np.savetxt(path, table, fmt=fmt, header=f"domain_id identity f0..f{d - 1}")


def load_domains(path: str | Path) -> list[DomainDataset]:
    table = np.loadtxt(path, ndmin=2)
    out = []
    for dom in np.unique(table[:, 0]).astype(int):
        rows = table[table[:, 0] == dom]
        labels = rows[:, 1].astype(np.int64)
        out.append(DomainDataset(int(dom), rows[:, 2:].copy(), labels, int(labels.max()) + 1))
    return out
