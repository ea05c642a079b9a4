"""Per-domain identity memory used as a non-parametric classifier.

One slot per identity holds the unit-norm centroid of that identity's
embeddings. Slots move by momentum blending with the batch mean, never by
an optimizer, so the loss treats them as constants.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor

from .encoder import Encoder, EncoderParams

NORM_EPS = 1e-12


@dataclass
class IdentityMemory:
    domain_id: int
    centroids: Tensor  # (n_identities, embed_dim), unit rows
    momentum: float = 0.2
    temperature: float = 0.05

    def __post_init__(self):
        if not 0.0 <= self.momentum <= 1.0:
            raise ValueError("momentum must lie in [0, 1]")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")

    @property
    def n_identities(self) -> int:
        return self.centroids.shape[0]


def _normalize_rows(x: Tensor, what: str) -> Tensor:
    norms = x.norm(dim=1, keepdim=True)
    if torch.any(norms < 1e-8):
        bad = torch.nonzero(norms.squeeze(1) < 1e-8).flatten().tolist()
        warnings.warn(f"{what}: near-zero mean feature for identities {bad}; normalizing with epsilon guard")
    return x / (norms + NORM_EPS)


def class_means(embeddings: Tensor, labels: Tensor, n_classes: int) -> tuple[Tensor, Tensor]:
    """Per-class mean rows and a presence mask."""
    sums = torch.zeros(n_classes, embeddings.shape[1], dtype=embeddings.dtype)
    sums.index_add_(0, labels, embeddings)
    counts = torch.bincount(labels, minlength=n_classes).to(embeddings.dtype)
    present = counts > 0
    sums[present] /= counts[present].unsqueeze(1)
    return sums, present


def memory_from_embeddings(
    domain_id: int, embeddings: Tensor, labels: Tensor, n_identities: int, momentum=0.2, temperature=0.05
) -> IdentityMemory:
    embeddings = F.normalize(embeddings.detach(), dim=1, eps=NORM_EPS)
    labels = torch.as_tensor(labels, dtype=torch.long)
    means, present = class_means(embeddings, labels, n_identities)
    if not bool(present.all()):
        missing = torch.nonzero(~present).flatten().tolist()
        raise ValueError(f"domain {domain_id}: identities {missing} have no samples")
    return IdentityMemory(domain_id, _normalize_rows(means, "init_memory"), momentum, temperature)


def init_memory(dataset, encoder: Encoder, params: EncoderParams, momentum=0.2, temperature=0.05) -> IdentityMemory:
    """Slot k = normalized mean of the eval-mode embeddings of identity k."""
    emb = encoder.embed(params, dataset.features)
    return memory_from_embeddings(
        dataset.domain_id, emb, torch.as_tensor(dataset.labels), dataset.n_identities, momentum, temperature
    )


def update_memory(mem: IdentityMemory, embeddings: Tensor, labels) -> IdentityMemory:
    """Momentum update of the slots of identities present in the batch (in place)."""
    labels = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    if labels.numel() and (labels.min() < 0 or labels.max() >= mem.n_identities):
        raise ValueError(f"label out of range for memory with {mem.n_identities} slots")
    with torch.no_grad():
        means, present = class_means(embeddings.detach().to(mem.centroids.dtype), labels, mem.n_identities)
        m = mem.momentum
        blended = m * mem.centroids[present] + (1 - m) * means[present]
        mem.centroids[present] = _normalize_rows(blended, "update_memory")
    return mem


def memory_logits(mem: IdentityMemory, embeddings: Tensor) -> Tensor:
    return embeddings @ mem.centroids.detach().T / mem.temperature


def memory_id_loss(mem: IdentityMemory, embeddings: Tensor, labels) -> Tensor:
    """Mean over the batch of -log softmax(M^T f / tau) at the true slot.

    Accepts a single embedding vector with an integer label as well.
    """
    if mem.temperature <= 0:
        raise ValueError("temperature must be positive")
    single = embeddings.dim() == 1
    if single:
        embeddings = embeddings.unsqueeze(0)
    labels = torch.as_tensor(np.atleast_1d(np.asarray(labels)), dtype=torch.long)
    if labels.min() < 0 or labels.max() >= mem.n_identities:
        raise ValueError(f"label out of range for memory with {mem.n_identities} slots")
    return F.cross_entropy(memory_logits(mem, embeddings), labels)

