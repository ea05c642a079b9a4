"""Triplet loss, identification heads and the composite meta losses."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor

from .encoder import DTYPE, Encoder, EncoderParams, l2_normalize
from .memory import IdentityMemory, memory_id_loss
from .metabn import MetaBNState


def pairwise_euclidean(x: Tensor) -> Tensor:
    diff = x.unsqueeze(1) - x.unsqueeze(0)
    # the clamp keeps sqrt differentiable on the zero diagonal
    return (diff.pow(2).sum(-1)).clamp_min(1e-12).sqrt()


def triplet_loss(embeddings: Tensor, labels, margin: float = 0.3) -> Tensor:
    """Batch-hard triplet loss, averaged over anchors.

    For every anchor the farthest same-identity sample is the positive and
    the closest other-identity sample the negative.
    """
    if margin < 0:
        raise ValueError("margin must be non-negative")
    labels = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    _, counts = torch.unique(labels, return_counts=True)
    if len(counts) < 2:
        raise ValueError("triplet loss needs at least 2 identities in the batch")
    if torch.any(counts < 2):
        raise ValueError("triplet loss needs at least 2 instances of every identity in the batch")
    dist = pairwise_euclidean(embeddings)
    same = labels.unsqueeze(0) == labels.unsqueeze(1)
    eye = torch.eye(len(labels), dtype=torch.bool)
    d_p = dist.masked_fill(~same | eye, float("-inf")).amax(1)
    d_n = dist.masked_fill(same, float("inf")).amin(1)
    return F.relu(d_p - d_n + margin).mean()


@dataclass
class FCClassifier:
    """Parametric identification head; its weights live in the parameter dict.

    ``global``: one bias-free linear layer over the union of all source
    identities, labels offset by the preceding domains' identity counts.
    ``parallel``: one layer per domain scoring only that domain's identities.
    """

    variant: str
    domain_ids: list[int]
    n_identities: list[int]
    embed_dim: int

    def __post_init__(self):
        if self.variant not in ("global", "parallel"):
            raise ValueError(f"unknown FC variant {self.variant!r}")

    @property
    def total_identities(self) -> int:
        return sum(self.n_identities)

    def key(self, domain_id: int) -> str:
        return "classifier.global.weight" if self.variant == "global" else f"classifier.d{domain_id}.weight"

    def init_weights(self, generator: torch.Generator | None = None) -> dict[str, Tensor]:
        std = 0.001
        if self.variant == "global":
            shapes = {self.key(0): self.total_identities}
        else:
            shapes = {self.key(d): n for d, n in zip(self.domain_ids, self.n_identities)}
        return {
            k: (torch.randn(n, self.embed_dim, generator=generator, dtype=DTYPE) * std).requires_grad_(True)
            for k, n in shapes.items()
        }

    def offset(self, domain_id: int) -> int:
        if self.variant == "parallel":
            return 0
        pos = self.domain_ids.index(domain_id)
        return sum(self.n_identities[:pos])

    def width(self, domain_id: int) -> int:
        if self.variant == "global":
            return self.total_identities
        return self.n_identities[self.domain_ids.index(domain_id)]

    def target(self, domain_id: int, labels: Tensor) -> Tensor:
        n = self.n_identities[self.domain_ids.index(domain_id)]
        if labels.numel() and (labels.min() < 0 or labels.max() >= n):
            raise ValueError(f"label overflow for domain {domain_id} with {n} identities")
        return labels + self.offset(domain_id)

    def logits(self, weights: dict[str, Tensor], embeddings: Tensor, domain_id: int) -> Tensor:
        return embeddings @ weights[self.key(domain_id)].T


def fc_id_loss(classifier: FCClassifier, weights: dict[str, Tensor], embeddings: Tensor, domain_id: int, labels) -> Tensor:
    labels = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    target = classifier.target(domain_id, labels)
    return F.cross_entropy(classifier.logits(weights, embeddings, domain_id), target)


class MemoryHead:
    """Identification loss against per-domain memories (on L2-normalized embeddings)."""

    def __init__(self, memories: dict[int, IdentityMemory]):
        self.memories = memories

    def __call__(self, weights, embeddings: Tensor, domain_id: int, labels) -> Tensor:
        if domain_id not in self.memories:
            raise KeyError(f"no memory for domain {domain_id}")
        return memory_id_loss(self.memories[domain_id], l2_normalize(embeddings), labels)


class FCHead:
    def __init__(self, classifier: FCClassifier):
        self.classifier = classifier

    def __call__(self, weights, embeddings: Tensor, domain_id: int, labels) -> Tensor:
        return fc_id_loss(self.classifier, weights, embeddings, domain_id, labels)


def _tensor(x) -> Tensor:
    return torch.as_tensor(x, dtype=DTYPE)


def domain_loss(encoder, params, batch, head, margin, weights=None, metabn=None, update_stats=True):
    """Triplet + identification loss on one domain's batch. Returns (loss, raw embeddings)."""
    w = params.weights if weights is None else weights
    emb = encoder.forward(params, _tensor(batch.features), train=True, update_stats=update_stats, weights=w, metabn=metabn)
    loss = triplet_loss(emb, batch.labels, margin) + head(w, emb, batch.domain_id, batch.labels)
    return loss, emb


def meta_train_loss(
    encoder: Encoder,
    params: EncoderParams,
    batches: Sequence,
    head,
    margin: float = 0.3,
    metabn: MetaBNState | None = None,
    update_stats: bool = True,
) -> tuple[Tensor, list[Tensor]]:
    """Mean over meta-train domains of triplet + identification loss.

    Each domain is forwarded as its own batch, so with ``metabn`` set its
    batch statistics are recorded in order. Returns the loss and the raw
    embeddings of every batch.
    """
    if not batches:
        raise ValueError("meta_train_loss needs at least one batch")
    losses, embs = [], []
    for batch in batches:
        loss, emb = domain_loss(encoder, params, batch, head, margin, metabn=metabn, update_stats=update_stats)
        losses.append(loss)
        embs.append(emb)
    return torch.stack(losses).mean(), embs


def meta_test_loss(
    encoder: Encoder,
    params: EncoderParams,
    weights: dict[str, Tensor],
    batch,
    head,
    margin: float = 0.3,
    metabn: MetaBNState | None = None,
    generator: torch.Generator | None = None,
    lambda_generator: torch.Generator | None = None,
) -> Tensor:
    """Meta-test loss under the inner-updated ``weights``.

    The triplet term sees the plain-BN embeddings; the identification term is
    averaged over the MetaBN-mixed copies (or uses the plain embeddings when
    ``metabn`` is None). Running statistics of ``params`` are left untouched.
    """
    copy = EncoderParams(weights, {k: v.clone() for k, v in params.stats.items()})
    x = _tensor(batch.features)
    feats = encoder.features(copy, x, train=True, update_stats=True, weights=weights)
    gamma, beta = encoder.last_bn_params(weights)
    plain = encoder._bn(encoder.last_bn, feats, weights, copy.stats, True, True)
    tri = triplet_loss(plain, batch.labels, margin)
    if metabn is None:
        return tri + head(weights, plain, batch.domain_id, batch.labels)
    mixed = metabn.metatest_forward(feats, gamma, beta, generator, lambda_generator)
    ident = torch.stack([head(weights, f, batch.domain_id, batch.labels) for f in mixed]).mean()
    return tri + ident
