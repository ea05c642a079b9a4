"""MetaBN: batch normalization that diversifies meta-test features.

During meta-train the layer is ordinary BN and remembers each meta-train
domain's batch mean and variance. During meta-test it draws one Gaussian
sample per meta-test feature from each remembered distribution, blends the
samples into the meta-test batch with a Beta(1, 1) coefficient, and batch
normalizes the blend. Sampled features are constants for autodiff.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import Tensor

from .encoder import batch_norm


@dataclass
class MetaBNState:
    eps: float = 1e-5
    beta_a: float = 1.0
    beta_b: float = 1.0
    # fixed mixing coefficient; None draws from Beta(beta_a, beta_b)
    lam: float | None = None
    # (mean, biased variance) per meta-train domain of the current episode
    saved_stats: list[tuple[Tensor, Tensor]] = field(default_factory=list)
    last_lambdas: list[float] = field(default_factory=list)

    def reset(self) -> None:
        self.saved_stats.clear()
        self.last_lambdas.clear()

    def metatrain_forward(self, feats: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
        if feats.shape[0] < 2:
            raise ValueError("MetaBN needs a batch of at least 2")
        out, mean, var = batch_norm(feats, gamma, beta, self.eps)
        self.saved_stats.append((mean.detach(), var.detach()))
        return out

    def sample_domain_features(self, i: int, batch_size: int, generator: torch.Generator | None = None) -> Tensor:
        if not 0 <= i < len(self.saved_stats):
            raise IndexError(f"no saved statistics for meta-train domain {i}")
        mean, var = self.saved_stats[i]
        noise = torch.randn(batch_size, mean.shape[0], generator=generator, dtype=mean.dtype)
        return mean + noise * var.clamp_min(0).sqrt()

    def draw_lambda(self, generator: torch.Generator | None = None) -> float:
        # always consume the stream so forcing lam does not shift later draws
        seed = int(torch.randint(2**62, (1,), generator=generator))
        drawn = float(np.random.default_rng(seed).beta(self.beta_a, self.beta_b))
        return drawn if self.lam is None else float(self.lam)

    def metatest_forward(
        self,
        feats: Tensor,
        gamma: Tensor,
        beta: Tensor,
        generator: torch.Generator | None = None,
        lambda_generator: torch.Generator | None = None,
    ) -> list[Tensor]:
        """One normalized, mixed copy of ``feats`` per saved meta-train domain.

        ``generator`` drives the Gaussian samples, ``lambda_generator`` (falling
        back to ``generator``) the mixing coefficients.
        """
        if not self.saved_stats:
            raise RuntimeError("metatest_forward called before any meta-train statistics were saved")
        if feats.shape[0] < 2:
            raise ValueError("MetaBN needs a batch of at least 2")
        outs = []
        self.last_lambdas = []
        for i in range(len(self.saved_stats)):
            lam = self.draw_lambda(lambda_generator or generator)
            z = self.sample_domain_features(i, feats.shape[0], generator)
            mixed = lam * feats + (1 - lam) * z
            out, _, _ = batch_norm(mixed, gamma, beta, self.eps)
            outs.append(out)
            self.last_lambdas.append(lam)
        return outs
