"""Functional MLP feature encoder with batch normalization.

Layout: ``[Linear -> BN -> ReLU] * len(hidden_dims) -> Linear -> BN``. The
final BN ("embed_bn") is the slot MetaBN takes over during meta-training.
Parameters are held in plain dicts so a forward pass can run on any set of
tensors, including the differentiable inner-loop copy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor

from .config import EncoderConfig

DTYPE = torch.float64


@dataclass
class EncoderParams:
    weights: dict[str, Tensor]  # learnable
    stats: dict[str, Tensor]  # BN running mean / var

    def clone(self) -> "EncoderParams":
        return EncoderParams(
            weights={k: v.detach().clone().requires_grad_(v.requires_grad) for k, v in self.weights.items()},
            stats={k: v.detach().clone() for k, v in self.stats.items()},
        )

    def named_tensors(self) -> dict[str, Tensor]:
        return {**self.weights, **self.stats}


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float) -> tuple[Tensor, Tensor, Tensor]:
    """Train-mode BN. Returns the output plus the (biased) batch mean and variance."""
    mean = x.mean(0)
    var = x.var(0, unbiased=False)
    out = gamma * (x - mean) / torch.sqrt(var + eps) + beta
    return out, mean, var


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    return x / (x.norm(dim=-1, keepdim=True) + eps)


class Encoder:
    def __init__(self, config: EncoderConfig):
        self.config = config
        dims = [config.input_dim, *config.hidden_dims]
        self.layers = [(f"fc{i}", dims[i], dims[i + 1], f"bn{i}") for i in range(len(config.hidden_dims))]
        self.layers.append(("embed", dims[-1], config.embed_dim, "embed_bn"))

    @property
    def last_bn(self) -> str:
        return "embed_bn"

    def init_params(self, generator: torch.Generator | None = None) -> EncoderParams:
        weights, stats = {}, {}
        for fc, d_in, d_out, bn in self.layers:
            bound = 1.0 / math.sqrt(d_in)
            w = (torch.rand(d_out, d_in, generator=generator, dtype=DTYPE) * 2 - 1) * math.sqrt(6.0 / d_in)
            b = (torch.rand(d_out, generator=generator, dtype=DTYPE) * 2 - 1) * bound
            weights[f"{fc}.weight"] = w
            weights[f"{fc}.bias"] = b
            weights[f"{bn}.weight"] = torch.ones(d_out, dtype=DTYPE)
            weights[f"{bn}.bias"] = torch.zeros(d_out, dtype=DTYPE)
            stats[f"{bn}.running_mean"] = torch.zeros(d_out, dtype=DTYPE)
            stats[f"{bn}.running_var"] = torch.ones(d_out, dtype=DTYPE)
        for v in weights.values():
            v.requires_grad_(True)
        return EncoderParams(weights, stats)

    def _bn(self, name, x, weights, stats, train, update_stats):
        gamma, beta = weights[f"{name}.weight"], weights[f"{name}.bias"]
        eps = self.config.bn_eps
        if not train:
            mean, var = stats[f"{name}.running_mean"], stats[f"{name}.running_var"]
            return gamma * (x - mean) / torch.sqrt(var + eps) + beta
        out, mean, var = batch_norm(x, gamma, beta, eps)
        if update_stats:
            self.update_running_stats(name, stats, mean, var, x.shape[0])
        return out

    def update_running_stats(self, name, stats, mean, var, n):
        mom = self.config.bn_momentum
        unbiased = var.detach() * n / (n - 1)
        with torch.no_grad():
            rm, rv = stats[f"{name}.running_mean"], stats[f"{name}.running_var"]
            rm.mul_(1 - mom).add_(mom * mean.detach())
            rv.mul_(1 - mom).add_(mom * unbiased)

    def features(
        self,
        params: EncoderParams,
        x: Tensor,
        train: bool = True,
        update_stats: bool = True,
        weights: dict[str, Tensor] | None = None,
    ) -> Tensor:
        """Everything up to (not including) the last BN: the input MetaBN sees.

        ``weights`` overrides ``params.weights`` (used for the inner-loop copy),
        while running statistics always come from ``params.stats``.
        """
        if x.shape[1] != self.config.input_dim:
            raise ValueError(f"expected input width {self.config.input_dim}, got {x.shape[1]}")
        if train and x.shape[0] < 2:
            raise ValueError("train-mode forward needs a batch of at least 2 (batch statistics)")
        w = params.weights if weights is None else weights
        h = x
        for fc, _, _, bn in self.layers[:-1]:
            h = F.linear(h, w[f"{fc}.weight"], w[f"{fc}.bias"])
            h = F.relu(self._bn(bn, h, w, params.stats, train, update_stats))
        fc = self.layers[-1][0]
        return F.linear(h, w[f"{fc}.weight"], w[f"{fc}.bias"])

    def forward(
        self,
        params: EncoderParams,
        x: Tensor,
        train: bool = True,
        update_stats: bool = True,
        weights: dict[str, Tensor] | None = None,
        metabn=None,
    ) -> Tensor:
        """Raw (un-normalized) embeddings.

        With ``metabn`` given in train mode the last BN records its batch
        statistics for the upcoming meta-test stage. In eval mode the MetaBN
        slot is plain BN on running statistics.
        """
        w = params.weights if weights is None else weights
        feats = self.features(params, x, train, update_stats, weights=w)
        name = self.last_bn
        if train and metabn is not None:
            out = metabn.metatrain_forward(feats, w[f"{name}.weight"], w[f"{name}.bias"])
            mean, var = metabn.saved_stats[-1]
            if update_stats:
                self.update_running_stats(name, params.stats, mean, var, x.shape[0])
            return out
        return self._bn(name, feats, w, params.stats, train, update_stats)

    def last_bn_params(self, weights: dict[str, Tensor]) -> tuple[Tensor, Tensor]:
        return weights[f"{self.last_bn}.weight"], weights[f"{self.last_bn}.bias"]

    def embed(self, params: EncoderParams, x, batch_size: int = 1024) -> Tensor:
        """Eval-mode embeddings of a whole array, without gradients."""
        x = torch.as_tensor(x, dtype=DTYPE)
        with torch.no_grad():
            outs = [self.forward(params, x[i : i + batch_size], train=False) for i in range(0, len(x), batch_size)]
        return torch.cat(outs)


def clone_params(params: EncoderParams) -> EncoderParams:
    return params.clone()
