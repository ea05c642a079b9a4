"""Episodic meta-training loop and the pooled no-meta baseline.

One meta iteration:

1. meta-train loss on N_S - 1 source domains under the current weights;
2. one fresh-moment Adam step on a differentiable copy of the weights;
3. meta-test loss on the held-back source domain under that copy;
4. outer AdamW step on the gradient of (1) + (3) w.r.t. the original weights,
   which includes the second-order path through (2);
5. momentum update of the identity memories with the detached embeddings
   of the original weights.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from torch import Tensor

from . import synthdata
from .checkpoint import save_checkpoint
from .config import ExperimentConfig, TrainConfig
from .encoder import DTYPE, Encoder, EncoderParams, l2_normalize
from .evalkit import RetrievalSplit, evaluate
from .losses import FCClassifier, FCHead, MemoryHead, domain_loss, meta_test_loss, meta_train_loss
from .memory import IdentityMemory, init_memory, update_memory
from .metabn import MetaBNState

log = logging.getLogger(__name__)

STREAMS = ("data", "episodes", "lambda", "z", "init", "split")


def make_streams(seed: int) -> dict[str, np.random.SeedSequence]:
    """Named, independent sub-streams of one root seed."""
    root = np.random.SeedSequence(seed)
    return dict(zip(STREAMS, root.spawn(len(STREAMS))))


def torch_generator(seq: np.random.SeedSequence) -> torch.Generator:
    return torch.Generator().manual_seed(int(seq.generate_state(1, dtype=np.uint64)[0] >> 1))


def int_seed(seq: np.random.SeedSequence) -> int:
    return int(seq.generate_state(1)[0])


# --------------------------------------------------------------------------- schedule


@dataclass
class ScheduleState:
    inner_lr: float = 3.5e-4
    outer_lr: float = 3.5e-4
    warmup_epochs: int = 10
    decay_epochs: tuple[int, ...] = (30, 50)
    decay_factor: float = 0.1
    warmup_factor: float = 0.1

    @classmethod
    def from_config(cls, t: TrainConfig) -> "ScheduleState":
        return cls(t.inner_lr, t.outer_lr, t.warmup_epochs, t.decay_epochs, t.decay_factor, t.warmup_factor)

    def factor(self, epoch: float) -> float:
        if epoch < 0:
            raise ValueError("epoch must be non-negative")
        if self.warmup_epochs > 0 and epoch < self.warmup_epochs:
            f = self.warmup_factor + (1.0 - self.warmup_factor) * epoch / self.warmup_epochs
        else:
            f = 1.0
        for e in self.decay_epochs:
            if epoch >= e:
                f *= self.decay_factor
        return f


def lr_at(schedule: ScheduleState, epoch: float) -> tuple[float, float]:
    """(inner, outer) learning rates; both follow the same warmup/step shape."""
    f = schedule.factor(epoch)
    return schedule.inner_lr * f, schedule.outer_lr * f


# --------------------------------------------------------------------------- inner step


def inner_update(
    weights: dict[str, Tensor],
    loss: Tensor,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    first_order: bool = False,
) -> dict[str, Tensor]:
    """One bias-corrected Adam step from zero moments, as a function of ``weights``.

    With ``first_order`` the step direction is detached, so the returned
    weights depend on the originals only through the identity.
    Parameters the loss does not touch are copied unchanged.
    """
    names = list(weights)
    grads = torch.autograd.grad(
        loss, [weights[k] for k in names], create_graph=not first_order, retain_graph=True, allow_unused=True
    )
    b1, b2 = betas
    out = {}
    for name, g in zip(names, grads):
        w = weights[name]
        if g is None:
            out[name] = w
            continue
        if not torch.isfinite(g).all():
            raise FloatingPointError(f"non-finite inner-loop gradient for {name}")
        if first_order:
            g = g.detach()
        m_hat = (1 - b1) * g / (1 - b1)
        v_hat = (1 - b2) * g * g / (1 - b2)
        out[name] = w - lr * m_hat / torch.sqrt(v_hat + eps)
    return out


# --------------------------------------------------------------------------- state


@dataclass
class TrainerState:
    config: ExperimentConfig
    encoder: Encoder
    params: EncoderParams
    optimizer: torch.optim.Optimizer
    schedule: ScheduleState
    head: Callable
    memories: dict[int, IdentityMemory]
    metabn: MetaBNState | None
    episode_rng: np.random.Generator
    lambda_gen: torch.Generator
    z_gen: torch.Generator
    iteration: int = 0
    epoch: int = 0
    history: list[dict] = field(default_factory=list)

    @property
    def mode(self) -> str:
        return self.config.train.mode

    def set_epoch(self, epoch: int) -> tuple[float, float]:
        self.epoch = epoch
        alpha, beta = lr_at(self.schedule, epoch)
        for group in self.optimizer.param_groups:
            group["lr"] = beta
        return alpha, beta


def build_optimizer(weights: dict[str, Tensor], t: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.AdamW(
        list(weights.values()), lr=t.outer_lr, betas=t.betas, eps=t.adam_eps, weight_decay=t.weight_decay
    )


def init_state(
    config: ExperimentConfig, sources: Sequence[synthdata.DomainDataset], streams: dict | None = None
) -> TrainerState:
    config.validate()
    t = config.train
    streams = streams or make_streams(config.seed)
    encoder = Encoder(config.encoder)
    params = encoder.init_params(torch_generator(streams["init"]))
    memories: dict[int, IdentityMemory] = {}
    if t.classifier == "memory":
        for ds in sources:
            memories[ds.domain_id] = init_memory(ds, encoder, params, t.momentum, t.temperature)
        head = MemoryHead(memories)
    else:
        clf = FCClassifier(
            variant=t.classifier.removeprefix("fc_"),
            domain_ids=[ds.domain_id for ds in sources],
            n_identities=[ds.n_identities for ds in sources],
            embed_dim=config.encoder.embed_dim,
        )
        params.weights.update(clf.init_weights(torch_generator(streams["init"])))
        head = FCHead(clf)
    metabn = None
    if t.mode == "meta+metabn":
        metabn = MetaBNState(eps=t.metabn_eps, lam=t.metabn_lambda)
    return TrainerState(
        config=config,
        encoder=encoder,
        params=params,
        optimizer=build_optimizer(params.weights, t),
        schedule=ScheduleState.from_config(t),
        head=head,
        memories=memories,
        metabn=metabn,
        episode_rng=np.random.default_rng(streams["episodes"]),
        lambda_gen=torch_generator(streams["lambda"]),
        z_gen=torch_generator(streams["z"]),
    )


# --------------------------------------------------------------------------- steps


def _apply_outer(state: TrainerState, grads: Sequence[Tensor | None]) -> float:
    sq = 0.0
    for w, g in zip(state.params.weights.values(), grads):
        if g is None:
            w.grad = None
            continue
        if not torch.isfinite(g).all():
            raise FloatingPointError("non-finite outer gradient")
        w.grad = g.detach()
        sq += float(g.detach().pow(2).sum())
    state.optimizer.step()
    state.optimizer.zero_grad(set_to_none=True)
    return math.sqrt(sq)


def _update_memories(state: TrainerState, pairs) -> None:
    if not state.memories:
        return
    for domain_id, emb, labels in pairs:
        update_memory(state.memories[domain_id], l2_normalize(emb.detach()), labels)


def bilevel_gradient(
    weights: dict[str, Tensor],
    meta_train: Callable[[dict[str, Tensor]], Tensor],
    meta_test: Callable[[dict[str, Tensor]], Tensor],
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    first_order: bool = False,
):
    """Gradient of ``meta_train(w) + meta_test(w')`` w.r.t. ``w``, where w' is
    one inner Adam step on ``meta_train``. Returns (L_mtr, L_mte, grads)."""
    mtr = meta_train(weights)
    fast = inner_update(weights, mtr, lr, betas, eps, first_order)
    mte = meta_test(fast)
    grads = torch.autograd.grad(mtr + mte, list(weights.values()), allow_unused=True)
    return mtr, mte, grads


def meta_gradient(state: TrainerState, episode: synthdata.MetaEpisode, alpha: float):
    """Losses and the outer gradient for one episode; does not touch the weights."""
    t = state.config.train
    enc, params = state.encoder, state.params
    if state.metabn is not None:
        state.metabn.reset()
    embs: list[Tensor] = []

    def meta_train(w):
        loss, e = meta_train_loss(enc, params, episode.train_batches, state.head, t.margin, metabn=state.metabn)
        embs.extend(e)
        return loss

    def meta_test(w):
        return meta_test_loss(
            enc, params, w, episode.test_batch, state.head, t.margin,
            metabn=state.metabn, generator=state.z_gen, lambda_generator=state.lambda_gen,
        )

    mtr, mte, grads = bilevel_gradient(params.weights, meta_train, meta_test, alpha, t.betas, t.inner_eps, t.first_order)
    return mtr, mte, embs, grads


def meta_step(state: TrainerState, episode: synthdata.MetaEpisode) -> dict:
    if state.mode == "baseline":
        raise RuntimeError("meta_step called in baseline mode")
    alpha, beta = lr_at(state.schedule, state.epoch)
    mtr, mte, embs, grads = meta_gradient(state, episode, alpha)
    # memory features for the meta-test domain come from the original weights
    with torch.no_grad():
        x_t = torch.as_tensor(episode.test_batch.features, dtype=DTYPE)
        emb_t = state.encoder.forward(state.params, x_t, train=True, update_stats=False)
    grad_norm = _apply_outer(state, grads)
    pairs = [(b.domain_id, e, b.labels) for b, e in zip(episode.train_batches, embs)]
    pairs.append((episode.test_batch.domain_id, emb_t, episode.test_batch.labels))
    _update_memories(state, pairs)
    if state.metabn is not None:
        state.metabn.reset()
    state.iteration += 1
    return {
        "iteration": state.iteration,
        "epoch": state.epoch,
        "meta_test_domain": episode.meta_test_domain,
        "L_mtr": mtr.item(),
        "L_mte": mte.item(),
        "grad_norm": grad_norm,
        "lr_inner": alpha,
        "lr_outer": beta,
    }


def baseline_step(state: TrainerState, batches: Sequence[synthdata.Batch]) -> dict:
    """One AdamW step on the mean per-domain loss over all source batches."""
    t = state.config.train
    _, beta = lr_at(state.schedule, state.epoch)
    loss, embs = meta_train_loss(state.encoder, state.params, batches, state.head, t.margin)
    grads = torch.autograd.grad(loss, list(state.params.weights.values()), allow_unused=True)
    grad_norm = _apply_outer(state, grads)
    _update_memories(state, [(b.domain_id, e, b.labels) for b, e in zip(batches, embs)])
    state.iteration += 1
    return {
        "iteration": state.iteration,
        "epoch": state.epoch,
        "L_mtr": loss.item(),
        "grad_norm": grad_norm,
        "lr_outer": beta,
    }


# --------------------------------------------------------------------------- loop


@dataclass
class RunData:
    sources: list[synthdata.DomainDataset]
    heldout: synthdata.DomainDataset
    split: tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]


def build_data(config: ExperimentConfig, streams: dict | None = None) -> RunData:
    streams = streams or make_streams(config.seed)
    d = config.data
    specs = synthdata.make_shift_specs(
        d.n_domains, d.ids_per_domain, d.samples_per_id, d.input_dim,
        shift=d.shift, offset=d.offset, style=d.style, noise=d.noise, seed=int_seed(streams["data"]),
        shortcut=d.shortcut,
    )
    domains = synthdata.generate_domains(specs)
    heldout = domains[config.held_out]
    split = synthdata.retrieval_split(heldout, seed=int_seed(streams["split"]))
    return RunData([domains[i] for i in config.sources()], heldout, split)


def evaluate_split(state: TrainerState, split) -> dict:
    qx, qy, gx, gy = split
    enc, params = state.encoder, state.params
    return evaluate(RetrievalSplit(enc.embed(params, qx).numpy(), qy, enc.embed(params, gx).numpy(), gy))


def iterations_per_epoch(config: ExperimentConfig, sources) -> int:
    if config.train.iters_per_epoch:
        return config.train.iters_per_epoch
    return math.ceil(min(len(s) for s in sources) / config.train.batch_size)


def train(
    config: ExperimentConfig,
    out_dir: str | Path | None = None,
    data: RunData | None = None,
    on_record: Callable[[dict], None] | None = None,
) -> tuple[TrainerState, list[dict]]:
    """Full training run. Returns the final state and the metrics history.

    With ``out_dir`` the metrics stream (``metrics.jsonl``), the final result
    (``result.json``) and a checkpoint (``checkpoint.npz``) are written there.
    """
    config.validate()
    streams = make_streams(config.seed)
    data = data or build_data(config, streams)
    state = init_state(config, data.sources, streams)
    t = config.train
    n_iter = iterations_per_epoch(config, data.sources)
    sink = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        sink = open(out_dir / "metrics.jsonl", "w")

    def emit(rec: dict) -> None:
        state.history.append(rec)
        if sink is not None:
            sink.write(json.dumps(rec) + "\n")
        if on_record is not None:
            on_record(rec)

    try:
        for epoch in range(t.epochs):
            state.set_epoch(epoch)
            for _ in range(n_iter):
                if t.mode == "baseline":
                    batches = [synthdata.sample_pk_batch(s, t.P, t.K, state.episode_rng) for s in data.sources]
                    rec = baseline_step(state, batches)
                else:
                    episode = synthdata.split_episode(data.sources, state.episode_rng, t.P, t.K)
                    rec = meta_step(state, episode)
                emit({"type": "iter", **rec})
            last = epoch == t.epochs - 1
            if t.eval_every and ((epoch + 1) % t.eval_every == 0 or last):
                emit({"type": "eval", "epoch": epoch, "iteration": state.iteration, **evaluate_split(state, data.split)})
            if out_dir is not None and t.checkpoint_every and (epoch + 1) % t.checkpoint_every == 0:
                save_checkpoint(out_dir / f"checkpoint-e{epoch + 1:03d}.npz", state)
        final = evaluate_split(state, data.split)
        emit({"type": "final", "iteration": state.iteration, **final})
        if out_dir is not None:
            save_checkpoint(out_dir / "checkpoint.npz", state)
            with open(out_dir / "result.json", "w") as fh:
                json.dump({"name": config.name, "digest": config.digest(), **final}, fh, indent=2)
    finally:
        if sink is not None:
            sink.close()
    return state, state.history
