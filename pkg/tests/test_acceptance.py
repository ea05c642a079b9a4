"""Acceptance criteria 1-9, one test each, reported as PASS/FAIL lines.

The directional criteria (5-7) train on the shipped desk-scale config with
seeds that were never used while choosing its hyperparameters.
"""

import math
import time
from pathlib import Path

import numpy as np
import pytest
import torch
from scipy import stats

from m3l.config import DataConfig, EncoderConfig, ExperimentConfig, TrainConfig, load_config
from m3l.encoder import DTYPE, Encoder, l2_normalize
from m3l.evalkit import RetrievalSplit, average_precision, cmc_rank1, mean_ap
from m3l.losses import MemoryHead
from m3l.memory import IdentityMemory, memory_id_loss, update_memory
from m3l.metabn import MetaBNState
from m3l.synthdata import Batch, MetaEpisode
from m3l.trainer import ScheduleState, TrainerState, build_optimizer, lr_at, meta_gradient, train

DESK = Path(__file__).resolve().parents[1] / "configs" / "desk.yaml"
SEEDS = list(range(30))


# --------------------------------------------------------------------------- 1


class FrozenStats(MetaBNState):
    """Records whatever statistics were frozen in, so FD sees them as constants."""

    frozen: list | None = None

    def metatrain_forward(self, feats, gamma, beta):
        out = super().metatrain_forward(feats, gamma, beta)
        if self.frozen is not None:
            self.saved_stats[-1] = self.frozen[len(self.saved_stats) - 1]
        return out


def _toy_state(mode):
    """10 learnable parameters: a 2x2 linear map, its bias and the last-BN scale/shift."""
    enc_cfg = EncoderConfig(input_dim=2, hidden_dims=(), embed_dim=2)
    cfg = ExperimentConfig(data=DataConfig(input_dim=2), encoder=enc_cfg, train=TrainConfig(mode=mode, P=2, K=2))
    enc = Encoder(enc_cfg)
    params = enc.init_params(torch.Generator().manual_seed(0))
    with torch.no_grad():
        params.weights["embed_bn.weight"].copy_(torch.tensor([1.3, 0.8]))
        params.weights["embed_bn.bias"].copy_(torch.tensor([0.2, -0.1]))
    g = torch.Generator().manual_seed(1)
    memories = {
        d: IdentityMemory(d, l2_normalize(torch.randn(3, 2, generator=g, dtype=DTYPE)), temperature=0.5)
        for d in range(3)
    }
    state = TrainerState(
        config=cfg, encoder=enc, params=params, optimizer=build_optimizer(params.weights, cfg.train),
        schedule=ScheduleState.from_config(cfg.train), head=MemoryHead(memories), memories=memories,
        metabn=FrozenStats() if mode == "meta+metabn" else None, episode_rng=np.random.default_rng(0),
        lambda_gen=torch.Generator(), z_gen=torch.Generator(),
    )
    rng = np.random.default_rng(2)
    labels = np.array([0, 0, 1, 1])
    batches = [Batch(d, rng.standard_normal((4, 2)) * (1 + d) + d, labels) for d in range(3)]
    return state, MetaEpisode(2, [0, 1], batches[:2], batches[2])


def _objective(state, episode, weights, alpha):
    state.params.weights = weights
    state.lambda_gen.manual_seed(5)
    state.z_gen.manual_seed(6)
    mtr, mte, _, grads = meta_gradient(state, episode, alpha)
    return (mtr + mte).item(), torch.cat([g.reshape(-1) for g in grads])


def _fd_check(mode, alpha=0.05, h=1e-6):
    state, episode = _toy_state(mode)
    base = {k: v.detach().clone().requires_grad_(True) for k, v in state.params.weights.items()}
    _, grad = _objective(state, episode, base, alpha)
    if state.metabn is not None:
        # Z and the saved statistics are differentiation constants by design
        state.metabn.frozen = list(state.metabn.saved_stats)
    fd = torch.zeros_like(grad)
    pos = 0
    for name, w in base.items():
        for i in range(w.numel()):
            vals = []
            for sign in (1, -1):
                moved = {k: v.detach().clone().requires_grad_(True) for k, v in base.items()}
                with torch.no_grad():
                    moved[name].view(-1)[i] += sign * h
                vals.append(_objective(state, episode, moved, alpha)[0])
            fd[pos] = (vals[0] - vals[1]) / (2 * h)
            pos += 1
    return grad.numel(), ((grad - fd).norm() / fd.norm()).item()


def test_criterion_1_meta_gradient_matches_finite_differences(report):
    t0 = time.perf_counter()
    n_meta, rel_meta = _fd_check("meta")
    n_mbn, rel_mbn = _fd_check("meta+metabn")
    elapsed = time.perf_counter() - t0
    ok = max(n_meta, n_mbn) <= 10 and rel_meta < 1e-3 and rel_mbn < 1e-3 and elapsed < 5.0
    report(1, ok, f"params={n_meta} rel_err meta={rel_meta:.1e} meta+metabn={rel_mbn:.1e} time={elapsed:.2f}s")
    assert ok


# --------------------------------------------------------------------------- 2


def test_criterion_2_memory_properties(report):
    checks = {}
    eye = l2_normalize(torch.eye(3, dtype=DTYPE))
    batch = l2_normalize(torch.tensor([[1.0, 1.0, 0.0], [0.0, 1.0, 1.0]], dtype=DTYPE))

    mem = IdentityMemory(0, eye.clone(), momentum=1.0)
    update_memory(mem, batch, [2, 2])
    checks["m=1 no-op"] = (mem.centroids - eye).abs().max().item() <= 1e-6

    mem = IdentityMemory(0, eye.clone(), momentum=0.0)
    update_memory(mem, batch, [2, 2])
    mean = batch.mean(0)
    checks["m=0 batch mean"] = (mem.centroids[2] - mean / mean.norm()).abs().max().item() <= 1e-6

    g = torch.Generator().manual_seed(0)
    mem = IdentityMemory(0, l2_normalize(torch.randn(20, 8, generator=g, dtype=DTYPE)), momentum=0.2)
    worst = 0.0
    for _ in range(200):
        labels = torch.randint(0, 20, (16,), generator=g)
        update_memory(mem, l2_normalize(torch.randn(16, 8, generator=g, dtype=DTYPE)), labels)
        worst = max(worst, (mem.centroids.norm(dim=1) - 1).abs().max().item())
    checks["unit norm"] = worst <= 1e-6

    single = memory_id_loss(IdentityMemory(0, l2_normalize(torch.tensor([[1.0, 0.0]], dtype=DTYPE))), l2_normalize(torch.tensor([0.6, 0.8], dtype=DTYPE)), 0)
    checks["n_i=1 -> 0"] = abs(single.item()) <= 1e-6
    sym = memory_id_loss(IdentityMemory(0, l2_normalize(torch.eye(5, dtype=DTYPE))), l2_normalize(torch.ones(5, dtype=DTYPE)), 3)
    checks["symmetric -> log n_i"] = abs(sym.item() - math.log(5)) <= 1e-6

    ok = all(checks.values())
    report(2, ok, ", ".join(f"{k}={'ok' if v else 'FAIL'}" for k, v in checks.items()))
    assert ok


# --------------------------------------------------------------------------- 3


def test_criterion_3_metabn_properties(report):
    gamma = torch.tensor([1.5, -0.7, 2.0, 0.3], dtype=DTYPE)
    beta = torch.tensor([0.3, -1.0, 0.0, 4.0], dtype=DTYPE)
    g = torch.Generator().manual_seed(0)
    worst_mean = worst_std = worst_red = 0.0
    counts_ok = True
    for n_sources in (2, 3, 4):
        st = MetaBNState()
        for i in range(n_sources - 1):
            st.metatrain_forward(torch.randn(64, 4, generator=g, dtype=DTYPE) * (3 + i) + i, gamma, beta)
        feats = torch.randn(64, 4, generator=g, dtype=DTYPE) * 3
        outs = st.metatest_forward(feats, gamma, beta, g)
        counts_ok &= len(outs) == n_sources - 1
        for o in outs:
            worst_mean = max(worst_mean, (o.mean(0) - beta).abs().max().item())
            worst_std = max(worst_std, (o.std(0, unbiased=False) - gamma.abs()).abs().max().item())
        st.lam = 1.0
        plain = (feats - feats.mean(0)) / torch.sqrt(feats.var(0, unbiased=False) + st.eps) * gamma + beta
        for o in st.metatest_forward(feats, gamma, beta, g):
            worst_red = max(worst_red, (o - plain).abs().max().item())
    ok = worst_mean <= 1e-5 and worst_std <= 1e-5 and worst_red <= 1e-6 and counts_ok
    report(3, ok, f"mean_err={worst_mean:.1e} std_err={worst_std:.1e} lambda1_err={worst_red:.1e} N_S-1 sets={counts_ok}")
    assert ok


# --------------------------------------------------------------------------- 4


def _oracle_ap(query, qid, gallery, gids):
    ranked = sorted(range(len(gallery)), key=lambda j: (math.dist(query, gallery[j]), j))
    hits, total = 0, 0.0
    for r, j in enumerate(ranked, start=1):
        if gids[j] == qid:
            hits += 1
            total += hits / r
    return total / hits, gids[ranked[0]] == qid


def test_criterion_4_retrieval_metrics(report):
    rng = np.random.default_rng(4)
    worst, r1_ok = 0.0, True
    for _ in range(50):
        n_ids = int(rng.integers(2, 6))
        gids = np.concatenate([np.arange(n_ids), rng.integers(0, n_ids, int(rng.integers(0, 12)))])
        qids = rng.integers(0, n_ids, int(rng.integers(1, 6)))
        q = rng.integers(-2, 3, (len(qids), 2)).astype(float)
        gal = rng.integers(-2, 3, (len(gids), 2)).astype(float)
        pairs = [_oracle_ap(q[i], qids[i], gal, gids) for i in range(len(qids))]
        split = RetrievalSplit(q, qids, gal, gids)
        worst = max(worst, abs(mean_ap(split) - np.mean([p[0] for p in pairs])))
        r1_ok &= cmc_rank1(split) == np.mean([p[1] for p in pairs])
    ap = average_precision([True, False, True])
    ok = worst <= 1e-12 and r1_ok and abs(ap - 0.8333) <= 1e-4 and abs(ap - 5 / 6) <= 1e-6
    report(4, ok, f"max_mAP_diff={worst:.1e} rank1_exact={r1_ok} AP(+,-,+)={ap:.6f}")
    assert ok


# --------------------------------------------------------------------------- 5-7


@pytest.fixture(scope="session")
def desk():
    return load_config(DESK)


class RunCache:
    def __init__(self, base: ExperimentConfig):
        self.base = base
        self.results: dict[str, float] = {}
        self.seconds = 0.0

    def map(self, seed: int, **overrides) -> float:
        cfg = self.base.replace(seed=seed, **{"train.eval_every": 0, **overrides})
        key = cfg.digest()
        if key not in self.results:
            t0 = time.perf_counter()
            self.results[key] = train(cfg)[1][-1]["mAP"]
            self.seconds += time.perf_counter() - t0
        return self.results[key]


@pytest.fixture(scope="session")
def runs(desk):
    return RunCache(desk)


@pytest.mark.slow
def test_criterion_5_meta_and_metabn_ordering(runs, report):
    t0 = time.perf_counter()
    maps = {m: np.array([runs.map(s, **{"train.mode": m}) for s in SEEDS]) for m in ("baseline", "meta", "meta+metabn")}
    elapsed = time.perf_counter() - t0
    mean = {m: v.mean() for m, v in maps.items()}
    p = stats.ttest_rel(maps["meta"], maps["baseline"], alternative="greater").pvalue
    ok = (
        mean["meta+metabn"] >= mean["meta"] >= mean["baseline"]
        and mean["meta"] - mean["baseline"] > 0
        and p < 0.05
        and elapsed < 15 * 60
    )
    report(
        5, ok,
        f"seeds={len(SEEDS)} mAP baseline={mean['baseline']:.4f} meta={mean['meta']:.4f} "
        f"meta+metabn={mean['meta+metabn']:.4f} paired p={p:.4f} time={elapsed:.0f}s",
    )
    assert ok


@pytest.mark.slow
def test_criterion_6_memory_benefits_more_from_meta(runs, report):
    gain = {}
    for clf in ("memory", "fc_global"):
        meta = np.array([runs.map(s, **{"train.mode": "meta", "train.classifier": clf}) for s in SEEDS])
        base = np.array([runs.map(s, **{"train.mode": "baseline", "train.classifier": clf}) for s in SEEDS])
        gain[clf] = float((meta - base).mean())
    ok = gain["memory"] > gain["fc_global"]
    report(6, ok, f"seeds={len(SEEDS)} meta gain memory={gain['memory']:+.4f} fc_global={gain['fc_global']:+.4f}")
    assert ok


@pytest.mark.slow
def test_criterion_7_three_sources_beat_two(runs, desk, report):
    full = desk.sources()
    three = np.mean([runs.map(s) for s in SEEDS])
    two = {}
    for drop in full:
        subset = [d for d in full if d != drop]
        two["+".join(map(str, subset))] = np.mean([runs.map(s, source_domains=subset) for s in SEEDS])
    ok = all(three > v for v in two.values())
    report(7, ok, f"seeds={len(SEEDS)} 3-source={three:.4f} " + " ".join(f"{k}={v:.4f}" for k, v in two.items()))
    assert ok


# --------------------------------------------------------------------------- 8, 9


def test_criterion_8_determinism(desk, tmp_path, report):
    cfg = desk.replace(**{"train.epochs": 2, "train.warmup_epochs": 1, "train.decay_epochs": [1]})
    train(cfg, out_dir=tmp_path / "a")
    train(cfg, out_dir=tmp_path / "b")
    a = (tmp_path / "a" / "metrics.jsonl").read_bytes()
    b = (tmp_path / "b" / "metrics.jsonl").read_bytes()
    ok = a == b and len(a) > 0
    report(8, ok, f"metrics stream {len(a)} bytes, identical={a == b}")
    assert ok


def test_criterion_9_schedule(report):
    s = ScheduleState()  # lr 3.5e-4, warmup 10 epochs from x0.1, decays at 30 and 50
    expected = {0: 3.5e-5, 5: 3.5e-5 + 0.5 * (3.5e-4 - 3.5e-5), 9: 3.5e-5 + 0.9 * (3.5e-4 - 3.5e-5),
                10: 3.5e-4, 29: 3.5e-4, 30: 3.5e-5, 49: 3.5e-5, 50: 3.5e-6, 59: 3.5e-6}
    worst = max(abs(lr_at(s, e)[1] - v) / v for e, v in expected.items())
    inner_same = all(lr_at(s, e)[0] == lr_at(s, e)[1] for e in expected)
    desk_s = ScheduleState(warmup_epochs=5, decay_epochs=(15, 25))
    boundaries = lr_at(desk_s, 14)[1] == 3.5e-4 and abs(lr_at(desk_s, 15)[1] - 3.5e-5) < 1e-18
    ok = worst < 1e-12 and inner_same and boundaries
    report(9, ok, f"max_rel_err={worst:.1e} inner==outer={inner_same} desk boundaries={boundaries}")
    assert ok
