import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from m3l.config import ExperimentConfig
from m3l.encoder import DTYPE, clone_params
from m3l.evalkit import RetrievalSplit, cmc_rank1
from m3l.losses import meta_train_loss
from m3l.synthdata import sample_pk_batch, split_episode
from m3l.trainer import (
    ScheduleState,
    baseline_step,
    bilevel_gradient,
    build_data,
    init_state,
    inner_update,
    lr_at,
    make_streams,
    meta_gradient,
    meta_step,
    train,
)


def tiny(mode="meta", **overrides):
    base = {
        "data.ids_per_domain": 8,
        "data.samples_per_id": 6,
        "data.input_dim": 6,
        "encoder.input_dim": 6,
        "encoder.hidden_dims": [8],
        "encoder.embed_dim": 4,
        "train.mode": mode,
        "train.P": 4,
        "train.K": 2,
        "train.epochs": 3,
        "train.warmup_epochs": 1,
        "train.decay_epochs": [2],
        "train.outer_lr": 3.5e-3,
        "train.inner_lr": 3.5e-3,
    }
    base.update(overrides)
    return ExperimentConfig(seed=3).replace(**base)


def w(*values):
    return {f"p{i}": torch.tensor(v, dtype=DTYPE, requires_grad=True) for i, v in enumerate(values)}


# --------------------------------------------------------------------------- schedule


def test_schedule_paper_shape():
    s = ScheduleState()
    assert lr_at(s, 0)[1] == pytest.approx(3.5e-5, rel=1e-12)
    assert lr_at(s, 5)[1] == pytest.approx(0.5 * (3.5e-5 + 3.5e-4), rel=1e-12)
    assert lr_at(s, 10)[1] == pytest.approx(3.5e-4, rel=1e-12)
    assert lr_at(s, 29.999)[1] == pytest.approx(3.5e-4, rel=1e-12)
    assert lr_at(s, 30)[1] == pytest.approx(3.5e-5, rel=1e-12)
    assert lr_at(s, 50)[1] == pytest.approx(3.5e-6, rel=1e-12)
    assert lr_at(s, 59)[0] == lr_at(s, 59)[1]


def test_schedule_rejects_negative_epoch():
    with pytest.raises(ValueError):
        lr_at(ScheduleState(), -1)


@given(a=st.floats(0, 60), b=st.floats(0, 60))
def test_schedule_monotone_within_phases(a, b):
    s = ScheduleState()
    a, b = sorted((a, b))
    fa, fb = s.factor(a), s.factor(b)
    if b < s.warmup_epochs:
        assert fa <= fb + 1e-15
    if a >= s.warmup_epochs:
        assert fb <= fa + 1e-15
    assert 0 < fb <= 1.0


# --------------------------------------------------------------------------- inner step


def test_inner_update_zero_lr_is_identity():
    weights = w([1.0, -2.0], 0.5)
    loss = (weights["p0"] ** 2).sum() * weights["p1"]
    fast = inner_update(weights, loss, 0.0)
    for k in weights:
        assert torch.equal(fast[k].detach(), weights[k].detach())


def test_inner_update_closed_form():
    weights = w(1.0)
    fast = inner_update(weights, weights["p0"] ** 2, 0.1)
    expected = 1.0 - 0.1 * 2.0 / math.sqrt(4.0 + 1e-8)
    assert abs(fast["p0"].item() - expected) <= 1e-6
    assert weights["p0"].item() == 1.0
    assert fast["p0"] is not weights["p0"]


def test_inner_update_copies_unused_params():
    weights = w(1.0, 2.0)
    fast = inner_update(weights, weights["p0"] ** 2, 0.1)
    assert fast["p1"] is weights["p1"]


def test_inner_update_rejects_nonfinite_gradient():
    weights = w(0.0)
    with pytest.raises(FloatingPointError):
        inner_update(weights, torch.sqrt(weights["p0"].abs()) * 0 + weights["p0"] * float("inf"), 0.1)


def _toy():
    def meta_train(v):
        return (v["p0"] - 1) ** 2 + 0.5 * v["p0"] * v["p1"] + torch.sin(v["p1"])

    def meta_test(v):
        return (v["p0"] * v["p1"] - 0.3) ** 2 + torch.exp(0.2 * v["p0"])

    return meta_train, meta_test


def _composite(values, lr, eps):
    mtr, mte = _toy()
    v = w(*values)
    fast = inner_update(v, mtr(v), lr, eps=eps)
    return (mtr(v) + mte(fast)).item()


@pytest.mark.parametrize("eps", [1e-8, 0.5])
def test_bilevel_gradient_matches_finite_differences(eps):
    mtr, mte = _toy()
    x = [0.4, -0.7]
    _, _, grads = bilevel_gradient(w(*x), mtr, mte, 0.05, eps=eps)
    h = 1e-6
    for i in range(2):
        up, dn = list(x), list(x)
        up[i] += h
        dn[i] -= h
        fd = (_composite(up, 0.05, eps) - _composite(dn, 0.05, eps)) / (2 * h)
        assert grads[i].item() == pytest.approx(fd, rel=1e-3)


def test_zero_meta_test_loss_gives_plain_gradient():
    mtr, _ = _toy()
    v = w(0.4, -0.7)
    _, _, grads = bilevel_gradient(v, mtr, lambda u: 0.0 * u["p0"], 0.05)
    plain = torch.autograd.grad(mtr(v), list(v.values()))
    for a, b in zip(grads, plain):
        assert torch.equal(a, b)


def test_first_order_gradient_formula():
    mtr, mte = _toy()
    v = w(0.4, -0.7)
    _, _, fo = bilevel_gradient(v, mtr, mte, 0.05, eps=0.5, first_order=True)
    _, _, full = bilevel_gradient(v, mtr, mte, 0.05, eps=0.5)
    fast = {k: t.detach().requires_grad_(True) for k, t in inner_update(v, mtr(v), 0.05, eps=0.5).items()}
    g_mtr = torch.autograd.grad(mtr(v), list(v.values()))
    g_mte = torch.autograd.grad(mte(fast), list(fast.values()))
    for a, b, c in zip(fo, g_mtr, g_mte):
        assert torch.allclose(a, b + c, atol=1e-14)
    assert not all(torch.allclose(a, b, atol=1e-6) for a, b in zip(fo, full))


# --------------------------------------------------------------------------- steps on the real model


def _episode(cfg, state, data):
    return split_episode(data.sources, state.episode_rng, cfg.train.P, cfg.train.K)


def test_meta_step_touches_only_training_state():
    cfg = tiny("meta+metabn")
    streams = make_streams(cfg.seed)
    data = build_data(cfg, streams)
    state = init_state(cfg, data.sources, streams)
    before = clone_params(state.params)
    mems = {d: m.centroids.clone() for d, m in state.memories.items()}
    episode = _episode(cfg, state, data)
    meta_gradient(state, episode, 3.5e-3)
    for k in before.weights:
        assert torch.equal(before.weights[k], state.params.weights[k])
    state.metabn.reset()
    rec = meta_step(state, episode)
    assert state.metabn.saved_stats == []
    assert any(not torch.equal(before.weights[k], state.params.weights[k]) for k in before.weights)
    assert all(not torch.equal(mems[d], state.memories[d].centroids) for d in mems)
    assert rec["iteration"] == 1 and {"L_mtr", "L_mte", "grad_norm", "lr_inner", "lr_outer"} <= set(rec)


def test_meta_step_rejected_in_baseline_mode():
    cfg = tiny("baseline")
    data = build_data(cfg)
    state = init_state(cfg, data.sources)
    with pytest.raises(RuntimeError):
        meta_step(state, split_episode(data.sources, np.random.default_rng(0), 4, 2))


def test_forced_unit_lambda_matches_plain_meta():
    a_state, a_hist = train(tiny("meta"))
    b_state, b_hist = train(tiny("meta+metabn", **{"train.metabn_lambda": 1.0}))
    for x, y in zip(a_hist, b_hist):
        if x["type"] == "iter":
            assert x["L_mtr"] == pytest.approx(y["L_mtr"], abs=1e-10)
            assert x["L_mte"] == pytest.approx(y["L_mte"], abs=1e-10)
    for k in a_state.params.weights:
        assert torch.allclose(a_state.params.weights[k], b_state.params.weights[k], atol=1e-9)


def test_baseline_loss_is_mean_over_sources():
    cfg = tiny("baseline")
    data = build_data(cfg)
    state = init_state(cfg, data.sources)
    rng = np.random.default_rng(1)
    batches = [sample_pk_batch(s, 4, 2, rng) for s in data.sources]
    ref, _ = meta_train_loss(state.encoder, clone_params(state.params), batches, state.head, update_stats=False)
    rec = baseline_step(state, batches)
    assert rec["L_mtr"] == pytest.approx(ref.item(), abs=1e-12)


def test_fc_classifiers_train():
    for clf in ("fc_global", "fc_parallel"):
        state, hist = train(tiny("meta", **{"train.classifier": clf}))
        assert any(k.startswith("classifier.") for k in state.params.weights)
        assert all(math.isfinite(r["L_mte"]) for r in hist if r["type"] == "iter")


def test_separable_smoke_reaches_high_rank1():
    cfg = tiny(
        "baseline",
        **{
            "data.ids_per_domain": 10,
            "data.samples_per_id": 8,
            "data.noise": 0.05,
            "data.style": 0.0,
            "train.epochs": 10,
            "train.iters_per_epoch": 20,
            "train.decay_epochs": [],
            "train.eval_every": 0,
        },
    )
    data = build_data(cfg)
    state, hist = train(cfg, data=data)
    assert sum(r["type"] == "iter" for r in hist) == 200
    ds = data.sources[0]
    emb = state.encoder.embed(state.params, ds.features).numpy()
    # leave-one-out training retrieval: each sample queries the rest
    hits = []
    for i in range(len(emb)):
        rest = np.delete(np.arange(len(emb)), i)
        hits.append(cmc_rank1(RetrievalSplit(emb[i], ds.labels[i : i + 1], emb[rest], ds.labels[rest])))
    assert np.mean(hits) > 0.95


def test_seeded_runs_are_identical(tmp_path):
    cfg = tiny("meta+metabn")
    train(cfg, out_dir=tmp_path / "a")
    train(cfg, out_dir=tmp_path / "b")
    assert (tmp_path / "a" / "metrics.jsonl").read_bytes() == (tmp_path / "b" / "metrics.jsonl").read_bytes()
    lines = (tmp_path / "a" / "metrics.jsonl").read_text().splitlines()
    assert json.loads(lines[-1])["type"] == "final"


def test_zero_domain_gap_modes_indistinguishable():
    gap0 = {"data.shift": 0.0, "data.offset": 0.0, "data.style": 0.0, "train.epochs": 4, "train.eval_every": 0}
    scores = {m: [] for m in ("baseline", "meta")}
    for seed in range(4):
        for m in scores:
            cfg = tiny(m, **gap0).replace(seed=seed)
            scores[m].append(train(cfg)[1][-1]["mAP"])
    assert stats.ttest_ind(scores["meta"], scores["baseline"]).pvalue > 0.05
