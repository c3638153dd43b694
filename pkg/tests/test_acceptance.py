"""Acceptance gate: nine end-to-end criteria at their stated tolerances.

Each test records one verdict line (printed in the terminal summary) before
asserting.  Criteria 5, 6, 8 and 9 share the models trained once per module.
"""

import math
import time

import numpy as np
import pytest

from conftest import random_episode
from mgimn.baselines import matching_logits
from mgimn.config import RunConfig
from mgimn.episodes import split_classes
from mgimn.encoder import encode
from mgimn.matching import AblationFlags, bi_align, multi_grained_align
from mgimn.model import FewShotModel
from mgimn.prediction import episode_loss, predict
from mgimn.runner import (Tokens, eval_rng, evaluate_fsl, evaluate_gfsl, gfsl_episodes, grad_check_models,
                          load_data, load_model, run_rtc, save_model, train)
from mgimn.rtc import RtcConfig, evaluate_rtc
from mgimn.tensor import Tensor, concat
from mgimn.text import build_vocab

# synthetic corpus C = 30, M = 40, noise 0.3; D = 32 with a 2-layer encoder
BASE = RunConfig(hidden=32, layers=2, heads=2, lr=1e-3, allow_any_lr=True, steps=2000)


@pytest.fixture(scope="module")
def corpus():
    dataset = load_data(BASE)
    vocab = build_vocab(dataset.texts)
    return dataset, vocab, Tokens(dataset, vocab, BASE.max_seq_len)


@pytest.fixture(scope="module")
def trained(corpus):
    dataset = corpus[0]
    out = {}
    start = time.perf_counter()
    for kind in ("mgimn", "proto", "matching"):
        cfg = BASE.replace(model=kind)
        result = train(cfg, dataset)
        out[kind] = (cfg, result, evaluate_fsl(result.model, result.vocab, dataset, cfg))
    out["seconds"] = time.perf_counter() - start
    return out


def test_criterion_1_gradient_fidelity(verdict):
    cfg = RunConfig(hidden=8, heads=2, n_way=2, k_shot=2, n_query=1, dropout=0.0)
    start = time.perf_counter()
    reports = grad_check_models(cfg, tolerance=1e-4)
    seconds = time.perf_counter() - start
    worst = {kind: max(r.errors.values()) for kind, r in reports.items()}
    ok = all(r.passed for r in reports.values()) and seconds < 120
    detail = ", ".join(f"{k} max rel err {v:.2e}" for k, v in worst.items())
    verdict(1, ok, f"{detail}; {seconds:.0f}s")
    assert ok


def test_criterion_2_alignment_invariants(corpus, verdict):
    dataset, vocab, tokens = corpus
    model = FewShotModel(BASE.model_config(), len(vocab), seed=0)
    flags = model.cfg.flags
    rng = np.random.default_rng(2)
    rows_checked = worst_row = worst_perm = 0.0
    cache_exact = True
    for _ in range(100):
        support, query, _ = random_episode(tokens.seqs, dataset.labels, 3, 2, 2, rng)
        trace = []
        model.logits(support, query, trace=trace)
        matcher = model.matcher(trace=trace)
        q = encode(query[0], model.params, model.enc_cfg).hidden
        sup = [[encode(s, model.params, model.enc_cfg).hidden for s in row] for row in support]
        views = multi_grained_align(q, sup, flags, matcher)
        for w in trace:
            if np.any(w < 0):
                worst_row = math.inf
            worst_row = max(worst_row, float(np.abs(w.sum(axis=-1) - 1).max()))
            rows_checked += w.size // w.shape[-1]

        n_way, k_shot = len(sup), len(sup[0])
        cperm, kperm = rng.permutation(n_way), [rng.permutation(k_shot) for _ in range(n_way)]
        moved = multi_grained_align(q, [[sup[c][k] for k in kperm[c]] for c in cperm], flags, matcher)
        for new_c, c in enumerate(cperm):
            for new_k, k in enumerate(kperm[c]):
                a, b = views[(c, k)], moved[(new_c, new_k)]
                for name in ("q_inst", "s_inst", "q_class", "s_class", "q_epi", "s_epi"):
                    worst_perm = max(worst_perm, float(np.abs(getattr(a, name).data
                                                              - getattr(b, name).data).max()))

        episode_ctx = concat([s for row in sup for s in row], axis=0)
        for c, row in enumerate(sup):
            class_ctx = concat(row, axis=0)
            q_class = _bi(q, class_ctx, matcher)
            q_epi = _bi(q, episode_ctx, matcher)
            for k in range(k_shot):
                cache_exact &= np.array_equal(views[(c, k)].q_class.data, q_class)
                cache_exact &= np.array_equal(views[(c, k)].q_epi.data, q_epi)
    ok = worst_row <= 1e-6 and worst_perm <= 1e-9 and cache_exact
    verdict(2, ok, f"{int(rows_checked)} attention rows, max |sum-1| {worst_row:.1e}; "
                   f"context permutation drift {worst_perm:.1e}; cached views exact: {cache_exact}")
    assert ok


def _bi(q, ctx, matcher):
    return bi_align(q, ctx, matcher.project, need_b=False)[0].data


def test_criterion_3_symmetry_suite(corpus, verdict):
    dataset, vocab, tokens = corpus
    models = {kind: FewShotModel(BASE.replace(model=kind).model_config(), len(vocab), seed=1)
              for kind in ("mgimn", "proto", "matching")}
    rng = np.random.default_rng(3)
    shot_drift = class_drift = uniform_err = 0.0
    for i in range(100):
        model = models[("mgimn", "proto", "matching")[i % 3]]
        support, query, labels = random_episode(tokens.seqs, dataset.labels, 5, 3, 3, rng)
        base = model.logits(support, query).data
        shuffled = [[row[j] for j in rng.permutation(len(row))] for row in support]
        shot_drift = max(shot_drift, float(np.abs(model.logits(shuffled, query).data - base).max()))
        perm = rng.permutation(5)
        moved = model.logits([support[j] for j in perm], query).data
        class_drift = max(class_drift, float(np.abs(moved - base[:, perm]).max()))

        # identical class vectors: the shared scorer and the cosine attention both give 1/N
        n = int(rng.integers(2, 8))
        c = Tensor(np.tile(rng.standard_normal(2 * BASE.hidden), (n, 1)))
        p16 = predict(c, models["mgimn"].params).probabilities.data
        s = Tensor(np.tile(rng.standard_normal(BASE.hidden), (n, 2, 1)))
        p3 = np.exp(matching_logits(Tensor(rng.standard_normal((2, BASE.hidden))), s).data)
        p3 /= p3.sum(axis=-1, keepdims=True)
        same = [[support[0][0]] * 2] * n
        pm = models["mgimn"].probabilities(same, query[:1])
        uniform_err = max(uniform_err, *(float(np.abs(p - 1 / n).max()) for p in (p16, p3, pm)))
    ok = shot_drift <= 1e-9 and class_drift <= 1e-9 and uniform_err <= 1e-6
    verdict(3, ok, f"support permutation drift {shot_drift:.1e}; class permutation drift "
                   f"{class_drift:.1e}; uniform 1/N error {uniform_err:.1e}")
    assert ok


def test_criterion_4_loss_sanity(corpus, verdict):
    dataset, vocab, _ = corpus
    model = FewShotModel(BASE.model_config(), len(vocab), seed=BASE.seed)
    acc = evaluate_fsl(model, vocab, dataset, BASE)
    loss = episode_loss(Tensor(np.zeros((5, 5))), [0, 1, 2, 3, 4]).item()
    acc_ok = abs(acc - 0.20) <= 0.05
    loss_ok = abs(loss - math.log(5)) <= 1e-9
    verdict(4, acc_ok and loss_ok, f"untrained 5-way accuracy {acc:.4f} (target 0.20 +- 0.05); "
                                   f"uniform loss - ln 5 = {loss - math.log(5):.1e}")
    assert loss_ok
    assert acc_ok, f"untrained accuracy {acc:.4f} outside 0.20 +- 0.05"


def test_criterion_5_learnability(trained, verdict):
    accs = {k: trained[k][2] for k in ("mgimn", "proto", "matching")}
    seconds = trained["seconds"]
    ok = accs["mgimn"] >= 0.90 and accs["proto"] >= 0.85 and accs["matching"] >= 0.85 and seconds < 900
    losses = {k: trained[k][1].final_loss for k in accs}
    verdict(5, ok, ", ".join(f"{k} {v:.4f}" for k, v in accs.items())
            + f"; final train loss mgimn {losses['mgimn']:.3f} (< ln 5); {seconds:.0f}s")
    assert losses["mgimn"] < math.log(5)
    assert ok


@pytest.fixture(scope="module")
def gfsl_accuracy(trained, corpus):
    cfg, result, _ = trained["mgimn"]
    return evaluate_gfsl(result.model, result.vocab, corpus[0], cfg)


def test_criterion_6_fsl_beats_gfsl(trained, gfsl_accuracy, verdict):
    fsl = trained["mgimn"][2]
    ok = gfsl_accuracy < fsl
    verdict(6, ok, f"30-way GFSL {gfsl_accuracy:.4f} < 5-way FSL {fsl:.4f}")
    assert ok


def test_criterion_7_ablation_wiring(corpus, verdict):
    dataset = corpus[0]
    variants = {"w/o instance": AblationFlags.without("instance"),
                "w/o class": AblationFlags.without("class"),
                "w/o episode": AblationFlags.without("episode"),
                "w/o all": AblationFlags(False, False, False)}
    counts, accs = {}, {}
    short = BASE.replace(steps=30, val_every=15, val_episodes=10, eval_episodes=20)
    counts["full"] = train(short.replace(steps=0), dataset).model.params.count()
    for name, flags in variants.items():
        cfg = short.replace(use_instance=flags.use_instance, use_class=flags.use_class,
                            use_episode=flags.use_episode)
        result = train(cfg, dataset)
        counts[name] = result.model.params.count()
        accs[name] = evaluate_fsl(result.model, result.vocab, dataset, cfg)
    ok = counts["w/o all"] < counts["full"] and all(0 <= a <= 1 for a in accs.values())
    verdict(7, ok, "parameters " + ", ".join(f"{k} {v}" for k, v in counts.items()))
    assert ok


def test_criterion_8_rtc(trained, corpus, gfsl_accuracy, verdict):
    dataset = corpus[0]
    cfg, result, _ = trained["mgimn"]
    report = run_rtc(result.model, result.vocab, dataset, cfg)

    split = split_classes(dataset.num_classes, cfg.split_seed, gfsl=True)
    eps = gfsl_episodes(dataset, split, cfg.episode_spec(), 20, eval_rng(cfg.seed))
    identity = evaluate_rtc(result.model, result.vocab, dataset, eps,
                            RtcConfig(retrieve_n=dataset.num_classes), warmup=0, count=1)
    gap = report.full_accuracy - report.accuracy
    ok = (identity.agree_full and identity.accuracy == identity.full_accuracy
          and report.full_accuracy == gfsl_accuracy
          and abs(gap) <= 0.03 and report.recall >= 0.95 and report.speedup >= 2.0)
    verdict(8, ok, f"retrieve_n = C identical: {identity.agree_full}; RTC {report.accuracy:.4f} vs full "
                   f"{report.full_accuracy:.4f}; recall@10 {report.recall:.4f}; "
                   f"{report.ms_rtc:.1f} vs {report.ms_full:.1f} ms/query ({report.speedup:.1f}x)")
    assert ok


def test_criterion_9_determinism_and_persistence(trained, corpus, gfsl_accuracy, tmp_path, verdict):
    dataset = corpus[0]
    small = BASE.replace(hidden=16, steps=40, val_every=10, val_episodes=20)
    for name in ("a", "b"):
        train(small, dataset, out_dir=tmp_path / name)
    same_metrics = (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()
    same_ckpt = (tmp_path / "a" / "model.ckpt").read_bytes() == (tmp_path / "b" / "model.ckpt").read_bytes()

    round_trip = True
    for kind in ("mgimn", "proto", "matching"):
        cfg, result, fsl = trained[kind]
        path = tmp_path / f"{kind}.ckpt"
        save_model(path, result.model, result.vocab, {"best_step": result.best_step})
        loaded, vocab, _ = load_model(path, cfg)
        round_trip &= evaluate_fsl(loaded, vocab, dataset, cfg) == fsl
        if kind == "mgimn":
            round_trip &= evaluate_gfsl(loaded, vocab, dataset, cfg) == gfsl_accuracy
    ok = same_metrics and same_ckpt and round_trip
    verdict(9, ok, f"repeat run metrics identical: {same_metrics}, checkpoints identical: {same_ckpt}; "
                   f"reloaded evaluation identical: {round_trip}")
    assert ok
