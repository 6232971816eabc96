"""Acceptance suite: one test per release criterion, each printing a
pass/fail line. The directional benchmark (criteria 7 and 8) trains the full
ablation once on the shipped desk config and is shared across those tests."""

import json
import shutil
import time
from pathlib import Path

import numpy as np
import pytest

from jamlab import training, verification
from jamlab.cli import main as cli_main
from jamlab.config import load_config
from jamlab.diagnostics import gradcheck_suite
from jamlab.entropy import (
    BinningConfig,
    discretize,
    entropy_of,
    je_loss,
    joint_distribution,
    marginals,
)
from jamlab.autodiff import Tensor
from jamlab.attention import JamParams, jam_forward
from jamlab.margin import ClassifierHead, MarginParams, _margin_logits, adaface_probability
from jamlab.synthetic import build_dataset
from jamlab import autodiff as ad

DESK_CONFIG = Path(__file__).resolve().parent.parent / "configs" / "desk.json"


def _report(criterion: str, ok: bool, detail: str = "") -> None:
    print(f"[acceptance] {criterion}: {'PASS' if ok else 'FAIL'} {detail}")
    assert ok, detail


# ---------------------------------------------------------------------------
# 1. gradient suite


def test_criterion_1_gradient_suite():
    t0 = time.time()
    errors = gradcheck_suite(seed=0, points=20)
    elapsed = time.time() - t0
    worst = max(errors.values())
    _report(
        "1 gradient-suite",
        worst < 1e-4 and elapsed < 60.0,
        f"max rel err {worst:.2e}, {elapsed:.1f}s",
    )


# ---------------------------------------------------------------------------
# 2. joint entropy bounds


def test_criterion_2_je_bounds():
    rng = np.random.default_rng(2)
    cfg = BinningConfig(bins=8, assignment="hard")
    ok = True
    for _ in range(1000):
        a = Tensor(rng.uniform(size=(5, 5)))
        b = Tensor(rng.uniform(size=(5, 5)))
        h = je_loss(a, b, cfg).values
        p = joint_distribution(discretize(a, cfg), discretize(b, cfg))
        m2, m3 = marginals(p)
        h2, h3 = entropy_of(m2), entropy_of(m3)
        ok &= 0.0 <= h <= 2 * np.log(8) + 1e-9
        ok &= h >= max(h2, h3) - 1e-9
        ok &= h <= h2 + h3 + 1e-9
        if not ok:
            break
    _report("2 je-bounds", bool(ok), "1000 random attention pairs")


# ---------------------------------------------------------------------------
# 3. pairwise-literal identity


def test_criterion_3_pairwise_literal_and_identity():
    rng = np.random.default_rng(3)
    soft = BinningConfig(bins=8, assignment="soft")
    hard = BinningConfig(bins=8, assignment="hard")
    ok = True
    for _ in range(200):
        a = Tensor(rng.uniform(size=(4, 4)))
        b = Tensor(rng.uniform(size=(4, 4)))
        w2, w3 = discretize(a, soft), discretize(b, soft)
        literal = joint_distribution(w2, w3, "pairwise-literal").values
        outer = np.outer(w2.values.mean(axis=0), w3.values.mean(axis=0))
        ok &= np.array_equal(literal, outer) or np.abs(literal - outer).max() < 1e-15
        # aligned mode with identical maps reduces to the marginal entropy
        h_joint = je_loss(a, a, hard).values
        h_marg = entropy_of(discretize(a, hard).values.mean(axis=0))
        ok &= abs(h_joint - h_marg) < 1e-9
        if not ok:
            break
    _report("3 pairwise-literal-identity", bool(ok), "200 random inputs")


# ---------------------------------------------------------------------------
# 4. JAM residual and sharing


def test_criterion_4_jam_residual_and_sharing():
    rng = np.random.default_rng(4)
    params = JamParams(8, gamma_init=0.0, rng=rng)
    z = Tensor(rng.normal(size=(2, 2, 8)))
    out, _ = jam_forward(z, params, "2d")
    residual_ok = np.abs(out.values - z.values).max() < 1e-12

    params = JamParams(8, gamma_init=0.3, rng=rng)
    z2 = Tensor(rng.normal(size=(2, 2, 8)))
    z3 = Tensor(rng.normal(size=(2, 2, 8)))
    _, before = jam_forward(z2, params, "2d")
    with ad.Tape() as tape:
        out3, _ = jam_forward(z3, params, "3d")
        loss = ad.tsum(ad.mul(out3, out3))
    grads = tape.backward(loss)
    for w in (params.q_weight, params.k_weight):
        w.values = w.values - 0.05 * grads.array(w)
    _, after = jam_forward(z2, params, "2d")
    sharing_ok = np.abs(after.values - before.values).max() > 1e-9
    _report(
        "4 jam-residual-sharing",
        residual_ok and sharing_ok,
        f"residual dev < 1e-12: {residual_ok}, 3d step moved 2d attention: {sharing_ok}",
    )


# ---------------------------------------------------------------------------
# 5. AdaFace degeneracies


def test_criterion_5_adaface_degeneracies():
    rng = np.random.default_rng(5)
    head = ClassifierHead(8, 4, rng=np.random.default_rng(50))
    emb = rng.normal(size=(3, 8))
    probs = adaface_probability(head, Tensor(emb), [0, 1, 2],
                                MarginParams(m=0.0, h=0.0, s=13.0))
    ne = emb / np.linalg.norm(emb, axis=1, keepdims=True)
    nw = head.weights.values / np.linalg.norm(head.weights.values, axis=1,
                                              keepdims=True)
    logits = 13.0 * ne @ nw.T
    ref = np.exp(logits - logits.max(axis=1, keepdims=True))
    ref /= ref.sum(axis=1, keepdims=True)
    plain_ok = np.abs(probs.values - ref).max() < 1e-9

    head2 = ClassifierHead(4, 2, rng=np.random.default_rng(51))
    head2.weights.values[0] = np.array([1.0, 0.0, 0.0, 0.0])
    logits = _margin_logits(head2, Tensor([[2.0, 0.0, 0.0, 0.0]]), [0],
                            MarginParams(m=0.5, h=0.0, s=1.0))
    target_err = abs(logits.values[0, 0] - (np.cos(0.5) - 0.5))
    _report(
        "5 adaface-degeneracies",
        plain_ok and target_err < 1e-12,
        f"plain-softmax dev ok: {plain_ok}, theta=0 err {target_err:.2e}",
    )


# ---------------------------------------------------------------------------
# 6. metric oracle


def _brute_force(scores, genuine, far_target=0.01):
    gen, imp = scores[genuine], scores[~genuine]
    pts = []
    for t in np.concatenate(([np.inf], np.unique(scores), [-np.inf])):
        pts.append((np.mean(imp >= t), np.mean(gen >= t)))
    pts.sort()
    fars = np.array([p[0] for p in pts])
    tars = np.array([p[1] for p in pts])
    tar = max((t for f, t in pts if f <= far_target), default=0.0) * 100
    lam = np.linspace(0, 1, 2001)
    dense_f = np.concatenate([fars[i] + lam * (fars[i + 1] - fars[i])
                              for i in range(len(fars) - 1)])
    dense_t = np.concatenate([tars[i] + lam * (tars[i + 1] - tars[i])
                              for i in range(len(tars) - 1)])
    k = np.argmin(np.abs(dense_f - (1 - dense_t)))
    eer = (dense_f[k] + 1 - dense_t[k]) / 2 * 100
    auc = np.trapezoid(tars, fars) * 100
    return tar, eer, auc


def test_criterion_6_metric_oracle():
    rng = np.random.default_rng(6)
    worst = 0.0
    for _ in range(200):
        n = int(rng.integers(10, 201))
        scores = rng.normal(size=n) + rng.uniform(0, 2) * rng.integers(0, 2, n)
        genuine = rng.uniform(size=n) < rng.uniform(0.2, 0.7)
        if not genuine.any() or genuine.all():
            continue
        ss = verification.ScoreSet(scores, genuine, ["0-10"] * n)
        curve = verification.roc_curve(ss)
        tar_ref, eer_ref, auc_ref = _brute_force(scores, genuine)
        worst = max(
            worst,
            abs(verification.tar_at_far(curve) - tar_ref),
            abs(verification.eer_and_auc(curve)[1] - auc_ref),
        )
    # perfect and chance endpoints
    perfect = verification.ScoreSet(
        np.r_[np.ones(50), np.zeros(50)],
        np.r_[np.ones(50, bool), np.zeros(50, bool)],
        ["0-10"] * 100,
    )
    pc = verification.roc_curve(perfect)
    eer_p, auc_p = verification.eer_and_auc(pc)
    v = np.linspace(-1, 1, 200)
    chance = verification.ScoreSet(
        np.r_[v, v], np.r_[np.ones(200, bool), np.zeros(200, bool)], ["0-10"] * 400
    )
    cc = verification.roc_curve(chance)
    eer_c, auc_c = verification.eer_and_auc(cc)
    endpoints_ok = (
        verification.tar_at_far(pc) == 100.0
        and eer_p == 0.0
        and auc_p == 100.0
        and abs(verification.tar_at_far(cc) - 1.0) < 0.5
        and abs(eer_c - 50.0) < 0.5
        and abs(auc_c - 50.0) < 0.5
    )
    _report(
        "6 metric-oracle",
        worst < 0.1 and endpoints_ok,
        f"max dev {worst:.3f} pp over 200 sets; endpoints ok: {endpoints_ok}",
    )


# ---------------------------------------------------------------------------
# 7 & 8. directional desk benchmark (shared fixture)


@pytest.fixture(scope="session")
def desk_benchmark(tmp_path_factory):
    cfg = load_config(DESK_CONFIG)
    root = tmp_path_factory.mktemp("desk")
    data = root / "data"
    t0 = time.time()
    build_dataset(cfg.dataset, data, cfg.seed)
    detail = training.ablate(cfg, data, root / "ablation")
    detail["total_seconds"] = time.time() - t0
    return detail


def test_criterion_7_pose_gap(desk_benchmark):
    detail = desk_benchmark
    base_folds = detail["2d-only"]["folds"]
    je_folds = detail["jam+je"]["folds"]
    wins = 0
    gaps = []
    for b, j in zip(base_folds, je_folds):
        gap_b = b["tar_by_bin"]["0-10"] - b["tar_by_bin"]["90+"]
        gap_j = j["tar_by_bin"]["0-10"] - j["tar_by_bin"]["90+"]
        gaps.append((gap_j, gap_b))
        wins += int(gap_j < gap_b)
    mean_90_base = detail["2d-only"]["mean"]["tar_by_bin"]["90+"]
    mean_90_je = detail["jam+je"]["mean"]["tar_by_bin"]["90+"]
    ok = wins >= 2 and mean_90_je >= mean_90_base
    _report(
        "7 pose-gap",
        ok,
        f"gap wins {wins}/3 {gaps}, mean 90+ {mean_90_je:.1f} vs {mean_90_base:.1f}, "
        f"total {detail['total_seconds']:.0f}s (< 1800)",
    )
    assert detail["total_seconds"] < 1800


def test_criterion_8_ablation_ordering(desk_benchmark):
    detail = desk_benchmark
    base = detail["2d-only"]["mean"]["average_tar"]
    jam = detail["jam"]["mean"]["average_tar"]
    jamje = detail["jam+je"]["mean"]["average_tar"]
    ok = jam > base and jamje > base
    _report(
        "8 ablation-ordering",
        ok,
        f"avg TAR: 2d-only {base:.2f}, jam {jam:.2f}, jam+je {jamje:.2f}",
    )


# ---------------------------------------------------------------------------
# 9. inference purity


def test_criterion_9_inference_purity(tmp_path):
    from conftest import tiny_config
    from jamlab import config as config_mod

    cfg = tiny_config()
    data = tmp_path / "data"
    build_dataset(cfg.dataset, data, cfg.seed)
    run = tmp_path / "run"
    training.train_single(cfg, data, run)
    report_full = training.evaluate_checkpoint(cfg, run / "checkpoint_best.bin", data)

    clone = tmp_path / "no3d"
    shutil.copytree(data, clone)
    shutil.rmtree(clone / "clouds")
    report_no3d = training.evaluate_checkpoint(cfg, run / "checkpoint_best.bin", clone)
    ok = report_full.as_dict() == report_no3d.as_dict()
    _report("9 inference-purity", ok, "identical reports with all clouds deleted")


# ---------------------------------------------------------------------------
# 10. determinism


def test_criterion_10_determinism(tmp_path):
    from conftest import tiny_config

    cfg = tiny_config(max_epochs=2)
    reports = []
    for tag in ("one", "two"):
        data = tmp_path / f"data_{tag}"
        run = tmp_path / f"run_{tag}"
        build_dataset(cfg.dataset, data, cfg.seed)
        training.train_single(cfg, data, run)
        rep = training.evaluate_checkpoint(cfg, run / "checkpoint_best.bin", data)
        metrics = [json.loads(l) for l in open(run / "metrics.jsonl")]
        reports.append((rep.as_dict(), metrics))
    ok = reports[0] == reports[1]
    _report("10 determinism", ok, "generate+train+evaluate reproduced exactly")
