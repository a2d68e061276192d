"""End-to-end acceptance checks, one test per criterion.

Every test reports a single PASS/FAIL line through ``acceptance_report``;
the collected lines are repeated in the terminal summary.  The desk runs
are module-scoped so criteria 5, 6, 7 and 9 share two training runs.
"""

import math
import os
import time

import numpy as np
import pytest

from cifalign.cif import AlignmentWeights, CifConfig, FrameSequence, TailPolicy, integrate_and_fire
from cifalign.cli import gradient_suite, main
from cifalign.losses import info_nce, logits_cross_entropy
from cifalign.models import (GraftedModel, graft_forward, linguistic_targets, top5_candidates)
from cifalign.synthdata import SynthConfig, generate_utterances, split_corpus
from cifalign.train import (TrainConfig, clone_model, evaluate_checkpoint, finetune_downstream,
                            teacher_forced_forward, train_align)
from oracles import cif_recurrence

CUTOFFS = ("acc_50", "acc_100", "acc_500", "acc_1000")
DESK_SEED = 0


def desk_corpus(noise_sigma=0.1):
    utts = generate_utterances(SynthConfig(seed=DESK_SEED, noise_sigma=noise_sigma), 500)
    return split_corpus(utts, (0.8, 0.1, 0.1), DESK_SEED)


def desk_run(align_mode, loss_weights, noise_sigma=0.1):
    train, dev, test = desk_corpus(noise_sigma)
    model = GraftedModel.build(seed=DESK_SEED, graft_depth=3)
    lm_before = model.linguistic.checksum()
    cfg = TrainConfig(align_mode=align_mode, loss_weights=loss_weights, seed=DESK_SEED)
    start = time.perf_counter()
    model, _ = train_align(train, model, cfg)
    return {"model": model, "train": train, "dev": dev, "test": test,
            "seconds": time.perf_counter() - start, "lm_before": lm_before,
            "lm_after": model.linguistic.checksum(), "metrics": evaluate_checkpoint(dev, model)}


@pytest.fixture(scope="module")
def comparison():
    # the subword term is switched off so only the alignment objective differs
    return {mode: desk_run(mode, (1.0, 1.0, 0.0)) for mode in ("infonce", "cos")}


@pytest.fixture(scope="module")
def full_objective_run():
    return desk_run("infonce", (1.0, 1.0, 1.0))


def listing(root):
    out = {}
    for base, _, files in os.walk(root):
        for f in files:
            path = os.path.join(base, f)
            out[os.path.relpath(path, root)] = open(path, "rb").read()
    return out


def test_criterion_01_cif_matches_oracle(acceptance_report):
    r = np.random.default_rng(2024)
    start = time.perf_counter()
    worst, checked = 0.0, 0
    for _ in range(1000):
        m, d = int(r.integers(1, 51)), int(r.integers(1, 9))
        alpha = r.uniform(0.01, 1.6, m)
        if alpha.sum() < 1.0:
            alpha *= 1.5 / alpha.sum()
        frames = r.normal(size=(m, d))
        rows, _, n = cif_recurrence(alpha, frames)
        if n == 0:
            continue
        out = integrate_and_fire(FrameSequence(frames, 20.0), AlignmentWeights(alpha),
                                 CifConfig(1.0, TailPolicy.FIRE_IF_AT_LEAST_HALF))
        assert out.fired_count == n
        worst = max(worst, float(np.abs(out.aligned.data - np.asarray(rows)).max()))
        checked += 1
    seconds = time.perf_counter() - start
    passed = worst <= 1e-9 and seconds < 10 and checked >= 900
    acceptance_report(1, passed, f"max abs diff {worst:.2e} over {checked} cases in {seconds:.1f}s")
    assert passed


def test_criterion_02_hand_trace(acceptance_report):
    out = integrate_and_fire(FrameSequence(np.eye(3), 20.0), AlignmentWeights([0.5, 0.7, 0.8]))
    expect = np.array([[0.5, 0.5, 0.0], [0.0, 0.2, 0.8]])
    err = max(float(np.abs(out.aligned.data - expect).max()), abs(out.n_predicted - 2.0))
    passed = out.fired_count == 2 and err <= 1e-12
    acceptance_report(2, passed, f"fired {out.fired_count}, max error {err:.1e}")
    assert passed


def test_criterion_03_gradient_suite(acceptance_report):
    start = time.perf_counter()
    reports = gradient_suite(seed=0)
    seconds = time.perf_counter() - start
    worst = max(rep.max_abs_rel_error for rep in reports.values())
    passed = all(rep.passed(1e-4) for rep in reports.values()) and seconds < 60
    acceptance_report(3, passed, f"{len(reports)} objectives, worst rel error {worst:.2e}, "
                                 f"{seconds:.1f}s")
    assert passed


def test_criterion_04_closed_forms(acceptance_report):
    basis = np.eye(2)
    nce = info_nce(basis, basis, tau=1.0).item()
    uniform = logits_cross_entropy(np.zeros((3, 32)), [0, 5, 31]).item()
    err_nce = abs(nce + math.log(math.e / (math.e + 1)))
    err_sub = abs(uniform - math.log(32))
    passed = err_nce <= 1e-9 and err_sub <= 1e-9
    acceptance_report(4, passed, f"info_nce error {err_nce:.1e}, subword error {err_sub:.1e}")
    assert passed


def test_criterion_05_infonce_beats_cosine_boundaries(comparison, acceptance_report):
    nce, cos = comparison["infonce"]["metrics"], comparison["cos"]["metrics"]
    seconds = comparison["infonce"]["seconds"] + comparison["cos"]["seconds"]
    direction = nce["mae_ms"] < cos["mae_ms"] and nce["median_ms"] < cos["median_ms"]
    ratio = nce["mae_ms"] / cos["mae_ms"]
    passed = direction and ratio <= 0.5 and seconds < 600
    acceptance_report(5, passed, f"MAE {nce['mae_ms']:.2f} vs {cos['mae_ms']:.2f} ms "
                                 f"(ratio {ratio:.2f}), median {nce['median_ms']:.2f} vs "
                                 f"{cos['median_ms']:.2f} ms, {seconds:.0f}s")
    assert passed


def test_criterion_06_tolerance_accuracy(comparison, acceptance_report):
    nce, cos = comparison["infonce"]["metrics"], comparison["cos"]["metrics"]
    dominates = all(nce[c] >= cos[c] for c in CUTOFFS)
    monotone = all(all(m[a] <= m[b] for a, b in zip(CUTOFFS, CUTOFFS[1:])) for m in (nce, cos))
    passed = dominates and monotone
    acceptance_report(6, passed, "infonce " + "/".join(f"{nce[c]:.3f}" for c in CUTOFFS)
                      + "  cos " + "/".join(f"{cos[c]:.3f}" for c in CUTOFFS))
    assert passed


def test_criterion_07_diagonality(comparison, acceptance_report):
    nce = comparison["infonce"]["metrics"]["diagonality"]
    cos = comparison["cos"]["metrics"]["diagonality"]
    passed = nce >= 0.3 and nce > cos
    acceptance_report(7, passed, f"infonce {nce:.3f}, cos {cos:.3f}")
    assert passed


def test_criterion_08_identity_grafting(acceptance_report):
    ids = np.array([3, 17, 0, 31, 8, 8, 12, 5, 22])
    exact = []
    for depth in (3, 6, 9, 12):
        model = GraftedModel.build(graft_depth=depth)
        top, _ = graft_forward(linguistic_targets(model, ids).states, model)
        exact.append(top.data.tobytes() == model.linguistic.layer_output(ids, 12).data.tobytes())
    passed = all(exact)
    acceptance_report(8, passed, "bitwise at depths " + ", ".join(
        f"{d}:{'ok' if e else 'differs'}" for d, e in zip((3, 6, 9, 12), exact)))
    assert passed


def test_criterion_09_language_model_frozen(comparison, full_objective_run, acceptance_report):
    runs = [comparison["infonce"], comparison["cos"], full_objective_run]
    passed = all(r["lm_before"] == r["lm_after"] for r in runs)
    acceptance_report(9, passed, f"checksum {runs[0]['lm_before'][:16]} unchanged over "
                                 f"{len(runs)} full runs")
    assert passed


def test_criterion_10_downstream_demo(full_objective_run, acceptance_report):
    base, train, test = full_objective_run["model"], full_objective_run["train"], \
        full_objective_run["test"]
    cfg = TrainConfig(seed=DESK_SEED, finetune_unfreeze_speech=True, finetune_lr=1e-3,
                      finetune_epochs=40)
    tuned, _ = finetune_downstream(train, clone_model(base), cfg)
    control, _ = finetune_downstream(train, clone_model(base), cfg, permute_labels=True)
    real = evaluate_checkpoint(test, tuned)
    shuffled = evaluate_checkpoint(test, control)
    passed = (real["recall_weighted"] >= 0.9 and real["f1_weighted"] >= 0.9
              and shuffled["recall_weighted"] <= 0.45 and shuffled["f1_weighted"] <= 0.45)
    acceptance_report(10, passed, f"recall {real['recall_weighted']:.3f}, "
                                  f"F1 {real['f1_weighted']:.3f}; permuted recall "
                                  f"{shuffled['recall_weighted']:.3f}, "
                                  f"F1 {shuffled['f1_weighted']:.3f}")
    assert passed


def test_criterion_11_subword_candidates(acceptance_report):
    run = desk_run("infonce", (1.0, 1.0, 1.0), noise_sigma=0.0)
    model, dev = run["model"], run["dev"]
    nested = True
    for u in dev:
        _, _, fired = teacher_forced_forward(model, u)
        _, logits = graft_forward(fired.aligned.detach(), model)
        for row in logits.data:
            cands = top5_candidates(row)
            nested &= int(np.argmax(row)) == cands[0] and len(set(cands)) == 5
    top1 = run["metrics"]["top1_acc"]
    passed = nested and top1 >= 0.95
    acceptance_report(11, passed, f"top-1 in top-5 {'always' if nested else 'violated'}; "
                                  f"noiseless top-1 {top1:.3f}, top-5 "
                                  f"{run['metrics']['top5_acc']:.3f}")
    assert passed


def test_criterion_12_determinism(tmp_path, acceptance_report):
    settings = ["--seed", "5", "--set", "count=64", "--set", "epochs=2", "--set",
                "warmup_steps=2", "--set", "batch_size=8"]
    root = tmp_path / "work"
    for name in ("a", "b"):
        # same paths both times, so the recorded configs are comparable too
        assert main(["gen-data", "--out", str(root / "corpus"), *settings]) == 0
        common = [*settings, "--set", f"corpus={root / 'corpus'}"]
        assert main(["train-align", "--out", str(root / "run"), *common]) == 0
        ckpt = ["--set", f"checkpoint={root / 'run' / 'checkpoint.wabt'}"]
        assert main(["finetune", "--out", str(root / "ft"), *common, *ckpt]) == 0
        ft = ["--set", f"checkpoint={root / 'ft' / 'classifier.wabt'}"]
        assert main(["eval", "--out", str(root / "eval"), *common, *ft]) == 0
        root.rename(tmp_path / name)
    a, b = listing(tmp_path / "a"), listing(tmp_path / "b")
    differing = sorted(k for k in a if a[k] != b.get(k))
    passed = a.keys() == b.keys() and not differing
    acceptance_report(12, passed, f"{len(a)} files compared, differing: {differing or 'none'}")
    assert passed
