"""Acceptance criteria, one test each.

The trained-model criteria (2, 6 to 10) share one module-scoped set of runs:
five seeds of each ablation variant plus a single-head multi-level model,
2000 AdamW steps at the default learning rate on the default benchmark.
Measured values are printed and collected in ``acceptance_results.json``.
"""

import json
import time
from pathlib import Path

import numpy as np
import pytest

from mvm import harness
from mvm import losses
from mvm import memory as mem
from mvm import numerics as nx
from mvm import synthdata as sd
from mvm.checkpoint import decode_checkpoint, encode_checkpoint, restore_model
from mvm.config import DataConfig
from mvm.memory import MemoryBank
from mvm.model import LipReadingModel
from mvm.optim import OptimizerState, adamw_step

pytestmark = pytest.mark.acceptance

SEEDS = range(5)
STEPS = 2000
VARIANTS = {**harness.ABLATION_VARIANTS, "single-head multi-level": dict(heads=1)}
RESULTS_PATH = Path(__file__).resolve().parent.parent / "acceptance_results.json"
RESULTS: dict = {}


def verdict(number: int, passed: bool, detail: str) -> None:
    RESULTS[f"criterion_{number:02d}"] = {"passed": bool(passed), "detail": detail}
    RESULTS_PATH.write_text(json.dumps(RESULTS, indent=2, sort_keys=True) + "\n")
    print(f"\ncriterion {number}: {'PASS' if passed else 'FAIL'}: {detail}")


def mean_abs_slot_cosine(value: np.ndarray) -> float:
    unit = value / np.maximum(np.linalg.norm(value, axis=1, keepdims=True), nx.COSINE_EPS)
    c = np.abs(unit @ unit.T)
    n = len(value)
    return float((c.sum() - np.trace(c)) / (n * (n - 1)))


@pytest.fixture(scope="module")
def benchmark():
    return sd.generate(DataConfig())


@pytest.fixture(scope="module")
def trained(benchmark):
    lexicon, train, test = benchmark
    base = DataConfig().model_config()
    runs = {name: [] for name in VARIANTS}
    start = time.perf_counter()
    for name, changes in VARIANTS.items():
        for seed in SEEDS:
            cfg = base.replace(**changes, seed=seed)
            init = harness.init_checkpoint(cfg)
            result = harness.train(cfg, lexicon, train, STEPS)
            report = harness.evaluate(result.checkpoint, lexicon, test)
            runs[name].append({"init": init, "final": result.checkpoint, "report": report})
    elapsed = time.perf_counter() - start
    RESULTS["training_minutes"] = elapsed / 60
    return runs, elapsed


def bayes_ceiling(lexicon, test) -> tuple[float, float]:
    """Accuracy (overall, homophene words) of the exact visual-only Bayes classifier."""
    correct = sd.visual_log_likelihood(lexicon, test.visual).argmax(axis=1) == test.labels
    homophene = np.isin(test.labels, sorted(lexicon.homophene_words()))
    return float(correct.mean()), float(correct[homophene].mean())


def means(runs, key):
    return {name: float(np.mean([getattr(r["report"], key) for r in rs])) for name, rs in runs.items()}


# ---------------------------------------------------------------------------


def test_criterion_01_gradient_fidelity():
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    rec = nx.Tensor(rng.normal(size=(2, 5, 8)), requires_grad=True)
    tgt = nx.Tensor(rng.normal(size=(2, 5, 8)), requires_grad=True)
    value = nx.Tensor(rng.normal(size=(4, 8)), requires_grad=True)
    lv = nx.Tensor(rng.normal(size=(2, 4)), requires_grad=True)
    la = nx.Tensor(rng.normal(size=(2, 4)), requires_grad=True)
    labels = np.array([1, 3])
    per_loss = {
        "reconstruction": max(nx.gradient_check(lambda: losses.reconstruction_loss(rec, tgt), [rec, tgt])),
        "contrastive": max(nx.gradient_check(lambda: losses.contrastive_loss(value), [value])),
        "task": max(nx.gradient_check(lambda: losses.task_loss(lv, la, labels), [lv, la])),
        "total": max(nx.gradient_check(
            lambda: losses.total_loss([losses.reconstruction_loss(rec, tgt)], [losses.contrastive_loss(value)],
                                      losses.task_loss(lv, la, labels), 1.0, 1.0).total,
            [rec, tgt, value, lv, la])),
    }
    report = harness.grad_check()
    elapsed = time.perf_counter() - start
    worst_loss = max(per_loss.values())
    passed = worst_loss < 1e-4 and report.passed and elapsed < 300
    detail = (f"loss-level max elementwise error {worst_loss:.2e}; micro model max norm-wise error "
              f"{report.max_error:.2e} (worst single coordinate {max(report.elementwise.values()):.2e}); "
              f"{elapsed:.1f}s")
    verdict(1, passed, detail)
    assert passed, detail


def _addressing_checks(model: LipReadingModel, visual: np.ndarray) -> tuple[float, float]:
    worst_sum, worst_scale = 0.0, 0.0
    x = model.visual_frontend(visual)
    for out, bank in zip(model.memory_readout(visual), model.banks):
        worst_sum = max(worst_sum, float(np.abs(out.addressing.data.sum(axis=-1) - 1).max()))
    for bank in model.banks:
        a = mem.address_heads(bank, x).data
        for c in (1e-3, 0.37, 250.0):
            worst_scale = max(worst_scale, float(np.abs(mem.address_heads(bank, nx.scale(x, c)).data - a).max()))
    return worst_sum, worst_scale


def test_criterion_02_addressing_invariants(benchmark, trained):
    runs, _ = trained
    _, _, test = benchmark
    visual = test.visual[:64]
    sums, scales = [], []
    for r in runs["multi-temporal"]:
        for ckpt in (r["init"], r["final"]):
            s, c = _addressing_checks(restore_model(ckpt), visual)
            sums.append(s)
            scales.append(c)
    passed = max(sums) <= 1e-6 and max(scales) <= 1e-9
    detail = f"max row-sum deviation from 1 {max(sums):.1e}; max change under query scaling {max(scales):.1e}"
    verdict(2, passed, detail)
    assert passed, detail


def test_criterion_03_parameter_parity():
    counts = {}
    for h in (1, 2, 4, 8):
        bank = MemoryBank.init(16, 32, h, 16.0, np.random.default_rng(h))
        counts[h] = bank.key_side_parameter_count()
    passed = all(c == 16 * 32 + 32 * 32 for c in counts.values())
    detail = f"key-side counts {counts}, expected {16 * 32 + 32 * 32}"
    verdict(3, passed, detail)
    assert passed, detail


def test_criterion_04_inference_consistency(benchmark):
    _, train, _ = benchmark
    model = LipReadingModel(DataConfig().model_config())
    batch = train.subset(np.arange(16))
    infer = model.forward_infer(batch.visual).data
    out = model.forward_train(batch.visual, batch.phonemes, batch.labels)
    shuffled = np.random.default_rng(0).permutation(batch.phonemes.ravel()).reshape(batch.phonemes.shape)
    out2 = model.forward_train(batch.visual, shuffled, batch.labels)
    passed = (np.array_equal(infer, out.logits_visual_path.data)
              and np.array_equal(infer, out2.logits_visual_path.data)
              and not np.array_equal(out.logits_audio_path.data, out2.logits_audio_path.data))
    detail = "forward_infer equals visual-path logits bit for bit, with and without perturbed audio"
    verdict(4, passed, detail if passed else "mismatch")
    assert passed


def test_criterion_05_value_memory_fit():
    rng = np.random.default_rng(0)
    targets = rng.normal(size=(12, 32))
    targets /= np.linalg.norm(targets, axis=1, keepdims=True)
    target = nx.Tensor(targets)
    value = nx.Tensor(rng.uniform(-1 / np.sqrt(32), 1 / np.sqrt(32), size=(16, 32)), requires_grad=True)
    state = OptimizerState.for_params([value], lr=1e-3)
    reached = None
    for step in range(1, 2001):
        with nx.Tape() as tape:
            loss = losses.reconstruction_loss(mem.reconstruct_audio(value, mem.self_address_value(value, target, 16.0)), target)
            value.zero_grad()
            tape.backward(loss)
        if loss.item() < 0.01:
            reached = step - 1
            break
        adamw_step([value], [value.grad], state)
    passed = reached is not None
    detail = f"reconstruction loss below 0.01 after {reached} steps" if passed else f"final loss {loss.item():.4f}"
    verdict(5, passed, detail)
    assert passed, detail


def test_criterion_06_contrastive_effect(trained):
    runs, _ = trained
    drops = []
    for r in runs["multi-temporal"]:
        before = np.mean([mean_abs_slot_cosine(v) for k, v in r["init"].params.items() if k.endswith(".value")])
        after = np.mean([mean_abs_slot_cosine(v) for k, v in r["final"].params.items() if k.endswith(".value")])
        drops.append((before, after))
    lowered = sum(after < before for before, after in drops)
    passed = lowered >= 4
    detail = f"mean abs cosine lowered in {lowered}/5 seeds: " + ", ".join(f"{b:.3f}->{a:.3f}" for b, a in drops)
    verdict(6, passed, detail)
    assert passed, detail


def test_criterion_07_ablation_ordering(benchmark, trained):
    runs, elapsed = trained
    ceiling, _ = bayes_ceiling(benchmark[0], benchmark[2])
    acc = means(runs, "accuracy")
    b, m, mh, mt = (100 * acc[k] for k in ("baseline", "memory", "multi-head", "multi-temporal"))
    passed = (m - b >= 0.5 and mh - m >= 0.5 and mt >= mh and elapsed < 3600)
    detail = (f"baseline {b:.2f} / memory {m:.2f} / multi-head {mh:.2f} / multi-temporal {mt:.2f}; "
              f"Bayes ceiling {100 * ceiling:.2f}; training {elapsed / 60:.1f} min")
    verdict(7, passed, detail)
    assert passed, detail


def test_criterion_08_head_count_trend(trained):
    runs, _ = trained
    acc = means(runs, "accuracy")
    h4, h1 = 100 * acc["multi-temporal"], 100 * acc["single-head multi-level"]
    keys = {name: LipReadingModel(runs[name][0]["final"].config).banks[0].key_side_parameter_count()
            for name in ("multi-temporal", "single-head multi-level")}
    passed = h4 - h1 >= 0.5 and len(set(keys.values())) == 1
    detail = f"h=4 {h4:.2f} vs h=1 {h1:.2f} (gap {h4 - h1:+.2f}); key-side parameters per level {keys}"
    verdict(8, passed, detail)
    assert passed, detail


def test_criterion_09_homophene_improvement(benchmark, trained):
    runs, _ = trained
    _, ceiling = bayes_ceiling(benchmark[0], benchmark[2])
    hom, oth = means(runs, "homophene_accuracy"), means(runs, "non_homophene_accuracy")
    gain = 100 * (hom["multi-temporal"] - hom["memory"])
    regress = 100 * (oth["memory"] - oth["multi-temporal"])
    passed = gain >= 2.0 and regress <= 1.0
    detail = (f"homophene {100 * hom['memory']:.2f} -> {100 * hom['multi-temporal']:.2f} (gain {gain:+.2f}); "
              f"other words {100 * oth['memory']:.2f} -> {100 * oth['multi-temporal']:.2f}; "
              f"Bayes homophene ceiling {100 * ceiling:.2f}")
    verdict(9, passed, detail)
    assert passed, detail


def test_criterion_10_addressing_separation(benchmark, trained):
    runs, _ = trained
    lexicon, _, test = benchmark
    seps = [harness.addressing_separation(r["final"], lexicon, test, seed=i) for i, r in enumerate(runs["multi-temporal"])]
    hom = float(np.mean([s.homophene for s in seps]))
    same = float(np.mean([s.same_word for s in seps]))
    passed = hom > 0.05 and same < hom
    detail = f"mean cosine distance: homophene pairs {hom:.4f}, same word {same:.4f}"
    verdict(10, passed, detail)
    assert passed, detail


def test_criterion_11_determinism_and_persistence(benchmark, tmp_path):
    lexicon, train, test = benchmark
    cfg = DataConfig().model_config(seed=3)
    a = harness.train(cfg, lexicon, train, 30)
    b = harness.train(cfg, lexicon, train, 30)
    reports_equal = harness.evaluate(a.checkpoint, lexicon, test) == harness.evaluate(b.checkpoint, lexicon, test)
    raw = encode_checkpoint(a.checkpoint)
    path = tmp_path / "m.mvmc"
    path.write_bytes(raw)
    reloaded = decode_checkpoint(path.read_bytes())
    bytes_equal = encode_checkpoint(reloaded) == raw == encode_checkpoint(b.checkpoint)
    logits_equal = np.array_equal(restore_model(reloaded).forward_infer(test.visual[:50]).data,
                                  restore_model(a.checkpoint).forward_infer(test.visual[:50]).data)
    passed = reports_equal and bytes_equal and logits_equal
    detail = f"EvalReport equal {reports_equal}; save/load/save bytes equal {bytes_equal}; logits equal {logits_equal}"
    verdict(11, passed, detail)
    assert passed, detail
