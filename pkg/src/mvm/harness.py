"""Training loop, evaluation, memory inspection, gradient checks and ablations."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Callable, Iterable

import numpy as np

from . import numerics as nx
from .checkpoint import Checkpoint, capture, restore_model, restore_rng
from .config import ModelConfig
from .errors import NumericalError, OracleFailure
from .memory import write_addressing_csv
from .model import LipReadingModel
from .optim import OptimizerState, adamw_step
from .synthdata import Lexicon, SyntheticBatch

log = logging.getLogger(__name__)

GRAD_CHECK_TOLERANCE = 1e-4
EVAL_BATCH = 256


class TrainingDiverged(NumericalError):
    """Raised when the total loss stops being finite; carries the last good state."""

    def __init__(self, message: str, checkpoint: Checkpoint):
        super().__init__(message)
        self.checkpoint = checkpoint


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log: list[dict]


def check_compatible(config: ModelConfig, lexicon: Lexicon, data: SyntheticBatch | None = None) -> None:
    problems = []
    if config.n_words != lexicon.n_words:
        problems.append(f"config has {config.n_words} words, data has {lexicon.n_words}")
    if config.n_phonemes != lexicon.n_phonemes:
        problems.append(f"config has {config.n_phonemes} phonemes, data has {lexicon.n_phonemes}")
    if config.n_visemes != lexicon.n_visemes:
        problems.append(f"config has {config.n_visemes} visemes, data has {lexicon.n_visemes}")
    if data is not None and len(data) and data.frames != config.frames:
        problems.append(f"config expects {config.frames} frames, data has {data.frames}")
    if problems:
        raise ValueError("incompatible model and dataset: " + "; ".join(problems))


def init_checkpoint(config: ModelConfig) -> Checkpoint:
    """Freshly initialised model and optimizer; the generator continues from init."""
    rng = np.random.default_rng(config.seed)
    model = LipReadingModel(config, rng)
    opt = OptimizerState.for_params(
        model.parameters(), lr=config.lr, beta1=config.beta1, beta2=config.beta2,
        eps=config.adam_eps, weight_decay=config.weight_decay,
    )
    return capture(model, opt, rng, 0)


def train(
    config: ModelConfig,
    lexicon: Lexicon,
    data: SyntheticBatch,
    steps: int,
    *,
    resume: Checkpoint | None = None,
    log_stream: IO[str] | None = None,
    callback: Callable[[int, LipReadingModel], None] | None = None,
) -> TrainResult:
    """Run ``steps`` AdamW steps on random minibatches of ``data``.

    Everything random (init and batch order) comes from one generator seeded
    by ``config.seed``, so identical inputs give bit-identical checkpoints.
    Each step appends ``{"step", "task", "rec", "cont", "total"}`` to the log
    and, if given, writes it as one JSON line to ``log_stream``.
    """
    if steps < 0:
        raise ValueError("steps must be >= 0")
    check_compatible(config, lexicon, data)
    if steps and not len(data):
        raise ValueError("cannot train on an empty dataset")
    start = resume if resume is not None else init_checkpoint(config)
    if start.config != config:
        raise ValueError("resume checkpoint was made with a different config")
    model = restore_model(start)
    rng = restore_rng(start)
    opt = start.optimizer
    opt = capture(model, opt, rng, 0).optimizer  # private copy of the moments
    params = model.parameters()
    batch = min(config.batch_size, len(data))
    records = []
    step = start.step
    for _ in range(steps):
        idx = rng.choice(len(data), size=batch, replace=False)
        with nx.Tape() as tape:
            out = model.forward_train(data.visual[idx], data.phonemes[idx], data.labels[idx])
            total = out.report.total
            if not np.isfinite(total.item()):
                raise TrainingDiverged(f"total loss became {total.item()} at step {step + 1}",
                                       capture(model, opt, rng, step))
            model.zero_grad()
            tape.backward(total)
        try:
            adamw_step(params, [p.grad for p in params], opt)
        except NumericalError as exc:
            raise TrainingDiverged(f"step {step + 1}: {exc}", capture(model, opt, rng, step)) from exc
        step += 1
        record = {"step": step, **out.report.as_record()}
        records.append(record)
        if log_stream is not None:
            log_stream.write(json.dumps(record) + "\n")
        if callback is not None:
            callback(step, model)
    model.zero_grad()
    return TrainResult(capture(model, opt, rng, step), records)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


@dataclass
class HomopheneRow:
    pair: tuple[int, int]
    word: int
    accuracy: float
    delta: float | None = None


@dataclass
class EvalReport:
    accuracy: float
    per_word_accuracy: np.ndarray
    per_word_count: np.ndarray
    homophene_table: list[HomopheneRow]
    homophene_accuracy: float
    non_homophene_accuracy: float
    loss_mean: float
    loss_std: float
    accuracy_delta: float | None = None
    baseline_name: str | None = None

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "accuracy_delta": self.accuracy_delta,
            "baseline": self.baseline_name,
            "per_word_accuracy": [float(a) for a in self.per_word_accuracy],
            "per_word_count": [int(c) for c in self.per_word_count],
            "homophene_table": [
                {"pair": list(r.pair), "word": r.word, "accuracy": r.accuracy, "delta": r.delta}
                for r in self.homophene_table
            ],
            "homophene_accuracy": self.homophene_accuracy,
            "non_homophene_accuracy": self.non_homophene_accuracy,
            "loss_mean": self.loss_mean,
            "loss_std": self.loss_std,
        }

    def __eq__(self, other) -> bool:
        if not isinstance(other, EvalReport):
            return NotImplemented
        return json.dumps(self.to_dict()) == json.dumps(other.to_dict())


def _as_model(source: Checkpoint | LipReadingModel) -> LipReadingModel:
    return source if isinstance(source, LipReadingModel) else restore_model(source)


def predict(model: LipReadingModel, visual: np.ndarray) -> np.ndarray:
    """Visual-only logits for every row of ``visual`` (n, K)."""
    chunks = [model.forward_infer(visual[i:i + EVAL_BATCH]).data for i in range(0, len(visual), EVAL_BATCH)]
    if not chunks:
        return np.zeros((0, model.config.n_words))
    return np.concatenate(chunks)


def _word_accuracy(correct: np.ndarray, labels: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    counts = np.bincount(labels, minlength=k)
    hits = np.bincount(labels, weights=correct.astype(np.float64), minlength=k)
    with np.errstate(invalid="ignore"):
        return np.where(counts > 0, hits / np.maximum(counts, 1), np.nan), counts


def _pooled(correct: np.ndarray, mask: np.ndarray) -> float:
    return float(correct[mask].mean()) if mask.any() else float("nan")


def evaluate(
    source: Checkpoint | LipReadingModel,
    lexicon: Lexicon,
    data: SyntheticBatch,
    baseline: Checkpoint | LipReadingModel | None = None,
    baseline_name: str | None = None,
) -> EvalReport:
    """Accuracy tables from the audio-free inference path.

    With a baseline, per-pair deltas (this model minus baseline) are filled in.
    """
    model = _as_model(source)
    check_compatible(model.config, lexicon, data)
    calls = model.audio_frontend_calls
    logits = predict(model, data.visual)
    if model.audio_frontend_calls != calls:
        raise AssertionError("evaluation touched the audio front-end")

    k = lexicon.n_words
    correct = logits.argmax(axis=1) == data.labels if len(data) else np.zeros(0, bool)
    per_word, counts = _word_accuracy(correct, data.labels, k)

    shifted = logits - logits.max(axis=1, keepdims=True) if len(data) else logits
    nll = np.log(np.exp(shifted).sum(axis=1)) - shifted[np.arange(len(data)), data.labels] if len(data) else shifted[:, 0]

    base_word = None
    delta = None
    if baseline is not None:
        base_model = _as_model(baseline)
        check_compatible(base_model.config, lexicon, data)
        base_calls = base_model.audio_frontend_calls
        base_logits = predict(base_model, data.visual)
        if base_model.audio_frontend_calls != base_calls:
            raise AssertionError("evaluation touched the audio front-end")
        base_correct = base_logits.argmax(axis=1) == data.labels if len(data) else np.zeros(0, bool)
        base_word, _ = _word_accuracy(base_correct, data.labels, k)
        delta = float(correct.mean() - base_correct.mean()) if len(data) else 0.0

    rows = []
    for a, b in lexicon.homophene_pairs:
        for w in (a, b):
            d = None if base_word is None else float(per_word[w] - base_word[w])
            rows.append(HomopheneRow((int(a), int(b)), int(w), float(per_word[w]), d))

    homophene = np.isin(data.labels, sorted(lexicon.homophene_words()))
    return EvalReport(
        accuracy=float(correct.mean()) if len(data) else float("nan"),
        per_word_accuracy=per_word,
        per_word_count=counts,
        homophene_table=rows,
        homophene_accuracy=_pooled(correct, homophene),
        non_homophene_accuracy=_pooled(correct, ~homophene),
        loss_mean=float(nll.mean()) if len(data) else float("nan"),
        loss_std=float(nll.std()) if len(data) else float("nan"),
        accuracy_delta=delta,
        baseline_name=baseline_name if baseline is not None else None,
    )


def format_report(report: EvalReport) -> str:
    lines = [f"accuracy {100 * report.accuracy:.2f}%"
             + ("" if report.accuracy_delta is None else f" (delta {100 * report.accuracy_delta:+.2f})"),
             f"homophene words {100 * report.homophene_accuracy:.2f}%, "
             f"other words {100 * report.non_homophene_accuracy:.2f}%",
             f"visual-path loss {report.loss_mean:.4f} +- {report.loss_std:.4f}",
             "pair        word  accuracy   delta"]
    for r in report.homophene_table:
        d = "" if r.delta is None else f"{100 * r.delta:+7.2f}"
        lines.append(f"{str(r.pair):11s} {r.word:4d}  {100 * r.accuracy:7.2f}%  {d}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# addressing inspection
# ---------------------------------------------------------------------------


def addressing_scores(model: LipReadingModel, visual: np.ndarray) -> np.ndarray:
    """Inference-path addressing as (B, levels, h, T, N)."""
    outs = model.memory_readout(np.atleast_2d(visual))
    if not outs:
        return np.zeros((len(np.atleast_2d(visual)), 0, 0, 0, 0))
    return np.stack([o.addressing.head_major() for o in outs], axis=1)


def inspect_memory(source: Checkpoint | LipReadingModel, data: SyntheticBatch, out: str | Path | IO[str]) -> int:
    """Write the addressing CSV for every example in ``data``; returns rows written."""
    model = _as_model(source)
    outs = model.memory_readout(data.visual) if len(data) else []

    def emit(stream) -> int:
        rows = 0
        for i in range(len(data)):
            per_level = [type(o.addressing)(o.addressing.data[i]) for o in outs]
            rows += write_addressing_csv(stream, per_level, example=i, header=(i == 0))
        if not len(data) or not outs:
            stream.write(",".join(("example", "level", "head", "frame", "slot", "score")) + "\n")
        return rows

    if isinstance(out, (str, Path)):
        try:
            with open(out, "w", encoding="utf-8", newline="") as fh:
                return emit(fh)
        except OSError as exc:
            raise OSError(f"cannot write addressing CSV to {out}: {exc.strerror or exc}") from exc
    return emit(out)


def _cosine_distance(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    num = (a * b).sum(axis=-1)
    den = np.maximum(np.linalg.norm(a, axis=-1), nx.COSINE_EPS) * np.maximum(np.linalg.norm(b, axis=-1), nx.COSINE_EPS)
    return 1.0 - num / den


@dataclass
class Separation:
    homophene: float
    same_word: float
    per_level_homophene: np.ndarray
    per_level_same_word: np.ndarray


def addressing_separation(
    source: Checkpoint | LipReadingModel,
    lexicon: Lexicon,
    data: SyntheticBatch,
    samples_per_word: int = 20,
    seed: int = 0,
) -> Separation:
    """Mean cosine distance between per-head addressing maps (frames x slots).

    Compares samples of the two members of each homophene pair against
    pairs of samples of the same word.
    """
    model = _as_model(source)
    rng = np.random.default_rng(seed)
    hom, same = [], []
    for a, b in lexicon.homophene_pairs:
        ia = rng.permutation(np.flatnonzero(data.labels == a))[: 2 * samples_per_word]
        ib = rng.permutation(np.flatnonzero(data.labels == b))[:samples_per_word]
        n = min(len(ib), len(ia) // 2)
        if n == 0:
            continue
        sa = addressing_scores(model, data.visual[ia[:n]])
        sa2 = addressing_scores(model, data.visual[ia[n:2 * n]])
        sb = addressing_scores(model, data.visual[ib[:n]])
        flat = lambda s: s.reshape(s.shape[0], s.shape[1], s.shape[2], -1)  # noqa: E731
        hom.append(_cosine_distance(flat(sa), flat(sb)).mean(axis=(0, 2)))
        same.append(_cosine_distance(flat(sa), flat(sa2)).mean(axis=(0, 2)))
    if not hom:
        raise ValueError("no homophene pair has enough samples")
    hom_l, same_l = np.mean(hom, axis=0), np.mean(same, axis=0)
    return Separation(float(hom_l.mean()), float(same_l.mean()), hom_l, same_l)


# ---------------------------------------------------------------------------
# gradient check
# ---------------------------------------------------------------------------

MICRO = dict(n_visemes=3, n_phonemes=5, n_words=4, dim=8, slots=4, heads=2, frames=5, levels=2,
             backend_blocks=2, dilations=(1, 2), batch_size=2)


def micro_config(**changes) -> ModelConfig:
    """The tiny model used for finite-difference checks."""
    return ModelConfig(**{**MICRO, **changes, "precision": "f64"})


@dataclass
class GradCheckReport:
    """Per-group relative errors of the tape gradient.

    ``errors`` holds the norm-wise error of each parameter group and decides
    pass/fail; ``elementwise`` holds the worst single coordinate, for
    diagnosis only.
    """

    errors: dict[str, float]
    elementwise: dict[str, float]
    tolerance: float = GRAD_CHECK_TOLERANCE

    @property
    def max_error(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance

    def format(self) -> str:
        lines = [f"{'group':28s} {'norm-wise':>10s} {'worst coord':>12s}"]
        lines += [f"{name:28s} {err:10.3e} {self.elementwise[name]:12.3e}" for name, err in self.errors.items()]
        verdict = "PASS" if self.passed else "FAIL"
        lines.append(f"max relative error {self.max_error:.3e} ({verdict}, tolerance {self.tolerance:g})")
        return "\n".join(lines)


def grad_check(config: ModelConfig | None = None, batch: int = 2, epsilon: float = 1e-4) -> GradCheckReport:
    """Tape gradients of the total loss against central differences, per parameter."""
    config = micro_config() if config is None else config.replace(precision="f64")
    rng = np.random.default_rng(config.seed)
    model = LipReadingModel(config, rng)
    vis = rng.integers(0, config.visual_vocab, size=(batch, config.frames))
    aud = rng.integers(0, config.n_phonemes, size=(batch, config.frames))
    labels = rng.integers(0, config.n_words, size=batch)
    names = [n for n, _ in model.named_parameters()]
    params = model.parameters()

    def build():
        return model.forward_train(vis, aud, labels).report.total

    analytic = nx.tape_gradients(build, params)
    numeric = nx.finite_diff_gradient(build, params, epsilon)
    model.zero_grad()
    vector = [nx.vector_relative_error(a, n) for a, n in zip(analytic, numeric)]
    worst = [nx.max_relative_error(a, n) for a, n in zip(analytic, numeric)]
    if not all(np.isfinite(e) for e in vector + worst):
        raise OracleFailure("gradient check produced non-finite errors")
    return GradCheckReport(dict(zip(names, vector)), dict(zip(names, worst)))


# ---------------------------------------------------------------------------
# ablation
# ---------------------------------------------------------------------------

ABLATION_VARIANTS = {
    "baseline": dict(levels=0, heads=1),
    "memory": dict(levels=1, heads=1),
    "multi-head": dict(levels=1),
    "multi-temporal": dict(),
}


@dataclass
class AblationResult:
    reports: dict[str, list[EvalReport]] = field(default_factory=dict)

    def accuracies(self, name: str) -> np.ndarray:
        return np.array([r.accuracy for r in self.reports[name]])

    def summary(self) -> dict[str, dict[str, float]]:
        out = {}
        for name, reps in self.reports.items():
            acc = np.array([r.accuracy for r in reps])
            hom = np.array([r.homophene_accuracy for r in reps])
            oth = np.array([r.non_homophene_accuracy for r in reps])
            out[name] = {
                "accuracy_mean": float(acc.mean()), "accuracy_std": float(acc.std()),
                "homophene_mean": float(hom.mean()), "non_homophene_mean": float(oth.mean()),
                "runs": len(reps),
            }
        return out

    def format(self) -> str:
        lines = ["variant          acc mean   acc std  homophene  other"]
        for name, s in self.summary().items():
            lines.append(f"{name:15s} {100 * s['accuracy_mean']:8.2f}% {100 * s['accuracy_std']:8.2f}  "
                         f"{100 * s['homophene_mean']:8.2f}% {100 * s['non_homophene_mean']:6.2f}%")
        return "\n".join(lines)


def ablate(
    base: ModelConfig,
    lexicon: Lexicon,
    train_data: SyntheticBatch,
    test_data: SyntheticBatch,
    steps: int,
    seeds: Iterable[int],
    variants: dict[str, dict] | None = None,
    on_run: Callable[[str, int, Checkpoint, EvalReport], None] | None = None,
) -> AblationResult:
    """Train and evaluate each variant for each seed."""
    variants = ABLATION_VARIANTS if variants is None else variants
    result = AblationResult()
    for name, changes in variants.items():
        result.reports[name] = []
        for seed in seeds:
            cfg = base.replace(**changes, seed=int(seed))
            run = train(cfg, lexicon, train_data, steps)
            report = evaluate(run.checkpoint, lexicon, test_data)
            result.reports[name].append(report)
            log.info("%s seed %d: accuracy %.4f", name, seed, report.accuracy)
            if on_run is not None:
                on_run(name, int(seed), run.checkpoint, report)
    return result
