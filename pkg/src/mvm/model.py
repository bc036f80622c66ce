"""Toy word-level lip-reading network with memory at several temporal levels.

Both front-ends embed a token sequence and run one same-padded temporal
convolution, so visual and audio features share the frame count T.  The
back-end is a stack of dilated residual convolution blocks.  Memory level
``l`` sits on the input of back-end block ``l`` (level 0 is between the
front-end and the back-end); the classifier mean-pools frames.

Training runs two paths through the same back-end:

* visual path: at each level, the current features query that level's
  memory and are replaced by the fused output;
* audio path: at each level, the current features are fused with the
  level's value-memory reconstruction of the front-end audio features.

Inference is the visual path alone; the audio front-end is never touched.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import losses
from . import memory as mem
from . import numerics as nx
from .config import ModelConfig
from .errors import ShapeError
from .numerics import Tensor


@dataclass
class TrainOutput:
    logits_visual_path: Tensor
    logits_audio_path: Tensor | None
    mvm_outputs: list[mem.MvmOutput]
    self_addressings: list[Tensor]
    reconstructions: list[Tensor]
    report: losses.LossReport


def _as_batch(tokens) -> tuple[np.ndarray, bool]:
    tokens = np.asarray(tokens)
    if not np.issubdtype(tokens.dtype, np.integer):
        raise ValueError("tokens must be integers")
    if tokens.ndim == 1:
        return tokens[None, :], True
    if tokens.ndim != 2:
        raise ShapeError(f"tokens must be (T,) or (B, T), got {tokens.shape}")
    return tokens, False


class LipReadingModel:
    def __init__(self, config: ModelConfig, rng: np.random.Generator | None = None):
        self.config = config
        rng = np.random.default_rng(config.seed) if rng is None else rng
        self.params: dict[str, Tensor] = {}
        self.banks: list[mem.MemoryBank] = []
        self.audio_frontend_calls = 0
        self._init_params(rng)

    # ------------------------------------------------------------------
    # parameters
    # ------------------------------------------------------------------

    def _init_params(self, rng: np.random.Generator) -> None:
        c = self.config
        d, dtype = c.dim, c.dtype

        def uniform(bound, *shape):
            return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, dtype=dtype)

        def zeros(*shape):
            return Tensor(np.zeros(shape), requires_grad=True, dtype=dtype)

        def add(name, t):
            self.params[name] = t

        for side, vocab in (("visual", c.visual_vocab), ("audio", c.n_phonemes)):
            add(f"{side}.embed", Tensor(rng.normal(size=(vocab, d)), requires_grad=True, dtype=dtype))
            add(f"{side}.conv_w", uniform(1 / np.sqrt(c.frontend_kernel * d), c.frontend_kernel, d, d))
            add(f"{side}.conv_b", zeros(d))
        for i in range(c.backend_blocks):
            add(f"backend.{i}.conv_w", uniform(1 / np.sqrt(c.backend_kernel * d), c.backend_kernel, d, d))
            add(f"backend.{i}.conv_b", zeros(d))
        for level in range(c.levels):
            bank = mem.MemoryBank.init(c.slots, d, c.heads, c.alpha, rng, dtype=dtype)
            self.banks.append(bank)
            for name, t in bank.parameters().items():
                add(f"memory.{level}.{name}", t)
        add("classifier.w", uniform(1 / np.sqrt(d), d, c.n_words))
        add("classifier.b", zeros(c.n_words))

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return list(self.params.items())

    def parameter_count(self) -> int:
        return int(sum(t.size for t in self.params.values()))

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.zero_grad()

    # ------------------------------------------------------------------
    # building blocks
    # ------------------------------------------------------------------

    def _frontend(self, side: str, tokens: np.ndarray, vocab: int) -> Tensor:
        if tokens.size and (tokens.min() < 0 or tokens.max() >= vocab):
            raise ValueError(f"{side} token out of range [0, {vocab})")
        p = self.params
        x = nx.embedding(p[f"{side}.embed"], tokens)
        return nx.conv1d(x, p[f"{side}.conv_w"], p[f"{side}.conv_b"])

    def visual_frontend(self, viseme_tokens) -> Tensor:
        tokens, single = _as_batch(viseme_tokens)
        out = self._frontend("visual", tokens, self.config.visual_vocab)
        return nx.reshape(out, out.shape[1:]) if single else out

    def audio_frontend(self, phoneme_tokens) -> Tensor:
        self.audio_frontend_calls += 1
        tokens, single = _as_batch(phoneme_tokens)
        out = self._frontend("audio", tokens, self.config.n_phonemes)
        return nx.reshape(out, out.shape[1:]) if single else out

    def _block(self, i: int, x: Tensor) -> Tensor:
        p = self.params
        h = nx.conv1d(x, p[f"backend.{i}.conv_w"], p[f"backend.{i}.conv_b"], self.config.dilations[i])
        return nx.add(x, nx.relu(h))

    def _classify(self, x: Tensor) -> Tensor:
        pooled = nx.mean(x, axis=1)
        return nx.add_bias(nx.matmul(pooled, self.params["classifier.w"]), self.params["classifier.b"])

    def _visual_path(self, f_v: Tensor) -> tuple[Tensor, list[mem.MvmOutput]]:
        x, outs = f_v, []
        for i in range(self.config.backend_blocks + 1):
            if i < len(self.banks):
                out = mem.mvm_forward(self.banks[i], x)
                outs.append(out)
                x = out.fused
            if i < self.config.backend_blocks:
                x = self._block(i, x)
        return self._classify(x), outs

    def _audio_path(self, f_v: Tensor, reconstructions: list[Tensor]) -> Tensor:
        x = f_v
        for i in range(self.config.backend_blocks + 1):
            if i < len(self.banks):
                bank = self.banks[i]
                x = mem.fuse(x, reconstructions[i], bank.fusion_gain, bank.fusion_bias)
            if i < self.config.backend_blocks:
                x = self._block(i, x)
        return self._classify(x)

    # ------------------------------------------------------------------
    # public forwards
    # ------------------------------------------------------------------

    def forward_infer(self, viseme_tokens) -> Tensor:
        """Class logits from lip tokens alone: (K,) or (B, K)."""
        tokens, single = _as_batch(viseme_tokens)
        logits, _ = self._visual_path(self._frontend("visual", tokens, self.config.visual_vocab))
        return nx.reshape(logits, logits.shape[1:]) if single else logits

    def memory_readout(self, viseme_tokens) -> list[mem.MvmOutput]:
        """Per-level memory outputs of the inference path (batched input)."""
        tokens, _ = _as_batch(viseme_tokens)
        _, outs = self._visual_path(self._frontend("visual", tokens, self.config.visual_vocab))
        return outs

    def forward_train(self, viseme_tokens, phoneme_tokens, labels) -> TrainOutput:
        c = self.config
        vis, single = _as_batch(viseme_tokens)
        aud, _ = _as_batch(phoneme_tokens)
        if vis.shape != aud.shape:
            raise ShapeError(f"visual tokens {vis.shape} and audio tokens {aud.shape} are not aligned")
        labels = np.asarray(labels, dtype=np.int64).reshape(vis.shape[0])

        f_v = self._frontend("visual", vis, c.visual_vocab)
        logits_v, outs = self._visual_path(f_v)

        logits_a = None
        self_addr, recons, recs, conts = [], [], [], []
        if self.banks:
            self.audio_frontend_calls += 1
            f_a = self._frontend("audio", aud, c.n_phonemes)
            for bank in self.banks:
                a = mem.self_address_value(bank.value, f_a, bank.alpha)
                r = mem.reconstruct_audio(bank.value, a)
                self_addr.append(a)
                recons.append(r)
                recs.append(losses.reconstruction_loss(r, f_a, c.rec_reduction))
                conts.append(losses.contrastive_loss(bank.value, c.cont_reduction))
            logits_a = self._audio_path(f_v, recons)

        task = losses.task_loss(logits_v, logits_a, labels)
        report = losses.total_loss(recs, conts, task, c.lambda_rec, c.lambda_cont)
        if single:
            logits_v = nx.reshape(logits_v, logits_v.shape[1:])
            if logits_a is not None:
                logits_a = nx.reshape(logits_a, logits_a.shape[1:])
        return TrainOutput(logits_v, logits_a, outs, self_addr, recons, report)
