"""Multi-head visual-audio memory: key addressing, value reads and fusion.

One :class:`MemoryBank` is a single memory level.  A visual query frame is
projected once per head, compared by cosine similarity against that head's
key slots, and the resulting softmax distributions read a shared value
(audio) memory.  The ``h`` reads are concatenated, projected back to ``D``
and fused with the query by addition plus layer normalisation.

Tensors carry batch and frame axes in front: a query is (..., T, D) and
addressing scores are stored as (..., T, h, N).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Iterable, TextIO

import numpy as np

from . import numerics as nx
from .errors import ShapeError
from .numerics import Tensor


@dataclass
class MemoryBank:
    """Parameters of one memory level.

    ``head_keys`` stacks the h key memories as (h, N, D/h).  The h query
    projections are stored side by side in ``query_proj`` (D, D): head
    ``l`` uses columns ``l*D/h:(l+1)*D/h``.  ``output_proj`` is (h*D, D).
    """

    head_keys: Tensor
    value: Tensor
    query_proj: Tensor
    output_proj: Tensor
    fusion_gain: Tensor
    fusion_bias: Tensor
    alpha: float

    @classmethod
    def init(cls, slots: int, dim: int, heads: int, alpha: float, rng: np.random.Generator,
             dtype=np.float64) -> "MemoryBank":
        if heads < 1 or dim % heads:
            raise ValueError(f"dimension {dim} is not divisible by head count {heads}")
        bound = 1.0 / np.sqrt(dim)

        def uniform(*shape):
            return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, dtype=dtype)

        return cls(
            head_keys=uniform(heads, slots, dim // heads),
            value=uniform(slots, dim),
            query_proj=uniform(dim, dim),
            output_proj=uniform(heads * dim, dim),
            fusion_gain=Tensor(np.ones(dim), requires_grad=True, dtype=dtype),
            fusion_bias=Tensor(np.zeros(dim), requires_grad=True, dtype=dtype),
            alpha=float(alpha),
        )

    @property
    def heads(self) -> int:
        return self.head_keys.shape[0]

    @property
    def slots(self) -> int:
        return self.value.shape[0]

    @property
    def dim(self) -> int:
        return self.value.shape[1]

    @property
    def head_dim(self) -> int:
        return self.head_keys.shape[2]

    def head_key(self, head: int) -> np.ndarray:
        return self.head_keys.data[head]

    def head_query_projection(self, head: int) -> np.ndarray:
        d = self.head_dim
        return self.query_proj.data[:, head * d:(head + 1) * d]

    def parameters(self) -> dict[str, Tensor]:
        return {
            "head_keys": self.head_keys,
            "value": self.value,
            "query_proj": self.query_proj,
            "output_proj": self.output_proj,
            "fusion_gain": self.fusion_gain,
            "fusion_bias": self.fusion_bias,
        }

    def key_side_parameter_count(self) -> int:
        """Entries in the key memories plus the query projections."""
        return self.head_keys.size + self.query_proj.size


@dataclass
class AddressingTensor:
    """Per head and frame softmax over slots, stored (..., T, h, N)."""

    scores: Tensor

    @property
    def data(self) -> np.ndarray:
        return self.scores.data

    def head_major(self) -> np.ndarray:
        """Scores rearranged to (..., h, T, N)."""
        return np.swapaxes(self.scores.data, -3, -2)


@dataclass
class MvmOutput:
    fused: Tensor
    audio_knowledge: Tensor
    addressing: AddressingTensor


def address_heads(bank: MemoryBank, query: Tensor) -> AddressingTensor:
    if query.ndim < 2 or query.shape[-1] != bank.dim:
        raise ShapeError(f"query {query.shape} does not end in the bank dimension {bank.dim}")
    projected = nx.matmul(query, bank.query_proj)
    per_head = nx.reshape(projected, query.shape[:-1] + (bank.heads, bank.head_dim))
    scores = nx.cosine_scores(per_head, bank.head_keys)
    return AddressingTensor(nx.scaled_softmax(scores, bank.alpha))


def read_value(addressing: AddressingTensor, value: Tensor) -> Tensor:
    """Addressing-weighted sums of value slots, one read per head: (..., T, h, D)."""
    if addressing.scores.shape[-1] != value.shape[0]:
        raise ShapeError(
            f"addressing over {addressing.scores.shape[-1]} slots vs value memory with {value.shape[0]}"
        )
    return nx.matmul(addressing.scores, value)


def aggregate_heads(reads: Tensor, output_proj: Tensor) -> Tensor:
    """Concatenate head reads in head order and project: (..., T, h, D) -> (..., T, D)."""
    h, d = reads.shape[-2:]
    if output_proj.shape != (h * d, d):
        raise ShapeError(f"output projection {output_proj.shape} does not fit {h} heads of width {d}")
    return nx.matmul(nx.reshape(reads, reads.shape[:-2] + (h * d,)), output_proj)


def fuse(visual: Tensor, audio_knowledge: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    if visual.shape != audio_knowledge.shape:
        raise ShapeError(f"cannot fuse {visual.shape} with {audio_knowledge.shape}")
    return nx.layer_norm(nx.add(visual, audio_knowledge), gain, bias)


def self_address_value(value: Tensor, audio: Tensor, alpha: float) -> Tensor:
    """Address the value memory with raw audio frames: (..., T, D) -> (..., T, N)."""
    if audio.ndim < 1 or audio.shape[-1] != value.shape[1]:
        raise ShapeError(f"audio {audio.shape} does not match value memory width {value.shape[1]}")
    n, d = value.shape
    query = nx.reshape(audio, audio.shape[:-1] + (1, d))
    scores = nx.cosine_scores(query, nx.reshape(value, (1, n, d)))
    return nx.reshape(nx.scaled_softmax(scores, alpha), audio.shape[:-1] + (n,))


def reconstruct_audio(value: Tensor, self_addressing: Tensor) -> Tensor:
    if self_addressing.shape[-1] != value.shape[0]:
        raise ShapeError(
            f"self-addressing over {self_addressing.shape[-1]} slots vs {value.shape[0]} value slots"
        )
    return nx.matmul(self_addressing, value)


def mvm_forward(bank: MemoryBank, query: Tensor) -> MvmOutput:
    addressing = address_heads(bank, query)
    reads = read_value(addressing, bank.value)
    knowledge = aggregate_heads(reads, bank.output_proj)
    fused = fuse(query, knowledge, bank.fusion_gain, bank.fusion_bias)
    return MvmOutput(fused=fused, audio_knowledge=knowledge, addressing=addressing)


CSV_COLUMNS = ("example", "level", "head", "frame", "slot", "score")


def write_addressing_csv(
    stream: TextIO,
    per_level: Iterable[AddressingTensor],
    example: int = 0,
    header: bool = True,
) -> int:
    """Write one example's addressing scores as CSV rows; returns the row count.

    Each addressing tensor must be unbatched, (T, h, N).
    """
    writer = csv.writer(stream, lineterminator="\n")
    if header:
        writer.writerow(CSV_COLUMNS)
    rows = 0
    for level, addressing in enumerate(per_level):
        scores = addressing.head_major()
        if scores.ndim != 3:
            raise ShapeError(f"expected unbatched (T, h, N) addressing, got {addressing.data.shape}")
        h, t, n = scores.shape
        for head in range(h):
            for frame in range(t):
                for slot in range(n):
                    writer.writerow((example, level, head, frame, slot, repr(float(scores[head, frame, slot]))))
        rows += h * t * n
    return rows
