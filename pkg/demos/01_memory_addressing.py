"""How a multi-head memory bank turns a visual feature into audio knowledge.

Run: python demos/01_memory_addressing.py
"""

import numpy as np

from mvm import memory as mem
from mvm import numerics as nx
from mvm.memory import MemoryBank

rng = np.random.default_rng(0)

# A bank with 8 slots over 16-dim features, split into 4 heads of 4 dims each.
bank = MemoryBank.init(slots=8, dim=16, heads=4, alpha=16.0, rng=rng)
print(f"heads={bank.heads} slots={bank.slots} head_dim={bank.head_dim}")
print(f"key-side parameters: {bank.key_side_parameter_count()} (= N*D + D*D regardless of head count)")

# Three frames of visual features.
frames = nx.Tensor(rng.normal(size=(3, 16)))

# Each head projects the frame with its own slice of the query projection and
# compares it (cosine) with its own key slots; alpha sharpens the softmax.
addressing = mem.address_heads(bank, frames)
scores = addressing.head_major()  # (heads, frames, slots)
np.set_printoptions(precision=3, suppress=True)
print("\naddressing of frame 0, one row per head:")
print(scores[:, 0, :])
print("rows sum to", scores.sum(axis=-1).ravel())

# Scaling the query does not change a cosine-based address.
scaled = mem.address_heads(bank, nx.scale(frames, 42.0)).data
print("\nmax change when the query is scaled by 42:", np.abs(scaled - addressing.data).max())

# Different heads point at different slots, so the value memory is read h times
# and the reads are merged by the output projection before fusion.
out = mem.mvm_forward(bank, frames)
print("\nfused output shape:", out.fused.shape, " audio knowledge shape:", out.audio_knowledge.shape)
print("argmax slot per head for each frame:")
print(scores.argmax(axis=-1))

# With alpha -> 0 the softmax flattens towards uniform attention.
flat = MemoryBank(**{**bank.__dict__, "alpha": 0.0})
print("\nalpha=0 addressing of frame 0, head 0:", mem.address_heads(flat, frames).head_major()[0, 0])
