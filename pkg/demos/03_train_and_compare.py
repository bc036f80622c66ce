"""Train a memory-free baseline and the full model, then compare them.

Takes a couple of minutes on one CPU core.
Run: python demos/03_train_and_compare.py [steps]
"""

import sys
import tempfile
from pathlib import Path

import numpy as np

from mvm import harness
from mvm import synthdata as sd
from mvm.config import DataConfig

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 1000

data_cfg = DataConfig()
lexicon, train, test = sd.generate(data_cfg)
full_cfg = data_cfg.model_config()  # 3 levels, 4 heads, 16 slots
base_cfg = full_cfg.replace(levels=0)

print(f"training the baseline for {steps} steps ...")
base = harness.train(base_cfg, lexicon, train, steps)
print(f"training the full model for {steps} steps ...")
full = harness.train(full_cfg, lexicon, train, steps)
print("last log record:", full.log[-1])

report = harness.evaluate(full.checkpoint, lexicon, test, baseline=base.checkpoint, baseline_name="baseline")
print()
print(harness.format_report(report))

# Where do homophene pairs land in memory?  Compare addressing maps.
sep = harness.addressing_separation(full.checkpoint, lexicon, test)
print(f"\naddressing cosine distance: homophene pairs {sep.homophene:.4f}, same word {sep.same_word:.4f}")
print("per level (homophene):", np.round(sep.per_level_homophene, 4))

out = Path(tempfile.mkdtemp()) / "addressing.csv"
a, b = lexicon.homophene_pairs[0]
pick = [int(np.flatnonzero(test.labels == a)[0]), int(np.flatnonzero(test.labels == b)[0])]
rows = harness.inspect_memory(full.checkpoint, test.subset(pick), out)
print(f"wrote {rows} addressing rows for words {a} and {b} to {out}")
