"""A tour of the synthetic homophene benchmark and its Bayes ceiling.

Run: python demos/02_homophene_benchmark.py
"""

import numpy as np

from mvm import synthdata as sd
from mvm.config import DataConfig

cfg = DataConfig()  # 20 words, 5 homophene pairs, cue rate 0.2, noise 0.1
lexicon, train, test = sd.generate(cfg)

print("phoneme -> viseme:", lexicon.phoneme_to_viseme.tolist())
print("homophene pairs:", lexicon.homophene_pairs)
a, b = lexicon.homophene_pairs[0]
print(f"\nword {a}: phonemes {lexicon.words[a].tolist()} visemes {list(lexicon.viseme_string(a))}")
print(f"word {b}: phonemes {lexicon.words[b].tolist()} visemes {list(lexicon.viseme_string(b))}")

# Visual tokens: 0..V-1 are visemes; V+p is a sub-token naming phoneme p.
# Sub-tokens are either a genuine cue (the true phoneme) or a lookalike drawn
# from the same viseme class, which carries no information.
sample = test.visual[np.flatnonzero(test.labels == a)[0]]
print("\none visual sample of word", a)
print(" ", sample.tolist())
print("  audio:", test.phonemes[np.flatnonzero(test.labels == a)[0]].tolist())

# Because the generator is fully specified, the visual-only posterior is exact.
ll = sd.visual_log_likelihood(lexicon, test.visual)
pred = ll.argmax(axis=1)
hom = np.isin(test.labels, sorted(lexicon.homophene_words()))
print(f"\nBayes-optimal lip-only accuracy on the test split: {100 * np.mean(pred == test.labels):.2f}%")
print(f"  homophene words {100 * np.mean(pred[hom] == test.labels[hom]):.2f}%, "
      f"other words {100 * np.mean(pred[~hom] == test.labels[~hom]):.2f}%")

# Without any cue the two members of a pair are indistinguishable.
blind = DataConfig(emission_separation=0.0)
lex0, _, test0 = sd.generate(blind)
ll0 = sd.visual_log_likelihood(lex0, test0.visual)
p, q = lex0.homophene_pairs[0]
print(f"\nwith cue rate 0 the likelihoods of words {p} and {q} coincide:", np.array_equal(ll0[:, p], ll0[:, q]))
