import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mvm import synthdata as sd
from mvm.config import DataConfig
from mvm.errors import FormatError, LexiconError

LEXICON_CFG = DataConfig(n_phonemes=10, n_visemes=4, n_words=20, word_length=4, homophene_pairs=5,
                  emission_separation=0.2, noise_sigma=0.1, seed=3)


def test_declared_pairs_share_viseme_strings():
    lex = sd.build_lexicon(LEXICON_CFG)
    assert len(lex.homophene_pairs) == 5
    for a, b in lex.homophene_pairs:
        assert lex.viseme_string(a) == lex.viseme_string(b)
        assert not np.array_equal(lex.words[a], lex.words[b])


def test_no_pairs_means_unique_viseme_strings():
    lex = sd.build_lexicon(LEXICON_CFG.replace(homophene_pairs=0))
    assert len({lex.viseme_string(w) for w in range(lex.n_words)}) == lex.n_words
    assert lex.viseme_groups() == []


def test_lexicon_is_deterministic_in_seed():
    assert sd.build_lexicon(LEXICON_CFG) == sd.build_lexicon(LEXICON_CFG)
    assert sd.build_lexicon(LEXICON_CFG) != sd.build_lexicon(LEXICON_CFG.replace(seed=4))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(3, 6), st.integers(0, 6))
def test_lexicon_invariants(seed, n_visemes, pairs):
    cfg = LEXICON_CFG.replace(seed=seed, n_visemes=n_visemes, n_phonemes=n_visemes + 4, homophene_pairs=pairs)
    lex = sd.build_lexicon(cfg)
    groups = sorted(tuple(sorted(g)) for g in lex.viseme_groups())
    assert groups == sorted(lex.homophene_pairs)
    assert len({tuple(w) for w in lex.words}) == lex.n_words
    counts = np.bincount(lex.phoneme_to_viseme, minlength=n_visemes)
    assert np.all(counts >= 1) and counts.max() >= 2
    np.testing.assert_allclose(lex.reveal_profile.mean(axis=1), 1.0)


@pytest.mark.parametrize(
    "changes",
    [
        dict(n_phonemes=4, n_visemes=4),
        dict(n_visemes=1, n_phonemes=3),
        dict(homophene_pairs=11),
        dict(n_phonemes=3, n_visemes=2, word_length=2, n_words=10, homophene_pairs=0),
        dict(n_phonemes=5, n_visemes=2, word_length=2, n_words=10, homophene_pairs=1),
    ],
)
def test_infeasible_specs_are_rejected(changes):
    with pytest.raises(LexiconError):
        sd.build_lexicon(LEXICON_CFG.replace(**changes))


def test_clean_samples_are_pure_repeats():
    lex = sd.build_lexicon(LEXICON_CFG.replace(emission_separation=0.0, noise_sigma=0.0))
    rng = np.random.default_rng(0)
    a, b = lex.homophene_pairs[0]
    ea = sd.sample_example(lex, a, 24, rng)
    eb = sd.sample_example(lex, b, 24, rng)
    np.testing.assert_array_equal(ea.viseme_tokens, eb.viseme_tokens)
    np.testing.assert_array_equal(ea.viseme_tokens, np.repeat(lex.phoneme_to_viseme[lex.words[a]], 6))
    np.testing.assert_array_equal(ea.phoneme_tokens, np.repeat(lex.words[a], 6))
    assert ea.label == a


def test_sample_requires_divisible_frames():
    lex = sd.build_lexicon(LEXICON_CFG)
    with pytest.raises(ValueError):
        sd.sample_example(lex, 0, 25, np.random.default_rng(0))


def test_revealing_fraction_monte_carlo():
    lex = sd.build_lexicon(LEXICON_CFG.replace(noise_sigma=0.0))
    rng = np.random.default_rng(1)
    labels = rng.integers(0, lex.n_words, size=10_000)
    batch = sd.sample_batch(lex, labels, 24, rng)
    revealing = batch.visual >= lex.n_visemes
    assert revealing.mean() == pytest.approx(0.2, abs=0.02)
    # every revealing frame names the true phoneme
    true_phon = np.repeat(lex.words[labels], 6, axis=1)
    assert np.all(batch.visual[revealing] - lex.n_visemes == true_phon[revealing])


def test_confusables_stay_within_viseme_class():
    lex = sd.build_lexicon(LEXICON_CFG.replace(emission_separation=0.0, noise_sigma=0.5))
    rng = np.random.default_rng(2)
    labels = rng.integers(0, lex.n_words, size=500)
    batch = sd.sample_batch(lex, labels, 24, rng)
    sub = batch.visual >= lex.n_visemes
    clean_vis = np.repeat(lex.phoneme_to_viseme[lex.words[labels]], 6, axis=1)
    shown = lex.phoneme_to_viseme[np.where(sub, batch.visual - lex.n_visemes, 0)]
    assert np.all(shown[sub] == clean_vis[sub])
    assert sub.mean() == pytest.approx(0.5, abs=0.02)


def test_balanced_split_majority_baseline():
    lex, train, test = sd.generate(LEXICON_CFG.replace(train_per_word=20, test_per_word=50))
    assert np.all(np.bincount(test.labels, minlength=20) == 50)
    majority = np.bincount(train.labels).argmax()
    acc = np.mean(test.labels == majority)
    k = 20
    sigma_binom = np.sqrt((1 / k) * (1 - 1 / k) / len(test))
    assert abs(acc - 1 / k) <= 3 * sigma_binom


def test_nearest_neighbour_probe_capped_without_cue():
    cfg = LEXICON_CFG.replace(emission_separation=0.0, noise_sigma=0.1, train_per_word=100, test_per_word=100, seed=5)
    lex, train, test = sd.generate(cfg)
    members = sorted(lex.homophene_words())
    tr = train.subset(np.isin(train.labels, members))
    te = test.subset(np.isin(test.labels, members))
    dist = (te.visual[:, None, :] != tr.visual[None, :, :]).sum(axis=2)
    rng = np.random.default_rng(0)
    # random tie-breaking among equally near neighbours
    noise = rng.random(dist.shape) * 0.5
    pred = tr.labels[np.argmin(dist + noise, axis=1)]
    acc = np.mean(pred == te.labels)
    se = np.sqrt(0.25 / len(te))
    assert acc <= 0.5 + 3 * se


# ---------------------------------------------------------------------------
# file format
# ---------------------------------------------------------------------------


def test_dataset_round_trip(tmp_path):
    lex, train, _ = sd.generate(LEXICON_CFG.replace(train_per_word=3))
    path = tmp_path / "train.mvmd"
    sd.write_dataset(path, lex, train)
    lex2, batch2 = sd.read_dataset(path)
    assert lex2 == lex
    assert batch2 == train
    sidecar = json.loads((tmp_path / "train.mvmd.json").read_text())
    assert sidecar["magic"] == "MVMD" and sidecar["records"] == len(train)
    assert sidecar["frames"] == 24 and sidecar["n_words"] == 20


def test_dataset_round_trip_from_example_list(tmp_path):
    lex, train, _ = sd.generate(LEXICON_CFG.replace(train_per_word=1))
    path = tmp_path / "d.mvmd"
    sd.write_dataset(path, lex, train.examples())
    _, batch = sd.read_dataset(path)
    assert batch == train


def test_corrupted_byte_fails_checksum(tmp_path):
    lex, train, _ = sd.generate(LEXICON_CFG.replace(train_per_word=2))
    path = tmp_path / "d.mvmd"
    sd.write_dataset(path, lex, train)
    raw = bytearray(path.read_bytes())
    raw[len(raw) // 2] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError, match="checksum"):
        sd.read_dataset(path)


def test_truncated_and_foreign_files(tmp_path):
    lex, train, _ = sd.generate(LEXICON_CFG.replace(train_per_word=2))
    data = sd.encode_dataset(lex, train)
    with pytest.raises(FormatError):
        sd.decode_dataset(data[:10])
    with pytest.raises(FormatError):
        sd.decode_dataset(b"XXXX" + data[4:])


def test_version_mismatch(tmp_path):
    import struct
    import zlib

    lex, train, _ = sd.generate(LEXICON_CFG.replace(train_per_word=1))
    body = bytearray(sd.encode_dataset(lex, train)[:-4])
    body[4:8] = struct.pack("<I", 99)
    data = bytes(body) + struct.pack("<I", zlib.crc32(bytes(body)))
    with pytest.raises(FormatError, match="version"):
        sd.decode_dataset(data)


def test_empty_dataset_is_valid(tmp_path):
    lex = sd.build_lexicon(LEXICON_CFG)
    path = tmp_path / "empty.mvmd"
    sd.write_dataset(path, lex, [], frames=24)
    lex2, batch = sd.read_dataset(path)
    assert lex2 == lex
    assert len(batch) == 0 and batch.frames == 24


# ---------------------------------------------------------------------------
# exact visual likelihood
# ---------------------------------------------------------------------------


def test_likelihood_without_cue_cannot_split_homophenes():
    lex, _, test = sd.generate(LEXICON_CFG.replace(emission_separation=0.0, test_per_word=5))
    ll = sd.visual_log_likelihood(lex, test.visual)
    for a, b in lex.homophene_pairs:
        np.testing.assert_array_equal(ll[:, a], ll[:, b])


def test_likelihood_is_finite_for_true_word():
    lex, _, test = sd.generate(LEXICON_CFG.replace(test_per_word=10))
    ll = sd.visual_log_likelihood(lex, test.visual)
    assert np.all(np.isfinite(ll[np.arange(len(test)), test.labels]))


def test_likelihood_sums_to_one_over_all_sequences():
    lex = sd.build_lexicon(LEXICON_CFG)
    vocab = lex.n_visemes + lex.n_phonemes
    grid = np.stack(np.meshgrid(*[np.arange(vocab)] * lex.word_length, indexing="ij"), axis=-1)
    seqs = grid.reshape(-1, lex.word_length)
    probs = np.exp(sd.visual_log_likelihood(lex, seqs)).sum(axis=0)
    np.testing.assert_allclose(probs, 1.0, atol=1e-12)


def test_bayes_classifier_is_perfect_on_unique_words():
    lex, _, test = sd.generate(LEXICON_CFG.replace(test_per_word=20))
    pred = sd.visual_log_likelihood(lex, test.visual).argmax(axis=1)
    other = ~np.isin(test.labels, sorted(lex.homophene_words()))
    assert np.all(pred[other] == test.labels[other])
