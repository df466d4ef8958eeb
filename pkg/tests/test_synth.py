import numpy as np

from tokcon.encoder import reduced_length
from tokcon.synth import generate_suite, type_mean_rows, write_suite
from tokcon.text import tokenize


def test_deterministic():
    a, b = generate_suite(30, seed=7), generate_suite(30, seed=7)
    for x, y in zip(a.utterances, b.utterances):
        assert x.words == y.words
        np.testing.assert_array_equal(x.features, y.features)
        np.testing.assert_array_equal(x.teacher, y.teacher)
    assert generate_suite(30, seed=8).utterances[0].words != a.utterances[0].words or not np.array_equal(
        generate_suite(30, seed=8).utterances[0].features, a.utterances[0].features)


def test_noise_keeps_content():
    clean, noisy = generate_suite(20, seed=7, noise=0.1), generate_suite(20, seed=7, noise=0.5)
    for x, y in zip(clean.utterances, noisy.utterances):
        assert x.words == y.words and x.label == y.label
        np.testing.assert_array_equal(x.teacher, y.teacher)
        ratio = np.std(y.features - x.features) / 0.4
        assert 0.8 < ratio < 1.2


def test_structure():
    suite = generate_suite(60, seed=1)
    for utt in suite.utterances:
        tokens = tokenize(utt.transcript, suite.vocab)
        assert 4 <= len(tokens) <= 8
        assert utt.teacher.shape == (len(tokens), 64)
        np.testing.assert_allclose(np.linalg.norm(utt.teacher, axis=1), 1.0, atol=1e-5)
        assert len(set(utt.words)) == len(utt.words)
        intents = [w for w in utt.words if int(w[1:]) < 4]
        assert len(intents) == 1 and utt.label == f"intent{int(intents[0][1:])}"
        n_red = reduced_length(utt.features.shape[0])
        assert utt.spans[0] is None and utt.spans[-1] is None
        inner = utt.spans[1:-1]
        assert all(0 <= s < n_red for s in inner)
        assert inner == sorted(inner)
    assert sum(u.split == "val" for u in suite.utterances) == 12


def test_distinct_types_are_nearly_orthogonal():
    means = type_mean_rows(generate_suite(200, seed=7))
    keys = sorted(means)
    M = np.stack([means[k] / np.linalg.norm(means[k]) for k in keys])
    cos = M @ M.T
    off = cos[~np.eye(len(keys), dtype=bool)]
    assert off.max() < 0.3


def test_written_files(tmp_path):
    suite = generate_suite(5, seed=2)
    manifest = write_suite(tmp_path, suite)
    assert manifest.name == "manifest.jsonl"
    for name in ("vocab.txt", "spans.jsonl", "labels.txt"):
        assert (tmp_path / name).exists()
    assert len(list((tmp_path / "features").iterdir())) == 5
    assert len(list((tmp_path / "teacher").iterdir())) == 5
