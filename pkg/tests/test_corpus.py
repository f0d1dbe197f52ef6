import numpy as np
import pytest

from splm import corpus


def test_vocabulary_is_27_symbols():
    assert corpus.VOCAB_SIZE == 27
    assert corpus.decode(range(27)) == "abcdefghijklmnopqrstuvwxyz "
    assert corpus.SPACE_ID == 26


def test_normalize_examples():
    assert corpus.normalize("Hello, World!") == "hello  world "
    assert corpus.normalize("abc") == "abc"
    assert corpus.normalize(b"Mix3d CASE\n") == "mix d case "


def test_normalize_idempotent():
    rng = np.random.default_rng(0)
    for _ in range(20):
        raw = bytes(rng.integers(0, 256, size=200, dtype=np.uint8))
        once = corpus.normalize(raw)
        assert corpus.normalize(once) == once
        assert set(once) <= set("abcdefghijklmnopqrstuvwxyz ")


def test_encode_decode_round_trip():
    rng = np.random.default_rng(1)
    ids = rng.integers(0, 27, size=1000).astype(np.uint8)
    text = corpus.decode(ids)
    assert np.array_equal(corpus.encode(text), ids)
    assert corpus.decode(corpus.encode(" ")) == " "
    assert list(corpus.encode("ab")) == [0, 1]


def test_encode_rejects_unnormalized():
    with pytest.raises(ValueError):
        corpus.encode("Bad!")


def test_split_ratios_exact():
    ids = np.arange(1000) % 27
    cs = corpus.split_corpus(ids.astype(np.uint8))
    assert (len(cs.train), len(cs.dev), len(cs.test)) == (900, 50, 50)
    assert np.array_equal(np.concatenate([cs.train, cs.dev, cs.test]),
                          ids.astype(np.uint8))


def test_split_round_trip_file(tmp_path):
    rng = np.random.default_rng(2)
    ids = rng.integers(0, 27, size=503).astype(np.uint8)
    cs = corpus.split_corpus(ids)
    path = tmp_path / "c.splm"
    corpus.save_split(cs, path)
    back = corpus.load_split(path)
    for a, b in ((cs.train, back.train), (cs.dev, back.dev), (cs.test, back.test)):
        assert np.array_equal(a, b)
    assert back.checksum == cs.checksum
    raw = path.read_bytes()
    assert raw[:4] == b"SPLM" and raw[4] == 1


def test_load_split_rejects_garbage(tmp_path):
    p = tmp_path / "bad.splm"
    p.write_bytes(b"NOPE" + bytes(40))
    with pytest.raises(ValueError):
        corpus.load_split(p)
    p.write_bytes(b"SPLM\x01" + (8).to_bytes(8, "little") * 3)  # lengths but no body
    with pytest.raises(ValueError):
        corpus.load_split(p)


def test_prepare_writes_loadable_file(tmp_path):
    src = tmp_path / "raw.txt"
    src.write_text("The quick brown fox jumps over the lazy dog. " * 20)
    out = tmp_path / "corpus.splm"
    cs = corpus.prepare(src, out)
    back = corpus.load_split(out)
    assert np.array_equal(cs.train, back.train)
    assert back.train.max() < 27


def test_batch_targets_shifted_by_one():
    ids = corpus.encode("abcde")
    inputs, targets = next(corpus.batch_iter(ids, 3, 2, seed=0))
    assert inputs.shape == (2, 3) and targets.shape == (2, 3)
    for b in range(2):
        # same window shifted left by one within the corpus
        s = list(ids).index(inputs[b, 0])
        assert np.array_equal(targets[b], ids[s + 1:s + 4])


def test_batch_iter_deterministic_under_seed():
    rng = np.random.default_rng(3)
    ids = rng.integers(0, 27, size=400).astype(np.uint8)
    a = [x for x, _ in zip(corpus.batch_iter(ids, 16, 4, seed=9), range(5))]
    b = [x for x, _ in zip(corpus.batch_iter(ids, 16, 4, seed=9), range(5))]
    for (xa, ya), (xb, yb) in zip(a, b):
        assert np.array_equal(xa, xb) and np.array_equal(ya, yb)
    c = next(corpus.batch_iter(ids, 16, 4, seed=10))
    assert not np.array_equal(a[0][0], c[0])


def test_batch_at_is_stateless():
    rng = np.random.default_rng(4)
    ids = rng.integers(0, 27, size=400).astype(np.uint8)
    stream = corpus.batch_iter(ids, 8, 3, seed=5)
    got = [next(stream) for _ in range(4)]
    for step in range(4):
        x, y = corpus.batch_at(ids, 8, 3, seed=5, step=step)
        assert np.array_equal(x, got[step][0])
        assert np.array_equal(y, got[step][1])


def test_sequential_mode_covers_each_position_once():
    ids = np.arange(100, dtype=np.uint8)  # unique values so row[0] is the start
    seen = np.zeros(100, dtype=int)
    for x, y in corpus.batch_iter(ids, 16, 2, seed=0, sequential=True):
        for row in x:
            seen[int(row[0]):int(row[0]) + 16] += 1
        assert np.array_equal(y[:, :-1], x[:, 1:])
    assert seen.max() <= 1


def test_batch_rejects_short_split():
    with pytest.raises(ValueError):
        next(corpus.batch_iter(np.zeros(4, dtype=np.uint8), 8, 1, seed=0))
