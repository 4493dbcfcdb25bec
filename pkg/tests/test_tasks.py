"""Synthetic task and batching tests."""

import numpy as np
import pytest

from mute_lab.errors import ConfigError, DataError
from mute_lab.tasks import (BOS, EOS, PAD, SPECIAL, Batch, TaskSpec, assemble,
                            batchify, export_pairs, generate_pairs, transform,
                            unbatch)


def content(spec, rng, n):
    return rng.integers(SPECIAL, SPECIAL + spec.vocab, size=n)


def test_spec_validation():
    with pytest.raises(ConfigError):
        TaskSpec(kind="mirror")
    with pytest.raises(ConfigError):
        TaskSpec(kind="copy", min_len=6, max_len=5)
    with pytest.raises(ConfigError):
        TaskSpec(kind="copy", vocab=0)
    assert TaskSpec(kind="copy").model_vocab == 23


def test_transforms_hand_examples():
    src = np.array([7, 3, 9, 3])
    assert transform(TaskSpec(kind="copy"), src).tolist() == [7, 3, 9, 3]
    assert transform(TaskSpec(kind="reverse"), src).tolist() == [3, 9, 3, 7]
    assert transform(TaskSpec(kind="sort"), src).tolist() == [3, 3, 7, 9]


def test_cipher_is_content_bijection():
    spec = TaskSpec(kind="subst_cipher", seed=5)
    table = spec.cipher()
    assert sorted(table.tolist()) == list(range(SPECIAL, SPECIAL + spec.vocab))
    assert np.array_equal(table, spec.cipher())  # fixed property of the spec
    src = content(spec, np.random.default_rng(0), 8)
    out = transform(spec, src)
    assert np.array_equal(table[src - SPECIAL], out)
    # repeated input symbols map to the same output symbol
    src2 = np.array([5, 5, 9])
    out2 = transform(spec, src2)
    assert out2[0] == out2[1] != out2[2] or out2[0] == out2[1]


def test_generated_pairs_shape_and_framing():
    spec = TaskSpec(kind="reverse", seed=3)
    pairs = generate_pairs(spec, 100)
    assert len(pairs) == 100
    for s, t in pairs:
        assert s[-1] == EOS and t[-1] == EOS
        body, tody = s[:-1], t[:-1]
        assert spec.min_len <= len(body) <= spec.max_len
        assert (body >= SPECIAL).all() and (body < SPECIAL + spec.vocab).all()
        assert np.array_equal(tody, body[::-1])


def test_generation_is_deterministic_but_split_and_epoch_vary():
    spec = TaskSpec(kind="copy", seed=7)
    a = generate_pairs(spec, 20)
    b = generate_pairs(spec, 20)
    assert all(np.array_equal(x[0], y[0]) for x, y in zip(a, b))
    ev = generate_pairs(spec, 20, split="eval")
    e1 = generate_pairs(spec, 20, epoch=1)
    assert not all(np.array_equal(x[0], y[0]) for x, y in zip(a, ev))
    assert not all(np.array_equal(x[0], y[0]) for x, y in zip(a, e1))


def test_assemble_layout():
    pairs = [(np.array([5, 6, EOS]), np.array([6, 5, EOS])),
             (np.array([9, EOS]), np.array([9, EOS]))]
    batch = assemble(pairs)
    assert batch.src.tolist() == [[5, 6, EOS], [9, EOS, PAD]]
    assert batch.tgt_in.tolist() == [[BOS, 6, 5], [BOS, 9, PAD]]
    assert batch.tgt_out.tolist() == [[6, 5, EOS], [9, EOS, PAD]]
    assert batch.src_pad.tolist() == [[False, False, False],
                                      [False, False, True]]
    assert batch.tgt_pad.tolist() == [[False, False, False],
                                      [False, False, True]]
    assert batch.size == 2
    assert batch.token_count == 5  # non-pad target positions
    assert batch.src_lengths.tolist() == [3, 2]


def test_assemble_empty_rejected():
    with pytest.raises(DataError):
        assemble([])


def test_batchify_respects_budget_and_round_trips():
    spec = TaskSpec(kind="sort", seed=11)
    pairs = generate_pairs(spec, 200)
    batches = batchify(pairs, batch_tokens=120)
    for batch in batches:
        ns, nt = batch.src.shape[1], batch.tgt_out.shape[1]
        assert batch.size * (ns + nt) <= 120
    back = unbatch(batches)
    assert len(back) == len(pairs)
    key = lambda p: (tuple(p[0]), tuple(p[1]))
    assert sorted(map(key, back)) == sorted(map(key, pairs))


def test_batchify_groups_by_length():
    spec = TaskSpec(kind="copy", seed=13, min_len=2, max_len=12)
    pairs = generate_pairs(spec, 300)
    batches = batchify(pairs, batch_tokens=160)
    total = sum(b.src.size + b.tgt_out.size for b in batches)
    pad = sum((b.src == PAD).sum() + (b.tgt_out == PAD).sum() for b in batches)
    assert pad / total < 0.10  # length bucketing keeps padding waste low


def test_batchify_oversized_pair_rejected():
    pairs = [(np.full(30, 5), np.full(30, 5))]
    with pytest.raises(ConfigError):
        batchify(pairs, batch_tokens=40)
    with pytest.raises(ConfigError):
        batchify(pairs, batch_tokens=0)


def test_export_pairs_format(tmp_path):
    pairs = [(np.array([4, 5, EOS]), np.array([5, 4, EOS]))]
    out = tmp_path / "pairs.tsv"
    export_pairs(pairs, out)
    assert out.read_text() == "4 5 2\t5 4 2\n"
