"""Synthetic sequence-to-sequence tasks and batching.

Token id layout: pad=0, bos=1, eos=2, content ids start at 3.  A task
with ``vocab=20`` therefore uses ids 3..22 and a model vocabulary of 23.
Sources and targets both end with eos; bos is prepended to the decoder
input only, at batch assembly time.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError
from .rng import stream

PAD = 0
BOS = 1
EOS = 2
SPECIAL = 3

TASK_KINDS = ("copy", "reverse", "sort", "subst_cipher")


@dataclass(frozen=True)
class TaskSpec:
    kind: str
    vocab: int = 20
    min_len: int = 5
    max_len: int = 12
    seed: int = 1

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ConfigError(f"unknown task kind {self.kind!r}")
        if self.vocab < 1:
            raise ConfigError("task vocab must be positive")
        if not 1 <= self.min_len <= self.max_len:
            raise ConfigError(
                f"bad length range [{self.min_len}, {self.max_len}]")

    @property
    def model_vocab(self) -> int:
        """Task vocabulary plus the three special ids."""
        return self.vocab + SPECIAL

    def cipher(self) -> np.ndarray:
        """Bijective content-id mapping for the substitution task.

        Derived from the task seed so the mapping is a fixed property of
        the spec, independent of how many pairs are drawn.
        """
        rng = stream(self.seed, "cipher")
        table = np.arange(self.vocab) + SPECIAL
        return table[rng.permutation(self.vocab)]


def transform(spec: TaskSpec, src: np.ndarray) -> np.ndarray:
    """Target content ids for one source sequence (no eos framing)."""
    if spec.kind == "copy":
        return src.copy()
    if spec.kind == "reverse":
        return src[::-1].copy()
    if spec.kind == "sort":
        return np.sort(src)
    return spec.cipher()[src - SPECIAL]


def generate_pairs(spec: TaskSpec, count: int, epoch: int = 0,
                   split: str = "train") -> list:
    """Draw ``count`` (source, target) id sequences, eos appended.

    Deterministic for a fixed (spec seed, split, epoch); successive
    epochs get fresh draws from a sibling stream.  Splits share the
    cipher mapping but never share pair draws.
    """
    if count < 0:
        raise ConfigError("pair count must be >= 0")
    rng = stream(spec.seed, "pairs." + split, epoch)
    pairs = []
    for _ in range(count):
        n = int(rng.integers(spec.min_len, spec.max_len + 1))
        src = rng.integers(SPECIAL, SPECIAL + spec.vocab, size=n)
        tgt = transform(spec, src)
        pairs.append((np.append(src, EOS), np.append(tgt, EOS)))
    return pairs


@dataclass
class Batch:
    """Padded id matrices with masks, ready for the model.

    ``src`` is [B, n_s]; ``tgt_in`` is the bos-prefixed decoder input
    [B, n_t]; ``tgt_out`` is the eos-terminated prediction target
    [B, n_t].  Masks are True at pad positions.
    """

    src: np.ndarray
    tgt_in: np.ndarray
    tgt_out: np.ndarray
    src_pad: np.ndarray
    tgt_pad: np.ndarray

    @property
    def size(self) -> int:
        return self.src.shape[0]

    @property
    def token_count(self) -> int:
        """Non-pad target tokens, the unit loss is averaged over."""
        return int((~self.tgt_pad).sum())

    @property
    def src_lengths(self) -> np.ndarray:
        return (~self.src_pad).sum(axis=1)


def assemble(pairs: list) -> Batch:
    """Pad a group of (source, target) pairs into one batch."""
    if not pairs:
        raise DataError("cannot assemble an empty batch")
    ns = max(len(s) for s, _ in pairs)
    nt = max(len(t) for _, t in pairs)
    batch = len(pairs)
    src = np.full((batch, ns), PAD, dtype=np.int64)
    tgt_in = np.full((batch, nt), PAD, dtype=np.int64)
    tgt_out = np.full((batch, nt), PAD, dtype=np.int64)
    for b, (s, t) in enumerate(pairs):
        src[b, :len(s)] = s
        tgt_in[b, 0] = BOS
        tgt_in[b, 1:len(t)] = t[:-1]
        tgt_out[b, :len(t)] = t
    return Batch(src=src, tgt_in=tgt_in, tgt_out=tgt_out,
                 src_pad=src == PAD, tgt_pad=tgt_out == PAD)


def batchify(pairs: list, batch_tokens: int) -> list:
    """Bucket pairs by length under a per-batch token budget.

    The budget counts source plus target tokens after padding.  Pairs
    are grouped by similar length to keep padding waste low; every pair
    lands in exactly one batch.
    """
    if batch_tokens < 1:
        raise ConfigError("batch token budget must be positive")
    order = sorted(range(len(pairs)),
                   key=lambda i: (len(pairs[i][0]), len(pairs[i][1]), i))
    batches = []
    group: list = []
    ns = nt = 0
    for i in order:
        s, t = pairs[i]
        cand_ns, cand_nt = max(ns, len(s)), max(nt, len(t))
        cost = (len(group) + 1) * (cand_ns + cand_nt)
        if group and cost > batch_tokens:
            batches.append(assemble(group))
            group, ns, nt = [], 0, 0
            cand_ns, cand_nt = len(s), len(t)
            if cand_ns + cand_nt > batch_tokens:
                raise ConfigError(
                    f"pair of {cand_ns + cand_nt} tokens exceeds the "
                    f"budget of {batch_tokens}")
        elif not group and len(s) + len(t) > batch_tokens:
            raise ConfigError(
                f"pair of {len(s) + len(t)} tokens exceeds the budget "
                f"of {batch_tokens}")
        group.append((s, t))
        ns, nt = cand_ns, cand_nt
    if group:
        batches.append(assemble(group))
    return batches


def unbatch(batches: list) -> list:
    """Recover the (source, target) pairs, pad and bos stripped."""
    pairs = []
    for batch in batches:
        for b in range(batch.size):
            s = batch.src[b][~batch.src_pad[b]]
            t = batch.tgt_out[b][~batch.tgt_pad[b]]
            pairs.append((s.copy(), t.copy()))
    return pairs


def export_pairs(pairs: list, path) -> None:
    """One `src<TAB>tgt` line per pair, ids space-separated."""
    with open(path, "w", encoding="utf-8") as fh:
        for s, t in pairs:
            fh.write(" ".join(map(str, s)) + "\t" + " ".join(map(str, t)) + "\n")
