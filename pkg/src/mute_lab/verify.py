"""Self-contained verification suites.

Each suite returns (ok, detail) and `run` collects them; the CLI prints
one line per suite and fails the process if any suite fails.  The
gradient suite iterates GRAD_CASES, a module-level registry, so a test
harness can inject a deliberately wrong case and confirm the suite
catches it.
"""

from __future__ import annotations

import math
import os
import tempfile

import numpy as np

from . import reference, tensor as T
from .analysis import DIV_MIN, diversity_report, diversity_score
from .errors import MuteLabError
from .gradcheck import check_parameters, grad_check
from .model import ModelConfig, MuteModel
from .multiunit import NoiseKind
from .rng import stream
from .shuffle import (ShuffleMatrix, anneal, hardness, penalty_value,
                      project, to_hard_permutation)
from .tasks import TaskSpec, batchify, generate_pairs
from .tensor import Tensor
from .trainer import TrainConfig, Trainer

GRAD_TOL = 1e-4
EXACT_TOL = 1e-12


def _tiny_config(**kw) -> ModelConfig:
    base = dict(d=8, d_ff=16, heads=2, n_enc=1, n_dec=1, units=2,
                mode="seq_biased", clip=3, dropout=0.0, label_smooth=0.1,
                penalty_weight=0.1, src_vocab=9, tgt_vocab=9, max_len=8,
                noises=(NoiseKind("identity"), NoiseKind("swap", 2)))
    base.update(kw)
    return ModelConfig(**base)


# -- gradient cases ---------------------------------------------------------

def _case_chain(rng):
    w = rng.normal(size=(6, 6))

    def f(x):
        y = T.matmul(x, Tensor(w))
        return T.sum_(T.mul(T.softmax(y, axis=-1), y))

    return f, rng.normal(size=(4, 6))


def _case_layer_norm(rng):
    gain = Tensor(rng.normal(size=7))
    bias = Tensor(rng.normal(size=7))
    probe = Tensor(rng.normal(size=(3, 7)))

    def f(x):
        return T.sum_(T.mul(T.layer_norm(x, gain, bias), probe))

    return f, rng.normal(size=(3, 7))


def _case_masked_softmax(rng):
    mask = np.zeros((3, 5), dtype=bool)
    mask[0, 1] = mask[2, 4] = True
    probe = rng.normal(size=(3, 5))

    def f(x):
        return T.sum_(T.mul(T.masked_softmax(x, mask), Tensor(probe)))

    return f, rng.normal(size=(3, 5))


def _case_penalty(rng):
    def f(x):
        from .shuffle import penalty
        return penalty(x)

    m = rng.uniform(0.05, 1.0, size=(4, 4))
    project(m)
    return f, m


def _case_model_loss(rng):
    config = _tiny_config()
    model = MuteModel(config, seed=17)
    src = np.array([[3, 4, 5, 2]])
    tgt_in = np.array([[1, 5, 4]])
    tgt_out = np.array([[5, 4, 2]])
    pad = np.zeros_like(tgt_out, dtype=bool)
    alpha = model.encoder[0].alpha

    def f(_x):
        logits = model.forward_logits(src, tgt_in, training=False)
        loss, _, _ = model.loss_with_penalty(logits, tgt_out, pad)
        return loss

    return f, alpha


GRAD_CASES = [
    ("matmul_softmax_chain", _case_chain),
    ("layer_norm", _case_layer_norm),
    ("masked_softmax", _case_masked_softmax),
    ("shuffle_penalty", _case_penalty),
    ("model_loss_wrt_alpha", _case_model_loss),
]


def suite_grad():
    worst = 0.0
    for name, make in GRAD_CASES:
        rng = stream(99, "verify.grad." + name)
        f, x0 = make(rng)
        x = x0 if isinstance(x0, Tensor) else Tensor(np.asarray(x0, dtype=np.float64))
        err = grad_check(f, x)
        worst = max(worst, err)
        if err >= GRAD_TOL:
            return False, f"{name}: max rel error {err:.3g} >= {GRAD_TOL}"
    return True, f"{len(GRAD_CASES)} cases, worst rel error {worst:.3g}"


def suite_shuffle():
    rng = stream(99, "verify.shuffle")
    for trial in range(20):
        size = int(rng.integers(2, 7))
        perm = rng.permutation(size)
        mat = np.eye(size)[perm]
        if penalty_value(mat) > EXACT_TOL:
            return False, f"penalty nonzero on a permutation (trial {trial})"
        noisy = mat + rng.uniform(0.0, 0.05, size=mat.shape)
        project(noisy)
        if penalty_value(noisy) <= 1e-3:
            return False, f"penalty too small off-permutation (trial {trial})"
    for trial in range(200):
        m = rng.normal(size=(4, 4))
        # feasibility precondition: one positive entry per row and column
        np.fill_diagonal(m, np.abs(m.diagonal()) + 0.1)
        project(m)
        if m.min() < 0 or np.abs(m.sum(axis=1) - 1.0).max() > EXACT_TOL:
            return False, f"projection contract violated (trial {trial})"
    mat, steps, reached = anneal(4, stream(99, "verify.anneal"))
    if not reached:
        return False, f"anneal missed hardness target in {steps} steps"
    perm = to_hard_permutation(mat)
    if sorted(perm) != list(range(4)):
        return False, "extracted permutation invalid"
    return True, f"anneal reached hardness {hardness(mat):.4f} in {steps} steps"


def suite_equivalence():
    config = _tiny_config(units=1, mode="plain", d=16, heads=2, d_ff=32,
                          n_enc=2, n_dec=2,
                          noises=(NoiseKind("identity"),))
    model = MuteModel(config, seed=5)
    model.encoder[0].alpha.data[:] = 1.0
    model.encoder[1].alpha.data[:] = 1.0
    params = {n: t.data for n, t in model.named_parameters().items()}
    rng = stream(99, "verify.equiv")
    worst = 0.0
    for _ in range(5):
        n = int(rng.integers(3, 7))
        src = rng.integers(3, config.src_vocab, size=n)
        tgt = rng.integers(3, config.tgt_vocab, size=n)
        with T.no_grad():
            ours = model.forward_logits(src[None, :], tgt[None, :]).data[0]
        ref = reference.forward_logits(params, src, tgt, config.d,
                                       config.heads, config.clip,
                                       config.n_enc, config.n_dec)
        worst = max(worst, float(np.abs(ours - ref).max()))
    if worst > EXACT_TOL:
        return False, f"logit mismatch {worst:.3g} > {EXACT_TOL}"
    return True, f"worst logit mismatch {worst:.3g}"


def suite_determinism():
    task = TaskSpec(kind="copy", vocab=6, min_len=3, max_len=5, seed=11)
    config = _tiny_config(src_vocab=task.model_vocab,
                          tgt_vocab=task.model_vocab, dropout=0.1)
    logs = []
    for _ in range(2):
        with tempfile.TemporaryDirectory() as tmp:
            model = MuteModel(config, seed=11)
            tconf = TrainConfig(max_steps=5, batch_tokens=64, warmup=4,
                                pairs_per_epoch=32, eval_pairs=8,
                                log_interval=1, eval_interval=5,
                                checkpoint_interval=5, seed=11)
            trainer = Trainer(model, task, tconf, tmp)
            trainer.train()
            with open(os.path.join(tmp, "metrics.log"), "rb") as fh:
                logs.append(fh.read())
    if logs[0] != logs[1]:
        return False, "training metrics differ between identical runs"
    model = MuteModel(config, seed=11)
    probe = generate_pairs(task, 8, split="eval")
    srcs = [p[0] for p in probe]
    first = [model.greedy_decode(s) for s in srcs]
    second = [model.greedy_decode(s) for s in srcs]
    for a, b in zip(first, second):
        if len(a) != len(b) or (a != b).any():
            return False, "evaluation decode not deterministic"
    return True, "train and eval passes bitwise stable"


def suite_diversity():
    anchors = [
        (np.array([1.0, 2.0]), np.array([1.0, 2.0]), math.exp(-1.0)),
        (np.array([1.0, 0.0]), np.array([0.0, 3.0]), 1.0),
        (np.array([2.0, -1.0]), np.array([-2.0, 1.0]), math.exp(1.0)),
    ]
    for a, b, want in anchors:
        got = diversity_score(a, b)
        if abs(got - want) > EXACT_TOL:
            return False, f"anchor {want:.5f} gave {got:.15f}"
    config = _tiny_config(units=2, mode="plain",
                          noises=(NoiseKind("identity"),) * 2)
    model = MuteModel(config, seed=7)
    for layer in model.encoder:
        layer.units[1] = layer.units[0]
    task = TaskSpec(kind="copy", vocab=6, min_len=3, max_len=5, seed=7)
    batches = batchify(generate_pairs(task, 8, split="eval"), 64)
    report = diversity_report(model, batches)
    off = max(abs(v - DIV_MIN) for v in report.scores.values())
    if off > EXACT_TOL:
        return False, f"tied control off the floor by {off:.3g}"
    fresh = MuteModel(config, seed=8)
    free = diversity_report(fresh, batches)
    lo, hi = free.minimum(), max(free.scores.values())
    if lo < DIV_MIN - EXACT_TOL or hi > math.exp(1.0) + EXACT_TOL:
        return False, f"score range [{lo:.4f}, {hi:.4f}] out of bounds"
    return True, f"anchors exact; tied floor within {off:.2g}"


def full_model_grad_check(d: int = 16, units: int = 4, n: int = 5,
                          n_enc: int = 2, n_dec: int = 2, heads: int = 2,
                          d_ff: int = 16, clip: int = 4, seed: int = 3,
                          batch: int = 2, h: float = 1e-5) -> dict:
    """Check every parameter of a small model against central differences.

    The loss is the full objective (smoothed cross entropy plus the
    shuffle penalties) on one fixed batch, noise and dropout off.
    Returns the worst relative error, the per-parameter breakdown, the
    coordinate count, and the wall time.

    A note on conditioning: central differences on a double-precision
    loss of magnitude L carry an absolute noise floor near eps*L/(2h),
    about 1e-11 here.  A gradient coordinate whose true value sits below
    ~1e-7 (possible through accidental cancellation) would turn that
    noise into a relative error above the tolerance even though the
    gradient is correct.  Summing the loss over a couple of sequences
    keeps coordinate gradients away from that region; the check stays
    fully sensitive to genuinely wrong gradients, which show relative
    errors many orders larger.
    """
    import time

    config = ModelConfig(d=d, d_ff=d_ff, heads=heads, n_enc=n_enc,
                         n_dec=n_dec, units=units, mode="seq_biased",
                         clip=clip, dropout=0.0, label_smooth=0.1,
                         penalty_weight=0.1, src_vocab=11, tgt_vocab=11,
                         max_len=n + 2)
    model = MuteModel(config, seed=seed)
    rng = stream(seed, "gradcheck.batch")
    src = np.stack([np.append(rng.integers(3, 11, size=n - 1), 2)
                    for _ in range(batch)])
    content = [rng.integers(3, 11, size=n - 1) for _ in range(batch)]
    tgt_in = np.stack([np.append(1, c) for c in content])
    tgt_out = np.stack([np.append(c, 2) for c in content])
    pad = np.zeros_like(tgt_out, dtype=bool)

    def build_loss():
        logits = model.forward_logits(src, tgt_in, training=False)
        loss, _, _ = model.loss_with_penalty(logits, tgt_out, pad)
        return loss

    params = model.named_parameters()
    start = time.monotonic()
    errors = check_parameters(build_loss, params, h=h)
    elapsed = time.monotonic() - start
    coords = sum(p.data.size for p in params.values())
    return {"max_err": max(errors.values()), "errors": errors,
            "coords": coords, "seconds": elapsed}


SUITES = {
    "grad": suite_grad,
    "shuffle": suite_shuffle,
    "equivalence": suite_equivalence,
    "determinism": suite_determinism,
    "diversity": suite_diversity,
}


def run(names=None) -> dict:
    """Run the requested suites (default all); never raises."""
    results = {}
    for name in names or SUITES:
        if name not in SUITES:
            results[name] = (False, "unknown suite")
            continue
        try:
            results[name] = SUITES[name]()
        except MuteLabError as exc:
            results[name] = (False, f"{type(exc).__name__}: {exc}")
    return results
