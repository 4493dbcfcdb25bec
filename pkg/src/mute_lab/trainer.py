"""Training loop: Adam, inverse-sqrt schedule, projection hook, metrics.

Determinism contract: every random draw in a run derives from the
master seed through named streams, and the batch sequence is a pure
function of the data seed and the step counter.  Two runs with the same
seeds produce bitwise-identical metrics lines, and a resumed run
continues exactly where the interrupted one left off.
"""

from __future__ import annotations

import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, restore_model, save_checkpoint
from .errors import ConfigError, ContractError, TrainingError
from .model import MuteModel
from .rng import stream
from .shuffle import hardness, penalty_value, project
from .tasks import TaskSpec, batchify, generate_pairs


@dataclass
class TrainConfig:
    max_steps: int = 5000
    batch_tokens: int = 832
    warmup: int = 400
    lr_factor: float = 2.0
    clip_norm: float = 5.0
    pairs_per_epoch: int = 2048
    eval_pairs: int = 256
    log_interval: int = 50
    eval_interval: int = 500
    checkpoint_interval: int = 1000
    seed: int = 1
    log_speed: bool = False
    early_stop_token_acc: float | None = None
    early_stop_exact: float | None = None

    def __post_init__(self):
        if min(self.max_steps, self.batch_tokens, self.warmup,
               self.pairs_per_epoch, self.eval_pairs, self.log_interval,
               self.eval_interval, self.checkpoint_interval) < 1:
            raise ConfigError("train config sizes must be positive")
        if self.lr_factor <= 0 or self.clip_norm <= 0:
            raise ConfigError("lr factor and clip norm must be positive")


def learning_rate(step: int, d: int, warmup: int, factor: float = 2.0) -> float:
    """Inverse-sqrt schedule with linear warmup; peak at step = warmup."""
    if step < 1:
        raise ConfigError("schedule steps are 1-based")
    return (factor / math.sqrt(d)) * min(step * warmup ** -1.5,
                                         step ** -0.5)


class AdamState:
    """Per-parameter moment buffers plus the shared step count."""

    def __init__(self, params: dict, beta1: float = 0.9,
                 beta2: float = 0.998, eps: float = 1e-9):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in params.items()}

    def load(self, t: int, m: dict, v: dict):
        for name in self.m:
            if name not in m or m[name].shape != self.m[name].shape:
                raise ConfigError(f"optimizer state mismatch for {name}")
        self.t = int(t)
        self.m = {n: a.copy() for n, a in m.items()}
        self.v = {n: a.copy() for n, a in v.items()}


def global_grad_norm(params: dict) -> float:
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    return math.sqrt(total)


def clip_gradients(params: dict, max_norm: float) -> float:
    """Scale all gradients so the global norm is at most ``max_norm``."""
    norm = global_grad_norm(params)
    if not math.isfinite(norm):
        raise TrainingError(f"non-finite gradient norm {norm}")
    if norm > max_norm:
        factor = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad *= factor
    return norm


def adam_step(params: dict, state: AdamState, lr: float) -> None:
    """Bias-corrected Adam; a missing gradient counts as zero."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = p.grad
        m, v = state.m[name], state.v[name]
        if g is None:
            m *= b1
            v *= b2
        else:
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def train_step(model: MuteModel, batch, adam: AdamState, step: int,
               tconf: TrainConfig) -> dict:
    """One optimization step; projection runs after the Adam update."""
    noise_rng = stream(tconf.seed, "noise", step)
    dropout_rng = stream(tconf.seed, "dropout", step)
    params = model.named_parameters()
    model.zero_grad()
    logits = model.forward_logits(batch.src, batch.tgt_in, training=True,
                                  noise_rng=noise_rng,
                                  dropout_rng=dropout_rng)
    loss, ce, pen = model.loss_with_penalty(logits, batch.tgt_out,
                                            batch.tgt_pad)
    loss_value = float(loss.data)
    if not math.isfinite(loss_value):
        raise TrainingError(f"non-finite loss {loss_value} at step {step}")
    T.backward(loss)
    clip_gradients(params, tconf.clip_norm)
    lr = learning_rate(step, model.config.d, tconf.warmup, tconf.lr_factor)
    adam_step(params, adam, lr)
    for sm in model.shuffle_matrices():
        project(sm)
    return {"loss": loss_value, "ce": ce, "penalty": pen, "lr": lr,
            "tokens": batch.token_count}


def evaluate(model, batches: list) -> dict:
    """Greedy-decode accuracy: per-token against reference positions,
    exact match per sequence.  Works for any object exposing
    ``greedy_decode_batch``."""
    if not batches:
        raise ContractError("evaluation needs at least one batch")
    token_hits = 0
    token_total = 0
    exact_hits = 0
    seq_total = 0
    for batch in batches:
        cap = batch.tgt_out.shape[1] + 2
        hyps = model.greedy_decode_batch(batch.src, max_len=cap)
        for b, hyp in enumerate(hyps):
            ref = batch.tgt_out[b][~batch.tgt_pad[b]]
            padded = np.zeros(len(ref), dtype=np.int64)
            padded[:min(len(hyp), len(ref))] = hyp[:len(ref)]
            token_hits += int((padded == ref).sum())
            token_total += len(ref)
            exact_hits += int(len(hyp) == len(ref) and (hyp == ref).all())
            seq_total += 1
    return {"token_acc": token_hits / token_total,
            "exact_match": exact_hits / seq_total,
            "tokens": token_total, "sequences": seq_total}


class Trainer:
    """Owns one model, one optimizer, and the run directory."""

    def __init__(self, model: MuteModel, task: TaskSpec, tconf: TrainConfig,
                 out_dir: str):
        self.model = model
        self.task = task
        self.tconf = tconf
        self.out_dir = out_dir
        os.makedirs(out_dir, exist_ok=True)
        self.adam = AdamState(model.named_parameters())
        self.step = 0
        self._epoch = 0
        self._idx = 0
        self._batches = None
        self.history: list = []

    # -- data cursor --------------------------------------------------------

    def _epoch_batches(self, epoch: int) -> list:
        pairs = generate_pairs(self.task, self.tconf.pairs_per_epoch, epoch)
        return batchify(pairs, self.tconf.batch_tokens)

    def _next_batch(self):
        if self._batches is None:
            self._batches = self._epoch_batches(self._epoch)
        if self._idx >= len(self._batches):
            self._epoch += 1
            self._idx = 0
            self._batches = self._epoch_batches(self._epoch)
        batch = self._batches[self._idx]
        self._idx += 1
        return batch

    def _seek(self, step: int):
        """Replay the batch cursor to just after ``step`` batches."""
        self._epoch, self._idx, self._batches = 0, 0, None
        remaining = step
        while True:
            batches = self._epoch_batches(self._epoch)
            if remaining < len(batches):
                self._idx = remaining
                self._batches = batches
                return
            remaining -= len(batches)
            self._epoch += 1

    # -- checkpoint plumbing ------------------------------------------------

    def save(self, path=None):
        if path is None:
            path = os.path.join(self.out_dir, f"step{self.step:06d}.ckpt")
        save_checkpoint(path, self.model, self.step,
                        adam=(self.adam.t, self.adam.m, self.adam.v))
        return path

    @classmethod
    def resume(cls, path, task: TaskSpec, tconf: TrainConfig, out_dir: str):
        ckpt = load_checkpoint(path)
        model = restore_model(ckpt)
        trainer = cls(model, task, tconf, out_dir)
        if ckpt.adam is not None:
            trainer.adam.load(*ckpt.adam)
        trainer.step = ckpt.step
        trainer._seek(ckpt.step)
        return trainer

    # -- main loop ----------------------------------------------------------

    def eval_batches(self) -> list:
        pairs = generate_pairs(self.task, self.tconf.eval_pairs, 0,
                               split="eval")
        return batchify(pairs, self.tconf.batch_tokens)

    def train(self, steps=None, log_path=None) -> dict:
        """Run up to ``steps`` more steps (default: to max_steps).

        Returns the last evaluation metrics (running one final
        evaluation if none happened on the last step).
        """
        tconf = self.tconf
        target = tconf.max_steps if steps is None else self.step + steps
        target = min(target, tconf.max_steps)
        if log_path is None:
            log_path = os.path.join(self.out_dir, "metrics.log")
        eval_set = self.eval_batches()
        metrics = None
        with open(log_path, "a", encoding="utf-8") as log:
            while self.step < target:
                self.step += 1
                batch = self._next_batch()
                t0 = time.monotonic() if tconf.log_speed else 0.0
                stats = train_step(self.model, batch, self.adam, self.step,
                                   tconf)
                if tconf.log_speed:
                    dt = max(time.monotonic() - t0, 1e-9)
                    speed = f"{stats['tokens'] / dt:.1f}"
                else:
                    speed = "-"
                self.history.append(stats["loss"])
                if self.step % tconf.log_interval == 0 or self.step == 1:
                    log.write(f"{self.step}\t{stats['loss']:.17g}"
                              f"\t{stats['ce']:.17g}"
                              f"\t{stats['penalty']:.17g}"
                              f"\t{stats['lr']:.17g}\t{speed}\n")
                    log.flush()
                if self.step % tconf.checkpoint_interval == 0:
                    self.save()
                if self.step % tconf.eval_interval == 0 or self.step == target:
                    metrics = evaluate(self.model, eval_set)
                    if self._should_stop(metrics):
                        break
        if metrics is None:
            metrics = evaluate(self.model, eval_set)
        return metrics

    def _should_stop(self, metrics: dict) -> bool:
        want_tok = self.tconf.early_stop_token_acc
        want_seq = self.tconf.early_stop_exact
        if want_tok is None and want_seq is None:
            return False
        ok_tok = want_tok is None or metrics["token_acc"] >= want_tok
        ok_seq = want_seq is None or metrics["exact_match"] >= want_seq
        return ok_tok and ok_seq

    def shuffle_summary(self) -> list:
        """(layer index, hardness, penalty) per shuffle matrix."""
        out = []
        for k, layer in enumerate(self.model.encoder):
            if layer.shuffle is not None:
                out.append((k, hardness(layer.shuffle),
                            penalty_value(layer.shuffle)))
        return out
