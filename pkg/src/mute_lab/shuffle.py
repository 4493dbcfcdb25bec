"""Learnable unit-ordering matrix.

A square nonnegative matrix ``M`` soft-permutes the outputs of parallel
units.  After every optimizer step it is projected (clamp at zero, then
column normalization, then row normalization, in that order) so rows sum
to one exactly while columns stay approximately stochastic.  A Lipschitz
continuous, non-convex penalty, the row plus column sums of (l1 norm
minus l2 norm), is zero precisely on permutation matrices under those
constraints, so minimizing it drives ``M`` toward a hard ordering.
"""

from __future__ import annotations

import itertools

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, ProjectionError
from .tensor import Tensor


class ShuffleMatrix:
    """Holds the learnable matrix for one sequential multi-unit layer."""

    def __init__(self, m: Tensor):
        if m.data.ndim != 2 or m.data.shape[0] != m.data.shape[1]:
            raise ConfigError(f"shuffle matrix must be square, got {m.data.shape}")
        self.m = m

    @property
    def size(self) -> int:
        return self.m.data.shape[0]

    @classmethod
    def init_jittered(cls, units: int, rng, dtype=np.float64) -> "ShuffleMatrix":
        """Uniform 1/I start plus a small uniform jitter, then projected.

        The jitter breaks the symmetry of the uniform matrix, which is a
        saddle of the penalty; without it gradient descent cannot leave.
        """
        base = np.full((units, units), 1.0 / units, dtype=dtype)
        base += rng.uniform(0.0, 0.01 / units, size=(units, units)).astype(dtype)
        mat = cls(T.parameter(base))
        project(mat)
        return mat


def permute_outputs(matrix: ShuffleMatrix, outputs: list) -> list:
    """Mix unit outputs: slot ``i`` receives ``sum_j M[j, i] * F_j``.

    With a hard permutation matrix this is exactly a reordering of the
    list.  Gradients flow into both the matrix and the outputs.
    """
    size = matrix.size
    if len(outputs) != size:
        raise ConfigError(f"shuffle matrix is {size}x{size} but got {len(outputs)} outputs")
    stacked = T.stack0(outputs)
    tail_shape = stacked.data.shape[1:]
    flat = T.reshape(stacked, (size, -1))
    mixed = T.matmul(T.transpose(matrix.m, (1, 0)), flat)
    return [T.reshape(T.index0(mixed, i), tail_shape) for i in range(size)]


def project(matrix) -> None:
    """Clamp negatives, normalize columns, then rows, mutating in place.

    Runs outside the gradient graph, after the optimizer step.  Raises
    :class:`ProjectionError` if a row or column has no positive mass left
    after clamping, since normalization would then divide by zero.
    """
    m = matrix.m.data if isinstance(matrix, ShuffleMatrix) else matrix
    np.maximum(m, 0.0, out=m)
    col = m.sum(axis=0, keepdims=True)
    row_pre = m.sum(axis=1)
    if (col == 0).any() or (row_pre == 0).any():
        raise ProjectionError("shuffle matrix lost all mass in a row or column; "
                              "training cannot continue")
    m /= col
    m /= m.sum(axis=1, keepdims=True)


def penalty(m) -> Tensor:
    """Row plus column (l1 - l2) gap; differentiable, nonnegative.

    Zero exactly when each row and column has a single nonzero entry,
    which together with the projection invariants means a permutation
    matrix.  The l1 part uses subgradient zero at zero entries.
    """
    if isinstance(m, ShuffleMatrix):
        m = m.m
    if not isinstance(m, Tensor):
        m = Tensor(m)
    absolute = T.abs_(m)
    square = T.mul(m, m)
    rows = T.sub(T.sum_(absolute, axis=1), T.sqrt_(T.sum_(square, axis=1)))
    cols = T.sub(T.sum_(absolute, axis=0), T.sqrt_(T.sum_(square, axis=0)))
    return T.add(T.sum_(rows), T.sum_(cols))


def penalty_value(m) -> float:
    with T.no_grad():
        return float(penalty(m).data)


def hardness(m) -> float:
    """Max over rows of (1 - row maximum); zero iff rows are one-hot."""
    if isinstance(m, ShuffleMatrix):
        m = m.m.data
    elif isinstance(m, Tensor):
        m = m.data
    return float((1.0 - np.asarray(m).max(axis=1)).max())


def to_hard_permutation(m) -> list:
    """Best hard permutation under the Frobenius inner product with ``M``.

    Exhaustive search over all orderings (supported up to 8 units); ties
    resolve to the lexicographically smallest permutation.  This is a
    diagnostic; inference keeps the converged soft matrix.
    """
    if isinstance(m, ShuffleMatrix):
        m = m.m.data
    elif isinstance(m, Tensor):
        m = m.data
    m = np.asarray(m)
    size = m.shape[0]
    if size > 8:
        raise ContractError(f"hard-permutation extraction supports up to 8 units, got {size}")
    best, best_score = None, -np.inf
    for perm in itertools.permutations(range(size)):
        score = sum(m[i, perm[i]] for i in range(size))
        if score > best_score:
            best, best_score = perm, score
    return list(best)


def anneal(units: int, rng, lr: float = 0.05, max_steps: int = 2000,
           target_hardness: float = 0.01) -> tuple:
    """Drive a jittered-uniform matrix toward a permutation by descent.

    Each step takes a gradient step on the penalty alone and re-projects.
    Returns ``(matrix, steps_taken, reached)``.
    """
    mat = ShuffleMatrix.init_jittered(units, rng)
    for step in range(1, max_steps + 1):
        loss = penalty(mat.m)
        mat.m.grad = None
        T.backward(loss)
        mat.m.data -= lr * mat.m.grad
        project(mat)
        if hardness(mat) < target_hardness:
            return mat, step, True
    return mat, max_steps, hardness(mat) < target_hardness
