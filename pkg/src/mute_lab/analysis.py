"""Post-hoc analyses: unit diversity scores and weight dumps.

Diversity is the exponential of the negative cosine similarity between
two units' intermediate vectors, so it lives in [1/e, e]: identical
directions score 1/e, orthogonal ones 1.0, opposite ones e.  Scores are
averaged over probe positions for three kinds of intermediates:
attention weight rows (head-averaged), attention sub-layer outputs, and
FFN sub-layer outputs, both taken before their residual additions.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .shuffle import hardness, penalty_value
from .tasks import PAD

CATEGORIES = ("attn_weights", "attn_out", "ffn_out")
DIV_MIN = math.exp(-1.0)
DIV_MAX = math.exp(1.0)


def diversity_score(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ContractError("diversity of a zero vector is undefined")
    cos = float(np.dot(a, b) / (na * nb))
    # rounding can push |cos| a hair past 1; keep the score in range
    return math.exp(-min(max(cos, -1.0), 1.0))


@dataclass
class DiversityReport:
    """scores[(layer, i, j, category)] -> mean score, i < j."""

    units: int
    layers: int
    scores: dict = field(default_factory=dict)

    def score(self, layer: int, i: int, j: int, category: str) -> float:
        if i == j:
            raise ContractError("diversity needs two distinct units")
        key = (layer, min(i, j), max(i, j), category)
        return self.scores[key]

    def category_mean(self, category: str) -> float:
        vals = [v for (_, _, _, c), v in self.scores.items() if c == category]
        return float(np.mean(vals))

    def minimum(self) -> float:
        return min(self.scores.values())

    def rows(self) -> list:
        out = [(layer, f"u{i}-u{j}", cat, val)
               for (layer, i, j, cat), val in sorted(self.scores.items())]
        for cat in CATEGORIES:
            out.append(("all", "mean", cat, self.category_mean(cat)))
        return out


def _collect(model, batch_src: np.ndarray) -> dict:
    """Run the encoder once, grabbing per (layer, unit) intermediates."""
    grabbed: dict = {}

    def tap(layer, unit, rec):
        grabbed[(layer, unit)] = rec

    model.encode(batch_src, training=False, capture=tap)
    return grabbed


def diversity_report(model, probe_batches: list) -> DiversityReport:
    """Mean pairwise diversity over every probe position.

    The model must have at least two units; probes run in evaluation
    mode so the result is a pure function of checkpoint and probes.
    """
    units = model.config.units
    layers = model.config.n_enc
    if units < 2:
        raise ContractError("diversity needs a model with at least 2 units")
    if not probe_batches:
        raise ContractError("diversity needs at least one probe batch")
    sums = {}
    counts = {}
    for batch in probe_batches:
        grabbed = _collect(model, batch.src)
        keep = ~(batch.src == PAD)
        for layer in range(layers):
            for i in range(units):
                for j in range(i + 1, units):
                    ri, rj = grabbed[(layer, i)], grabbed[(layer, j)]
                    for cat in CATEGORIES:
                        vi, vj = ri[cat], rj[cat]
                        for b in range(batch.size):
                            for pos in np.flatnonzero(keep[b]):
                                key = (layer, i, j, cat)
                                s = diversity_score(vi[b, pos], vj[b, pos])
                                sums[key] = sums.get(key, 0.0) + s
                                counts[key] = counts.get(key, 0) + 1
    report = DiversityReport(units=units, layers=layers)
    report.scores = {k: sums[k] / counts[k] for k in sums}
    return report


def threshold_weights(weights: np.ndarray, threshold: float) -> np.ndarray:
    """Zero the entries strictly below the threshold."""
    out = weights.copy()
    out[out < threshold] = 0.0
    return out


def dump_weights(model, probe_src: np.ndarray, out_dir: str,
                 threshold: float = 0.05) -> list:
    """Write alphas, shuffle matrices, and probe attention maps.

    ``probe_src`` is one unpadded id sequence.  Returns the list of
    files written.
    """
    os.makedirs(out_dir, exist_ok=True)
    written = []
    units = model.config.units

    path = os.path.join(out_dir, "alphas.tsv")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("layer\t" + "\t".join(f"u{i}" for i in range(units)) + "\n")
        for k, layer in enumerate(model.encoder):
            vals = "\t".join(f"{v:.10g}" for v in layer.alpha.data)
            fh.write(f"{k}\t{vals}\n")
    written.append(path)

    for k, layer in enumerate(model.encoder):
        if layer.shuffle is None:
            continue
        path = os.path.join(out_dir, f"shuffle_l{k}.tsv")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\t".join(f"m{i}" for i in range(units)) + "\n")
            for row in layer.shuffle.m.data:
                fh.write("\t".join(f"{v:.10g}" for v in row) + "\n")
            fh.write(f"hardness\t{hardness(layer.shuffle):.10g}\n")
            fh.write(f"penalty\t{penalty_value(layer.shuffle):.10g}\n")
        written.append(path)

    grabbed = _collect(model, np.asarray(probe_src)[None, :])
    for (layer, unit), rec in sorted(grabbed.items()):
        path = os.path.join(out_dir, f"attention_u{unit}_l{layer}.tsv")
        mat = threshold_weights(rec["attn_weights"][0], threshold)
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\t".join(f"p{j}" for j in range(mat.shape[1])) + "\n")
            for row in mat:
                fh.write("\t".join(f"{v:.10g}" for v in row) + "\n")
        written.append(path)
    return written


def write_diversity(report: DiversityReport, out_dir: str) -> str:
    path = os.path.join(out_dir, "diversity.tsv")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("layer\tpair\tcategory\tscore\n")
        for layer, pair, cat, val in report.rows():
            fh.write(f"{layer}\t{pair}\t{cat}\t{val:.10g}\n")
    return path
