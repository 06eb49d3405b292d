"""Post-pruning of gated adapters into compact LoRA form, plus rank accounting."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from . import kernels
from .core import SoraAdapter
from .errors import ShapeError, ValidationError

HEATMAP_HEADER = ("layer", "weight_type", "rank")


@dataclass
class PrunedAdapter:
    """Rank-``retained_rank`` module: increment ``wu_eff @ wd_tilde @ x``.

    ``wu_eff`` already has the surviving gate values folded into its columns;
    ``gate_tilde`` is kept for parameter accounting and re-wrapping.
    """

    w0: np.ndarray
    wd_tilde: np.ndarray
    wu_eff: np.ndarray
    gate_tilde: np.ndarray
    label: tuple = (0, "dense")

    def __post_init__(self):
        self.w0 = np.asarray(self.w0, dtype=np.float64)
        self.wd_tilde = np.asarray(self.wd_tilde, dtype=np.float64)
        self.wu_eff = np.asarray(self.wu_eff, dtype=np.float64)
        self.gate_tilde = np.asarray(self.gate_tilde, dtype=np.float64)
        r = self.gate_tilde.shape[0]
        p, q = self.w0.shape
        if self.wd_tilde.shape != (r, q) or self.wu_eff.shape != (p, r):
            raise ShapeError("pruned adapter shapes are inconsistent",
                             self.w0.shape, self.wd_tilde.shape, self.wu_eff.shape)
        self.label = (int(self.label[0]), str(self.label[1]))

    @property
    def retained_rank(self) -> int:
        return self.gate_tilde.shape[0]

    @property
    def param_count(self) -> int:
        return self.wd_tilde.size + self.wu_eff.size + self.gate_tilde.size

    def increment(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] != self.w0.shape[1]:
            raise ShapeError(f"input must have {self.w0.shape[1]} rows, got {x.shape}", x.shape)
        if self.retained_rank == 0:
            return np.zeros((self.w0.shape[0], x.shape[1]))
        return kernels.matmul(self.wu_eff, kernels.matmul(self.wd_tilde, x))

    def forward(self, x) -> np.ndarray:
        return kernels.matmul(self.w0, np.asarray(x, dtype=np.float64)) + self.increment(x)

    def to_sora(self) -> SoraAdapter:
        """Re-wrap as a gated adapter with a unit gate (the fold is kept)."""
        if self.retained_rank == 0:
            raise ValidationError("a rank-0 module cannot be re-wrapped as an adapter")
        return SoraAdapter(self.w0, self.wd_tilde.copy(), self.wu_eff.copy(),
                           np.ones(self.retained_rank), self.label)

    def to_record(self) -> dict:
        from .checkpoint import array_record

        return {"label": list(self.label), "w0": array_record(self.w0), "wd_tilde": array_record(self.wd_tilde),
                "wu_eff": array_record(self.wu_eff), "gate_tilde": array_record(self.gate_tilde)}

    @classmethod
    def from_record(cls, rec) -> "PrunedAdapter":
        from .checkpoint import array_from_record as un

        gate = un(rec["gate_tilde"]).reshape(-1)
        return cls(un(rec["w0"]), un(rec["wd_tilde"]), un(rec["wu_eff"]), gate, tuple(rec["label"]))


def zero_index_set(gate) -> set:
    """Indices whose gate value is exactly 0.0."""
    g = np.asarray(gate, dtype=np.float64)
    return {int(i) for i in np.flatnonzero(g == 0.0)}


def prune(adapter: SoraAdapter) -> PrunedAdapter:
    keep = np.flatnonzero(adapter.gate != 0.0)
    g = adapter.gate[keep]
    wd = adapter.wd[keep, :]
    wu = adapter.wu[:, keep] * g[None, :]
    return PrunedAdapter(adapter.w0, np.ascontiguousarray(wd), np.ascontiguousarray(wu), g.copy(), adapter.label)


def effective_rank(adapter: SoraAdapter) -> int:
    return int(np.count_nonzero(adapter.gate))


def prune_model(model) -> list:
    return [prune(layer) for layer in model.layers if isinstance(layer, SoraAdapter)]


@dataclass
class RankReport:
    """Retained ranks on a (layer index, weight type) grid."""

    layers: list
    weight_types: list
    grid: np.ndarray

    def rows(self):
        for i, layer in enumerate(self.layers):
            for j, wtype in enumerate(self.weight_types):
                v = float(self.grid[i, j])
                yield layer, wtype, int(v) if v.is_integer() else v

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(HEATMAP_HEADER)
        for row in self.rows():
            w.writerow(row)
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "RankReport":
        reader = csv.reader(io.StringIO(text))
        header = tuple(next(reader, ()))
        if header != HEATMAP_HEADER:
            raise ValidationError(f"unexpected heatmap header {header}")
        entries = {(int(l), t): float(r) for l, t, r in reader}
        return _report_from(entries)


def _report_from(entries: dict) -> RankReport:
    layers = sorted({l for l, _ in entries})
    wtypes = sorted({t for _, t in entries})
    grid = np.zeros((len(layers), len(wtypes)))
    for (l, t), r in entries.items():
        grid[layers.index(l), wtypes.index(t)] = r
    return RankReport(layers, wtypes, grid)


def rank_heatmap(models: list) -> RankReport:
    """Grid of retained ranks; with several models (e.g. seeds) each cell is the mean rank.

    All models must carry the same set of (layer, weight type) labels.
    """
    if not models:
        raise ValidationError("rank_heatmap needs at least one model")
    reference = None
    sums: dict = {}
    for model in models:
        labels = {}
        for layer in model.layers:
            if not isinstance(layer, SoraAdapter):
                continue
            if layer.label in labels:
                raise ValidationError(f"duplicate module label {layer.label}")
            labels[layer.label] = effective_rank(layer)
        if reference is None:
            reference = set(labels)
        elif set(labels) != reference:
            raise ValidationError("models do not share the same layer labeling")
        for k, r in labels.items():
            sums[k] = sums.get(k, 0) + r
    return _report_from({k: v / len(models) for k, v in sums.items()})
