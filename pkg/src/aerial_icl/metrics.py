"""Confusion matrices, per-class F1 and micro/macro averages, report files."""

from __future__ import annotations

import csv
import io
import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

NA = "n/a"


class ConfusionMatrix:
    """Pixel counts, rows = ground truth, columns = prediction."""

    def __init__(self, num_classes: int, ignore_index: int | None = None):
        if num_classes < 1:
            raise ValueError("num_classes must be positive")
        self.num_classes = num_classes
        self.ignore_index = ignore_index
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def accumulate(self, pred, gt) -> "ConfusionMatrix":
        pred = np.asarray(pred).astype(np.int64, copy=False).ravel()
        gt = np.asarray(gt).astype(np.int64, copy=False).ravel()
        if pred.shape != gt.shape:
            raise ValueError(f"prediction and ground truth sizes differ: {pred.size} vs {gt.size}")
        if self.ignore_index is not None:
            keep = gt != self.ignore_index
            pred, gt = pred[keep], gt[keep]
        k = self.num_classes
        for name, arr in (("prediction", pred), ("ground truth", gt)):
            if arr.size and (arr.min() < 0 or arr.max() >= k):
                raise ValueError(f"{name} class out of range [0, {k}): {int(arr.min())}..{int(arr.max())}")
        self.counts += np.bincount(gt * k + pred, minlength=k * k).reshape(k, k)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ValueError("cannot merge confusion matrices of different sizes")
        out = ConfusionMatrix(self.num_classes, self.ignore_index)
        out.counts = self.counts + other.counts
        return out

    __add__ = merge

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def tp_fp_fn(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        tp = np.diag(self.counts)
        fp = self.counts.sum(axis=0) - tp
        fn = self.counts.sum(axis=1) - tp
        return tp, fp, fn


@dataclass
class F1Scores:
    per_class: np.ndarray  # nan where 2TP+FP+FN == 0
    macro: float
    micro: float


def f1_scores(
    cm: ConfusionMatrix,
    exclude: Iterable[int] = (0,),
    classes: Iterable[int] | None = None,
) -> F1Scores:
    """Per-class F1 = 2TP / (2TP + FP + FN), with averages.

    Averages run over ``classes`` (default: all) minus ``exclude`` (default:
    the background). Macro skips classes with no TP, FP or FN; micro pools
    TP/FP/FN before taking the ratio.
    """
    tp, fp, fn = (a.astype(np.float64) for a in cm.tp_fp_fn())
    denom = 2 * tp + fp + fn
    with np.errstate(invalid="ignore", divide="ignore"):
        per_class = np.where(denom > 0, 2 * tp / denom, np.nan)
    chosen = range(cm.num_classes) if classes is None else classes
    excluded = set(exclude)
    sel = [c for c in chosen if c not in excluded]
    defined = [per_class[c] for c in sel if denom[c] > 0]
    macro = float(np.mean(defined)) if defined else math.nan
    ptp, pfp, pfn = tp[sel].sum(), fp[sel].sum(), fn[sel].sum()
    pooled = 2 * ptp + pfp + pfn
    micro = float(2 * ptp / pooled) if pooled > 0 else math.nan
    return F1Scores(per_class, macro, micro)


@dataclass
class MetricsReport:
    step: int
    class_ids: list[int]  # global ids, excluding the background, in learning order
    class_names: list[str]
    f1: list[float | None]  # aligned with class_names; None when undefined
    macro_f1: float | None
    micro_f1: float | None
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "MetricsReport":
        return cls(**d)

    def f1_of(self, class_id: int) -> float | None:
        return self.f1[self.class_ids.index(class_id)]


def _opt(x: float) -> float | None:
    return None if x is None or math.isnan(x) else float(x)


def build_report(
    cm: ConfusionMatrix,
    channel_class_ids: Sequence[int],
    class_names: Sequence[str],
    step: int,
    groups: dict[str, Sequence[int]] | None = None,
) -> MetricsReport:
    """Summarise a confusion matrix indexed by classifier channel.

    ``channel_class_ids[k]`` is the global class id of channel ``k``
    (channel 0: background). ``groups`` adds macro-F1 over named subsets
    of global ids to ``extra``, e.g. the classes of the first step.
    """
    scores = f1_scores(cm, exclude=(0,))
    ids = list(channel_class_ids[1:])
    extra = {}
    for name, members in (groups or {}).items():
        channels = [channel_class_ids.index(c) for c in members if c in channel_class_ids]
        if channels:
            extra[f"macro_f1_{name}"] = _opt(f1_scores(cm, exclude=(0,), classes=channels).macro)
    return MetricsReport(
        step=step,
        class_ids=[int(c) for c in ids],
        class_names=[class_names[c] for c in ids],
        f1=[_opt(scores.per_class[k]) for k in range(1, len(channel_class_ids))],
        macro_f1=_opt(scores.macro),
        micro_f1=_opt(scores.micro),
        extra=extra,
    )


def _fmt(x: float | None) -> str:
    return NA if x is None else f"{x:.4f}"


def _table_rows(history: Sequence[MetricsReport], method: str) -> tuple[list[str], list[list[str]]]:
    # column order = learning order, so earlier steps' classes come first
    columns: list[tuple[int, str]] = []
    for rep in history:
        for cid, name in zip(rep.class_ids, rep.class_names):
            if cid not in [c for c, _ in columns]:
                columns.append((cid, name))
    header = ["method", "step"] + [n for _, n in columns] + ["macro_f1", "micro_f1"]
    rows = []
    for rep in history:
        cells = [method, str(rep.step)]
        for cid, _ in columns:
            cells.append(_fmt(rep.f1_of(cid)) if cid in rep.class_ids else "-")
        cells += [_fmt(rep.macro_f1), _fmt(rep.micro_f1)]
        rows.append(cells)
    return header, rows


def _csv_text(header: list[str], rows: list[list[str]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _pretty(header: list[str], rows: list[list[str]]) -> str:
    widths = [max(len(r[i]) for r in [header] + rows) for i in range(len(header))]
    line = lambda r: " | ".join(c.rjust(w) for c, w in zip(r, widths))
    rule = "-+-".join("-" * w for w in widths)
    return "\n".join([line(header), rule] + [line(r) for r in rows]) + "\n"


def emit_report(history: Sequence[MetricsReport], out_dir: str | os.PathLike, method: str = "") -> list[Path]:
    """Write per-step and summary tables plus the per-step curve.

    Files: ``step{t}.csv`` and ``step{t}.txt`` (class-wise F1 after step
    t), ``summary.csv`` / ``summary.txt`` (one row per step), ``curve.csv``
    (step, micro_f1, macro_f1) and ``history.json``.
    """
    if not history:
        raise ValueError("no evaluated steps to report")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    def put(name: str, text: str):
        p = out / name
        p.write_text(text)
        written.append(p)

    header, rows = _table_rows(history, method)
    for rep, row in zip(history, rows):
        h, r = _table_rows([rep], method)
        put(f"step{rep.step}.csv", _csv_text(h, r))
        put(f"step{rep.step}.txt", _pretty(h, r))
    put("summary.csv", _csv_text(header, rows))
    put("summary.txt", _pretty(header, rows))
    curve = [[str(r.step), _fmt(r.micro_f1), _fmt(r.macro_f1)] for r in history]
    put("curve.csv", _csv_text(["step", "micro_f1", "macro_f1"], curve))
    put("history.json", json.dumps({"method": method, "steps": [r.to_json() for r in history]}, indent=2, sort_keys=True) + "\n")
    return written


def load_history(path: str | os.PathLike) -> tuple[str, list[MetricsReport]]:
    data = json.loads(Path(path).read_text())
    return data.get("method", ""), [MetricsReport.from_json(d) for d in data["steps"]]
