"""Per-class precision / recall / F1 and run comparison tables."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

from .prompting import CLASS_LABELS, ClassLabel


@dataclass(frozen=True)
class LabeledPrediction:
    query_id: str
    true: ClassLabel
    predicted: ClassLabel | None  # None = unparseable model output


@dataclass(frozen=True)
class ClassMetrics:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r else 0.0

    @property
    def present(self) -> bool:
        """False for a class never seen in truth nor predictions."""
        return bool(self.tp or self.fp or self.fn)


def confusion(preds) -> dict[ClassLabel, ClassMetrics]:
    """One-vs-rest counts; an unparseable prediction is an FN for the true class only."""
    preds = list(preds)
    if not preds:
        raise ValueError("no predictions to score")
    tp = dict.fromkeys(CLASS_LABELS, 0)
    fp = dict.fromkeys(CLASS_LABELS, 0)
    fn = dict.fromkeys(CLASS_LABELS, 0)
    for p in preds:
        if p.predicted is p.true:
            tp[p.true] += 1
            continue
        fn[p.true] += 1
        if p.predicted is not None:
            fp[p.predicted] += 1
    return {lb: ClassMetrics(tp[lb], fp[lb], fn[lb]) for lb in CLASS_LABELS}


def macro_f1(f1_by_class) -> float:
    """Unweighted mean of per-class F1 values."""
    vals = list(f1_by_class.values()) if isinstance(f1_by_class, dict) else list(f1_by_class)
    if not vals:
        raise ValueError("no classes to average")
    return sum(vals) / len(vals)


@dataclass(frozen=True)
class Report:
    per_class: dict  # ClassLabel -> ClassMetrics
    metadata: dict = field(default_factory=dict)

    @property
    def macro_f1(self) -> float:
        """Mean F1 over classes that occur in truth or predictions.

        With all twelve classes present this is the plain twelve-way mean.
        """
        present = {lb: m.f1 for lb, m in self.per_class.items() if m.present}
        return macro_f1(present) if present else 0.0

    @property
    def macro_f1_all(self) -> float:
        """Plain mean over every class in the report, present or not."""
        return macro_f1({lb: m.f1 for lb, m in self.per_class.items()})

    def f1(self, label: ClassLabel) -> float:
        return self.per_class[label].f1

    def to_dict(self) -> dict:
        return {
            "metadata": self.metadata,
            "macro_f1": round(self.macro_f1, 9),
            "macro_f1_all_classes": round(self.macro_f1_all, 9),
            "classes": {
                lb.value: {
                    "tp": m.tp, "fp": m.fp, "fn": m.fn,
                    "precision": round(m.precision, 9), "recall": round(m.recall, 9),
                    "f1": round(m.f1, 9), "present": m.present,
                }
                for lb, m in self.per_class.items()
            },
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> Report:
        d = json.loads(Path(path).read_text())
        per_class = {ClassLabel(k): ClassMetrics(v["tp"], v["fp"], v["fn"]) for k, v in d["classes"].items()}
        return cls(per_class, d.get("metadata", {}))


def f1_report(preds, **metadata) -> Report:
    return Report(confusion(preds), dict(metadata))


@dataclass(frozen=True)
class RunComparison:
    per_class: dict  # ClassLabel -> (a f1, b f1, delta)
    macro_a: float
    macro_b: float

    @property
    def macro_delta(self) -> float:
        return self.macro_a - self.macro_b

    @property
    def relative_gain(self) -> float:
        return self.macro_delta / self.macro_b if self.macro_b else float("inf")


def compare_runs(a: Report, b: Report) -> RunComparison:
    """``a`` minus ``b`` per class and for the macro average."""
    if set(a.per_class) != set(b.per_class):
        raise ValueError("reports cover different class sets")
    rows = {lb: (a.f1(lb), b.f1(lb), a.f1(lb) - b.f1(lb)) for lb in CLASS_LABELS if lb in a.per_class}
    return RunComparison(rows, a.macro_f1, b.macro_f1)


def format_table(processed: dict, original: dict) -> str:
    """Aligned text table: class rows x (processed shots | original shots) F1 columns.

    ``processed`` and ``original`` map shot count -> Report.
    """
    shots_p = sorted(processed)
    shots_o = sorted(original)
    name_w = max(len(lb.value) for lb in CLASS_LABELS) + 2
    col = 8
    head1 = " " * name_w + "Processed".center(col * len(shots_p)) + "|" + "Original".center(col * len(shots_o))
    head2 = "Class name".ljust(name_w) + "".join(f"{s} shot".rjust(col) for s in shots_p) + "|" + "".join(
        f"{s} shot".rjust(col) for s in shots_o)
    lines = [head1, head2, "-" * len(head2)]

    def cell(report, lb):
        m = report.per_class[lb]
        return f"{m.f1:.2f}".rjust(col) if m.present else "-".rjust(col)

    for lb in CLASS_LABELS:
        lines.append(lb.value.ljust(name_w) + "".join(cell(processed[s], lb) for s in shots_p) + "|"
                     + "".join(cell(original[s], lb) for s in shots_o))
    lines.append("-" * len(head2))
    lines.append("Avg".ljust(name_w) + "".join(f"{processed[s].macro_f1:.2f}".rjust(col) for s in shots_p) + "|"
                 + "".join(f"{original[s].macro_f1:.2f}".rjust(col) for s in shots_o))
    return "\n".join(lines) + "\n"


def format_comparison(cmp: RunComparison, a_name: str = "processed", b_name: str = "original") -> str:
    name_w = max(len(lb.value) for lb in CLASS_LABELS) + 2
    lines = ["Class name".ljust(name_w) + a_name.rjust(11) + b_name.rjust(11) + "delta".rjust(9)]
    for lb, (fa, fb, d) in cmp.per_class.items():
        lines.append(lb.value.ljust(name_w) + f"{fa:11.2f}{fb:11.2f}{d:+9.2f}")
    lines.append("Avg".ljust(name_w) + f"{cmp.macro_a:11.2f}{cmp.macro_b:11.2f}{cmp.macro_delta:+9.2f}")
    return "\n".join(lines) + "\n"


def read_ground_truth(path) -> dict[str, ClassLabel]:
    """Two-column ``track_id,label`` file (an optional header row is skipped)."""
    out = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), 1):
            if not row or row[0].startswith("#"):
                continue
            if len(row) != 2:
                raise ValueError(f"{path}:{lineno}: expected 'track_id,label'")
            if lineno == 1 and row[0].strip() == "track_id":
                continue
            out[row[0].strip()] = ClassLabel.parse(row[1])
    return out


def write_ground_truth(labels: dict, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["track_id", "label"])
        for k in sorted(labels, key=lambda s: (len(str(s)), str(s))):
            w.writerow([k, labels[k].value])
