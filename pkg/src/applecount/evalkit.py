"""Per-patch counting metrics and the method-comparison table."""
import csv
import io
from dataclasses import dataclass

import numpy as np

from ._validation import InvalidInputError

N_CLASSES = 7


@dataclass
class CountingReport:
    accuracy: float
    confusion: np.ndarray
    profile: dict

    @property
    def support(self):
        return self.confusion.sum(axis=1)


def _check_pairs(predictions, labels):
    predictions = np.asarray(predictions, dtype=np.int64).ravel()
    labels = np.asarray(labels, dtype=np.int64).ravel()
    if predictions.shape != labels.shape:
        raise InvalidInputError(f"{len(predictions)} predictions vs {len(labels)} labels")
    if len(labels) == 0:
        raise InvalidInputError("nothing to evaluate")
    for name, arr in (("labels", labels), ("predictions", predictions)):
        if arr.min() < 0 or arr.max() >= N_CLASSES:
            raise InvalidInputError(f"{name} must lie in 0..{N_CLASSES - 1}")
    return predictions, labels


def confusion_matrix(predictions, labels):
    """7x7 counts, rows = true count, columns = predicted count."""
    predictions, labels = _check_pairs(predictions, labels)
    return np.bincount(labels * N_CLASSES + predictions, minlength=N_CLASSES ** 2).reshape(N_CLASSES, N_CLASSES)


def over_under_profile(predictions, labels):
    """For each true count present: fractions predicted above, below, equal."""
    cm = confusion_matrix(predictions, labels)
    profile = {}
    for c in range(N_CLASSES):
        n = cm[c].sum()
        if n == 0:
            continue
        profile[c] = {"overcount": cm[c, c + 1:].sum() / n,
                      "undercount": cm[c, :c].sum() / n,
                      "exact": cm[c, c] / n}
    return profile


def evaluate_accuracy(predictions, labels):
    cm = confusion_matrix(predictions, labels)
    return CountingReport(float(np.trace(cm) / cm.sum()), cm, over_under_profile(predictions, labels))


def method_comparison_table(datasets, methods):
    """Accuracy per (method, dataset).

    ``datasets`` maps name -> (inputs, labels) or None for a missing set;
    ``methods`` maps name -> callable(inputs) returning predicted counts.
    Missing datasets become ``None`` cells (rendered "N/A").
    """
    table = {}
    for m_name, fn in methods.items():
        row = {}
        for d_name, data in datasets.items():
            if data is None:
                row[d_name] = None
                continue
            inputs, labels = data
            row[d_name] = evaluate_accuracy(fn(inputs), labels).accuracy
        table[m_name] = row
    return table


def _cell(v):
    return "N/A" if v is None else f"{100.0 * v:.2f}"


def table_to_csv(table):
    datasets = list(next(iter(table.values())).keys()) if table else []
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method"] + datasets)
    for method, row in table.items():
        w.writerow([method] + [_cell(row[d]) for d in datasets])
    return buf.getvalue()


def table_from_csv(text):
    rows = list(csv.reader(io.StringIO(text)))
    datasets = rows[0][1:]
    return {r[0]: {d: None if v == "N/A" else float(v) / 100.0 for d, v in zip(datasets, r[1:])}
            for r in rows[1:]}


def format_table(table):
    """Fixed-width text rendering, percentages with two decimals."""
    datasets = list(next(iter(table.values())).keys()) if table else []
    widths = [max(len("Approach"), *(len(m) for m in table))] + [max(len(d), 8) for d in datasets]
    lines = ["  ".join(h.ljust(w) for h, w in zip(["Approach"] + datasets, widths))]
    for method, row in table.items():
        cells = [method] + [_cell(row[d]) + ("" if row[d] is None else " %") for d in datasets]
        lines.append("  ".join(c.ljust(w) for c, w in zip(cells, widths)))
    return "\n".join(lines)


def report_to_csv(report):
    """Confusion matrix plus profile, one row per true count."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["true_count", "support"] + [f"pred_{c}" for c in range(N_CLASSES)]
               + ["overcount", "undercount", "exact"])
    for c in range(N_CLASSES):
        prof = report.profile.get(c)
        tail = ["", "", ""] if prof is None else [repr(float(prof[k])) for k in ("overcount", "undercount", "exact")]
        w.writerow([c, int(report.confusion[c].sum())] + [int(v) for v in report.confusion[c]] + tail)
    w.writerow(["accuracy", repr(report.accuracy)])
    return buf.getvalue()


def plot_profile(report, path, title="Counting performance by cluster size"):
    """Stacked bars of exact / over / under fractions per true count."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    counts = sorted(report.profile)
    exact = [report.profile[c]["exact"] for c in counts]
    over = [report.profile[c]["overcount"] for c in counts]
    under = [report.profile[c]["undercount"] for c in counts]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.bar(counts, exact, label="exact", color="#4c9a2a")
    ax.bar(counts, over, bottom=exact, label="overcount", color="#d1495b")
    ax.bar(counts, under, bottom=np.add(exact, over), label="undercount", color="#edae49")
    ax.set_xlabel("true apples per patch")
    ax.set_ylabel("fraction of patches")
    ax.set_ylim(0, 1)
    ax.set_title(title)
    ax.legend(loc="lower left", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
