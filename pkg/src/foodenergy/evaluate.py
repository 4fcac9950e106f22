"""MAE / MAPE evaluation, multi-run aggregation, exports and figures."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from importlib import resources
from typing import Callable, Dict, List, Optional

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from ._torch import derive_seed  # noqa: E402
from .density import render_visualization  # noqa: E402
from .exceptions import EmptyTestSet, RunError, ValidationError  # noqa: E402

logger = logging.getLogger(__name__)

CSV_COLUMNS = ("id", "true_kcal", "est_kcal", "error")
HISTOGRAM_BINS = 20


def mae_mape(true_kcal, est_kcal):
    """Mean absolute error (kCal) and mean absolute percent error (%)."""
    true_kcal = np.asarray(true_kcal, dtype=np.float64)
    est_kcal = np.asarray(est_kcal, dtype=np.float64)
    if true_kcal.size == 0:
        raise EmptyTestSet("no instances to evaluate")
    if (true_kcal <= 0).any():
        raise ValidationError("true kcal must be positive for MAPE")
    err = np.abs(est_kcal - true_kcal)
    return float(err.mean()), float((err / true_kcal).mean() * 100.0)


@dataclass
class EvaluationReport:
    records: List[dict]
    mae: float
    mape: float
    seed: Optional[int] = None
    pipeline: Dict[str, str] = field(default_factory=dict)

    @classmethod
    def from_estimates(cls, ids, true_kcal, est_kcal, seed=None, pipeline=None):
        mae, mape = mae_mape(true_kcal, est_kcal)
        records = [{"id": i, "true_kcal": float(t), "est_kcal": float(e), "error": float(e) - float(t)}
                   for i, t, e in zip(ids, true_kcal, est_kcal)]
        return cls(records, mae, mape, seed, dict(pipeline or {}))

    @property
    def errors(self) -> np.ndarray:
        return np.array([r["error"] for r in self.records])

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "EvaluationReport":
        return cls(list(d["records"]), float(d["mae"]), float(d["mape"]), d.get("seed"), dict(d.get("pipeline", {})))

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)
            fh.write("\n")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
            writer.writeheader()
            writer.writerows({k: r[k] for k in CSV_COLUMNS} for r in self.records)


@dataclass
class AggregateReport:
    reports: List[EvaluationReport]

    def __post_init__(self):
        if not self.reports:
            raise ValueError("an aggregate needs at least one run")

    @property
    def runs(self) -> int:
        return len(self.reports)

    @property
    def mae(self) -> float:
        return float(np.mean([r.mae for r in self.reports]))

    @property
    def mape(self) -> float:
        return float(np.mean([r.mape for r in self.reports]))

    def to_dict(self) -> dict:
        return {"runs": self.runs, "mae": self.mae, "mape": self.mape,
                "reports": [r.to_dict() for r in self.reports]}

    @classmethod
    def from_dict(cls, d) -> "AggregateReport":
        return cls([EvaluationReport.from_dict(r) for r in d["reports"]])

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)
            fh.write("\n")


class OracleEncoder:
    """Stand-in encoder that returns ground-truth maps, optionally scaled.

    ``factor=1.0`` is the identity oracle; ``factor=1.1`` overestimates every
    map by 10 %.
    """

    def __init__(self, factor=1.0):
        self.factor = factor

    def encode_occasions(self, occasions) -> np.ndarray:
        return np.stack([o.density_map() * self.factor for o in occasions])


def encode_occasions(encoder, occasions) -> np.ndarray:
    if hasattr(encoder, "encode_occasions"):
        return encoder.encode_occasions(occasions)
    return encoder.predict(np.stack([o.image for o in occasions]))


def evaluate(encoder, decoder, occasions, seed=None, pipeline=None) -> EvaluationReport:
    """Run image -> map -> kCal over un-augmented test occasions and score it."""
    if not occasions:
        raise EmptyTestSet("test set is empty")
    maps = encode_occasions(encoder, occasions)
    estimates = decoder.predict(maps)
    if pipeline is None:
        pipeline = {"encoder": type(encoder).__name__,
                    "decoder": getattr(decoder, "decoder_kind", type(decoder).__name__)}
    return EvaluationReport.from_estimates(
        [o.id for o in occasions], [o.total_kcal for o in occasions], estimates, seed, pipeline,
    )


def aggregate(run: Callable[[int, int], EvaluationReport], runs: int = 5, seed: int = 0) -> AggregateReport:
    """Call ``run(run_index, run_seed)`` ``runs`` times with distinct derived seeds."""
    if runs < 1:
        raise ValueError("runs must be >= 1")
    reports = []
    for i in range(runs):
        run_seed = derive_seed(seed, f"run{i}")
        try:
            report = run(i, run_seed)
        except Exception as exc:
            raise RunError(i, exc) from exc
        logger.info("run %d/%d: MAE %.2f kCal, MAPE %.2f%%", i + 1, runs, report.mae, report.mape)
        reports.append(report)
    return AggregateReport(reports)


# -- figures ------------------------------------------------------------------

def histogram_counts(errors, bins: int = HISTOGRAM_BINS):
    """Equal-width bins over the symmetric range +-max|error| (+-0.5 if all zero)."""
    errors = np.asarray(errors, dtype=np.float64)
    if errors.size == 0:
        raise EmptyTestSet("no errors to bin")
    half = float(np.max(np.abs(errors))) or 0.5
    return np.histogram(errors, bins=bins, range=(-half, half))


def error_histogram(report: EvaluationReport, png_path, csv_path=None, bins: int = HISTOGRAM_BINS,
                    label: Optional[str] = None):
    """Histogram of signed errors (estimate minus truth) as a PNG plus a CSV of bin counts."""
    counts, edges = histogram_counts(report.errors, bins)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(edges[:-1], counts, width=np.diff(edges), align="edge", alpha=0.8, label=label)
    ax.set_xlabel("estimated - true (kCal)")
    ax.set_ylabel("instances")
    if label:
        ax.legend()
    fig.tight_layout()
    fig.savefig(png_path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    if csv_path is not None:
        with open(csv_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(("bin_left", "bin_right", "count"))
            for lo, hi, c in zip(edges[:-1], edges[1:], counts):
                writer.writerow((float(lo), float(hi), int(c)))
    return counts, edges


def caption(estimate: float, true_kcal: float) -> str:
    return f"est={estimate:.1f} kCal / true={true_kcal:.1f} kCal"


@dataclass
class Panel:
    path: str
    caption: str
    predicted: np.ndarray
    truth: np.ndarray


def qualitative_panel(occasion, predicted_map, estimate: float, path) -> Panel:
    """Image | predicted map | ground-truth map, captioned with both calorie values."""
    predicted = render_visualization(predicted_map)
    truth = render_visualization(occasion.density_map())
    text = caption(estimate, occasion.total_kcal)
    fig, axes = plt.subplots(1, 3, figsize=(9, 3.4))
    for ax, img, title in zip(axes, (occasion.image, predicted, truth), ("image", "predicted", "ground truth")):
        ax.imshow(img, cmap=None if img.ndim == 3 else "gray", vmin=0, vmax=255)
        ax.set_title(title)
        ax.axis("off")
    fig.suptitle(f"{occasion.id}: {text}")
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return Panel(str(path), text, predicted, truth)


def select_extremes(report: EvaluationReport, k: int = 3):
    """Ids of the ``k`` largest over-estimates and the ``k`` largest under-estimates."""
    ranked = sorted(report.records, key=lambda r: r["error"])
    over = [r["id"] for r in reversed(ranked) if r["error"] > 0][:k]
    under = [r["id"] for r in ranked if r["error"] < 0][:k]
    return over, under


# -- reference targets -------------------------------------------------------

def load_reference_targets() -> dict:
    text = resources.files("foodenergy").joinpath("data/reference_targets.json").read_text()
    return json.loads(text)


def comparison_table(results: Dict[str, AggregateReport], table: str = "1") -> str:
    """Plain-text table of local results next to the published reference rows."""
    ref = load_reference_targets()["tables"][table]
    lines = [f"{'method':<34}{'MAE (kCal)':>12}{'MAPE (%)':>10}  source", "-" * 66]
    for name, agg in results.items():
        lines.append(f"{name:<34}{agg.mae:>12.1f}{agg.mape:>10.1f}  this run ({agg.runs} runs)")
    for name, row in ref["rows"].items():
        lines.append(f"{name:<34}{row['mae']:>12.1f}{row['mape']:>10.1f}  reference table {table}")
    return "\n".join(lines)
