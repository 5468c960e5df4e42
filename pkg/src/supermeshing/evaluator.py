"""Error metrics, per-case histograms, comparison tables and the time/cost model."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import gridmath as gm
from .errors import ConfigurationError, DataError
from .fieldgen import Dataset, denormalize_array, normalize_array
from .gridmath import Tensor

BASELINE = "Baseline"
TRUTH = "Truth"
ROW_ORDER = (BASELINE, "ResNet", "Res+U", "Res+U+A", "SMNet")

# measured constants reported for the original deployment (seconds)
REFERENCE_T_TRAIN = 7962.61
REFERENCE_T_R = 0.012
REFERENCE_T_F32 = 0.41
REFERENCE_T_F256 = 15.21
CPU_PRICE = 0.56
GPU_PRICE = 0.49
TABLE3_WORKLOADS = (1, 100, 10_000, 1_000_000)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def _cases(pred, truth) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(truth, dtype=np.float64)
    if p.shape != t.shape:
        raise ConfigurationError(f"prediction shape {p.shape} does not match truth shape {t.shape}")
    if p.ndim <= 1:
        return p.reshape(1, -1), t.reshape(1, -1)
    return p.reshape(p.shape[0], -1), t.reshape(t.shape[0], -1)


def mae(pred, truth) -> tuple[np.ndarray, float]:
    """Per-case mean absolute deviation and their mean over cases.

    A 1-D input is one case; otherwise the first axis indexes cases.
    """
    p, t = _cases(pred, truth)
    per_case = np.mean(np.abs(p - t), axis=1)
    return per_case, float(np.mean(per_case))


def mse(pred, truth) -> tuple[np.ndarray, float]:
    p, t = _cases(pred, truth)
    per_case = np.mean((p - t) ** 2, axis=1)
    return per_case, float(np.mean(per_case))


@dataclass
class Histogram:
    edges: np.ndarray
    counts: np.ndarray

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def log_bins(low: float = 1e-8, high: float = 1e-1, per_decade: int = 2) -> np.ndarray:
    decades = math.log10(high) - math.log10(low)
    n = int(round(decades * per_decade))
    return np.logspace(math.log10(low), math.log10(high), n + 1)


def error_distribution(values, bins=None) -> Histogram:
    """Counts of per-case errors in log-spaced bins.

    Values outside the bin range (including exact zeros) are counted in
    the nearest edge bin so counts always sum to the number of cases.
    """
    v = np.asarray(values, dtype=np.float64).ravel()
    if np.any(~np.isfinite(v)):
        raise DataError("error values must be finite")
    if np.any(v < 0):
        raise DataError(f"error values must be non-negative, got min {v.min()}")
    edges = log_bins() if bins is None else np.asarray(bins, dtype=np.float64)
    if edges.ndim != 1 or len(edges) < 2 or np.any(np.diff(edges) <= 0):
        raise ConfigurationError("bin edges must be a strictly increasing sequence of length >= 2")
    idx = np.searchsorted(edges, v, side="right") - 1
    idx = np.clip(idx, 0, len(edges) - 2)
    counts = np.bincount(idx, minlength=len(edges) - 1)
    return Histogram(edges, counts)


@dataclass
class MetricsReport:
    variant: str
    scale: int
    split: str
    case_ids: list[int]
    per_case_mae: np.ndarray
    per_case_mse: np.ndarray

    @property
    def mae(self) -> float:
        return float(np.mean(self.per_case_mae))

    @property
    def mse(self) -> float:
        return float(np.mean(self.per_case_mse))

    def histogram(self, bins=None) -> Histogram:
        return error_distribution(self.per_case_mae, bins)


def make_report(variant: str, scale: int, split: str, case_ids, pred, truth) -> MetricsReport:
    per_mae, _ = mae(pred, truth)
    per_mse, _ = mse(pred, truth)
    return MetricsReport(variant, scale, split, [int(i) for i in case_ids], per_mae, per_mse)


# ---------------------------------------------------------------------------
# prediction paths
# ---------------------------------------------------------------------------

def baseline_predict(lr: np.ndarray, scale: int) -> np.ndarray:
    """Bilinear (align-corners) upsampling straight from the low-density field."""
    with gm.no_grad():
        return gm.upsample_bilinear(Tensor(lr), scale).data


def renormalize(a: np.ndarray, src: tuple[float, float], dst: tuple[float, float]) -> np.ndarray:
    """Map values normalised with ``src`` constants onto ``dst`` constants."""
    if tuple(src) == tuple(dst):
        return a
    return normalize_array(denormalize_array(a, *src), *dst)


def predict_cases(model, lr: np.ndarray, data_norm=(0.0, 1.0), model_norm=(0.0, 1.0)) -> np.ndarray:
    """One forward pass per case so results do not depend on batch composition.

    ``lr`` is in the dataset's normalisation; the output is mapped back to it.
    """
    outs = []
    for i in range(len(lr)):
        x = renormalize(lr[i:i + 1], data_norm, model_norm)
        y = model.predict(x)
        outs.append(renormalize(y, model_norm, data_norm))
    return np.concatenate(outs) if outs else np.zeros((0, 1) + lr.shape[2:], np.float32)


def evaluate_model(checkpoint, dataset: Dataset, indices, split: str = "test",
                   model=None) -> tuple[MetricsReport, np.ndarray]:
    if checkpoint.config.scale != dataset.scale:
        raise ConfigurationError(
            f"checkpoint scale {checkpoint.config.scale} does not match dataset scale {dataset.scale}")
    model = checkpoint.build_model() if model is None else model
    lr = dataset.lr_array(indices)
    pred = predict_cases(model, lr, (dataset.norm_min, dataset.norm_max),
                         (checkpoint.norm_min, checkpoint.norm_max))
    report = make_report(checkpoint.config.label, dataset.scale, split, indices, pred,
                         dataset.hr_array(indices))
    return report, pred


def evaluate_baseline(dataset: Dataset, indices, split: str = "test") -> tuple[MetricsReport, np.ndarray]:
    pred = baseline_predict(dataset.lr_array(indices), dataset.scale)
    return make_report(BASELINE, dataset.scale, split, indices, pred, dataset.hr_array(indices)), pred


def evaluate_truth(dataset: Dataset, indices, split: str = "test") -> tuple[MetricsReport, np.ndarray]:
    hr = dataset.hr_array(indices)
    return make_report(TRUTH, dataset.scale, split, indices, hr, hr), hr


# ---------------------------------------------------------------------------
# comparison tables
# ---------------------------------------------------------------------------

@dataclass
class Table:
    title: str
    rows: list[str]
    columns: list[str]
    cells: dict[tuple[str, str], float]
    flags: dict[tuple[str, str], int] = field(default_factory=dict)

    def rank_columns(self) -> None:
        """Flag the lowest (1) and second-lowest (2) value per column; ties go to the earlier row."""
        self.flags = {}
        for col in self.columns:
            present = [(self.cells[(r, col)], i, r) for i, r in enumerate(self.rows)
                       if (r, col) in self.cells]
            for rank, (_, _, r) in enumerate(sorted(present)[:2], start=1):
                self.flags[(r, col)] = rank

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        header = ["model"]
        for col in self.columns:
            header += [col, f"{col}_rank"]
        writer.writerow(header)
        for r in self.rows:
            line = [r]
            for col in self.columns:
                value = self.cells.get((r, col))
                line += ["" if value is None else repr(value), self.flags.get((r, col), "")]
            writer.writerow(line)
        return buf.getvalue()

    def to_text(self) -> str:
        marks = {1: "**", 2: "*"}
        body = []
        for r in self.rows:
            line = [r]
            for col in self.columns:
                value = self.cells.get((r, col))
                text = "-" if value is None else f"{value:.3e}"
                line.append(text + marks.get(self.flags.get((r, col)), ""))
            body.append(line)
        header = ["model"] + list(self.columns)
        widths = [max(len(row[i]) for row in [header] + body) for i in range(len(header))]
        fmt = lambda row: "  ".join(c.ljust(w) if i == 0 else c.rjust(w)
                                    for i, (c, w) in enumerate(zip(row, widths)))
        lines = [self.title, fmt(header)] + [fmt(row) for row in body]
        lines.append("(** lowest, * second lowest)")
        return "\n".join(lines)


def _row_order(labels) -> list[str]:
    known = [r for r in ROW_ORDER if r in labels]
    extra = sorted(l for l in labels if l not in ROW_ORDER)
    return known + extra


def comparison_table(reports: list[MetricsReport], scales=None, split: str = "test") -> Table:
    """Test MAE per model (rows) and scaling factor (columns)."""
    chosen = [r for r in reports if r.split == split]
    if scales is None:
        scales = sorted({r.scale for r in chosen})
    columns = [f"{s}x" for s in scales]
    cells = {}
    for r in chosen:
        if r.scale in scales:
            cells[(r.variant, f"{r.scale}x")] = r.mae
    table = Table(f"{split} MAE by scaling factor", _row_order({r.variant for r in chosen}),
                  columns, cells)
    table.rank_columns()
    return table


def split_table(reports: list[MetricsReport], scale: int) -> Table:
    """Train and test MAE/MSE per model at one scaling factor."""
    columns = ["train_mae", "train_mse", "test_mae", "test_mse"]
    cells = {}
    labels = set()
    for r in reports:
        if r.scale != scale or r.split not in ("train", "test"):
            continue
        labels.add(r.variant)
        cells[(r.variant, f"{r.split}_mae")] = r.mae
        cells[(r.variant, f"{r.split}_mse")] = r.mse
    table = Table(f"train/test error at {scale}x", _row_order(labels), columns, cells)
    table.rank_columns()
    return table


# ---------------------------------------------------------------------------
# time and cost
# ---------------------------------------------------------------------------

ATTRIBUTIONS = {
    "default": {"train": "gpu", "reconstruct": "gpu", "coarse_fea": "cpu", "fine_fea": "cpu"},
    "all-cpu": {"train": "cpu", "reconstruct": "cpu", "coarse_fea": "cpu", "fine_fea": "cpu"},
    "all-gpu": {"train": "gpu", "reconstruct": "gpu", "coarse_fea": "gpu", "fine_fea": "gpu"},
}


@dataclass
class CostInputs:
    t_train: float = REFERENCE_T_TRAIN
    t_r: float = REFERENCE_T_R
    t_f32: float = REFERENCE_T_F32
    t_f256: float = REFERENCE_T_F256
    workload: float = 100
    cpu_price: float = CPU_PRICE
    gpu_price: float = GPU_PRICE

    def __post_init__(self):
        for name in ("t_train", "t_r", "t_f32", "t_f256", "workload"):
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0:
                raise ConfigurationError(f"{name} must be finite and >= 0, got {value}")
        for name in ("cpu_price", "gpu_price"):
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0:
                raise ConfigurationError(f"{name} must be finite and >= 0, got {value}")


@dataclass
class CostResult:
    workload: float
    t_s: float
    t_f: float
    cost_s: float
    cost_f: float
    components: dict[str, float]


def time_model(inputs: CostInputs) -> tuple[float, float]:
    """(T_S, T_F): amortised surrogate time versus repeated fine-mesh analysis."""
    n = inputs.workload
    t_s = inputs.t_train + n * inputs.t_r + n * inputs.t_f32
    t_f = n * inputs.t_f256
    return t_s, t_f


def _resolve_attribution(attribution) -> dict[str, str]:
    if attribution is None:
        attribution = "default"
    if isinstance(attribution, str):
        if attribution not in ATTRIBUTIONS:
            raise ConfigurationError(
                f"unknown attribution {attribution!r}; choose from {sorted(ATTRIBUTIONS)}")
        return dict(ATTRIBUTIONS[attribution])
    merged = dict(ATTRIBUTIONS["default"])
    for key, device in attribution.items():
        if key not in merged or device not in ("cpu", "gpu"):
            raise ConfigurationError(f"bad attribution entry {key}={device}")
        merged[key] = device
    return merged


def cost_model(inputs: CostInputs, attribution=None) -> CostResult:
    """Charge each time component at the per-second price of its device."""
    if inputs.cpu_price < 0 or inputs.gpu_price < 0:
        raise ConfigurationError("prices must be non-negative")
    devices = _resolve_attribution(attribution)
    per_second = {"cpu": inputs.cpu_price / 3600.0, "gpu": inputs.gpu_price / 3600.0}
    n = inputs.workload
    seconds = {"train": inputs.t_train, "reconstruct": n * inputs.t_r,
               "coarse_fea": n * inputs.t_f32, "fine_fea": n * inputs.t_f256}
    components = {k: seconds[k] * per_second[devices[k]] for k in seconds}
    t_s, t_f = time_model(inputs)
    cost_s = components["train"] + components["reconstruct"] + components["coarse_fea"]
    return CostResult(n, t_s, t_f, cost_s, components["fine_fea"], components)


def break_even(inputs: CostInputs) -> float:
    """Workload at which T_S = T_F; infinite if the surrogate never catches up."""
    saving = inputs.t_f256 - inputs.t_r - inputs.t_f32
    if saving <= 0:
        return math.inf
    return inputs.t_train / saving


def break_even_cases(inputs: CostInputs) -> int | None:
    """Smallest whole number of cases at which the surrogate is no slower."""
    n = break_even(inputs)
    return None if math.isinf(n) else int(math.ceil(n))


def cost_table(inputs: CostInputs, workloads=TABLE3_WORKLOADS, attribution=None) -> list[CostResult]:
    out = []
    for n in workloads:
        step = CostInputs(inputs.t_train, inputs.t_r, inputs.t_f32, inputs.t_f256, n,
                          inputs.cpu_price, inputs.gpu_price)
        out.append(cost_model(step, attribution))
    return out


# ---------------------------------------------------------------------------
# report files
# ---------------------------------------------------------------------------

def _write_rows(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def write_per_case(path, reports: list[MetricsReport]) -> None:
    rows = []
    for r in reports:
        for cid, a, s in zip(r.case_ids, r.per_case_mae, r.per_case_mse):
            rows.append([cid, r.variant, r.scale, repr(float(a)), repr(float(s))])
    _write_rows(Path(path), ["case_id", "variant", "scale", "mae", "mse"], rows)


def write_histograms(path, reports: list[MetricsReport], bins=None) -> None:
    rows = []
    for r in reports:
        hist = r.histogram(bins)
        for lo, hi, c in zip(hist.edges[:-1], hist.edges[1:], hist.counts):
            rows.append([r.variant, r.scale, repr(float(lo)), repr(float(hi)), int(c)])
    _write_rows(Path(path), ["variant", "scale", "bin_low", "bin_high", "count"], rows)


def write_cost(path, results: list[CostResult], attribution="default") -> None:
    name = attribution if isinstance(attribution, str) else "custom"
    rows = [[repr(float(c.workload)), repr(c.t_s), repr(c.t_f), repr(c.cost_s), repr(c.cost_f), name]
            for c in results]
    _write_rows(Path(path), ["workload", "t_s", "t_f", "cost_s", "cost_f", "attribution"], rows)


def write_report(report_dir, test_reports: list[MetricsReport], all_reports: list[MetricsReport],
                 cost_inputs: CostInputs | None = None, attribution="default") -> dict[str, Table]:
    """Write the CSV set; returns the rendered tables keyed by file stem."""
    out = Path(report_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_per_case(out / "per_case.csv", test_reports)
    table1 = comparison_table(test_reports)
    (out / "table1.csv").write_text(table1.to_csv())
    scales = sorted({r.scale for r in all_reports})
    table2 = split_table(all_reports, scales[0]) if scales else Table("", [], [], {})
    (out / "table2.csv").write_text(table2.to_csv())
    write_histograms(out / "histogram.csv", test_reports)
    cost_inputs = cost_inputs or CostInputs()
    write_cost(out / "cost.csv", cost_table(cost_inputs, attribution=attribution), attribution)
    return {"table1": table1, "table2": table2}
