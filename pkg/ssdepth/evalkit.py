"""Depth metrics, median scaling and CSV/SVG reports."""
import csv
import dataclasses
import logging
import os

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from reportlab.graphics import renderSVG  # type: ignore
from reportlab.graphics.charts.barcharts import VerticalBarChart  # type: ignore
from reportlab.graphics.charts.legends import Legend  # type: ignore
from reportlab.graphics.shapes import Drawing, String  # type: ignore
from reportlab.lib import colors  # type: ignore

from ssdepth.config import parallel_map
from ssdepth.diffcore.tensor import FloatArray, Tensor, no_grad
from ssdepth.errors import DomainError, ShapeError
from ssdepth.nets import DepthNet
from ssdepth.synthscene import SampleTriplet

logger = logging.getLogger(__name__)

MEDIAN = 'median'
NO_SCALING = 'none'
SCALING_MODES = (MEDIAN, NO_SCALING)

DEFAULT_RANGE = (0.1, 80.0)
DELTA_THRESHOLD = 1.25

METRIC_NAMES = ('absRel', 'sqRel', 'RMSE', 'delta1')
CSV_COLUMNS = ('split', 'condition', 'model') + METRIC_NAMES + ('n_pixels',)
CSV_NAME = 'metrics.csv'
POOLED = 'all'

BAR_COLORS = (colors.HexColor('#4c72b0'), colors.HexColor('#dd8452'), colors.HexColor('#55a868'), colors.HexColor('#c44e52'))


@dataclass(frozen=True)
class MetricsReport:
    absRel: float
    sqRel: float
    RMSE: float
    delta1: float
    n_pixels: int
    split: str = ''
    condition: str = ''
    model: str = ''
    range: Tuple[float, float] = DEFAULT_RANGE
    scaling: str = MEDIAN

    def __post_init__(self) -> None:
        for name in ('absRel', 'sqRel', 'RMSE'):
            if not getattr(self, name) >= 0:
                raise ValueError(f"MetricsReport: {name} must be non-negative, got {getattr(self, name)}")
        if not 0.0 <= self.delta1 <= 100.0:
            raise ValueError(f"MetricsReport: delta1 must be a percentage, got {self.delta1}")

    def values(self) -> Dict[str, float]:
        return {name: float(getattr(self, name)) for name in METRIC_NAMES}

    def labelled(self, split: str = '', condition: str = '', model: str = '') -> 'MetricsReport':
        return dataclasses.replace(
            self,
            split=split or self.split,
            condition=condition or self.condition,
            model=model or self.model,
        )


def check_range(depth_range: Tuple[float, float]) -> None:
    low, high = depth_range
    if not 0 < low < high:
        raise ValueError(f"invalid evaluation range {low}..{high}")


def valid_mask(gt: FloatArray, depth_range: Tuple[float, float] = DEFAULT_RANGE) -> np.ndarray:
    low, high = depth_range
    return np.asarray((gt >= low) & (gt <= high))


def median_scale(pred: FloatArray, gt: FloatArray, valid: np.ndarray) -> FloatArray:
    """``pred`` rescaled so its median over ``valid`` matches the ground truth's."""
    if pred.shape != gt.shape or valid.shape != gt.shape:
        raise ShapeError('median_scale', [pred.shape, gt.shape, valid.shape])
    valid = valid & (gt > 0)
    if not valid.any():
        raise DomainError('median_scale', 'no valid pixels')
    pred_median = float(np.median(pred[valid]))
    gt_median = float(np.median(gt[valid]))
    if pred_median == 0 or gt_median == 0:
        raise DomainError('median_scale', 'zero median')
    return np.asarray(pred * (gt_median / pred_median))


def compute_metrics(
    pred: FloatArray,
    gt: FloatArray,
    depth_range: Tuple[float, float] = DEFAULT_RANGE,
    scaling: str = MEDIAN,
    split: str = '',
    condition: str = '',
    model: str = '',
) -> MetricsReport:
    """absRel, sqRel, RMSE and delta1 over pixels whose ground truth lies in range.

    Prediction is median-scaled first (when enabled) and then clamped to the
    range.
    """
    if pred.shape != gt.shape:
        raise ShapeError('compute_metrics', [pred.shape, gt.shape])
    if scaling not in SCALING_MODES:
        raise ValueError(f"Unknown scaling mode: '{scaling}'")
    check_range(depth_range)
    valid = valid_mask(gt, depth_range)
    if not valid.any():
        raise DomainError('compute_metrics', 'no valid pixels')
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if scaling == MEDIAN:
        pred = median_scale(pred, gt, valid)
    p = np.clip(pred[valid], depth_range[0], depth_range[1])
    g = gt[valid]

    diff = p - g
    ratio = np.maximum(p / g, g / p)
    return MetricsReport(
        absRel=float(np.mean(np.abs(diff) / g)),
        sqRel=float(np.mean(diff ** 2 / g)),
        RMSE=float(np.sqrt(np.mean(diff ** 2))),
        delta1=float(100.0 * np.mean(ratio < DELTA_THRESHOLD)),
        n_pixels=int(valid.sum()),
        split=split,
        condition=condition,
        model=model,
        range=(float(depth_range[0]), float(depth_range[1])),
        scaling=scaling,
    )


def mean_report(reports: Sequence[MetricsReport], weighted: bool = False) -> MetricsReport:
    """Average per-image reports; ``n_pixels`` is summed.

    With ``weighted`` the metrics are weighted by each report's pixel count.
    """
    if not reports:
        raise ValueError('mean_report: no reports')
    weights = np.array([r.n_pixels if weighted else 1 for r in reports], dtype=np.float64)
    averaged = {
        name: float(np.average([getattr(r, name) for r in reports], weights=weights)) for name in METRIC_NAMES
    }
    first = reports[0]
    return MetricsReport(
        n_pixels=int(sum(r.n_pixels for r in reports)),
        split=first.split,
        condition=first.condition,
        model=first.model,
        range=first.range,
        scaling=first.scaling,
        **averaged,
    )


def predict_depth(depth_net: DepthNet, images: Sequence[FloatArray], batch_size: int = 8) -> List[FloatArray]:
    """Depth maps ``(H, W)`` for ``(H, W, 3)`` images, without recording a graph."""
    out: List[FloatArray] = []
    dtype = next(iter(depth_net.params.values())).dtype
    with no_grad():
        for start in range(0, len(images), batch_size):
            chunk = np.stack(images[start:start + batch_size]).transpose(0, 3, 1, 2)
            depth, _ = depth_net.forward(Tensor(chunk, dtype=dtype))
            out.extend(np.asarray(d[0], dtype=np.float64) for d in depth.data)
    return out


def evaluate_split(
    depth_net: DepthNet,
    triplets: Sequence[SampleTriplet],
    depth_range: Tuple[float, float] = DEFAULT_RANGE,
    scaling: str = MEDIAN,
    split: str = '',
    model: str = '',
) -> MetricsReport:
    """Per-image metrics on the current frames, averaged over images."""
    if not triplets:
        raise ValueError('evaluate_split: no triplets')
    conditions = sorted({t.condition for t in triplets})
    condition = conditions[0] if len(conditions) == 1 else POOLED
    preds = predict_depth(depth_net, [t.current for t in triplets])

    def one(index: int) -> MetricsReport:
        return compute_metrics(preds[index], triplets[index].gt_depth, depth_range, scaling)

    per_image = parallel_map(one, list(range(len(triplets))))
    report = mean_report(per_image).labelled(split, condition, model)
    logger.info('%s on %s (%s): absRel=%.4f RMSE=%.4f delta1=%.2f', model, split, condition, report.absRel, report.RMSE, report.delta1)
    return report


def pooled_reports(reports: Sequence[MetricsReport]) -> List[MetricsReport]:
    """One pixel-weighted ``all`` row per model across its conditions."""
    models: List[str] = []
    for r in reports:
        if r.model not in models:
            models.append(r.model)
    pooled = []
    for model in models:
        rows = [r for r in reports if r.model == model and r.condition != POOLED]
        if rows:
            pooled.append(dataclasses.replace(mean_report(rows, weighted=True), split=POOLED, condition=POOLED))
    return pooled


def _cell(value: object) -> str:
    return repr(value) if isinstance(value, float) else str(value)


def write_csv(path: str, reports: Sequence[MetricsReport]) -> None:
    with open(path, 'w', newline='', encoding='utf8') as handle:
        writer = csv.writer(handle)
        writer.writerow(CSV_COLUMNS)
        for r in reports:
            writer.writerow([_cell(getattr(r, column)) for column in CSV_COLUMNS])


def read_report(path: str) -> List[MetricsReport]:
    reports = []
    with open(path, 'r', newline='', encoding='utf8') as handle:
        reader = csv.DictReader(handle)
        missing = set(CSV_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        for row in reader:
            reports.append(
                MetricsReport(
                    absRel=float(row['absRel']),
                    sqRel=float(row['sqRel']),
                    RMSE=float(row['RMSE']),
                    delta1=float(row['delta1']),
                    n_pixels=int(row['n_pixels']),
                    split=row['split'],
                    condition=row['condition'],
                    model=row['model'],
                )
            )
    return reports


def metric_chart(reports: Sequence[MetricsReport], metric: str, width: int = 420, height: int = 260) -> Drawing:
    """Grouped bars: one group per condition, one bar per model."""
    conditions: List[str] = []
    models: List[str] = []
    for r in reports:
        if r.condition not in conditions:
            conditions.append(r.condition)
        if r.model not in models:
            models.append(r.model)
    lookup = {(r.model, r.condition): float(getattr(r, metric)) for r in reports}
    data = [tuple(lookup.get((m, c), 0.0) for c in conditions) for m in models]

    drawing = Drawing(width, height)
    chart = VerticalBarChart()
    chart.x = 50
    chart.y = 40
    chart.width = width - 160
    chart.height = height - 80
    chart.data = data
    chart.categoryAxis.categoryNames = conditions
    chart.valueAxis.valueMin = 0
    top = max((v for row in data for v in row), default=0.0)
    chart.valueAxis.valueMax = 100.0 if metric == 'delta1' else max(top * 1.15, 1e-6)
    chart.barSpacing = 2
    chart.groupSpacing = 10
    for index in range(len(models)):
        chart.bars[index].fillColor = BAR_COLORS[index % len(BAR_COLORS)]
    drawing.add(chart)

    legend = Legend()
    legend.x = width - 100
    legend.y = height - 50
    legend.alignment = 'right'
    legend.colorNamePairs = [(BAR_COLORS[i % len(BAR_COLORS)], m or 'model') for i, m in enumerate(models)]
    drawing.add(legend)
    drawing.add(String(width / 2, height - 20, metric, textAnchor='middle', fontSize=14))
    return drawing


def emit_report(reports: Sequence[MetricsReport], directory: str) -> List[str]:
    """Write ``metrics.csv`` plus one ``<metric>.svg`` chart per metric; return the paths."""
    if not reports:
        raise ValueError('emit_report: no reports')
    rows = list(reports)
    os.makedirs(directory, exist_ok=True)
    csv_path = os.path.join(directory, CSV_NAME)
    write_csv(csv_path, rows)
    paths = [csv_path]
    for metric in METRIC_NAMES:
        path = os.path.join(directory, f'{metric}.svg')
        renderSVG.drawToFile(metric_chart(rows, metric), path)
        paths.append(path)
    logger.info('wrote %d report rows and %d charts to %s', len(rows), len(METRIC_NAMES), directory)
    return paths


def format_table(reports: Sequence[MetricsReport]) -> str:
    header = f"{'split':<10} {'condition':<10} {'model':<10} {'absRel':>8} {'sqRel':>8} {'RMSE':>8} {'delta1':>7} {'n_pixels':>9}"
    lines = [header]
    for r in reports:
        lines.append(
            f'{r.split:<10} {r.condition:<10} {r.model:<10} '
            f'{r.absRel:>8.4f} {r.sqRel:>8.4f} {r.RMSE:>8.4f} {r.delta1:>7.2f} {r.n_pixels:>9d}'
        )
    return '\n'.join(lines)


def chart_paths(directory: str) -> Optional[List[str]]:
    paths = [os.path.join(directory, f'{metric}.svg') for metric in METRIC_NAMES]
    if all(os.path.isfile(p) for p in paths):
        return paths
    return None
