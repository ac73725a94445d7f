"""
Report rendering

Consolidates metrics.csv files written by the sweeps into one table and
draws one grouped bar chart per dataset (experiments on the x axis, the
four headline metrics as bars, seed std as error bars).
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, List, Optional, Union

import numpy as np
import pandas as pd

from .errors import ReportError, VocabMismatchError
from .experiments import LABEL_SEPARATOR, METRICS_FILE, summary_table
from .metrics import METRIC_NAMES

logger = logging.getLogger(__name__)

REPORT_TABLE = "report.csv"
METRIC_LABELS = {
    "accuracy": "Accuracy",
    "macro_precision": "Macro-P",
    "macro_recall": "Macro-R",
    "macro_f1": "Macro-F1",
}


@dataclass
class ReportResult:
    table: pd.DataFrame
    table_path: Optional[Path] = None
    charts: List[Path] = field(default_factory=list)
    notices: List[str] = field(default_factory=list)


def find_metrics_files(inputs: Iterable[Union[str, Path]]) -> List[Path]:
    """metrics.csv files named directly or found under directories"""
    found: List[Path] = []
    for item in inputs:
        path = Path(item)
        if path.is_dir():
            found.extend(sorted(path.rglob(METRICS_FILE)))
        elif path.is_file():
            found.append(path)
        else:
            logger.warning("Report input %s does not exist", path)
    return list(dict.fromkeys(found))


def load_metrics(paths: Iterable[Path]) -> pd.DataFrame:
    frames = []
    for path in paths:
        try:
            frame = pd.read_csv(path, dtype={"labels": str, "steps": str, "config_hash": str})
        except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
            raise ReportError(f"cannot read {path}: {e}")
        missing = [c for c in ("name", "dataset", "row", "labels", *METRIC_NAMES) if c not in frame.columns]
        if missing:
            raise ReportError(f"{path} is not a metrics table (missing {', '.join(missing)})")
        frame["sweep"] = frame["sweep"].fillna("") if "sweep" in frame.columns else ""
        frames.append(frame)
    if not frames:
        raise ReportError("no metrics.csv files to report on")
    return pd.concat(frames, ignore_index=True)


def check_vocabularies(metrics: pd.DataFrame):
    """Runs of one dataset must share their label vocabulary"""
    for dataset, rows in metrics.groupby("dataset", sort=False):
        vocabularies = rows["labels"].dropna().unique()
        if len(vocabularies) > 1:
            listed = "; ".join(v.replace(LABEL_SEPARATOR, ",") for v in vocabularies)
            raise VocabMismatchError(f"runs of dataset '{dataset}' use different label sets: {listed}")


def render_chart(table: pd.DataFrame, dataset: str, path: Path) -> Path:
    """Grouped bars of the mean headline metrics for one dataset"""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    names = list(table["name"])
    x = np.arange(len(names))
    width = 0.8 / len(METRIC_NAMES)

    fig, ax = plt.subplots(figsize=(max(6.0, 1.4 * len(names)), 4.0), constrained_layout=True)
    for i, metric in enumerate(METRIC_NAMES):
        ax.bar(x + (i - (len(METRIC_NAMES) - 1) / 2) * width, table[f"{metric}_mean"] * 100, width,
               yerr=table[f"{metric}_std"] * 100, capsize=2, label=METRIC_LABELS[metric])
    ax.set_xticks(x)
    ax.set_xticklabels(names, rotation=30, ha="right")
    ax.set_ylabel("%")
    ax.set_ylim(0, 100)
    ax.set_title(dataset)
    ax.legend(ncol=len(METRIC_NAMES), fontsize="small", loc="upper center", bbox_to_anchor=(0.5, -0.25))
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def build_report(inputs: Iterable[Union[str, Path]], out_dir: Optional[Union[str, Path]] = None,
                 charts: bool = True) -> ReportResult:
    """Consolidated table plus per-dataset charts

    A dataset with a single experiment gets a table row but no chart.
    """
    paths = find_metrics_files(inputs)
    if not paths:
        raise ReportError("no metrics.csv files found")
    metrics = load_metrics(paths)
    check_vocabularies(metrics)

    table = summary_table(metrics)
    result = ReportResult(table=table)
    if out_dir is None:
        return result

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    result.table_path = out_dir / REPORT_TABLE
    table.to_csv(result.table_path, index=False, float_format="%.6f")

    if not charts:
        return result
    for dataset, rows in table.groupby("dataset", sort=False):
        if len(rows) < 2:
            notice = f"dataset '{dataset}' has a single run; chart skipped"
            logger.info(notice)
            result.notices.append(notice)
            continue
        slug = "".join(c if c.isalnum() or c in "-_" else "_" for c in str(dataset)) or "dataset"
        result.charts.append(render_chart(rows, str(dataset), out_dir / f"{slug}.png"))
    return result


def format_table(table: pd.DataFrame) -> str:
    """Plain-text table of mean +- std percentages"""
    lines = []
    header = f"{'dataset':<14} {'experiment':<22}" + "".join(f" {METRIC_LABELS[m]:>14}" for m in METRIC_NAMES)
    lines.append(header)
    lines.append("-" * len(header))
    for _, row in table.iterrows():
        cells = "".join(
            f" {row[f'{m}_mean'] * 100:>7.2f}+-{row[f'{m}_std'] * 100:<5.2f}" for m in METRIC_NAMES)
        lines.append(f"{str(row['dataset']):<14} {str(row['name']):<22}{cells}")
    return "\n".join(lines)
