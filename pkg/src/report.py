"""
CSV tables and SVG line charts built from cached records.
"""

import csv
import logging
from collections import defaultdict
from pathlib import Path
from typing import Any, Dict, Iterable, List, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .models import ResultRecord  # noqa: E402

logger = logging.getLogger(__name__)

SCHEMA_LINE = "# schema=brittle-homog/v1"

TABLES: Dict[str, List[str]] = {
    "cell_f.csv": ["config_hash", "a", "M", "xi", "fhat", "residual"],
    "ghat.csv": ["config_hash", "nu", "a", "t", "per_area", "stencil"],
    "estimates.csv": ["config_hash", "mode", "ell", "eps", "beta", "target", "density", "spread", "bound_ok"],
    "profile.csv": ["config_hash", "mode", "lambda", "ratio"],
    "denoise.csv": ["config_hash", "eps", "beta", "m_k", "l1_to_previous"],
}

plt.rcParams["svg.hashsalt"] = "brittle-homog"
plt.rcParams["svg.fonttype"] = "none"


def format_value(value: Any) -> str:
    """Locale-free rendering used in every CSV cell."""
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return format(value, ".12g")
    if isinstance(value, (list, tuple)):
        return " ".join(format_value(v) for v in value)
    return str(value)


def collect_tables(records: Iterable[ResultRecord]) -> Dict[str, List[Dict[str, Any]]]:
    """Gather the table rows stored on records, in record order."""
    tables: Dict[str, List[Dict[str, Any]]] = {name: [] for name in TABLES}
    for record in records:
        for name, rows in record.outputs.get("tables", {}).items():
            if name not in TABLES:
                logger.warning("record %s carries unknown table %s", record.key, name)
                continue
            tables[name].extend({**row, "config_hash": record.config_hash} for row in rows)
    return tables


def write_table(directory: Path, name: str, rows: Sequence[Dict[str, Any]]) -> Path:
    """Write one versioned CSV; an empty table still gets its schema line and header."""
    columns = TABLES[name]
    path = Path(directory) / name
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as handle:
        handle.write(SCHEMA_LINE + "\n")
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([format_value(row.get(col)) for col in columns])
    return path


def write_tables(directory: Path, tables: Dict[str, List[Dict[str, Any]]], names: Iterable[str] = ()) -> List[Path]:
    names = list(names) or list(TABLES)
    return [write_table(directory, name, tables.get(name, [])) for name in names]


def _save(fig, path: Path) -> Path:
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def _line_chart(path: Path, series: Dict[str, List[tuple]], xlabel: str, ylabel: str, logx: bool = False) -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    for label in sorted(series):
        points = sorted(series[label])
        ax.plot([p[0] for p in points], [p[1] for p in points], marker="o", label=label)
    if logx:
        ax.set_xscale("log")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.grid(True, alpha=0.3)
    ax.legend(fontsize="small")
    return _save(fig, path)


def write_charts(directory: Path, tables: Dict[str, List[Dict[str, Any]]]) -> List[Path]:
    """f_hat against a, r(lambda) profiles and per-eps densities against eps."""
    directory = Path(directory)
    written = []

    cells = defaultdict(list)
    for row in tables.get("cell_f.csv", []):
        cells[f"xi={format_value(row['xi'])}, M={row['M']}"].append((row["a"], row["fhat"]))
    if cells:
        written.append(_line_chart(directory / "fhat_vs_a.svg", cells, "a", "f_hat"))

    profiles = defaultdict(list)
    for row in tables.get("profile.csv", []):
        profiles[str(row["mode"])].append((row["lambda"], row["ratio"]))
    if profiles:
        written.append(_line_chart(directory / "profiles.svg", profiles, "lambda", "r(lambda)", logx=True))

    densities = defaultdict(list)
    for row in tables.get("estimates.csv", []):
        if isinstance(row.get("eps"), float):
            densities[f"{row['mode']} {row['target']}"].append((row["eps"], row["density"]))
    if densities:
        written.append(_line_chart(directory / "density_vs_eps.svg", densities, "eps", "density", logx=True))
    return written
