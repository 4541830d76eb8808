"""
Report emission: JSON for machines, aligned-column text for people.

Reports are deterministic functions of the run; wall-clock facts go to
`run_info.json` only.
"""

import csv
import datetime
import json
import logging
import pathlib
import platform
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Union

from pydantic import BaseModel

logger = logging.getLogger(__name__)

RUN_INFO_NAME = "run_info.json"
LOSSES_NAME = "losses.csv"
LOSS_COLUMNS = ("iteration", "epoch", "lr", "l1", "l2")


def _cell(value: Any) -> str:
    if value is None:
        return "n/a"
    if isinstance(value, bool):
        return "yes" if value else "no"
    if isinstance(value, float):
        return f"{value:.4f}"
    return str(value)


def format_table(headers: Sequence[str], rows: Iterable[Sequence[Any]], title: Optional[str] = None) -> str:
    """Left-aligned first column, right-aligned numbers, two-space gutters."""
    cells = [[_cell(v) for v in row] for row in rows]
    widths = [len(h) for h in headers]
    for row in cells:
        widths = [max(w, len(c)) for w, c in zip(widths, row)]

    def line(values: Sequence[str]) -> str:
        parts = [values[0].ljust(widths[0])] + [v.rjust(w) for v, w in zip(values[1:], widths[1:])]
        return "  ".join(parts).rstrip()

    out = [] if title is None else [title, "=" * len(title)]
    out.append(line(list(headers)))
    out.append("  ".join("-" * w for w in widths))
    out.extend(line(row) for row in cells)
    return "\n".join(out) + "\n"


def write_report(report: BaseModel, directory: Union[str, pathlib.Path], name: str,
                 text: Optional[str] = None) -> pathlib.Path:
    """Write `<name>.json` and, when given, `<name>.txt` into `directory`."""
    directory = pathlib.Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / f"{name}.json"
    path.write_text(report.model_dump_json(indent=2) + "\n", encoding="utf-8")
    if text is not None:
        (directory / f"{name}.txt").write_text(text, encoding="utf-8")
    logger.info("wrote %s", path)
    return path


def _csv_value(value: Any) -> Any:
    if value is None:
        return ""
    return repr(value) if isinstance(value, float) else value


def write_losses(rows: Sequence[Mapping[str, Any]], directory: Union[str, pathlib.Path]) -> pathlib.Path:
    path = pathlib.Path(directory) / LOSSES_NAME
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=LOSS_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _csv_value(row.get(k)) for k in LOSS_COLUMNS})
    return path


def write_run_info(directory: Union[str, pathlib.Path], started: datetime.datetime,
                   extra: Optional[Dict[str, Any]] = None) -> pathlib.Path:
    finished = datetime.datetime.now(datetime.timezone.utc)
    info = {
        "started": started.isoformat(),
        "finished": finished.isoformat(),
        "wall_seconds": round((finished - started).total_seconds(), 3),
        "python": platform.python_version(),
        "platform": platform.platform(),
        **(extra or {}),
    }
    path = pathlib.Path(directory) / RUN_INFO_NAME
    path.write_text(json.dumps(info, indent=2) + "\n", encoding="utf-8")
    return path


def collect_reports(directory: Union[str, pathlib.Path]) -> Dict[str, pathlib.Path]:
    """Every `<name>.json` report with a `<name>.txt` rendering beside it, keyed by name."""
    directory = pathlib.Path(directory)
    found = {}
    for path in sorted(directory.glob("*.json")):
        if path.name != RUN_INFO_NAME and path.with_suffix(".txt").exists():
            found[path.stem] = path
    return found


def render_directory(directory: Union[str, pathlib.Path]) -> List[str]:
    """Text renderings of every report in a run directory, in name order."""
    return [path.with_suffix(".txt").read_text(encoding="utf-8")
            for path in collect_reports(directory).values()]
