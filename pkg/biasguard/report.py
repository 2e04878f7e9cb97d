"""CSV tables and terminal summaries for evaluation results."""
import csv
import io
import logging
from pathlib import Path
from typing import List, Sequence, Tuple, Union

from biasguard.pipeline import EvalReport

logger = logging.getLogger(__name__)

TABLE_HEADER = ("config", "U", "S", "H")
PER_CLASS_HEADER = ("class_id", "side", "accuracy")


def _pct(value: float) -> str:
    return f"{value:.1f}"


def table_rows(rows: Sequence[Tuple[str, EvalReport]]) -> List[List[str]]:
    return [[label, _pct(r.u), _pct(r.s), _pct(r.h)] for label, r in rows]


def format_table(rows: Sequence[Tuple[str, EvalReport]]) -> str:
    """
    Render ``config,U,S,H`` CSV text.

    Args:
        rows: (label, report) pairs

    Returns:
        CSV with a header line
    """
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(TABLE_HEADER)
    writer.writerows(table_rows(rows))
    return buf.getvalue()


def write_table(rows: Sequence[Tuple[str, EvalReport]], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(format_table(rows), encoding="utf-8")
    logger.debug(f"[CLI] wrote {len(rows)} row(s) to {path}")
    return path


def write_per_class(report: EvalReport, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(PER_CLASS_HEADER)
        for c in sorted(report.per_class):
            side = "seen" if c in report.seen_classes else "unseen"
            writer.writerow([c, side, _pct(report.per_class[c])])
    return path


def summarize(report: EvalReport) -> str:
    return (f"U={report.u:.1f} S={report.s:.1f} H={report.h:.1f} "
            f"({len(report.unseen_classes)} unseen / {len(report.seen_classes)} seen classes)")
