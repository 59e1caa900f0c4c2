import os
from datetime import datetime
from typing import Any, Dict, List, Optional

from utils.logger_config import setup_logger, get_run_logger, default_log_file

logger = setup_logger(name=__name__, log_file=default_log_file())

RUN_STATUS_RUNNING = "running"
RUN_STATUS_COMPLETED = "completed"
RUN_STATUS_FAILED = "failed"

REPORT_FIELDS = (
    "command",
    "model",
    "run_id",
    "status",
    "started_at",
    "completed_at",
    "grid",
    "N",
    "dt",
    "cfl_number",
    "max_admissible_dt",
    "boundary",
    "boundary_band",
    "seed",
    "n_paths",
    "threads",
    "wall_time",
    "output",
    "error_message",
)


def new_run_report(command: str, model_path: str, run_id: str) -> Dict[str, Any]:
    return {
        "command": command,
        "model": model_path,
        "run_id": run_id,
        "status": RUN_STATUS_RUNNING,
        "started_at": datetime.now().isoformat(timespec="seconds"),
        "completed_at": None,
        "error_message": None,
        "lines": [],
    }


def add_line(report: Dict[str, Any], text: str):
    """Free-form line for the body (checks, convergence rows, estimates)."""
    report["lines"].append(text)


def update_run_report(report: Dict[str, Any], status: Optional[str] = None, error_message: Optional[str] = None,
                      **other_updates) -> Dict[str, Any]:
    if status is not None:
        report["status"] = status
        if status in (RUN_STATUS_COMPLETED, RUN_STATUS_FAILED):
            report["completed_at"] = datetime.now().isoformat(timespec="seconds")
    if error_message is not None:
        report["error_message"] = error_message
    report.update(other_updates)
    return report


def _format_value(value) -> str:
    if isinstance(value, float):
        return f"{value:.6g}"
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_format_value(v) for v in value) + "]"
    return str(value)


def format_run_report(report: Dict[str, Any]) -> str:
    out: List[str] = []
    for key in REPORT_FIELDS:
        if report.get(key) is not None:
            out.append(f"{key}: {_format_value(report[key])}")
    extra = sorted(k for k in report if k not in REPORT_FIELDS and k != "lines")
    for key in extra:
        if report[key] is not None:
            out.append(f"{key}: {_format_value(report[key])}")
    if report["lines"]:
        out.append("")
        out.extend(report["lines"])
    return "\n".join(out) + "\n"


def write_run_report(report: Dict[str, Any], path: str) -> bool:
    run_logger = get_run_logger(logger, report.get("run_id"))
    try:
        directory = os.path.dirname(path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            f.write(format_run_report(report))
        return True
    except OSError as e:
        run_logger.error(f"Error writing run report: {str(e)}")
        return False
