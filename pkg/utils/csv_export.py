import csv
import os
import sys
from contextlib import contextmanager
from typing import Iterable, List, Sequence


def _fmt(value) -> str:
    # repr round-trips floats exactly, so reruns give byte-identical files
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if value is None:
        return ""
    return str(value)


@contextmanager
def _open_target(path: str):
    if path == "-":
        yield sys.stdout
        sys.stdout.flush()
        return
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        yield f


def _write(path: str, header: Sequence[str], rows: Iterable[Sequence]):
    with _open_target(path) as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def write_value_fields(history, points, path: str, level0_only: bool = False):
    """One row per (level, cell): t, x1[, x2], value, policy_index."""
    n = points.shape[-1]
    flat_points = points.reshape(-1, n)
    header = ["t"] + [f"x{i + 1}" for i in range(n)] + ["value", "policy_index"]
    fields = history[:1] if level0_only else history

    def rows():
        for field in fields:
            values = field.values.reshape(-1)
            policy = field.policy.reshape(-1)
            for cell in range(flat_points.shape[0]):
                yield ([float(field.t)] + [float(v) for v in flat_points[cell]]
                       + [float(values[cell]), int(policy[cell])])

    _write(path, header, rows())


def write_convergence(rows, path: str):
    _write(path, ["level", "dx", "dt", "sup_error", "observed_order"],
           ([r.level, float(r.dx), float(r.dt), float(r.sup_error), r.observed_order] for r in rows))


def write_estimates(estimates, path: str):
    _write(path, ["quantity", "r", "y", "mean", "se", "n_paths", "seed"],
           ([e.quantity, float(e.r), ";".join(repr(float(v)) for v in e.y), float(e.mean), float(e.se),
             e.n_paths, e.seed] for e in estimates))


def write_path_dump(samples: List, path: str):
    """Rows per recorded time. set_index/candidate_index cover the substep starting there;
    jumps lists slot*count for arrivals in the substep ending there."""
    if not samples:
        return
    n = samples[0].states.shape[-1]
    header = (["path_index", "seed", "t"] + [f"x{i + 1}" for i in range(n)]
              + ["penalty_acc", "set_index", "candidate_index", "jumps"])

    def rows():
        for sample in samples:
            arrivals = {}
            for event in sample.jump_log:
                arrivals.setdefault(event.time, []).append(f"{event.slot}*{event.count}")
            steps = len(sample.candidate_indices)
            for step, t in enumerate(sample.times):
                applied = [int(sample.set_indices[step]), int(sample.candidate_indices[step])] if step < steps \
                    else [None, None]
                yield ([sample.path_index, sample.seed, float(t)] + [float(v) for v in sample.states[step]]
                       + [float(sample.penalty_acc[step])] + applied + [";".join(arrivals.get(float(t), []))])

    _write(path, header, rows())


def write_checks(results, path: str):
    _write(path, ["suite", "name", "passed", "value", "threshold"],
           ([r.suite, r.name, bool(r.passed), float(r.value), float(r.threshold)] for r in results))
