"""Run logs on disk: a per-step CSV plus a JSON sidecar with run-level values."""
from __future__ import annotations

import csv
import io
import json
import math
import os
import tempfile
from typing import Any, Optional

from ..trainer import RunLog, StepRecord, timing_report

RUNLOG_HEADER = ["step", "c", "zeta_raw", "zeta_hat", "batch_size", "loss", "skipped", "clamp_min", "clamp_max"]


def _fmt(x: float) -> str:
    return repr(float(x))


def _atomic_write(path: str, text: str):
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    with os.fdopen(fd, "w", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def runlog_rows(run: RunLog) -> list[list[str]]:
    rows = []
    for r in run.records:
        rows.append([
            str(r.step),
            _fmt(r.c),
            "" if r.zeta_raw is None else _fmt(r.zeta_raw),
            _fmt(r.zeta_hat),
            str(r.batch_size),
            _fmt(r.loss),
            str(int(r.skipped)),
            str(int(r.clamp_min)),
            str(int(r.clamp_max)),
        ])
    return rows


def sidecar(run: RunLog, config: Optional[dict[str, Any]] = None) -> dict[str, Any]:
    def num(x):
        return None if x is None or (isinstance(x, float) and math.isnan(x)) else x

    return {
        "epsilon": num(run.epsilon),
        "delta": num(run.delta),
        "accuracy": num(run.accuracy),
        "test_loss": num(run.test_loss),
        "c_final": num(run.c_final),
        "timings": timing_report(run),
        "probe_failures": run.probe_failures,
        "clamp_hits_min": run.clamp_hits_min,
        "clamp_hits_max": run.clamp_hits_max,
        "aborted": run.aborted,
        "config": config,
    }


def sidecar_path(csv_path: str) -> str:
    root, _ = os.path.splitext(csv_path)
    return root + ".json"


def write_runlog(run: RunLog, csv_path: str, config: Optional[dict[str, Any]] = None) -> str:
    """Write ``csv_path`` and its ``.json`` sidecar atomically; returns the sidecar path."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RUNLOG_HEADER)
    w.writerows(runlog_rows(run))
    _atomic_write(csv_path, buf.getvalue())
    side = sidecar_path(csv_path)
    _atomic_write(side, json.dumps(sidecar(run, config), indent=2, sort_keys=True))
    return side


def read_runlog(csv_path: str) -> RunLog:
    """Inverse of :func:`write_runlog`; the sidecar is optional."""
    run = RunLog()
    with open(csv_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != RUNLOG_HEADER:
            raise ValueError(f"{csv_path}: unexpected header {header}")
        for row in reader:
            if not row:
                continue
            step, c, zr, zh, bs, loss, sk, cmin, cmax = row
            run.records.append(StepRecord(
                step=int(step),
                c=float(c),
                zeta_raw=None if zr == "" else float(zr),
                zeta_hat=float(zh),
                batch_size=int(bs),
                loss=float(loss),
                skipped=bool(int(sk)),
                clamp_min=bool(int(cmin)),
                clamp_max=bool(int(cmax)),
            ))
    side = sidecar_path(csv_path)
    if os.path.exists(side):
        with open(side) as fh:
            meta = json.load(fh)

        def get(key):
            v = meta.get(key)
            return math.nan if v is None else v

        run.epsilon = get("epsilon")
        run.delta = get("delta")
        run.accuracy = get("accuracy")
        run.test_loss = get("test_loss")
        run.c_final = get("c_final")
        timings = meta.get("timings") or {}
        run.t_train = timings.get("train", 0.0)
        run.t_eval = timings.get("eval", 0.0)
        run.t_probe = timings.get("probe", 0.0)
        run.probe_failures = meta.get("probe_failures", 0)
        run.clamp_hits_min = meta.get("clamp_hits_min", 0)
        run.clamp_hits_max = meta.get("clamp_hits_max", 0)
        run.aborted = meta.get("aborted")
    return run


def summarize_log(run: RunLog) -> dict[str, Any]:
    probes = [r for r in run.records if r.zeta_raw is not None]
    return {
        "steps": len(run.records),
        "skipped_steps": sum(r.skipped for r in run.records),
        "probe_steps": len(probes),
        "median_c": run.median_c(),
        "mean_c": run.mean_c(),
        "c_first": run.records[0].c if run.records else math.nan,
        "c_final": run.c_final if not math.isnan(run.c_final) else (run.records[-1].c if run.records else math.nan),
        "zeta_raw_last": probes[-1].zeta_raw if probes else None,
        "zeta_hat_last": run.records[-1].zeta_hat if run.records else None,
        "clamp_hits_min": sum(r.clamp_min for r in run.records),
        "clamp_hits_max": sum(r.clamp_max for r in run.records),
        "epsilon": run.epsilon,
        "accuracy": run.accuracy,
    }


def write_csv(path: str, header: list[str], rows: list[list[Any]]):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(x) if isinstance(x, float) else x for x in row])
    _atomic_write(path, buf.getvalue())


def _typed(column: str, raw: str):
    if raw == "":
        return None
    if column in ("label",):
        return raw
    try:
        return int(raw)
    except ValueError:
        return float(raw)


def read_table(path: str) -> tuple[list[str], list[dict[str, Any]]]:
    """Read any CSV this package writes back into typed rows (ints stay ints, floats round-trip)."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ValueError(f"{path}: empty file")
        rows = [dict(zip(header, (_typed(h, v) for h, v in zip(header, row)))) for row in reader if row]
    return header, rows
