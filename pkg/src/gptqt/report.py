"""Versioned CSV / markdown reports.

Every report starts with ``#`` comment lines carrying the schema version,
the report kind and the run configuration, followed by a plain CSV table::

    # gptqt-report schema=1 kind=compare
    # config: n=5 m=3 range=1 grid=64 damp=0.01 block=128 seed=0
    layer,method,bits,...

``pandas.read_csv(path, comment="#")`` or :func:`read_report` load it back.
"""

from __future__ import annotations

import csv
import io
import math
import os
from typing import Iterable, Mapping

SCHEMA_VERSION = 1

QUANT_COLUMNS = (
    "layer",
    "method",
    "bits",
    "inter_bits",
    "range_bits",
    "weight_mse",
    "proxy_loss",
    "out_rel_err",
    "plan_s",
    "quant_s",
    "pack_bytes",
)

BENCH_COLUMNS = ("rows", "cols", "bits", "path", "median_s", "speedup_vs_dequant", "max_rel_err")

WALL_CLOCK = {"plan_s", "quant_s", "median_s", "speedup_vs_dequant"}


def _fmt(value) -> str:
    if isinstance(value, float):
        if not math.isfinite(value):
            raise ValueError(f"non-finite report cell {value!r}")
        return repr(value)
    return str(value)


def header_lines(kind: str, config: Mapping[str, object]) -> list[str]:
    cfg = " ".join(f"{k}={v}" for k, v in config.items())
    return [f"# gptqt-report schema={SCHEMA_VERSION} kind={kind}", f"# config: {cfg}"]


def render_csv(kind: str, config, columns: Iterable[str], rows: Iterable[Mapping]) -> str:
    columns = list(columns)
    buf = io.StringIO()
    for line in header_lines(kind, config):
        buf.write(line + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_fmt(row[c]) for c in columns])
    return buf.getvalue()


def render_markdown(kind: str, config, columns: Iterable[str], rows: Iterable[Mapping]) -> str:
    columns = list(columns)
    out = [line.replace("# ", "<!-- ", 1) + " -->" for line in header_lines(kind, config)]
    out.append("| " + " | ".join(columns) + " |")
    out.append("|" + "|".join("---" for _ in columns) + "|")
    for row in rows:
        cells = []
        for c in columns:
            v = row[c]
            cells.append(f"{v:.6g}" if isinstance(v, float) else str(v))
        out.append("| " + " | ".join(cells) + " |")
    return "\n".join(out) + "\n"


def render(fmt: str, kind: str, config, columns, rows) -> str:
    rows = list(rows)
    if fmt == "csv":
        return render_csv(kind, config, columns, rows)
    if fmt == "markdown":
        return render_markdown(kind, config, columns, rows)
    raise ValueError(f"unknown report format {fmt!r}")


def read_report(path: str | os.PathLike) -> tuple[dict, list[dict]]:
    """Parse a CSV report into ``(meta, rows)``; numeric cells come back as numbers."""
    meta: dict = {}
    body = []
    with open(path, newline="") as fh:
        for line in fh:
            if line.startswith("# gptqt-report"):
                meta.update(kv.split("=", 1) for kv in line[2:].split()[1:])
            elif line.startswith("# config:"):
                meta["config"] = dict(kv.split("=", 1) for kv in line[len("# config:"):].split())
            elif line.startswith("#"):
                continue
            else:
                body.append(line)
    rows = []
    for rec in csv.DictReader(body):
        rows.append({k: _parse(v) for k, v in rec.items()})
    return meta, rows


def _parse(v: str):
    for cast in (int, float):
        try:
            return cast(v)
        except ValueError:
            pass
    return v
