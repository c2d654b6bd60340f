"""Writing audit reports to disk: CSV tables, text summaries and SVG figures."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import re
from pathlib import Path
from typing import Iterable, List, Optional, Sequence

import numpy as np

from .audit import AuditReport, aggregate_influence
from .disentangler import CONSTANT_FEATURE, ErrorReport

SUMMARY_FIELDS = ["feature", "kind", "mean_abs", "max_abs", "mean", "disentanglement", "status"]


def safe_name(feature: str) -> str:
    """Filesystem-safe, collision-free encoding of a feature name."""
    return re.sub(r"[^A-Za-z0-9._-]", lambda m: "%{:02X}".format(ord(m.group())), feature)


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def dump_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_rows(path, fields: Sequence[str], rows: Iterable[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(fields)
        for row in rows:
            w.writerow([_fmt(row.get(f)) for f in fields])


def read_rows(path) -> List[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def write_errors_csv(path, errors: ErrorReport, feature_names: Sequence[str], p_values) -> None:
    """One row per instance: ``p``, ``x - x_hat`` per column, then ``M(x) - M(x_hat)``."""
    fields = ["p"] + [f"reconstruction:{c}" for c in feature_names] + ["prediction"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(fields)
        for p, rec, pred in zip(p_values, errors.reconstruction, errors.prediction):
            w.writerow([repr(float(p))] + [repr(float(v)) for v in rec] + [repr(float(pred))])


def summary_rows(report: AuditReport) -> List[dict]:
    rows = aggregate_influence(report)
    for row in rows:
        fa = report.features.get(row["feature"]) if row["kind"] == "indirect" else None
        if fa is not None and fa.errors is not None:
            e = fa.errors
            row["disentanglement"] = CONSTANT_FEATURE if e.constant_feature else e.disentanglement
    return rows


def summary_text(rows: Sequence[dict]) -> str:
    out = io.StringIO()
    out.write(f"{'feature':<32} {'kind':<9} {'mean_abs':>22} {'max_abs':>22} {'disentanglement':>22}\n")
    for r in rows:
        out.write(f"{r['feature']:<32} {r['kind']:<9} {_fmt(r.get('mean_abs')):>22} "
                  f"{_fmt(r.get('max_abs')):>22} {_fmt(r.get('disentanglement')):>22}\n")
    return out.getvalue()


def write_report(report: AuditReport, out_dir, feature_names: Sequence[str],
                 svg: bool = False, direct_values: Optional[np.ndarray] = None) -> List[dict]:
    """Write per-feature influence/error CSVs, the summary table and optional figures.

    Returns the summary rows.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, fa in report.features.items():
        if fa.failed:
            continue
        stem = safe_name(name)
        fa.influence.to_csv(out / f"influence_{stem}.csv")
        write_errors_csv(out / f"errors_{stem}.csv", fa.errors, feature_names, fa.feature_values)
        if svg:
            (out / f"scatter_{stem}.svg").write_text(
                scatter_svg(fa.feature_values, fa.influence.values[:, 0],
                            f"indirect influence of {name}", name), encoding="utf-8")
    if report.direct is not None:
        report.direct.to_csv(out / "influence_direct.csv")
        if svg and direct_values is not None:
            for k, name in enumerate(report.direct.feature_names):
                (out / f"scatter_direct_{safe_name(name)}.svg").write_text(
                    scatter_svg(direct_values[:, k], report.direct.values[:, k],
                                f"direct influence of {name}", name), encoding="utf-8")
    rows = summary_rows(report)
    write_rows(out / "summary.csv", SUMMARY_FIELDS, rows)
    (out / "summary.txt").write_text(summary_text(rows), encoding="utf-8")
    if svg:
        for kind in ("indirect", "direct"):
            sel = [r for r in rows if r["kind"] == kind and r["mean_abs"] is not None]
            if sel:
                (out / f"bars_{kind}.svg").write_text(
                    bars_svg([r["feature"] for r in sel], [r["mean_abs"] for r in sel],
                             f"mean |{kind} influence|"), encoding="utf-8")
    return rows


# -- SVG ----------------------------------------------------------------

def _esc(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def _data_comment(header, columns) -> str:
    lines = [",".join(header)]
    for vals in zip(*columns):
        lines.append(",".join(_fmt(v) if not isinstance(v, str) else v for v in vals))
    # "--" is not allowed inside XML comments; values never contain it
    return "<!-- data\n" + "\n".join(lines) + "\n-->\n"


def _range(v):
    lo, hi = float(np.min(v)), float(np.max(v))
    if hi == lo:
        lo, hi = lo - 0.5, hi + 0.5
    return lo, hi


def scatter_svg(x, y, title: str, xlabel: str, width=420, height=320) -> str:
    """Scatter of influence (y) against feature value (x) with the data embedded."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    m = 40
    x0, x1 = _range(x)
    y0, y1 = _range(np.append(y, 0.0))
    sx = lambda v: m + (v - x0) / (x1 - x0) * (width - 2 * m)
    sy = lambda v: height - m - (v - y0) / (y1 - y0) * (height - 2 * m)
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">\n',
             _data_comment(["feature_value", "influence"], [x, y]),
             f'<text x="{width / 2:.1f}" y="20" text-anchor="middle" font-size="13">{_esc(title)}</text>\n',
             f'<line x1="{m}" y1="{sy(0.0):.2f}" x2="{width - m}" y2="{sy(0.0):.2f}" stroke="#999"/>\n',
             f'<text x="{width / 2:.1f}" y="{height - 8}" text-anchor="middle" font-size="11">{_esc(xlabel)}</text>\n']
    for a, b in zip(x, y):
        parts.append(f'<circle cx="{sx(a):.2f}" cy="{sy(b):.2f}" r="2" fill="#1f77b4"/>\n')
    parts.append("</svg>\n")
    return "".join(parts)


def bars_svg(names: Sequence[str], values: Sequence[float], title: str, bar_h=16) -> str:
    """Horizontal bar chart of aggregate influence per feature."""
    values = np.asarray(values, dtype=float)
    label_w, plot_w = 200, 300
    height = 40 + bar_h * len(names) + 10
    vmax = float(values.max()) if len(values) and values.max() > 0 else 1.0
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{label_w + plot_w + 20}" height="{height}">\n',
             _data_comment(["feature", "value"], [list(names), values]),
             f'<text x="10" y="20" font-size="13">{_esc(title)}</text>\n']
    for k, (n, v) in enumerate(zip(names, values)):
        y = 35 + k * bar_h
        parts.append(f'<text x="{label_w - 6}" y="{y + bar_h - 4}" text-anchor="end" font-size="11">{_esc(n)}</text>\n')
        parts.append(f'<rect x="{label_w}" y="{y + 2}" width="{v / vmax * plot_w:.2f}" height="{bar_h - 4}" fill="#1f77b4"/>\n')
    parts.append("</svg>\n")
    return "".join(parts)


def parse_svg_data(text: str) -> List[List[str]]:
    """Recover the table embedded by :func:`scatter_svg` / :func:`bars_svg`."""
    start = text.index("<!-- data\n") + len("<!-- data\n")
    body = text[start:text.index("\n-->", start)]
    return [line.split(",") for line in body.splitlines()]
