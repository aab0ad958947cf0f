"""Clean/robust accuracy, harmonic mean, and JSON/CSV/SVG reporting."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .attack import AttackConfig, attack_inputs
from .errors import ContractError
from .model import AdapterModel, Batch, predict

REPORT_COLUMNS = ("experiment", "shots", "tau", "rank", "placement", "clean", "robust", "hm", "seed_count")


def harmonic_mean(clean: float, robust: float) -> float:
    """``2 c r / (c + r)``, 0 when both are 0. Both arguments share one scale
    (fractions or percentages)."""
    c, r = float(clean), float(robust)
    if not (0.0 <= c <= 100.0 and 0.0 <= r <= 100.0):
        raise ContractError(f"accuracies must lie in [0, 100], got ({c}, {r})")
    hi, lo = max(c, r), min(c, r)
    if hi > 1.0 and 0.0 < lo < 1.0:
        raise ContractError(f"mixed scales: ({c}, {r}) look like a percentage and a fraction")
    if c + r == 0.0:
        return 0.0
    return 2.0 * c * r / (c + r)


@dataclass
class Metrics:
    clean_acc: float
    robust_acc: float
    harmonic_mean: float
    attack_descriptor: object
    n_eval: int
    seed_list: list = field(default_factory=list)

    def __post_init__(self):
        for v in (self.clean_acc, self.robust_acc):
            if not 0.0 <= v <= 1.0:
                raise ContractError("accuracies are stored as fractions in [0, 1]")


def evaluate(model: AdapterModel, ds, attack: AttackConfig | None = None, *, seed: int = 0, chunk: int = 256) -> Metrics:
    """Clean accuracy and accuracy under a per-sample attack on ``ds``.

    Without an attack the robust accuracy equals the clean one and the
    descriptor is ``"none"``. ``seed`` feeds the attack's random start.
    """
    clean_hits = robust_hits = 0
    if attack is not None:
        attack = replace(attack, per_sample=True, seed=seed)
    for start in range(0, len(ds), chunk):
        rows = slice(start, start + chunk)
        batch = Batch(ds.features[rows], ds.labels[rows], ds.ids[rows])
        clean_pred = predict(model, batch.inputs)
        clean_hits += int(np.sum(clean_pred == batch.labels))
        if attack is None:
            robust_hits += int(np.sum(clean_pred == batch.labels))
        else:
            adv = attack_inputs(model, batch, attack, per_sample=True)
            robust_hits += int(np.sum(predict(model, adv) == batch.labels))
    n = len(ds)
    c, r = clean_hits / n, robust_hits / n
    return Metrics(c, r, harmonic_mean(c, r), "none" if attack is None else attack.describe(), n, [seed])


# -- reports -----------------------------------------------------------------

def pct(x: float) -> float:
    return round(100.0 * float(x), 2)


def report_row(experiment, shots, tau, rank, placement, clean, robust, seed_count) -> dict:
    """One report row. ``clean`` and ``robust`` are fractions; the row holds
    percentages rounded to two decimals."""
    return {
        "experiment": str(experiment),
        "shots": int(shots),
        "tau": "baseline" if tau is None else int(tau),
        "rank": int(rank),
        "placement": str(placement),
        "clean": pct(clean),
        "robust": pct(robust),
        "hm": pct(harmonic_mean(clean, robust)),
        "seed_count": int(seed_count),
    }


def _check_row(row):
    missing = [c for c in REPORT_COLUMNS if c not in row]
    if missing:
        raise ContractError(f"report row lacks columns {missing}")
    # HM never exceeds the arithmetic mean (up to the two-decimal rendering).
    if row["hm"] > (row["clean"] + row["robust"]) / 2 + 0.01:
        raise ContractError(f"hm {row['hm']} exceeds the arithmetic mean in row {row}")


def emit_report(rows, path, fmt: str = "json") -> None:
    rows = [{c: r[c] for c in REPORT_COLUMNS} for r in rows]
    if not rows:
        raise ContractError("a report needs at least one row")
    for r in rows:
        _check_row(r)
    if fmt == "json":
        text = json.dumps(rows, indent=2) + "\n"
    elif fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in rows:
            w.writerow([r[c] for c in REPORT_COLUMNS])
        text = buf.getvalue()
    else:
        raise ContractError(f"unknown report format {fmt!r}")
    with open(path, "w", newline="") as fh:
        fh.write(text)


def _parse_cell(col, text):
    if col in ("shots", "rank", "seed_count"):
        return int(text)
    if col in ("clean", "robust", "hm"):
        return float(text)
    if col == "tau":
        return text if text == "baseline" else int(text)
    return text


def read_report(path) -> list:
    path = Path(path)
    text = path.read_text()
    if path.suffix == ".json":
        return json.loads(text)
    reader = csv.DictReader(io.StringIO(text))
    return [{c: _parse_cell(c, row[c]) for c in REPORT_COLUMNS} for row in reader]


# -- SVG curves ----------------------------------------------------------------

_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf", "#7f7f7f")


def write_curves_svg(series: dict, path, *, xlabel: str, ylabel: str, title: str = "", width: int = 480, height: int = 320) -> None:
    """Polyline plot, one line per entry of ``series`` (label -> [(x, y), ...])."""
    pts = [p for s in series.values() for p in s]
    if not pts:
        raise ContractError("nothing to plot")
    xs = [float(p[0]) for p in pts]
    ys = [float(p[1]) for p in pts]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    if x1 == x0:
        x0, x1 = x0 - 1, x1 + 1
    if y1 == y0:
        y0, y1 = y0 - 1, y1 + 1
    left, right, top, bottom = 60, 120, 30, 45
    pw, ph = width - left - right, height - top - bottom

    def sx(x):
        return left + (float(x) - x0) / (x1 - x0) * pw

    def sy(y):
        return top + ph - (float(y) - y0) / (y1 - y0) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        '<rect width="100%" height="100%" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="18" text-anchor="middle" font-size="13">{title}</text>',
        f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>',
        f'<text x="{left + pw / 2:.1f}" y="{height - 8}" text-anchor="middle" font-size="12">{xlabel}</text>',
        f'<text x="14" y="{top + ph / 2:.1f}" text-anchor="middle" font-size="12" transform="rotate(-90 14 {top + ph / 2:.1f})">{ylabel}</text>',
    ]
    for v, anchor in ((x0, "start"), (x1, "end")):
        out.append(f'<text x="{sx(v):.1f}" y="{top + ph + 15}" text-anchor="{anchor}" font-size="10">{v:g}</text>')
    for v in (y0, y1):
        out.append(f'<text x="{left - 4}" y="{sy(v) + 4:.1f}" text-anchor="end" font-size="10">{v:g}</text>')
    for i, (label, s) in enumerate(series.items()):
        color = _COLORS[i % len(_COLORS)]
        coords = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in sorted(s, key=lambda p: float(p[0])))
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{coords}"/>')
        out.append(f'<text x="{left + pw + 8}" y="{top + 14 * (i + 1)}" font-size="11" fill="{color}">{label}</text>')
    out.append("</svg>")
    Path(path).write_text("\n".join(out) + "\n")
