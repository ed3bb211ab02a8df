"""Kaplan-Meier plot data: KM CSV reading and SVG rendering.

The SVG is data-faithful: one step polyline per group, censoring tick
marks on flat rows, fixed axes. No styling options; reruns on the same
CSV are byte-identical.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

from .types import PipelineError

KM_FIELDS = ("time", "survival", "at_risk", "group")

# Survival-plot convention: high risk red, low risk blue; further groups
# cycle through the remainder.
_GROUP_COLORS = ("#c62828", "#1565c0", "#2e7d32", "#6a1b9a", "#ef6c00")

_WIDTH, _HEIGHT = 640, 480
_LEFT, _RIGHT, _TOP, _BOTTOM = 64, 20, 20, 52


class PlotError(PipelineError):
    pass


@dataclass(frozen=True)
class KmRow:
    time: float
    survival: float
    at_risk: int

    def __post_init__(self) -> None:
        if self.time < 0:
            raise PlotError(f"negative time {self.time}")
        if not 0.0 <= self.survival <= 1.0:
            raise PlotError(f"survival {self.survival} outside [0, 1]")


def read_km_csv(path: str | Path) -> dict[str, list[KmRow]]:
    """Parse a KM CSV into per-group rows, keeping group order.

    Expects the `time,survival,at_risk,group` schema; times must ascend
    and survival must be non-increasing within each group.
    """
    p = Path(path)
    groups: dict[str, list[KmRow]] = {}
    try:
        with p.open(newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            if not set(KM_FIELDS) <= set(reader.fieldnames or ()):
                raise PlotError(
                    f"{p}: KM CSV needs columns {','.join(KM_FIELDS)}, "
                    f"got {','.join(reader.fieldnames or ())}"
                )
            for lineno, raw in enumerate(reader, start=2):
                try:
                    row = KmRow(
                        time=float(raw["time"]),
                        survival=float(raw["survival"]),
                        at_risk=int(raw["at_risk"]),
                    )
                except ValueError as exc:
                    raise PlotError(f"{p}:{lineno}: bad KM row: {exc}") from exc
                groups.setdefault(raw["group"], []).append(row)
    except OSError as exc:
        raise PlotError(f"{p}: unreadable KM CSV: {exc}") from exc
    if not groups:
        raise PlotError(f"{p}: no data rows")
    for name, rows in groups.items():
        for a, b in zip(rows, rows[1:]):
            if b.time <= a.time:
                raise PlotError(f"{p}: group {name!r} times not ascending at {b.time}")
            if b.survival > a.survival + 1e-12:
                raise PlotError(f"{p}: group {name!r} survival increases at {b.time}")
    return groups


def _x(t: float, t_max: float) -> float:
    span = _WIDTH - _LEFT - _RIGHT
    return _LEFT + (t / t_max) * span if t_max > 0 else float(_LEFT)


def _y(s: float) -> float:
    span = _HEIGHT - _TOP - _BOTTOM
    return _TOP + (1.0 - s) * span


def _step_points(rows: Sequence[KmRow], t_max: float) -> str:
    """Step path: start at (0, 1), drop only at each row's time."""
    pts = [(_x(0.0, t_max), _y(1.0))]
    s = 1.0
    for row in rows:
        pts.append((_x(row.time, t_max), _y(s)))
        pts.append((_x(row.time, t_max), _y(row.survival)))
        s = row.survival
    return " ".join(f"{px:.2f},{py:.2f}" for px, py in pts)


def _censor_ticks(rows: Sequence[KmRow], t_max: float, color: str) -> list[str]:
    """A short vertical tick wherever survival does not drop.

    The CSV carries no explicit censor column; a flat row exists only
    because someone left the risk set without an event at that time.
    """
    out = []
    s = 1.0
    for row in rows:
        if abs(row.survival - s) <= 1e-12:
            px, py = _x(row.time, t_max), _y(row.survival)
            out.append(
                f'<line x1="{px:.2f}" y1="{py - 6:.2f}" x2="{px:.2f}" '
                f'y2="{py + 6:.2f}" stroke="{color}" stroke-width="1.5"/>'
            )
        s = row.survival
    return out


def _axis_elements(t_max: float) -> list[str]:
    e = []
    x0, x1 = _LEFT, _WIDTH - _RIGHT
    y0, y1 = _HEIGHT - _BOTTOM, _TOP
    e.append(f'<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>')
    e.append(f'<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>')
    for i in range(5):
        frac = i / 4
        t = t_max * frac
        px = _x(t, t_max)
        e.append(f'<line x1="{px:.2f}" y1="{y0}" x2="{px:.2f}" y2="{y0 + 5}" stroke="black"/>')
        e.append(
            f'<text x="{px:.2f}" y="{y0 + 20}" font-size="12" '
            f'text-anchor="middle">{t:.0f}</text>'
        )
        s = frac
        py = _y(s)
        e.append(f'<line x1="{x0 - 5}" y1="{py:.2f}" x2="{x0}" y2="{py:.2f}" stroke="black"/>')
        e.append(
            f'<text x="{x0 - 9}" y="{py + 4:.2f}" font-size="12" '
            f'text-anchor="end">{s:.2f}</text>'
        )
    e.append(
        f'<text x="{(x0 + x1) / 2:.0f}" y="{_HEIGHT - 12}" font-size="13" '
        f'text-anchor="middle">months</text>'
    )
    e.append(
        f'<text x="16" y="{(y0 + y1) / 2:.0f}" font-size="13" text-anchor="middle" '
        f'transform="rotate(-90 16 {(y0 + y1) / 2:.0f})">survival probability</text>'
    )
    return e


def render_km_svg(groups: Mapping[str, Sequence[KmRow]]) -> str:
    """Render step curves with censor ticks and a small legend."""
    if not groups:
        raise PlotError("no groups to plot")
    t_max = max((rows[-1].time for rows in groups.values() if rows), default=0.0)
    if t_max <= 0:
        t_max = 1.0
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_WIDTH}" '
        f'height="{_HEIGHT}" viewBox="0 0 {_WIDTH} {_HEIGHT}">',
        f'<rect width="{_WIDTH}" height="{_HEIGHT}" fill="white"/>',
    ]
    parts.extend(_axis_elements(t_max))
    for i, (name, rows) in enumerate(groups.items()):
        color = _GROUP_COLORS[i % len(_GROUP_COLORS)]
        parts.append(
            f'<polyline points="{_step_points(rows, t_max)}" fill="none" '
            f'stroke="{color}" stroke-width="2"/>'
        )
        parts.extend(_censor_ticks(rows, t_max, color))
        ly = _TOP + 16 + 18 * i
        lx = _WIDTH - _RIGHT - 150
        parts.append(
            f'<line x1="{lx}" y1="{ly - 4}" x2="{lx + 24}" y2="{ly - 4}" '
            f'stroke="{color}" stroke-width="2"/>'
        )
        parts.append(
            f'<text x="{lx + 30}" y="{ly}" font-size="12">{name} '
            f'(n={rows[0].at_risk if rows else 0})</text>'
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def write_km_svg(csv_path: str | Path, out_path: str | Path) -> Path:
    """CLI plot entry: read the KM CSV, write the SVG."""
    groups = read_km_csv(csv_path)
    out = Path(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(render_km_svg(groups), encoding="utf-8")
    return out
