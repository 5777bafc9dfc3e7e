"""Self-contained SVG charts (no plotting library)."""

import logging
import math
import os
from xml.sax.saxutils import escape

import numpy as np

from ..container import atomic_write_bytes

log = logging.getLogger(__name__)

PALETTE = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
           "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"]
WIDTH, HEIGHT = 640, 420
MARGIN = dict(left=70, right=170, top=40, bottom=55)


class Canvas:
    def __init__(self, title, xlabel, ylabel, xlim, ylim, width=WIDTH, height=HEIGHT):
        self.w, self.h = width, height
        self.x0, self.x1 = MARGIN["left"], width - MARGIN["right"]
        self.y0, self.y1 = height - MARGIN["bottom"], MARGIN["top"]
        self.xlim = _pad(xlim)
        self.ylim = _pad(ylim)
        self.parts = []
        self.legend = []
        self._axes(title, xlabel, ylabel)

    def sx(self, x):
        lo, hi = self.xlim
        return self.x0 + (x - lo) / (hi - lo) * (self.x1 - self.x0)

    def sy(self, y):
        lo, hi = self.ylim
        return self.y0 - (y - lo) / (hi - lo) * (self.y0 - self.y1)

    def _axes(self, title, xlabel, ylabel):
        p = self.parts
        p.append(f'<rect x="0" y="0" width="{self.w}" height="{self.h}" fill="white"/>')
        p.append(f'<text x="{self.w / 2:.1f}" y="22" text-anchor="middle" font-size="15">{escape(title)}</text>')
        p.append(f'<line x1="{self.x0}" y1="{self.y0}" x2="{self.x1}" y2="{self.y0}" stroke="black"/>')
        p.append(f'<line x1="{self.x0}" y1="{self.y0}" x2="{self.x0}" y2="{self.y1}" stroke="black"/>')
        for t in _ticks(*self.xlim):
            x = self.sx(t)
            p.append(f'<line x1="{x:.1f}" y1="{self.y0}" x2="{x:.1f}" y2="{self.y0 + 4}" stroke="black"/>')
            p.append(f'<text x="{x:.1f}" y="{self.y0 + 17}" text-anchor="middle" font-size="11">{_num(t)}</text>')
        for t in _ticks(*self.ylim):
            y = self.sy(t)
            p.append(f'<line x1="{self.x0 - 4}" y1="{y:.1f}" x2="{self.x0}" y2="{y:.1f}" stroke="black"/>')
            p.append(f'<text x="{self.x0 - 7}" y="{y + 4:.1f}" text-anchor="end" font-size="11">{_num(t)}</text>')
        p.append(f'<text x="{(self.x0 + self.x1) / 2:.1f}" y="{self.h - 15}" text-anchor="middle" '
                 f'font-size="12">{escape(xlabel)}</text>')
        p.append(f'<text x="16" y="{(self.y0 + self.y1) / 2:.1f}" text-anchor="middle" font-size="12" '
                 f'transform="rotate(-90 16 {(self.y0 + self.y1) / 2:.1f})">{escape(ylabel)}</text>')

    def polyline(self, xs, ys, color, label=None):
        pts = " ".join(f"{self.sx(x):.2f},{self.sy(y):.2f}" for x, y in zip(xs, ys) if _finite(y))
        if len(xs) > 1:
            self.parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="2"/>')
        for x, y in zip(xs, ys):
            if _finite(y):
                self.parts.append(f'<circle class="marker" cx="{self.sx(x):.2f}" cy="{self.sy(y):.2f}" r="3.5" fill="{color}"/>')
        if label:
            self.legend.append((label, color))

    def points(self, xs, ys, color, r=2.2, label=None, css="pt"):
        for x, y in zip(xs, ys):
            self.parts.append(f'<circle class="{css}" cx="{self.sx(x):.2f}" cy="{self.sy(y):.2f}" r="{r}" '
                              f'fill="{color}" fill-opacity="0.75"/>')
        if label:
            self.legend.append((label, color))

    def bar(self, x_lo, x_hi, height, color):
        top, base = self.sy(height), self.sy(max(self.ylim[0], 0.0))
        self.parts.append(f'<rect x="{self.sx(x_lo):.2f}" y="{top:.2f}" width="{max(self.sx(x_hi) - self.sx(x_lo), 0.5):.2f}" '
                          f'height="{max(base - top, 0):.2f}" fill="{color}" fill-opacity="0.8"/>')

    def note(self, text):
        self.parts.append(f'<text x="{self.x0 + 6}" y="{self.y1 + 14}" font-size="11">{escape(text)}</text>')

    def svg(self):
        lx = self.x1 + 14
        for i, (label, color) in enumerate(self.legend):
            y = self.y1 + 10 + 18 * i
            self.parts.append(f'<rect x="{lx}" y="{y - 9}" width="11" height="11" fill="{color}"/>')
            self.parts.append(f'<text x="{lx + 16}" y="{y}" font-size="11">{escape(label)}</text>')
        body = "\n".join(self.parts)
        return (f'<?xml version="1.0" encoding="UTF-8"?>\n'
                f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{self.w}" height="{self.h}" '
                f'viewBox="0 0 {self.w} {self.h}">\n{body}\n</svg>\n')


def _finite(v):
    return v is not None and isinstance(v, (int, float, np.floating)) and math.isfinite(v)


def _pad(lim):
    lo, hi = float(lim[0]), float(lim[1])
    if not (math.isfinite(lo) and math.isfinite(hi)):
        return 0.0, 1.0
    if hi - lo < 1e-12:
        d = abs(lo) * 0.1 or 0.5
        return lo - d, hi + d
    return lo, hi


def _ticks(lo, hi, n=5):
    step = (hi - lo) / n
    mag = 10 ** math.floor(math.log10(step))
    step = min((m * mag for m in (1, 2, 2.5, 5, 10) if m * mag >= step), default=step)
    start = math.ceil(lo / step) * step
    return [start + i * step for i in range(int((hi - start) / step + 1e-9) + 1)]


def _num(v):
    return f"{v:.4g}"


def _range(values):
    vals = [v for v in values if _finite(v)]
    if not vals:
        return 0.0, 1.0
    return min(vals), max(vals)


# ---------------------------------------------------------------------------
# charts
# ---------------------------------------------------------------------------

def line_chart(series, title, xlabel, ylabel, ylim=None):
    """``series``: ordered mapping label -> (xs, ys)."""
    xs_all = [x for xs, _ in series.values() for x in xs]
    ys_all = [y for _, ys in series.values() for y in ys]
    c = Canvas(title, xlabel, ylabel, _range(xs_all), ylim or _range(ys_all))
    for i, (label, (xs, ys)) in enumerate(series.items()):
        c.polyline(xs, ys, PALETTE[i % len(PALETTE)], label)
    return c.svg()


def histogram_chart(hists, edges, title, xlabel):
    """Grouped bars: ``hists`` maps label -> counts over shared ``edges``."""
    edges = np.asarray(edges, dtype=float)
    top = max((max(h) for h in hists.values() if len(h)), default=1)
    c = Canvas(title, xlabel, "count", (edges[0], edges[-1]), (0, top))
    k = max(len(hists), 1)
    for i, (label, counts) in enumerate(hists.items()):
        color = PALETTE[i % len(PALETTE)]
        for lo, hi, n in zip(edges[:-1], edges[1:], counts):
            w = (hi - lo) / k
            c.bar(lo + i * w, lo + (i + 1) * w, n, color)
        c.legend.append((label, color))
    return c.svg()


def scatter_chart(groups, title, xlabel, ylabel, note=None):
    """``groups``: list of (label or None, xs, ys, color, css_class)."""
    xs_all = [x for _, xs, _, _, _ in groups for x in xs]
    ys_all = [y for _, _, ys, _, _ in groups for y in ys]
    c = Canvas(title, xlabel, ylabel, _range(xs_all), _range(ys_all))
    for label, xs, ys, color, css in groups:
        c.points(xs, ys, color, label=label, css=css)
    if note:
        c.note(note)
    return c.svg()


# ---------------------------------------------------------------------------
# report -> files
# ---------------------------------------------------------------------------

def _arm_label(run_id):
    return run_id.split("-", 1)[1] if "-" in run_id else run_id


def robust_accuracy_svg(report):
    series = {}
    for run_id in report.arms():
        by_eps = {}
        for r in report.select(run_id, "attack"):
            by_eps.setdefault(r["epoch_or_eps"], []).append(r["robust_acc"])
        if by_eps:
            eps = sorted(by_eps)
            series[_arm_label(run_id)] = (eps, [float(np.mean(by_eps[e])) for e in eps])
    if not series:
        return None
    return line_chart(series, "Robust accuracy under attack (mean over seeds)", "epsilon (l-inf, pixel units)",
                      "robust accuracy", ylim=(0.0, 1.0))


def stochasticity_svg(report):
    arms = report.summary.get("arms", {})
    hists = {label: a["stochasticity"]["histogram"] for label, a in arms.items() if "stochasticity" in a}
    if not hists:
        return None
    edges = next(iter(arms.values()))["stochasticity"]["bin_edges"]
    metric = next(iter(arms.values()))["stochasticity"]["metric"]
    return histogram_chart(hists, edges, "Distance of test softmax to uniform", f"{metric} distance")


def accuracy_distance_svg(report):
    groups, notes = [], []
    for i, run_id in enumerate(report.arms()):
        rows = [r for r in report.select(run_id, "train") if r["epoch_or_eps"] > 0]
        if not rows:
            continue
        label = _arm_label(run_id)
        groups.append((label, [r["stoch_mean"] for r in rows], [r["clean_acc"] for r in rows],
                       PALETTE[i % len(PALETTE)], "pt"))
        r_val = report.summary.get("arms", {}).get(label, {}).get("epoch_correlation", {}).get("pearson_r")
        if r_val is not None:
            notes.append(f"{label}: r={r_val:.2f}")
    if not groups:
        return None
    return scatter_chart(groups, "Test accuracy vs softmax distance (per epoch and seed)",
                         "mean distance to uniform", "test accuracy", note="; ".join(notes[:3]) or None)


def pca_svgs(report):
    out = {}
    arms = []
    for arm, *_ in report.pca:
        if arm not in arms:
            arms.append(arm)
    for arm in arms:
        pts = [p for p in report.pca if p[0] == arm]
        for kind, suffix in (("clean", ""), ("noisy", "-noisy")):
            sub = [p for p in pts if p[1] == kind]
            if not sub:
                continue
            g = []
            for cls in range(10):
                cs = [p for p in sub if p[2] == cls]
                if cs:
                    g.append((str(cls), [p[3] for p in cs], [p[4] for p in cs], PALETTE[cls], "pt"))
            if kind == "clean":
                adv = [p for p in pts if p[1] == "adversarial"]
                g.append(("adversarial", [p[3] for p in adv], [p[4] for p in adv], "#000000", "pt"))
            out[f"pca_{arm}{suffix}.svg"] = scatter_chart(
                g, f"PCA of softmax outputs: {arm}{' (label noise)' if kind == 'noisy' else ''}", "PC1", "PC2")
    return out


def emit_plots(report, output_dir):
    """Write every chart the report supports; returns the list of written paths."""
    if not report.rows and not report.pca:
        log.warning("empty report: no plots emitted")
        return []
    charts = {
        "robust_accuracy.svg": robust_accuracy_svg(report),
        "stochasticity_hist.svg": stochasticity_svg(report),
        "accuracy_vs_distance.svg": accuracy_distance_svg(report),
    }
    charts.update(pca_svgs(report))
    written = []
    for name, svg in charts.items():
        if svg is None:
            continue
        path = os.path.join(output_dir, name)
        atomic_write_bytes(path, svg.encode("utf-8"))
        written.append(path)
    return written
