"""Quality metrics, rate-quality curves and Bjontegaard delta rate."""

from __future__ import annotations

import csv
import io
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .frames import PlanarFrame420, ycbcr_to_rgb
from .losses import SsimParams, ssim

PSNR_CAP = 100.0
QP_RANGES = {"VVC": {"low": (22, 27, 32, 37), "high": (27, 32, 37, 42)}}


class CurveError(ValueError):
    """Base class for invalid rate-quality data."""


class CurveParseError(CurveError):
    def __init__(self, path, line: int, message: str):
        super().__init__(f"{path}:{line}: {message}")
        self.line = line


class TooFewPointsError(CurveError):
    pass


class NonMonotoneCurveError(CurveError):
    pass


class NoOverlapError(CurveError):
    pass


# Frame quality

def _check_pair(ref: PlanarFrame420, test: PlanarFrame420) -> None:
    a = (ref.width, ref.height, ref.bit_depth)
    b = (test.width, test.height, test.bit_depth)
    if a != b:
        raise ValueError(f"frame geometry differs: {a[0]}x{a[1]} {a[2]}-bit vs {b[0]}x{b[1]} {b[2]}-bit")


def psnr_arrays(ref: np.ndarray, test: np.ndarray, peak: float, cap: float = PSNR_CAP) -> float:
    mse = float(np.mean((np.asarray(ref, np.float64) - np.asarray(test, np.float64)) ** 2))
    if mse == 0.0:
        return cap
    return min(cap, 10.0 * math.log10(peak * peak / mse))


def psnr(ref: PlanarFrame420, test: PlanarFrame420, mode: str = "y", cap: float = PSNR_CAP) -> float:
    """PSNR in dB on the luma plane (``mode="y"``) or averaged over RGB channels."""
    _check_pair(ref, test)
    if mode == "y":
        return psnr_arrays(ref.y, test.y, ref.max_value, cap)
    if mode == "rgb":
        a, b = ycbcr_to_rgb(ref).data, ycbcr_to_rgb(test).data
        return float(np.mean([psnr_arrays(a[c], b[c], 1.0, cap) for c in range(3)]))
    raise ValueError(f"unknown PSNR mode {mode!r}")


def sequence_psnr(refs, tests, **kw) -> float:
    values = [psnr(r, t, **kw) for r, t in zip(refs, tests, strict=True)]
    if not values:
        raise ValueError("no frames to compare")
    return float(np.mean(values))


def ssim_metric(ref: PlanarFrame420, test: PlanarFrame420, params: SsimParams = SsimParams()) -> float:
    """SSIM of the luma planes scaled to [0, 1]."""
    _check_pair(ref, test)
    scale = float(ref.max_value)
    a = ref.y.astype(np.float64)[None, None] / scale
    b = test.y.astype(np.float64)[None, None] / scale
    return ssim(a, b, params).item()


# Rate-quality curves

@dataclass(frozen=True)
class RateQualityPoint:
    bitrate: float
    quality: float
    qp: int | None = None

    def __post_init__(self):
        if not (math.isfinite(self.bitrate) and self.bitrate > 0):
            raise CurveError(f"bitrate must be positive and finite, got {self.bitrate}")
        if not math.isfinite(self.quality):
            raise CurveError(f"quality must be finite, got {self.quality}")


@dataclass
class RateQualityCurve:
    """At least four points, stored in ascending bitrate order.

    Quality must rise strictly with bitrate for the cubic fit to be
    meaningful.
    """

    points: list[RateQualityPoint]
    label: str = ""
    min_points: int = field(default=4, repr=False)

    def __post_init__(self):
        pts = sorted(self.points, key=lambda p: p.bitrate)
        name = self.label or "curve"
        if len(pts) < self.min_points:
            raise TooFewPointsError(f"{name}: {len(pts)} points, at least {self.min_points} required")
        for a, b in zip(pts, pts[1:]):
            if b.bitrate <= a.bitrate:
                raise NonMonotoneCurveError(f"{name}: duplicate bitrate {a.bitrate}")
            if b.quality <= a.quality:
                raise NonMonotoneCurveError(
                    f"{name}: quality {b.quality} at {b.bitrate} kbps does not exceed {a.quality} at {a.bitrate} kbps")
        self.points = pts

    @property
    def bitrates(self) -> np.ndarray:
        return np.array([p.bitrate for p in self.points])

    @property
    def qualities(self) -> np.ndarray:
        return np.array([p.quality for p in self.points])

    def __len__(self) -> int:
        return len(self.points)

    def scaled(self, factor: float) -> "RateQualityCurve":
        return RateQualityCurve([RateQualityPoint(p.bitrate * factor, p.quality, p.qp) for p in self.points],
                                self.label)


def curve(bitrates, qualities, qps=None, label: str = "") -> RateQualityCurve:
    qps = qps if qps is not None else [None] * len(bitrates)
    return RateQualityCurve([RateQualityPoint(float(r), float(q), None if p is None else int(p))
                             for r, q, p in zip(bitrates, qualities, qps, strict=True)], label)


def _log_rate_fit(c: RateQualityCurve) -> np.ndarray:
    return np.polyfit(c.qualities, np.log10(c.bitrates), 3)


def bd_rate(anchor: RateQualityCurve, test: RateQualityCurve) -> float:
    """Bjontegaard delta rate of ``test`` against ``anchor`` in percent.

    log10(bitrate) is fitted as a cubic in quality for each curve and the
    fits are integrated over the shared quality interval.  Negative values
    mean the test curve needs less bitrate for the same quality.
    """
    lo = max(anchor.qualities.min(), test.qualities.min())
    hi = min(anchor.qualities.max(), test.qualities.max())
    if not hi > lo:
        raise NoOverlapError(f"quality ranges of {anchor.label or 'anchor'} and {test.label or 'test'} "
                             f"do not overlap ([{anchor.qualities.min()}, {anchor.qualities.max()}] vs "
                             f"[{test.qualities.min()}, {test.qualities.max()}])")
    ia = np.polyint(_log_rate_fit(anchor))
    it = np.polyint(_log_rate_fit(test))
    area_a = np.polyval(ia, hi) - np.polyval(ia, lo)
    area_t = np.polyval(it, hi) - np.polyval(it, lo)
    mean_diff = (area_t - area_a) / (hi - lo)
    return float((10.0 ** mean_diff - 1.0) * 100.0)


def qp_subrange(c: RateQualityCurve, which: str, codec: str = "VVC") -> RateQualityCurve:
    """Restrict a QP-annotated curve to the low or high QP range."""
    if codec not in QP_RANGES:
        raise CurveError(f"{codec} results use a single QP range; low/high splits exist only for "
                         f"{', '.join(QP_RANGES)}")
    try:
        wanted = QP_RANGES[codec][which]
    except KeyError:
        raise CurveError(f"unknown QP range {which!r}; expected 'low' or 'high'") from None
    by_qp = {p.qp: p for p in c.points}
    missing = [q for q in wanted if q not in by_qp]
    if missing:
        raise CurveError(f"{c.label or 'curve'} has no points for QP {missing}")
    return RateQualityCurve([by_qp[q] for q in wanted], c.label)


def curve_to_csv(c: RateQualityCurve, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(curve_csv_text(c))


def curve_csv_text(c: RateQualityCurve) -> str:
    buf = io.StringIO()
    has_qp = all(p.qp is not None for p in c.points)
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["bitrate_kbps", "quality"] + (["qp"] if has_qp else []))
    for p in c.points:
        w.writerow([f"{p.bitrate:.6g}", f"{p.quality:.6g}"] + ([str(p.qp)] if has_qp else []))
    return buf.getvalue()


def curve_from_csv(path, label: str | None = None) -> RateQualityCurve:
    """Read ``bitrate_kbps,quality[,qp]`` rows (header required)."""
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise CurveParseError(path, 1, "empty file")
    header = [h.strip() for h in rows[0]]
    if header[:2] != ["bitrate_kbps", "quality"] or header[2:] not in ([], ["qp"]):
        raise CurveParseError(path, 1, f"expected header 'bitrate_kbps,quality[,qp]', got {','.join(header)!r}")
    points = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not x.strip() for x in row):
            continue
        if len(row) != len(header):
            raise CurveParseError(path, lineno, f"expected {len(header)} fields, got {len(row)}")
        try:
            rate, quality = float(row[0]), float(row[1])
            qp = int(row[2]) if len(row) > 2 else None
        except ValueError as exc:
            raise CurveParseError(path, lineno, f"not a number: {exc}") from None
        try:
            points.append(RateQualityPoint(rate, quality, qp))
        except CurveError as exc:
            raise CurveParseError(path, lineno, str(exc)) from None
    return RateQualityCurve(points, label if label is not None else path.stem)


LONG_HEADER = ["curve", "bitrate_kbps", "quality", "qp"]


def curves_long_csv_text(curves: list[RateQualityCurve]) -> str:
    """All curves in one ``curve,bitrate_kbps,quality,qp`` table, in input order."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LONG_HEADER)
    for c in curves:
        for p in c.points:
            w.writerow([c.label, f"{p.bitrate:.6g}", f"{p.quality:.6g}", "" if p.qp is None else str(p.qp)])
    return buf.getvalue()


def curves_from_long_csv(path) -> list[RateQualityCurve]:
    """Inverse of :func:`curves_long_csv_text`; curves keep their first-seen order."""
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or [h.strip() for h in rows[0]] != LONG_HEADER:
        raise CurveParseError(path, 1, f"expected header {','.join(LONG_HEADER)!r}")
    groups: dict[str, list[RateQualityPoint]] = {}
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not x.strip() for x in row):
            continue
        if len(row) != 4:
            raise CurveParseError(path, lineno, f"expected 4 fields, got {len(row)}")
        try:
            point = RateQualityPoint(float(row[1]), float(row[2]), int(row[3]) if row[3].strip() else None)
        except (ValueError, CurveError) as exc:
            raise CurveParseError(path, lineno, str(exc)) from None
        groups.setdefault(row[0], []).append(point)
    return [RateQualityCurve(pts, label) for label, pts in groups.items()]


def curves_gnuplot_text(curves: list[RateQualityCurve]) -> str:
    """One data block per curve, separated by two blank lines (``index`` addressable)."""
    blocks = []
    for c in curves:
        lines = [f"# {c.label}", "# bitrate_kbps quality"]
        lines += [f"{p.bitrate:.6g} {p.quality:.6g}" for p in c.points]
        blocks.append("\n".join(lines) + "\n")
    return "\n\n".join(blocks)


# Per-sequence BD-rate report with class and overall means

def sequence_class(sequence: str) -> str:
    """``A1-Campfire`` -> ``A``: class letter with any sub-class digits dropped."""
    head = sequence.split("-", 1)[0]
    m = re.match(r"[A-Za-z]+", head)
    return m.group(0) if m else head


@dataclass
class BdTable:
    """BD-rates per (sequence, column) with per-class and overall means.

    Two overall rows are produced: the mean over sequences and the mean of
    the class means.
    """

    columns: list[str]
    values: dict[tuple[str, str], float]
    classes: dict[str, str]

    @property
    def sequences(self) -> list[str]:
        seen = []
        for seq, _ in self.values:
            if seq not in seen:
                seen.append(seq)
        return seen

    def class_order(self) -> list[str]:
        out = []
        for s in self.sequences:
            if self.classes[s] not in out:
                out.append(self.classes[s])
        return out

    def _mean(self, seqs, col):
        vals = [self.values[(s, col)] for s in seqs if (s, col) in self.values]
        return float(np.mean(vals)) if vals else None

    def rows(self) -> list[tuple[str, str, list[float | None]]]:
        """(kind, label, values) in display order."""
        out, class_means = [], {}
        for cls in self.class_order():
            members = [s for s in self.sequences if self.classes[s] == cls]
            for s in members:
                out.append(("sequence", s, [self.values.get((s, c)) for c in self.columns]))
            means = [self._mean(members, c) for c in self.columns]
            class_means[cls] = means
            out.append(("class", f"Class {cls}", means))
        out.append(("overall", "Overall (mean of sequences)",
                    [self._mean(self.sequences, c) for c in self.columns]))
        overall_cls = []
        for j in range(len(self.columns)):
            vals = [m[j] for m in class_means.values() if m[j] is not None]
            overall_cls.append(float(np.mean(vals)) if vals else None)
        out.append(("overall", "Overall (mean of classes)", overall_cls))
        return out

    def to_text(self) -> str:
        def fmt(v):
            return "n/a" if v is None else f"{v:+.1f}%"

        header = ["Class-Sequence"] + self.columns
        body = [[label] + [fmt(v) for v in vals] for _, label, vals in self.rows()]
        widths = [max(len(r[j]) for r in [header] + body) for j in range(len(header))]
        lines = []

        def line(cells):
            first = cells[0].ljust(widths[0])
            rest = [c.rjust(w) for c, w in zip(cells[1:], widths[1:])]
            return "  ".join([first] + rest).rstrip()

        lines.append(line(header))
        lines.append("-" * len(lines[0]))
        prev = None
        for (kind, _, _), cells in zip(self.rows(), body):
            if kind == "overall" and prev != "overall":
                lines.append("=" * len(lines[0]))
            lines.append(line(cells))
            if kind == "class":
                lines.append("-" * len(lines[0]))
            prev = kind
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["kind", "label", "column", "bd_rate_percent"])
        for kind, label, vals in self.rows():
            for col, v in zip(self.columns, vals):
                w.writerow([kind, label, col, "" if v is None else f"{v:.6f}"])
        return buf.getvalue()


def table_from_manifest(path) -> BdTable:
    """Compute a report from a CSV manifest.

    Columns: ``sequence,column,anchor,test`` plus optional ``qp_range``
    (``low``, ``high`` or empty), ``codec`` (default VVC) and ``class``.
    Curve paths are relative to the manifest.
    """
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        need = {"sequence", "column", "anchor", "test"}
        if reader.fieldnames is None or not need <= set(reader.fieldnames):
            raise CurveParseError(path, 1, f"manifest header must include {sorted(need)}")
        rows = list(reader)
    columns, values, classes = [], {}, {}
    for lineno, row in enumerate(rows, start=2):
        seq, col = row["sequence"].strip(), row["column"].strip()
        if not seq or not col:
            raise CurveParseError(path, lineno, "empty sequence or column name")
        if (seq, col) in values:
            raise CurveParseError(path, lineno, f"duplicate entry for {seq} / {col}")
        try:
            anchor = curve_from_csv(path.parent / row["anchor"].strip())
            test = curve_from_csv(path.parent / row["test"].strip())
            rng = (row.get("qp_range") or "").strip()
            if rng:
                codec = (row.get("codec") or "VVC").strip()
                anchor, test = qp_subrange(anchor, rng, codec), qp_subrange(test, rng, codec)
            values[(seq, col)] = bd_rate(anchor, test)
        except CurveError as exc:
            raise CurveError(f"{path}:{lineno}: {exc}") from None
        if col not in columns:
            columns.append(col)
        classes[seq] = (row.get("class") or "").strip() or sequence_class(seq)
    if not values:
        raise CurveError(f"{path}: manifest lists no curve pairs")
    return BdTable(columns, values, classes)
