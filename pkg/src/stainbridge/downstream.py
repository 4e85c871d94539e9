"""Cell-level comparison of real and generated mIHC images.

Pipeline per image: detect nuclei on DAPI, take the mean of every marker
over each nucleus mask, threshold CD3 and panCK per image with Otsu over the
per-cell means, and report the positive-cell proportion. Across a test set
the real/generated proportions are compared with the mean absolute error
ratio and Bland-Altman statistics.

Detections can come from the built-in blob detector or from an external
segmentation (for example StarDist) supplied as a CSV with run-length
encoded masks; see :func:`read_detections_csv`.
"""
from __future__ import annotations

import csv
import io
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import numpy as np
from scipy import ndimage

from stainbridge import MIHC_CHANNELS
from stainbridge.errors import InputValidationError, NoThreshold, UndefinedProportion
from stainbridge.imageio import atomic_write_text

COMPARED_MARKERS = ("CD3", "panCK")


@dataclass
class CellRecord:
    cell_id: int
    centroid: tuple[float, float]  # (x, y) in pixels
    pixel_count: int
    coords: np.ndarray = field(repr=False)  # (N, 2) int (row, col)
    mean_expression: dict[str, float] = field(default_factory=dict)
    positivity: dict[str, bool] = field(default_factory=dict)


@dataclass
class DetectorParams:
    sigma: float = 2.0
    min_cell_area: int = 20
    max_cell_area: int = 2000
    bins: int = 256


class Detector(Protocol):
    def __call__(self, mihc: np.ndarray, sample_id: str | None = None) -> list[CellRecord]: ...


# -- Otsu ------------------------------------------------------------------

def otsu_threshold(values, bins: int = 256) -> float:
    """Histogram Otsu threshold; positives are ``value > threshold``.

    The histogram spans [min, max] in ``bins`` equal bins and candidate
    thresholds are the interior bin edges. Between-class variance is computed
    from bin centres; among equal maxima the smallest threshold wins. Bins are
    right-closed so that a value lying on the chosen edge is a negative,
    consistent with the strict comparison.
    """
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise NoThreshold("no values")
    lo, hi = float(v.min()), float(v.max())
    if lo == hi:
        raise NoThreshold(f"all {v.size} values equal {lo}")
    if bins < 2:
        raise InputValidationError("bins must be >= 2")
    edges = np.linspace(lo, hi, bins + 1)
    idx = np.searchsorted(edges[1:-1], v, side="left")
    hist = np.bincount(idx, minlength=bins).astype(np.float64)
    centers = (edges[:-1] + edges[1:]) / 2.0

    n0 = np.cumsum(hist)[:-1]            # class sizes for thresholds edges[1..bins-1]
    s0 = np.cumsum(hist * centers)[:-1]
    total_n, total_s = hist.sum(), (hist * centers).sum()
    n1, s1 = total_n - n0, total_s - s0
    valid = (n0 > 0) & (n1 > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        mu0, mu1 = s0 / n0, s1 / n1
        between = (n0 / total_n) * (n1 / total_n) * (mu0 - mu1) ** 2
    between = np.where(valid, between, -np.inf)
    return float(edges[1 + int(np.argmax(between))])


# -- detection -------------------------------------------------------------

def _records_from_labels(labels: np.ndarray, params: DetectorParams) -> list[CellRecord]:
    cells = []
    for i, sl in enumerate(ndimage.find_objects(labels), start=1):
        if sl is None:
            continue
        rr, cc = np.nonzero(labels[sl] == i)
        n = rr.size
        if not params.min_cell_area <= n <= params.max_cell_area:
            continue
        rr = rr + sl[0].start
        cc = cc + sl[1].start
        cells.append(CellRecord(
            cell_id=len(cells) + 1,
            centroid=(float(cc.mean()), float(rr.mean())),
            pixel_count=int(n),
            coords=np.stack([rr, cc], axis=1),
        ))
    return cells


class BlobDetector:
    """Baseline nucleus detector: smooth DAPI, global Otsu, connected components.

    Touching nuclei are not split.
    """

    def __init__(self, params: DetectorParams | None = None, dapi_channel: int = 0):
        self.params = params or DetectorParams()
        self.dapi_channel = dapi_channel

    def __call__(self, mihc: np.ndarray, sample_id: str | None = None) -> list[CellRecord]:
        if mihc.ndim != 3 or mihc.shape[2] <= self.dapi_channel:
            raise InputValidationError(f"image {mihc.shape} lacks a DAPI channel")
        dapi = ndimage.gaussian_filter(mihc[..., self.dapi_channel].astype(np.float64),
                                       self.params.sigma)
        try:
            t = otsu_threshold(dapi, self.params.bins)
        except NoThreshold:
            return []
        labels, _ = ndimage.label(dapi > t)
        return _records_from_labels(labels, self.params)


def encode_rle(coords: np.ndarray, shape: tuple[int, int]) -> str:
    """Row-major, 0-based ``"start length start length ..."`` run-length code."""
    flat = np.zeros(shape[0] * shape[1], dtype=bool)
    flat[coords[:, 0] * shape[1] + coords[:, 1]] = True
    padded = np.concatenate([[False], flat, [False]])
    changes = np.flatnonzero(padded[1:] != padded[:-1])
    starts, ends = changes[0::2], changes[1::2]
    return " ".join(f"{s} {e - s}" for s, e in zip(starts, ends))


def decode_rle(rle: str, shape: tuple[int, int]) -> np.ndarray:
    nums = [int(t) for t in rle.split()]
    if len(nums) % 2:
        raise InputValidationError(f"run-length code has an odd number of fields: {rle[:40]!r}")
    flat = []
    for start, length in zip(nums[0::2], nums[1::2]):
        flat.extend(range(start, start + length))
    flat = np.asarray(flat, dtype=np.int64)
    if flat.size and (flat.min() < 0 or flat.max() >= shape[0] * shape[1]):
        raise InputValidationError(f"run-length mask outside a {shape} image")
    return np.stack([flat // shape[1], flat % shape[1]], axis=1)


@dataclass
class ExternalDetection:
    cell_id: int
    centroid: tuple[float, float]
    rle: str


def read_detections_csv(path) -> dict[str, list[ExternalDetection]]:
    """Load external detections.

    Columns: ``sample_id, cell_id, centroid_x, centroid_y, mask_rle``. A
    ``sample_id`` of ``real/<name>`` or ``generated/<name>`` applies to one
    image of the pair; a bare ``<name>`` applies to both.
    """
    out: dict[str, list[ExternalDetection]] = {}
    with open(path, newline="") as fh:
        for line, row in enumerate(csv.DictReader(fh), start=2):
            try:
                det = ExternalDetection(
                    int(row["cell_id"]), (float(row["centroid_x"]), float(row["centroid_y"])),
                    row["mask_rle"],
                )
            except (KeyError, ValueError) as exc:
                raise InputValidationError(f"{path}:{line}: bad detection row ({exc})") from exc
            out.setdefault(row["sample_id"], []).append(det)
    return out


class ExternalDetector:
    """Serves pre-computed detections keyed by sample id."""

    def __init__(self, detections: dict[str, list[ExternalDetection]]):
        self.detections = detections

    def __call__(self, mihc: np.ndarray, sample_id: str | None = None) -> list[CellRecord]:
        if sample_id is None:
            raise InputValidationError("external detections need a sample id")
        dets = self.detections.get(sample_id)
        if dets is None and "/" in sample_id:
            dets = self.detections.get(sample_id.split("/", 1)[1])
        cells = []
        for d in dets or []:
            coords = decode_rle(d.rle, mihc.shape[:2])
            if coords.size == 0:
                raise InputValidationError(f"{sample_id}: cell {d.cell_id} has an empty mask")
            cells.append(CellRecord(d.cell_id, d.centroid, len(coords), coords))
        return cells


def detect_cells(mihc: np.ndarray, detector: Detector | None = None,
                 sample_id: str | None = None) -> list[CellRecord]:
    return (detector or BlobDetector())(mihc, sample_id)


# -- quantification --------------------------------------------------------

def per_cell_mean_expression(cells: list[CellRecord], mihc: np.ndarray,
                             channels: Sequence[str] = MIHC_CHANNELS) -> list[CellRecord]:
    """Fill ``mean_expression`` for each cell; returns the same list."""
    h, w = mihc.shape[:2]
    for cell in cells:
        if cell.coords.size == 0:
            raise InputValidationError(f"cell {cell.cell_id} has an empty mask")
        rr, cc = cell.coords[:, 0], cell.coords[:, 1]
        if rr.min() < 0 or cc.min() < 0 or rr.max() >= h or cc.max() >= w:
            raise InputValidationError(f"cell {cell.cell_id} mask exceeds image bounds {h}x{w}")
        values = mihc[rr, cc].astype(np.float64)
        cell.mean_expression = {ch: float(values[:, i].mean()) for i, ch in enumerate(channels)}
    return cells


def call_positivity(cells: list[CellRecord], markers: Sequence[str] = COMPARED_MARKERS,
                    bins: int = 256) -> dict[str, float | None]:
    """Per-image Otsu positivity over per-cell means.

    Returns the threshold per marker; ``None`` marks a NoThreshold population,
    whose cells are all called negative. DAPI is positive by construction.
    """
    thresholds: dict[str, float | None] = {}
    for marker in markers:
        values = [c.mean_expression[marker] for c in cells]
        try:
            t = otsu_threshold(values, bins)
        except NoThreshold:
            t = None
        thresholds[marker] = t
        for c in cells:
            c.positivity[marker] = t is not None and c.mean_expression[marker] > t
    for c in cells:
        c.positivity["DAPI"] = True
    return thresholds


def positive_proportion(cells: list[CellRecord], marker: str) -> float:
    if not cells:
        raise UndefinedProportion(f"no cells to compute a {marker} proportion")
    return sum(bool(c.positivity.get(marker)) for c in cells) / len(cells)


@dataclass
class ImageAnalysis:
    sample_id: str
    cells: list[CellRecord]
    thresholds: dict[str, float | None]
    shape: tuple[int, int]

    @property
    def flagged(self) -> list[str]:
        return [m for m, t in self.thresholds.items() if t is None]


def analyze_image(mihc: np.ndarray, sample_id: str, detector: Detector | None = None,
                  markers: Sequence[str] = COMPARED_MARKERS, bins: int = 256) -> ImageAnalysis:
    cells = detect_cells(mihc, detector, sample_id)
    per_cell_mean_expression(cells, mihc)
    thresholds = call_positivity(cells, markers, bins) if cells else dict.fromkeys(markers)
    return ImageAnalysis(sample_id, cells, thresholds, mihc.shape[:2])


# -- agreement -------------------------------------------------------------

@dataclass
class ProportionRecord:
    sample_id: str
    marker: str
    p_real: float
    p_generated: float
    n_cells_real: int
    n_cells_generated: int


@dataclass
class AgreementStats:
    mae_ratio: float
    bias: float
    sd: float
    loa_low: float
    loa_high: float
    n: int
    excluded_samples: int


def mae_ratio(records: Sequence[ProportionRecord]) -> AgreementStats:
    """Mean of ``|p_real - p_gen| / p_real`` plus Bland-Altman on ``p_gen - p_real``.

    Samples with ``p_real == 0`` are left out of the ratio and counted in
    ``excluded_samples``; they still contribute to the Bland-Altman terms.
    """
    if not records:
        raise InputValidationError("no proportion records")
    kept = [r for r in records if r.p_real != 0]
    if not kept:
        raise InputValidationError(f"all {len(records)} samples have p_real == 0")
    ratio = sum(abs((r.p_real - r.p_generated) / r.p_real) for r in kept) / len(kept)
    diffs = np.array([r.p_generated - r.p_real for r in records], dtype=np.float64)
    bias = float(diffs.mean())
    sd = float(diffs.std(ddof=1)) if diffs.size > 1 else 0.0
    return AgreementStats(
        mae_ratio=float(ratio), bias=bias, sd=sd,
        loa_low=bias - 1.96 * sd, loa_high=bias + 1.96 * sd,
        n=len(kept), excluded_samples=len(records) - len(kept),
    )


@dataclass
class DownstreamResult:
    analyses: list[tuple[ImageAnalysis, ImageAnalysis]]  # (real, generated)
    records: list[ProportionRecord]
    undefined: dict[str, list[str]]  # marker -> sample ids without cells on either side
    markers: Sequence[str] = COMPARED_MARKERS

    def agreement(self) -> dict[str, AgreementStats | None]:
        out = {}
        for m in self.markers:
            recs = [r for r in self.records if r.marker == m]
            try:
                out[m] = mae_ratio(recs)
            except InputValidationError:
                out[m] = None
        return out

    def cells_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["sample_id", "source", "cell_id", "centroid_x", "centroid_y", "pixel_count",
                    *[f"mean_{c}" for c in MIHC_CHANNELS],
                    *[f"positive_{m}" for m in self.markers], "mask_rle"])
        for real, gen in self.analyses:
            for source, an in (("real", real), ("generated", gen)):
                for c in an.cells:
                    w.writerow([an.sample_id, source, c.cell_id, f"{c.centroid[0]:.3f}",
                                f"{c.centroid[1]:.3f}", c.pixel_count,
                                *[f"{c.mean_expression[ch]:.4f}" for ch in MIHC_CHANNELS],
                                *[int(c.positivity[m]) for m in self.markers],
                                encode_rle(c.coords, an.shape)])
        return buf.getvalue()

    def proportions_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["sample_id", "marker", "p_real", "p_generated", "n_cells_real",
                    "n_cells_generated", "mean", "difference"])
        for r in self.records:
            w.writerow([r.sample_id, r.marker, repr(r.p_real), repr(r.p_generated),
                        r.n_cells_real, r.n_cells_generated,
                        repr((r.p_real + r.p_generated) / 2), repr(r.p_generated - r.p_real)])
        return buf.getvalue()

    def summary(self) -> dict:
        stats = self.agreement()
        flagged = {
            m: sorted({a.sample_id for pair in self.analyses for a in pair if m in a.flagged})
            for m in self.markers
        }
        return {
            m: {
                **(vars(stats[m]) if stats[m] is not None else {"mae_ratio": None}),
                "undefined_samples": len(self.undefined.get(m, [])),
                "no_threshold_samples": flagged[m],
            }
            for m in self.markers
        }

    def write(self, out_dir, plot: bool = False) -> Path:
        out_dir = Path(out_dir)
        atomic_write_text(out_dir / "cells.csv", self.cells_csv())
        atomic_write_text(out_dir / "proportions.csv", self.proportions_csv())
        atomic_write_text(out_dir / "agreement.json", json.dumps(self.summary(), indent=2))
        if plot:
            plot_agreement(self, out_dir)
        return out_dir


def compare_pair(sample_id: str, real: np.ndarray, generated: np.ndarray,
                 detector: Detector | None = None, markers: Sequence[str] = COMPARED_MARKERS,
                 bins: int = 256) -> tuple[ImageAnalysis, ImageAnalysis, list[ProportionRecord]]:
    if real.shape != generated.shape:
        raise InputValidationError(f"{sample_id}: real {real.shape} vs generated {generated.shape}")
    a_real = analyze_image(real, f"real/{sample_id}", detector, markers, bins)
    a_gen = analyze_image(generated, f"generated/{sample_id}", detector, markers, bins)
    a_real.sample_id = a_gen.sample_id = sample_id
    records = []
    for m in markers:
        try:
            p_r = positive_proportion(a_real.cells, m)
            p_g = positive_proportion(a_gen.cells, m)
        except UndefinedProportion:
            continue
        records.append(ProportionRecord(sample_id, m, p_r, p_g, len(a_real.cells), len(a_gen.cells)))
    return a_real, a_gen, records


def run_downstream(pairs: Iterable, detector: Detector | None = None,
                   markers: Sequence[str] = COMPARED_MARKERS, bins: int = 256,
                   workers: int = 1) -> DownstreamResult:
    """Analyse ``(sample_id, real, generated)`` triples (arrays or loader callables)."""
    def run(item):
        sid, real, gen = item
        real = real() if callable(real) else real
        gen = gen() if callable(gen) else gen
        return compare_pair(sid, real, gen, detector, markers, bins)

    items = list(pairs)
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(run, items))
    else:
        results = [run(it) for it in items]
    analyses, records = [], []
    undefined: dict[str, list[str]] = {m: [] for m in markers}
    for (sid, _, _), (a_real, a_gen, recs) in zip(items, results):
        analyses.append((a_real, a_gen))
        records.extend(recs)
        got = {r.marker for r in recs}
        for m in markers:
            if m not in got:
                undefined[m].append(sid)
    return DownstreamResult(analyses, records, undefined, markers)


def plot_agreement(result: DownstreamResult, out_dir) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    stats = result.agreement()
    for m in result.markers:
        recs = [r for r in result.records if r.marker == m]
        if not recs:
            continue
        real = np.array([r.p_real for r in recs])
        gen = np.array([r.p_generated for r in recs])
        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8, 3.5))
        ax1.scatter(real, gen, s=8)
        ax1.plot([0, 1], [0, 1], "k--", lw=0.8)
        ax1.set_xlabel("real"); ax1.set_ylabel("generated"); ax1.set_title(f"{m} positive proportion")
        ax2.scatter((real + gen) / 2, gen - real, s=8)
        s = stats[m]
        if s is not None:
            for y, style in ((s.bias, "-"), (s.loa_low, "--"), (s.loa_high, "--")):
                ax2.axhline(y, color="k", ls=style, lw=0.8)
        ax2.set_xlabel("mean"); ax2.set_ylabel("generated - real"); ax2.set_title("Bland-Altman")
        fig.tight_layout()
        fig.savefig(Path(out_dir) / f"agreement_{m}.png", dpi=100)
        plt.close(fig)
