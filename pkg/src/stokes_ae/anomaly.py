"""Reconstruction-error heatmaps, observational-noise statistics and anomaly reports.

All quantities are computed in normalized space (the model's input space).
Pixels with constant Stokes I cannot be normalized; they are *excluded* and
carry NaN in every heatmap.
"""
from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import AllExcluded, IoFailure, ShapeMismatch
from .nn.model import AutoencoderModel, model_forward
from .spectra import SPMap, normalize_batch

# samples per inference call
INFER_CHUNK = 1024


@dataclass
class Heatmap:
    values: np.ndarray  # (height, width); NaN marks excluded pixels

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ShapeMismatch("heatmap must be 2-D")
        ok = self.values[~np.isnan(self.values)]
        if np.any(ok < 0) or not np.all(np.isfinite(ok)):
            raise ValueError("heatmap values must be finite and non-negative")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def excluded(self) -> np.ndarray:
        return np.isnan(self.values)

    @property
    def excluded_count(self) -> int:
        return int(self.excluded.sum())


@dataclass
class MapStats:
    sigma_obs_i: float
    sigma_obs_v: float
    mu_rmse_i: float
    mu_rmse_v: float

    def to_dict(self) -> dict:
        return {"sigma_obs_i": self.sigma_obs_i, "sigma_obs_v": self.sigma_obs_v,
                "mu_rmse_i": self.mu_rmse_i, "mu_rmse_v": self.mu_rmse_v}

    @classmethod
    def from_dict(cls, d: dict) -> "MapStats":
        return cls(*(float(d[k]) for k in ("sigma_obs_i", "sigma_obs_v", "mu_rmse_i", "mu_rmse_v")))

    @property
    def below_noise(self) -> bool:
        """True when both mean reconstruction errors sit under the observational errors."""
        return self.mu_rmse_i < self.sigma_obs_i and self.mu_rmse_v < self.sigma_obs_v


@dataclass
class Reconstruction:
    """Normalized input and model output for every pixel of a map, row-major."""

    width: int
    height: int
    x: np.ndarray      # (N, 2, n)
    x_hat: np.ndarray  # (N, 2, n); NaN rows for excluded pixels
    valid: np.ndarray  # (N,) bool

    def index(self, x: int, y: int) -> int:
        return y * self.width + x


def reconstruct_map(m: SPMap, model: AutoencoderModel, mode: str = "per-spectrum") -> Reconstruction:
    if model.n_points != m.grid.n_points:
        raise ShapeMismatch(f"model expects {model.n_points} wavelengths, map has {m.grid.n_points}")
    xn, _, valid = normalize_batch(m.stacked(), mode)
    x_hat = np.full_like(xn, np.nan)
    idx = np.flatnonzero(valid)
    for k in range(0, idx.size, INFER_CHUNK):
        sel = idx[k:k + INFER_CHUNK]
        x_hat[sel] = model_forward(model, xn[sel], keep_cache=False)[0]
    return Reconstruction(m.width, m.height, xn, x_hat, valid)


def rmse_rows(x: np.ndarray, x_hat: np.ndarray) -> np.ndarray:
    """Per-sample, per-channel RMSE over wavelength: ``(N, 2, n) -> (N, 2)``."""
    return np.sqrt(np.mean((x - x_hat) ** 2, axis=-1))


def heatmaps_from(rec: Reconstruction) -> tuple[Heatmap, Heatmap]:
    r = rmse_rows(rec.x, rec.x_hat)
    r[~rec.valid] = np.nan
    grid = r.reshape(rec.height, rec.width, 2)
    return Heatmap(grid[..., 0].copy()), Heatmap(grid[..., 1].copy())


def rmse_per_pixel(m: SPMap, model: AutoencoderModel, mode: str = "per-spectrum") -> tuple[Heatmap, Heatmap]:
    """RMSE_I and RMSE_V heatmaps of ``model`` on ``m``."""
    return heatmaps_from(reconstruct_map(m, model, mode))


def sigma_obs(m: SPMap, mode: str = "per-spectrum") -> tuple[float, float]:
    """Mean over pixels of the population std of each normalized channel's continuum window."""
    xn, _, valid = normalize_batch(m.stacked(), mode)
    if not valid.any():
        raise AllExcluded("every pixel is degenerate")
    sd = xn[valid][:, :, m.grid.continuum_slice].std(axis=-1)
    return float(sd[:, 0].mean()), float(sd[:, 1].mean())


def map_stats(heatmaps: tuple[Heatmap, Heatmap], sigma: tuple[float, float]) -> MapStats:
    hi, hv = heatmaps
    if hi.excluded.all():
        raise AllExcluded("every pixel is excluded")
    return MapStats(float(sigma[0]), float(sigma[1]),
                    float(np.nanmean(hi.values)), float(np.nanmean(hv.values)))


def _ranked(h: Heatmap) -> np.ndarray:
    """Row-major flat indices of non-excluded pixels, highest value first; ties by index."""
    flat = h.values.ravel()
    idx = np.flatnonzero(~np.isnan(flat))
    order = np.lexsort((idx, -flat[idx]))
    return idx[order]


def locate_h_pixel(hv: Heatmap) -> tuple[int, int]:
    """``(x, y)`` of the largest value; ties go to the smallest row-major index."""
    ranked = _ranked(hv)
    if ranked.size == 0:
        raise AllExcluded("every pixel is excluded")
    y, x = divmod(int(ranked[0]), hv.width)
    return x, y


def default_k(n_pixels: int) -> int:
    return math.ceil(0.01 * n_pixels)


def top_k(h: Heatmap, k: int | None = None) -> list[tuple[int, int, float]]:
    """The ``k`` highest pixels as ``(x, y, score)``; ``k`` defaults to 1% of the map."""
    if k is None:
        k = default_k(h.width * h.height)
    if k < 0:
        raise ValueError("k must be >= 0")
    out = []
    for flat in _ranked(h)[:k]:
        y, x = divmod(int(flat), h.width)
        out.append((x, y, float(h.values[y, x])))
    return out


@dataclass
class Neighborhood:
    """Heatmap window and spectra grid around a centre pixel.

    ``heat_origin`` is the map coordinate of window cell (0, 0); a window of
    even size ``s`` places the centre at cell ``s // 2``. Cells outside the
    map hold NaN (heatmap) or ``None`` (grid) and set the clipped flags.
    """

    center: tuple[int, int]
    heat_origin: tuple[int, int]
    heat_i: np.ndarray
    heat_v: np.ndarray
    heat_clipped: bool
    grid_origin: tuple[int, int]
    grid: list  # rows of cells; each cell None or a dict with x, y, i, i_hat, v, v_hat
    grid_clipped: bool


def extract_neighborhood(rec: Reconstruction, heatmaps: tuple[Heatmap, Heatmap], center: tuple[int, int],
                         heat_size: int = 10, grid_size: int = 3) -> Neighborhood:
    cx, cy = center
    if not (0 <= cx < rec.width and 0 <= cy < rec.height):
        raise IndexError(f"centre {center} outside {rec.width}x{rec.height} map")
    hx0, hy0 = cx - heat_size // 2, cy - heat_size // 2
    heat = []
    clipped = False
    for h in heatmaps:
        win = np.full((heat_size, heat_size), np.nan)
        for r in range(heat_size):
            for c in range(heat_size):
                x, y = hx0 + c, hy0 + r
                if 0 <= x < rec.width and 0 <= y < rec.height:
                    win[r, c] = h.values[y, x]
                else:
                    clipped = True
        heat.append(win)
    gx0, gy0 = cx - grid_size // 2, cy - grid_size // 2
    grid, grid_clipped = [], False
    for r in range(grid_size):
        row = []
        for c in range(grid_size):
            x, y = gx0 + c, gy0 + r
            if 0 <= x < rec.width and 0 <= y < rec.height:
                k = rec.index(x, y)
                row.append({"x": x, "y": y, "valid": bool(rec.valid[k]),
                            "i": rec.x[k, 0].copy(), "i_hat": rec.x_hat[k, 0].copy(),
                            "v": rec.x[k, 1].copy(), "v_hat": rec.x_hat[k, 1].copy()})
            else:
                row.append(None)
                grid_clipped = True
        grid.append(row)
    return Neighborhood(center, (hx0, hy0), heat[0], heat[1], clipped, (gx0, gy0), grid, grid_clipped)


@dataclass
class AnomalyReport:
    heatmap_i: Heatmap
    heatmap_v: Heatmap
    stats: MapStats
    h_pixel: tuple[int, int]
    top_k: list = field(default_factory=list)
    neighborhood: Neighborhood | None = None

    @property
    def excluded_count(self) -> int:
        return self.heatmap_v.excluded_count

    def to_dict(self) -> dict:
        return {"stats": self.stats.to_dict(),
                "h_pixel": list(self.h_pixel),
                "top_k": [{"rank": r, "x": x, "y": y, "score": s} for r, (x, y, s) in enumerate(self.top_k, 1)],
                "excluded_count": self.excluded_count}


def detect(m: SPMap, model: AutoencoderModel, k: int | None = None, mode: str = "per-spectrum") -> AnomalyReport:
    """Run the full inference pipeline on one map."""
    rec = reconstruct_map(m, model, mode)
    hi, hv = heatmaps_from(rec)
    stats = map_stats((hi, hv), sigma_obs(m, mode))
    h_pixel = locate_h_pixel(hv)
    ranked = top_k(hv, k)
    if ranked and ranked[0][:2] != h_pixel:
        raise AssertionError("top_k disagrees with h_pixel")
    hood = extract_neighborhood(rec, (hi, hv), h_pixel)
    return AnomalyReport(hi, hv, stats, h_pixel, ranked, hood)


# -- file output -------------------------------------------------------------------

def pgm_scale(values: np.ndarray) -> tuple[float, float]:
    ok = values[~np.isnan(values)]
    if ok.size == 0:
        return 0.0, 0.0
    return float(ok.min()), float(ok.max())


def to_pgm(values: np.ndarray) -> tuple[bytes, dict]:
    """16-bit binary PGM of min-max scaled values; excluded pixels map to 0."""
    lo, hi = pgm_scale(values)
    span = hi - lo
    scaled = np.zeros(values.shape)
    ok = ~np.isnan(values)
    if span > 0:
        scaled[ok] = np.rint((values[ok] - lo) / span * 65535.0)
    head = f"P5\n# min={lo!r} max={hi!r}\n{values.shape[1]} {values.shape[0]}\n65535\n".encode("ascii")
    return head + scaled.astype(">u2").tobytes(), {"min": lo, "max": hi, "maxval": 65535}


def read_pgm(buf: bytes) -> np.ndarray:
    """Decode a binary PGM (8- or 16-bit) into an integer array."""
    tokens, pos = [], 0
    while len(tokens) < 4:
        while buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            pos = buf.index(b"\n", pos) + 1
            continue
        end = pos
        while not buf[end:end + 1].isspace():
            end += 1
        tokens.append(buf[pos:end].decode("ascii"))
        pos = end
    if tokens[0] != "P5":
        raise ValueError("not a binary PGM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    pos += 1
    dtype = ">u2" if maxval > 255 else "u1"
    return np.frombuffer(buf, dtype=dtype, count=w * h, offset=pos).reshape(h, w).astype(np.int64)


def _write(path: Path, data) -> None:
    tmp = path.with_name(path.name + ".tmp")
    try:
        if isinstance(data, bytes):
            tmp.write_bytes(data)
        else:
            tmp.write_text(data)
        os.replace(tmp, path)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def _heatmap_csv(values: np.ndarray) -> str:
    return "\n".join(",".join(repr(float(v)) for v in row) for row in values) + "\n"


def _rows_csv(header: list, rows) -> str:
    import io

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def emit_report(r: AnomalyReport, out_dir) -> list[Path]:
    """Write PGM/CSV heatmaps, ``report.json`` and neighborhood CSVs; returns the paths."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoFailure(f"cannot create {out}: {exc}") from exc
    written = []
    doc = r.to_dict()
    doc["pgm_scale"] = {}
    for name, h in (("i", r.heatmap_i), ("v", r.heatmap_v)):
        pgm, scale = to_pgm(h.values)
        doc["pgm_scale"][name] = scale
        for fname, data in ((f"heatmap_{name}.pgm", pgm), (f"heatmap_{name}.csv", _heatmap_csv(h.values))):
            _write(out / fname, data)
            written.append(out / fname)
    hood = r.neighborhood
    if hood is not None:
        doc["neighborhood"] = {"heat_origin": list(hood.heat_origin), "heat_clipped": hood.heat_clipped,
                               "grid_origin": list(hood.grid_origin), "grid_clipped": hood.grid_clipped}
        rows = []
        for rr in range(hood.heat_v.shape[0]):
            for cc in range(hood.heat_v.shape[1]):
                x, y = hood.heat_origin[0] + cc, hood.heat_origin[1] + rr
                rows.append([rr, cc, x, y, repr(float(hood.heat_i[rr, cc])), repr(float(hood.heat_v[rr, cc])),
                             int(not np.isnan(hood.heat_v[rr, cc]))])
        _write(out / "neighborhood_heatmap.csv",
               _rows_csv(["row", "col", "x", "y", "rmse_i", "rmse_v", "present"], rows))
        rows = []
        for rr, line in enumerate(hood.grid):
            for cc, cell in enumerate(line):
                if cell is None:
                    continue
                for k in range(cell["v"].size):
                    rows.append([rr, cc, cell["x"], cell["y"], k,
                                 *(repr(float(cell[q][k])) for q in ("i", "i_hat", "v", "v_hat")),
                                 repr(float(cell["v"][k] - cell["v_hat"][k]))])
        _write(out / "neighborhood_spectra.csv",
               _rows_csv(["row", "col", "x", "y", "wavelength_index", "i", "i_hat", "v", "v_hat", "residual_v"], rows))
        written += [out / "neighborhood_heatmap.csv", out / "neighborhood_spectra.csv"]
    _write(out / "report.json", json.dumps(doc, indent=2) + "\n")
    written.append(out / "report.json")
    return written


# -- scoring against ground truth ----------------------------------------------------

@dataclass
class Score:
    recall: float
    precision: float
    hits: int
    n_truth: int
    n_reported: int
    vacuous: bool  # no ground-truth anomalies; recall defined as 1.0

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def score(reported, truth) -> Score:
    """Recall and precision of reported pixels against ground-truth pixels.

    Both arguments are iterables of ``(x, y)`` pairs or mappings with
    ``x``/``y`` keys; duplicates count once.
    """
    def coords(items):
        out = set()
        for it in items:
            out.add((int(it["x"]), int(it["y"])) if isinstance(it, dict) else (int(it[0]), int(it[1])))
        return out

    rep, tru = coords(reported), coords(truth)
    hits = len(rep & tru)
    vacuous = not tru
    recall = 1.0 if vacuous else hits / len(tru)
    precision = hits / len(rep) if rep else (1.0 if vacuous else 0.0)
    return Score(recall, precision, hits, len(tru), len(rep), vacuous)
