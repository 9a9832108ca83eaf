"""Spectra and SP-map value types, per-spectrum normalization and FOV cropping."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from .errors import DegenerateSpectrum, OutOfBounds, ShapeMismatch

EPS_DEGENERATE = 1e-12

# Fe I 630.15 / 630.25 nm pair, in Angstrom
LINE_CENTERS_A = (6301.5, 6302.5)


@dataclass(frozen=True)
class WavelengthGrid:
    """Uniform wavelength sampling.

    Wavelengths are in Angstrom. ``start`` is the wavelength of index 0; by
    default the grid is centered on the midpoint of the two line centers.
    ``continuum_window`` is an inclusive index range.
    """

    n_points: int = 112
    dispersion: float = 0.021549
    line_centers: tuple[float, float] = LINE_CENTERS_A
    continuum_window: tuple[int, int] = (0, 15)
    start: float | None = None

    def __post_init__(self):
        if self.n_points < 32:
            raise ValueError(f"n_points must be >= 32, got {self.n_points}")
        if not self.dispersion > 0:
            raise ValueError("dispersion must be positive")
        lo, hi = self.continuum_window
        if not 0 <= lo <= hi < self.n_points:
            raise ValueError(f"continuum window {self.continuum_window} outside [0, {self.n_points})")
        if self.start is None:
            mid = 0.5 * (self.line_centers[0] + self.line_centers[1])
            object.__setattr__(self, "start", mid - 0.5 * (self.n_points - 1) * self.dispersion)

    @property
    def wavelengths(self) -> np.ndarray:
        return self.start + self.dispersion * np.arange(self.n_points)

    @property
    def continuum_slice(self) -> slice:
        return slice(self.continuum_window[0], self.continuum_window[1] + 1)

    def to_dict(self) -> dict:
        return {
            "n_points": self.n_points,
            "dispersion": self.dispersion,
            "line_centers": list(self.line_centers),
            "continuum_window": list(self.continuum_window),
            "start": self.start,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "WavelengthGrid":
        return cls(
            n_points=int(d["n_points"]),
            dispersion=float(d["dispersion"]),
            line_centers=tuple(float(c) for c in d["line_centers"]),
            continuum_window=tuple(int(c) for c in d["continuum_window"]),
            start=float(d["start"]),
        )


@dataclass(frozen=True, eq=False)
class StokesSpectrum:
    i: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        i = np.asarray(self.i, dtype=np.float64)
        v = np.asarray(self.v, dtype=np.float64)
        if i.ndim != 1 or i.shape != v.shape:
            raise ShapeMismatch(f"I and V must be equal-length vectors, got {i.shape} and {v.shape}")
        if not (np.all(np.isfinite(i)) and np.all(np.isfinite(v))):
            raise ValueError("spectrum contains non-finite values")
        object.__setattr__(self, "i", i)
        object.__setattr__(self, "v", v)

    def __len__(self) -> int:
        return self.i.size

    def stacked(self) -> np.ndarray:
        """Channels-first ``(2, n)`` array: row 0 is I, row 1 is V."""
        return np.stack([self.i, self.v])


class ObsMode(str, Enum):
    QT = "QT"
    FL = "FL"


# Table 1 observing setups: (slit scale arcsec/pix, integration time s, slit step)
MODE_DEFAULTS = {
    ObsMode.QT: (0.317, 1.6, 1),
    ObsMode.FL: (0.317, 0.8, 2),
}


@dataclass(frozen=True)
class MapMetadata:
    observed_datetime: str = "00000000_000000"
    obs_mode: ObsMode = ObsMode.QT
    slit_scale: float = 0.317
    integration_time: float = 1.6
    slit_step: int = 1

    def __post_init__(self):
        object.__setattr__(self, "obs_mode", ObsMode(self.obs_mode))
        if not self.integration_time > 0:
            raise ValueError("integration_time must be positive")
        if self.slit_step < 1:
            raise ValueError("slit_step must be >= 1")

    @classmethod
    def for_mode(cls, mode: ObsMode | str, observed_datetime: str = "00000000_000000") -> "MapMetadata":
        mode = ObsMode(mode)
        scale, t, step = MODE_DEFAULTS[mode]
        return cls(observed_datetime, mode, scale, t, step)

    def to_dict(self) -> dict:
        return {
            "observed_datetime": self.observed_datetime,
            "obs_mode": self.obs_mode.value,
            "slit_scale": self.slit_scale,
            "integration_time": self.integration_time,
            "slit_step": self.slit_step,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MapMetadata":
        return cls(
            observed_datetime=str(d["observed_datetime"]),
            obs_mode=ObsMode(d["obs_mode"]),
            slit_scale=float(d["slit_scale"]),
            integration_time=float(d["integration_time"]),
            slit_step=int(d["slit_step"]),
        )


@dataclass(frozen=True, eq=False)
class SPMap:
    """Spectro-polarimetric map.

    ``i`` and ``v`` have shape ``(height, width, n_points)``; pixel ``(x, y)``
    is ``[y, x]`` and the flat row-major index is ``y * width + x``.
    """

    i: np.ndarray
    v: np.ndarray
    metadata: MapMetadata = field(default_factory=MapMetadata)
    grid: WavelengthGrid = field(default_factory=WavelengthGrid)

    def __post_init__(self):
        i = np.asarray(self.i, dtype=np.float64)
        v = np.asarray(self.v, dtype=np.float64)
        if i.ndim != 3 or i.shape != v.shape:
            raise ShapeMismatch(f"expected matching (height, width, n) arrays, got {i.shape} and {v.shape}")
        if i.shape[2] != self.grid.n_points:
            raise ShapeMismatch(f"spectral length {i.shape[2]} != grid n_points {self.grid.n_points}")
        object.__setattr__(self, "i", i)
        object.__setattr__(self, "v", v)

    @property
    def height(self) -> int:
        return self.i.shape[0]

    @property
    def width(self) -> int:
        return self.i.shape[1]

    @property
    def n_pixels(self) -> int:
        return self.width * self.height

    def spectrum(self, x: int, y: int) -> StokesSpectrum:
        if not (0 <= x < self.width and 0 <= y < self.height):
            raise OutOfBounds(f"pixel ({x}, {y}) outside {self.width}x{self.height} map")
        return StokesSpectrum(self.i[y, x], self.v[y, x])

    def stacked(self) -> np.ndarray:
        """All pixels as a ``(width*height, 2, n)`` array in row-major order."""
        n = self.grid.n_points
        return np.stack([self.i.reshape(-1, n), self.v.reshape(-1, n)], axis=1)

    def same_as(self, other: "SPMap") -> bool:
        return (
            self.metadata == other.metadata
            and self.grid == other.grid
            and np.array_equal(self.i, other.i)
            and np.array_equal(self.v, other.v)
        )


@dataclass(frozen=True)
class NormParams:
    i_min: float
    i_max: float
    v_mean: float


IDENTITY_NORM = NormParams(0.0, 1.0, 0.0)


def normalize_spectrum(s: StokesSpectrum, eps: float = EPS_DEGENERATE) -> tuple[StokesSpectrum, NormParams]:
    """Min-max scale I to [0, 1] and remove the mean of V."""
    i_min = float(s.i.min())
    i_max = float(s.i.max())
    if i_max - i_min < eps:
        raise DegenerateSpectrum(f"Stokes I is constant (range {i_max - i_min:.3g})")
    v_mean = float(s.v.mean())
    out = StokesSpectrum((s.i - i_min) / (i_max - i_min), s.v - v_mean)
    return out, NormParams(i_min, i_max, v_mean)


def denormalize_spectrum(s_norm: StokesSpectrum, p: NormParams) -> StokesSpectrum:
    return StokesSpectrum(s_norm.i * (p.i_max - p.i_min) + p.i_min, s_norm.v + p.v_mean)


def normalize_batch(x: np.ndarray, mode: str = "per-spectrum", eps: float = EPS_DEGENERATE):
    """Vectorised normalization of a ``(N, 2, n)`` batch.

    Returns ``(normalized, params, valid)`` where ``params`` is ``(N, 3)``
    holding ``i_min, i_max, v_mean`` and ``valid`` masks non-degenerate
    samples. Degenerate rows are left unscaled in the output. ``mode`` is
    ``"per-spectrum"`` or ``"per-map"`` (one set of statistics over the batch).
    """
    x = np.asarray(x, dtype=np.float64)
    if mode == "per-spectrum":
        i_min = x[:, 0].min(axis=1)
        i_max = x[:, 0].max(axis=1)
        v_mean = x[:, 1].mean(axis=1)
    elif mode == "per-map":
        n = x.shape[0]
        i_min = np.full(n, x[:, 0].min())
        i_max = np.full(n, x[:, 0].max())
        v_mean = np.full(n, x[:, 1].mean())
    else:
        raise ValueError(f"unknown normalization mode {mode!r}")
    rng = i_max - i_min
    valid = rng >= eps
    scale = np.where(valid, rng, 1.0)
    out = np.empty_like(x)
    out[:, 0] = (x[:, 0] - i_min[:, None]) / scale[:, None]
    out[:, 1] = x[:, 1] - v_mean[:, None]
    return out, np.stack([i_min, i_max, v_mean], axis=1), valid


def crop_fov(m: SPMap, x0: int, y0: int, w: int, h: int) -> SPMap:
    if w < 1 or h < 1 or x0 < 0 or y0 < 0 or x0 + w > m.width or y0 + h > m.height:
        raise OutOfBounds(f"crop ({x0}, {y0}, {w}, {h}) exceeds {m.width}x{m.height} map")
    return replace(m, i=m.i[y0:y0 + h, x0:x0 + w].copy(), v=m.v[y0:y0 + h, x0:x0 + w].copy())
