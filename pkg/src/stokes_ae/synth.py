"""Deterministic synthetic SP maps.

Normal spectra use a weak-field proxy: Stokes I is a continuum with two
Gaussian absorption lines and Stokes V is the wavelength derivative of each
line's Gaussian, scaled by a signed amplitude. Every pixel draws its line
parameters and noise from its own PCG32 stream seeded with
``splitmix64(seed ^ pixel_index)``, so a pixel's spectrum does not depend on
how the rest of the map is generated.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import InvalidClassParams, OutOfBounds
from .rng import Pcg32, Pcg32Array, derive_seed, splitmix64_array
from .spectra import MapMetadata, SPMap, StokesSpectrum, WavelengthGrid

PRESET_VERSION = 1
T_REF = 1.6
# nominal quiet-Sun line width (Gaussian sigma, Angstrom); scales injector shifts and kernels
W_REF = 0.06


class PixelClass(str, Enum):
    QUIET_SUN = "quiet-sun"
    PORE = "pore"
    PENUMBRA = "penumbra"
    UMBRA = "umbra"


CLASS_CODES = {c: k for k, c in enumerate(PixelClass)}


@dataclass(frozen=True)
class ClassPreset:
    """Uniform parameter ranges for one surface class.

    ``a`` is the range of |V amplitude|; the sign comes from the region
    polarity, except for ``signed`` presets which draw it symmetric.
    """

    c: tuple[float, float]
    d1: tuple[float, float]
    d2: tuple[float, float]
    w: tuple[float, float]
    shift: tuple[float, float]
    a: tuple[float, float]
    signed: bool = False


# version 1 presets; bump PRESET_VERSION when editing
PRESETS = {
    PixelClass.QUIET_SUN: ClassPreset((0.97, 1.03), (0.55, 0.65), (0.45, 0.55), (0.055, 0.065),
                                      (-0.01, 0.01), (0.0, 0.02), signed=True),
    PixelClass.PORE: ClassPreset((0.55, 0.75), (0.45, 0.55), (0.38, 0.48), (0.06, 0.07),
                                 (-0.01, 0.01), (0.10, 0.20)),
    PixelClass.PENUMBRA: ClassPreset((0.70, 0.90), (0.45, 0.60), (0.38, 0.50), (0.06, 0.08),
                                     (-0.03, 0.03), (0.06, 0.20)),
    PixelClass.UMBRA: ClassPreset((0.25, 0.45), (0.30, 0.45), (0.25, 0.40), (0.07, 0.09),
                                  (-0.01, 0.01), (0.20, 0.35)),
}


@dataclass(frozen=True)
class LineParams:
    """Continuum ``c``, line depths ``d1, d2``, width ``w`` (Gaussian sigma, A),
    Doppler shift (A) and signed V amplitude ``a``."""

    c: float
    d1: float
    d2: float
    w: float
    shift: float = 0.0
    a: float = 0.0

    def __post_init__(self):
        if not (self.c > 0 and 0 < self.d1 < 1 and 0 < self.d2 < 1 and self.w > 0):
            raise InvalidClassParams(f"invalid line parameters {self}")


def sample_params(rng, cls: PixelClass, polarity=1.0) -> dict[str, np.ndarray]:
    """Draw class parameters; consumes six uniforms per stream in a fixed order."""
    p = PRESETS[PixelClass(cls)]
    out = {name: rng.uniform(*getattr(p, name)) for name in ("c", "d1", "d2", "w", "shift")}
    if p.signed:
        out["a"] = rng.uniform(-p.a[1], p.a[1])
    else:
        out["a"] = rng.uniform(*p.a) * polarity
    return out


def line_profiles(wavelengths, line_centers, c, d1, d2, w, shift, a):
    """Vectorised closed form; parameters broadcast against a trailing wavelength axis."""
    lam = np.asarray(wavelengths, dtype=np.float64)
    c, d1, d2, w, shift, a = (np.asarray(q, dtype=np.float64)[..., None] for q in (c, d1, d2, w, shift, a))
    x1 = (lam - (line_centers[0] + shift)) / w
    x2 = (lam - (line_centers[1] + shift)) / w
    g1 = np.exp(-0.5 * x1 * x1)
    g2 = np.exp(-0.5 * x2 * x2)
    i = c * (1.0 - d1 * g1 - d2 * g2)
    # w * dG/dlambda = -x G
    v = -a * (x1 * g1 + x2 * g2)
    return i, v


def synth_profile(params: LineParams | PixelClass, grid: WavelengthGrid | None = None,
                  rng: Pcg32 | None = None, polarity: float = 1.0) -> StokesSpectrum:
    """Noiseless spectrum from explicit parameters or a class sampled with ``rng``."""
    grid = grid or WavelengthGrid()
    if not isinstance(params, LineParams):
        if rng is None:
            raise ValueError("sampling a class requires an rng")
        drawn = sample_params(rng, params, polarity)
        params = LineParams(**{k: float(v) for k, v in drawn.items()})
    i, v = line_profiles(grid.wavelengths, grid.line_centers, params.c, params.d1, params.d2,
                         params.w, params.shift, params.a)
    return StokesSpectrum(i, v)


# -- anomalies -----------------------------------------------------------------

class AnomalyKind(str, Enum):
    THREE_LOBED = "three-lobed"
    DOUBLE_PEAKED = "double-peaked"
    BROADENED = "broadened"
    LOBE_ASYMMETRIC = "lobe-asymmetric"


@dataclass(frozen=True)
class Anomaly:
    x: int
    y: int
    kind: AnomalyKind
    strength: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "kind", AnomalyKind(self.kind))
        if not 0 < self.strength <= 1:
            raise ValueError(f"anomaly strength must be in (0, 1], got {self.strength}")

    def to_dict(self) -> dict:
        return {"x": self.x, "y": self.y, "kind": self.kind.value, "strength": self.strength}


def _shifted(v: np.ndarray, lam: np.ndarray, delta: float) -> np.ndarray:
    """``v(lambda - delta)`` by linear interpolation, zero outside the grid."""
    return np.interp(lam - delta, lam, v, left=0.0, right=0.0)


def _broaden(v: np.ndarray, sigma_px: float) -> np.ndarray:
    radius = max(1, int(math.ceil(4.0 * sigma_px)))
    k = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-0.5 * (k / sigma_px) ** 2)
    kernel /= kernel.sum()
    return np.convolve(v, kernel, mode="same")


def inject_v(v: np.ndarray, kind: AnomalyKind, strength: float, grid: WavelengthGrid) -> np.ndarray:
    kind = AnomalyKind(kind)
    if not 0 < strength <= 1:
        raise ValueError(f"anomaly strength must be in (0, 1], got {strength}")
    lam = grid.wavelengths
    if kind is AnomalyKind.THREE_LOBED:
        # opposite-polarity copy, redshifted by 1.5 line widths: the overlap leaves three lobes
        return v - strength * _shifted(v, lam, 1.5 * W_REF)
    if kind is AnomalyKind.DOUBLE_PEAKED:
        return v + strength * _shifted(v, lam, 6.0 * W_REF * strength)
    if kind is AnomalyKind.BROADENED:
        return _broaden(v, 2.0 * W_REF * strength / grid.dispersion)
    return np.where(v > 0, v * (1.0 + strength), v * (1.0 - strength))


def inject_anomaly(s: StokesSpectrum, kind: AnomalyKind, strength: float = 1.0,
                   grid: WavelengthGrid | None = None) -> StokesSpectrum:
    """Distort Stokes V; Stokes I is returned unchanged."""
    grid = grid or WavelengthGrid(n_points=len(s))
    return StokesSpectrum(s.i, inject_v(s.v, kind, strength, grid))


# -- noise & layouts ---------------------------------------------------------

@dataclass(frozen=True)
class NoiseModel:
    sigma_ref: float = 0.005
    t_ref: float = T_REF

    def __post_init__(self):
        if self.sigma_ref < 0:
            raise ValueError("sigma_ref must be >= 0")

    def sigma(self, integration_time: float) -> float:
        return self.sigma_ref * math.sqrt(self.t_ref / integration_time)


@dataclass(frozen=True)
class Region:
    """Disk of one class; coordinates and radius are fractions of the map size."""

    cls: PixelClass
    cx: float
    cy: float
    r: float
    polarity: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "cls", PixelClass(self.cls))


def spot(cx, cy, r_umbra, polarity=1.0) -> list[Region]:
    return [Region(PixelClass.PENUMBRA, cx, cy, 2.0 * r_umbra, polarity),
            Region(PixelClass.UMBRA, cx, cy, r_umbra, polarity)]


LAYOUTS = {
    "quiet": [],
    "spot": spot(0.5, 0.5, 0.12),
    "ar": spot(0.32, 0.45, 0.1, 1.0) + spot(0.7, 0.55, 0.09, -1.0) + [
        Region(PixelClass.PORE, 0.5, 0.2, 0.05, 1.0),
        Region(PixelClass.PORE, 0.55, 0.82, 0.05, -1.0),
    ],
}


def random_layout(seed: int) -> list[Region]:
    """Bipolar active region with randomised spot positions, sizes and pores."""
    rng = Pcg32(seed, seq=0x1A7)
    regions: list[Region] = []
    sign = 1.0 if rng.random() < 0.5 else -1.0
    for k in range(2):
        cx = rng.uniform(0.2, 0.45) if k == 0 else rng.uniform(0.55, 0.8)
        regions += spot(cx, rng.uniform(0.3, 0.7), rng.uniform(0.06, 0.12), sign if k == 0 else -sign)
    for _ in range(1 + rng.bounded(3)):
        regions.append(Region(PixelClass.PORE, rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9),
                              rng.uniform(0.03, 0.06), 1.0 if rng.random() < 0.5 else -1.0))
    return regions


def parse_layout(text: str) -> list[Region]:
    """Preset name, ``random:<seed>``, or ``class:cx,cy,r[,polarity];...``."""
    text = text.strip()
    if text in LAYOUTS:
        return list(LAYOUTS[text])
    if text.startswith("random:"):
        return random_layout(int(text.split(":", 1)[1]))
    regions = []
    for item in filter(None, (t.strip() for t in text.split(";"))):
        name, _, nums = item.partition(":")
        vals = [float(q) for q in nums.split(",")]
        if len(vals) not in (3, 4):
            raise ValueError(f"bad region {item!r}; expected class:cx,cy,r[,polarity]")
        regions.append(Region(PixelClass(name), *vals))
    return regions


def rasterize(layout: list[Region], width: int, height: int) -> tuple[np.ndarray, np.ndarray]:
    """Class codes and polarities per pixel, regions painted in order over quiet Sun."""
    yy, xx = np.mgrid[0:height, 0:width]
    fx = (xx + 0.5) / width
    fy = (yy + 0.5) / height
    codes = np.zeros((height, width), dtype=np.int64)
    pol = np.ones((height, width))
    scale = min(width, height)
    for reg in layout:
        inside = ((fx - reg.cx) * width) ** 2 + ((fy - reg.cy) * height) ** 2 <= (reg.r * scale) ** 2
        codes[inside] = CLASS_CODES[reg.cls]
        pol[inside] = reg.polarity
    return codes, pol


# -- maps ----------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class SynthResult:
    map: SPMap
    anomalies: list[Anomaly] = field(default_factory=list)
    classes: np.ndarray | None = None

    def truth_dict(self) -> dict:
        return {"anomalies": [a.to_dict() for a in self.anomalies]}


def pixel_streams(seed: int, n_pixels: int) -> Pcg32Array:
    idx = np.arange(n_pixels, dtype=np.uint64)
    return Pcg32Array(splitmix64_array(np.uint64(seed & (2**64 - 1)) ^ idx))


def synth_map(width: int, height: int, layout: list[Region] | str = "quiet",
              anomalies: list[Anomaly] = (), meta: MapMetadata | None = None,
              noise: NoiseModel | None = None, seed: int = 0,
              grid: WavelengthGrid | None = None) -> SynthResult:
    grid = grid or WavelengthGrid()
    meta = meta or MapMetadata()
    noise = noise or NoiseModel()
    if isinstance(layout, str):
        layout = parse_layout(layout)
    anomalies = [a if isinstance(a, Anomaly) else Anomaly(*a) for a in anomalies]
    for a in anomalies:
        if not (0 <= a.x < width and 0 <= a.y < height):
            raise OutOfBounds(f"anomaly pixel ({a.x}, {a.y}) outside {width}x{height} map")

    codes, pol = rasterize(layout, width, height)
    n_pix = width * height
    rng = pixel_streams(seed, n_pix)
    codes_f = codes.ravel()
    params = {k: np.empty(n_pix) for k in ("c", "d1", "d2", "w", "shift", "a")}
    # every stream draws all six parameters once; the class picks the range
    u = np.stack([rng.random() for _ in range(6)], axis=1)
    for cls, code in CLASS_CODES.items():
        sel = codes_f == code
        if not sel.any():
            continue
        drawn = sample_params(_Fixed(u[sel]), cls, pol.ravel()[sel])
        for k in params:
            params[k][sel] = drawn[k]

    i, v = line_profiles(grid.wavelengths, grid.line_centers, **params)
    for a in anomalies:
        k = a.y * width + a.x
        v[k] = inject_v(v[k], a.kind, a.strength, grid)

    sigma = noise.sigma(meta.integration_time)
    if sigma > 0:
        n = grid.n_points
        z = rng.normals(2 * n)
        i = i + sigma * z[:, :n]
        v = v + sigma * z[:, n:]
    shape = (height, width, grid.n_points)
    m = SPMap(i.reshape(shape), v.reshape(shape), meta, grid)
    return SynthResult(m, anomalies, codes)


class _Fixed:
    """Replays pre-drawn uniforms column by column through the ``uniform`` API."""

    def __init__(self, u: np.ndarray):
        self._u = u
        self._k = 0

    def uniform(self, lo, hi):
        col = self._u[:, self._k]
        self._k += 1
        return lo + (hi - lo) * col


def class_profile(seed: int, width: int, x: int, y: int, cls: PixelClass, polarity: float = 1.0,
                  grid: WavelengthGrid | None = None) -> StokesSpectrum:
    """Noiseless profile of pixel ``(x, y)`` as :func:`synth_map` would draw it."""
    rng = Pcg32(derive_seed(seed, y * width + x))
    drawn = sample_params(rng, cls, polarity)
    return synth_profile(LineParams(**{k: float(q) for k, q in drawn.items()}), grid)
