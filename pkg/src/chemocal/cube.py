"""Hyperspectral cube handling: file I/O, pseudo-absorbance conversion,
spectral binning, Otsu grain segmentation, window cropping, grain density
and mean grain spectra.

Cubes are stored on disk as raw little-endian float32 in band-sequential
order (all of band 0, then band 1, ...) next to a JSON sidecar named
``<payload>.json`` holding ``{height, width, bands, dtype, byte_order,
interleave, domain, wavelength_start_nm, wavelength_end_nm}``.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError

DOMAIN_REFLECTANCE = "reflectance"
DOMAIN_PSEUDO_ABSORBANCE = "pseudo_absorbance"

RAW_BANDS = 224
BINNED_BANDS = 102
BINNED_WAVELENGTH_START_NM = 938.0
BINNED_WAVELENGTH_END_NM = 1662.0

SUBSAMPLE_CSV_FIELDS = ["subsample_id", "bulk_id", "split", "fold",
                        "density", "row", "col"]


@dataclass
class HsiCube:
    """A (bands, height, width) raster with acquisition metadata."""

    data: np.ndarray
    domain: str = DOMAIN_REFLECTANCE
    wavelength_start_nm: float = 900.0
    wavelength_end_nm: float = 1700.0

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3:
            raise DataError("cube data must be 3-D (bands, height, width)")
        if not np.all(np.isfinite(self.data)):
            raise DataError("cube contains non-finite values")
        if self.domain not in (DOMAIN_REFLECTANCE, DOMAIN_PSEUDO_ABSORBANCE):
            raise DataError(f"unknown cube domain {self.domain!r}")
        if self.domain == DOMAIN_REFLECTANCE and np.any(self.data < 0):
            raise DataError("reflectance cube contains negative values")

    @property
    def bands(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]


@dataclass
class GrainMask:
    """Binary per-pixel grain mask, 1 = grain."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.uint8)
        if self.values.ndim != 2:
            raise DataError("mask must be 2-D")
        if not np.isin(self.values, (0, 1)).all():
            raise DataError("mask values must be 0 or 1")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class CropSpec:
    """Sliding-window crop geometry and grain-density floor."""

    window: int = 128
    stride: int = 64
    min_density: float = 0.1

    def __post_init__(self):
        if self.window <= 0 or self.stride <= 0:
            raise DataError("window and stride must be positive")
        if self.stride > self.window:
            raise DataError("stride must not exceed window")
        if not 0.0 <= self.min_density <= 1.0:
            raise DataError("min_density must lie in [0, 1]")


@dataclass
class Subsample:
    """One image crop: identity, bulk membership, grain density and its
    mean grain spectrum."""

    subsample_id: str
    bulk_id: str
    split: str
    fold: int | None
    density: float
    mean_spectrum: np.ndarray
    row: int = 0
    col: int = 0

    def __post_init__(self):
        self.mean_spectrum = np.asarray(self.mean_spectrum, dtype=np.float64)
        if not np.all(np.isfinite(self.mean_spectrum)):
            raise DataError(f"subsample {self.subsample_id}: non-finite spectrum")
        if self.split not in ("train", "val", "test"):
            raise DataError(f"subsample {self.subsample_id}: bad split {self.split!r}")


# ---------------------------------------------------------------------------
# File I/O

def _sidecar_path(path: Path) -> Path:
    return path.with_name(path.name + ".json")


def write_cube(cube: HsiCube, path: str | Path) -> None:
    """Write payload (f32, little-endian, band-sequential) plus sidecar."""
    path = Path(path)
    payload = np.ascontiguousarray(cube.data, dtype="<f4")
    path.write_bytes(payload.tobytes())
    sidecar = {
        "height": cube.height,
        "width": cube.width,
        "bands": cube.bands,
        "dtype": "f32",
        "byte_order": "le",
        "interleave": "bsq",
        "domain": cube.domain,
        "wavelength_start_nm": cube.wavelength_start_nm,
        "wavelength_end_nm": cube.wavelength_end_nm,
    }
    _sidecar_path(path).write_text(json.dumps(sidecar, indent=2) + "\n")


def load_cube(path: str | Path) -> HsiCube:
    """Load a cube; the sidecar must exist and match the payload size."""
    path = Path(path)
    sidecar_path = _sidecar_path(path)
    if not sidecar_path.exists():
        raise DataError(f"missing sidecar header {sidecar_path}")
    try:
        meta = json.loads(sidecar_path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"malformed sidecar {sidecar_path}: {exc}") from exc
    for key in ("height", "width", "bands", "dtype", "byte_order", "interleave"):
        if key not in meta:
            raise DataError(f"sidecar {sidecar_path} missing field {key!r}")
    if meta["dtype"] != "f32":
        raise DataError(f"unknown dtype {meta['dtype']!r}")
    if meta["byte_order"] != "le":
        raise DataError(f"unknown byte order {meta['byte_order']!r}")
    if meta["interleave"] != "bsq":
        raise DataError(f"unknown interleave {meta['interleave']!r}")
    bands, height, width = int(meta["bands"]), int(meta["height"]), int(meta["width"])
    raw = path.read_bytes()
    expected = bands * height * width * 4
    if len(raw) != expected:
        raise DataError(
            f"{path}: payload holds {len(raw)} bytes, header declares {expected}")
    data = np.frombuffer(raw, dtype="<f4").reshape(bands, height, width)
    return HsiCube(
        data=data,
        domain=meta.get("domain", DOMAIN_REFLECTANCE),
        wavelength_start_nm=float(meta.get("wavelength_start_nm", 900.0)),
        wavelength_end_nm=float(meta.get("wavelength_end_nm", 1700.0)),
    )


def write_mask(mask: GrainMask, path: str | Path) -> None:
    """Write a mask as a raw u8 raster with the same sidecar scheme."""
    path = Path(path)
    path.write_bytes(np.ascontiguousarray(mask.values, dtype=np.uint8).tobytes())
    sidecar = {
        "height": mask.height,
        "width": mask.width,
        "bands": 1,
        "dtype": "u8",
        "byte_order": "le",
        "interleave": "bsq",
        "domain": "mask",
    }
    _sidecar_path(path).write_text(json.dumps(sidecar, indent=2) + "\n")


def load_mask(path: str | Path) -> GrainMask:
    path = Path(path)
    sidecar_path = _sidecar_path(path)
    if not sidecar_path.exists():
        raise DataError(f"missing sidecar header {sidecar_path}")
    meta = json.loads(sidecar_path.read_text())
    if meta.get("dtype") != "u8":
        raise DataError(f"unknown mask dtype {meta.get('dtype')!r}")
    height, width = int(meta["height"]), int(meta["width"])
    raw = path.read_bytes()
    if len(raw) != height * width:
        raise DataError(f"{path}: mask payload size mismatch")
    return GrainMask(np.frombuffer(raw, dtype=np.uint8).reshape(height, width))


# ---------------------------------------------------------------------------
# Spectral transforms

def to_pseudo_absorbance(cube: HsiCube, floor: float = 1e-6) -> HsiCube:
    """Convert reflectance to pseudo-absorbance a = -log10(max(r, floor))."""
    if cube.domain != DOMAIN_REFLECTANCE:
        raise DataError("cube is already in the absorbance domain")
    if floor <= 0:
        raise DataError("floor must be positive")
    data = -np.log10(np.maximum(cube.data, floor))
    return HsiCube(data, DOMAIN_PSEUDO_ABSORBANCE,
                   cube.wavelength_start_nm, cube.wavelength_end_nm)


def spectral_bin(cube: HsiCube) -> HsiCube:
    """Drop the 10 first/last channels of a 224-band cube and average the
    remaining 204 in adjacent disjoint pairs, giving 102 bands at
    938-1662 nm."""
    if cube.bands != RAW_BANDS:
        raise DataError(f"spectral_bin expects {RAW_BANDS} bands, got {cube.bands}")
    trimmed = cube.data[10:214]
    binned = 0.5 * (trimmed[0::2] + trimmed[1::2])
    return HsiCube(binned, cube.domain,
                   BINNED_WAVELENGTH_START_NM, BINNED_WAVELENGTH_END_NM)


# ---------------------------------------------------------------------------
# Segmentation

def otsu_threshold(scalars: np.ndarray, nbins: int = 256) -> tuple[float, int]:
    """Otsu threshold of a scalar image.

    Values are histogrammed into ``nbins`` uniform bins over [min, max] and
    the boundary maximizing the between-class variance (computed on bin
    indices, the classic discrete formulation) is selected; ties go to the
    lower boundary.  Returns ``(threshold_value, boundary_index)`` where
    pixels strictly above ``threshold_value`` fall in the upper class.
    """
    scalars = np.asarray(scalars, dtype=np.float64).ravel()
    if scalars.size == 0:
        raise DataError("empty image")
    lo, hi = float(scalars.min()), float(scalars.max())
    if lo == hi:
        raise DataError("degenerate input: constant image has no threshold")
    counts, edges = np.histogram(scalars, bins=nbins, range=(lo, hi))
    n = counts.sum()
    idx = np.arange(nbins, dtype=np.float64)
    w0 = np.cumsum(counts)[:-1]
    w1 = n - w0
    s0 = np.cumsum(counts * idx)[:-1]
    total = float((counts * idx).sum())
    with np.errstate(divide="ignore", invalid="ignore"):
        mu0 = np.where(w0 > 0, s0 / w0, 0.0)
        mu1 = np.where(w1 > 0, (total - s0) / w1, 0.0)
    between = (w0 / n) * (w1 / n) * (mu0 - mu1) ** 2
    between[(w0 == 0) | (w1 == 0)] = 0.0
    boundary = int(np.argmax(between))  # argmax takes the first (lower) max
    return float(edges[boundary + 1]), boundary


def otsu_mask(cube: HsiCube, invert: bool = False) -> GrainMask:
    """Segment grain by Otsu-thresholding the per-pixel band mean.

    Grain is assumed to be the brighter class; pass ``invert=True`` for
    data where the background is brighter.
    """
    scalars = cube.data.mean(axis=0)
    threshold, _ = otsu_threshold(scalars)
    mask = scalars > threshold
    if invert:
        mask = ~mask
    return GrainMask(mask.astype(np.uint8))


# ---------------------------------------------------------------------------
# Cropping

def grain_density(mask_window: np.ndarray) -> float:
    """Fraction of grain pixels in a mask window."""
    mask_window = np.asarray(mask_window)
    if mask_window.size == 0:
        raise DataError("empty mask window")
    return float(np.count_nonzero(mask_window)) / mask_window.size


def mean_grain_spectrum(cube_window: np.ndarray, mask_window: np.ndarray) -> np.ndarray:
    """Per-band mean over grain pixels of a (bands, h, w) window."""
    cube_window = np.asarray(cube_window, dtype=np.float64)
    grain = np.asarray(mask_window) != 0
    count = int(np.count_nonzero(grain))
    if count == 0:
        raise DataError("mean grain spectrum undefined for zero grain pixels")
    return cube_window[:, grain].sum(axis=1) / count


def crop(cube: HsiCube, mask: GrainMask, spec: CropSpec = CropSpec(),
         bulk_id: str = "bulk", split: str = "train",
         fold: int | None = None) -> list[Subsample]:
    """Slide a window over the cube and build one subsample per retained crop.

    Anchors sit at every multiple of the stride where the full window fits
    (trailing remainders are dropped); crops with grain density below
    ``spec.min_density`` or without any grain pixel are discarded.  Output
    is ordered by (row, col) anchor.
    """
    if (cube.height, cube.width) != (mask.height, mask.width):
        raise DataError("cube and mask dimensions differ")
    if cube.height < spec.window or cube.width < spec.window:
        raise DataError("cube smaller than crop window")
    out: list[Subsample] = []
    row_anchors = range(0, cube.height - spec.window + 1, spec.stride)
    col_anchors = range(0, cube.width - spec.window + 1, spec.stride)
    for r in row_anchors:
        for c in col_anchors:
            mwin = mask.values[r:r + spec.window, c:c + spec.window]
            density = grain_density(mwin)
            if density < spec.min_density or density == 0.0:
                continue
            cwin = cube.data[:, r:r + spec.window, c:c + spec.window]
            out.append(Subsample(
                subsample_id=f"{bulk_id}_r{r:04d}_c{c:04d}",
                bulk_id=bulk_id,
                split=split,
                fold=fold,
                density=density,
                mean_spectrum=mean_grain_spectrum(cwin, mwin),
                row=r,
                col=c,
            ))
    return out


# ---------------------------------------------------------------------------
# Subsample table I/O

def write_subsample_csv(subsamples: list[Subsample], path: str | Path) -> None:
    """Emit the subsample table with spectra in columns b000..b{n-1}."""
    if not subsamples:
        raise DataError("no subsamples to write")
    nbands = subsamples[0].mean_spectrum.size
    header = SUBSAMPLE_CSV_FIELDS + [f"b{i:03d}" for i in range(nbands)]
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for ss in subsamples:
            if ss.mean_spectrum.size != nbands:
                raise DataError(f"subsample {ss.subsample_id}: band count mismatch")
            writer.writerow(
                [ss.subsample_id, ss.bulk_id, ss.split,
                 "" if ss.fold is None else ss.fold,
                 repr(ss.density), ss.row, ss.col]
                + [repr(float(v)) for v in ss.mean_spectrum])


def read_subsample_csv(path: str | Path) -> list[Subsample]:
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty subsample table") from None
        if header[:len(SUBSAMPLE_CSV_FIELDS)] != SUBSAMPLE_CSV_FIELDS:
            raise DataError(f"{path}: unexpected subsample CSV header")
        nbands = len(header) - len(SUBSAMPLE_CSV_FIELDS)
        if nbands <= 0:
            raise DataError(f"{path}: no spectral columns")
        out = []
        for lineno, rec in enumerate(reader, start=2):
            if len(rec) != len(header):
                raise DataError(f"{path}:{lineno}: wrong field count")
            sid, bulk, split, fold, density, row, col = rec[:7]
            out.append(Subsample(
                subsample_id=sid,
                bulk_id=bulk,
                split=split,
                fold=None if fold == "" else int(fold),
                density=float(density),
                mean_spectrum=np.array([float(v) for v in rec[7:]]),
                row=int(row),
                col=int(col),
            ))
    return out


def spectra_matrix(subsamples: list[Subsample]) -> np.ndarray:
    """Stack mean spectra into an (n, bands) matrix in list order."""
    if not subsamples:
        raise DataError("no subsamples")
    return np.vstack([ss.mean_spectrum for ss in subsamples])
