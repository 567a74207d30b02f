"""Synthetic volumes: phantom generation, noise injection, triplets, file I/O.

All intensities are Hounsfield units (air -1000, water 0). Volumes are
immutable float32 stacks [S, M, N]; every generator is a pure function of its
spec and seed.
"""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

HU_MIN, HU_MAX = -2000.0, 4000.0
AIR_HU = -1000.0
VOLUME_KINDS = ("clean", "noisy", "noise", "denoised")
NOISE_MODELS = ("gaussian", "signal_dependent", "correlated_control")
FORMAT_VERSION = 1


@dataclass(frozen=True)
class Volume:
    """An [S, M, N] float32 stack in HU with acquisition-geometry metadata."""

    data: np.ndarray
    z_spacing_mm: float = 1.0
    slice_thickness_mm: float = 1.0
    pixel_spacing_mm: float = 1.0
    kind: str = "clean"
    seed_provenance: int | None = None

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=np.float32)
        if arr.ndim != 3:
            raise ValueError(f"volume data must be [S, M, N], got shape {arr.shape}")
        if self.kind not in VOLUME_KINDS:
            raise ValueError(f"unknown volume kind {self.kind!r}")
        if not np.isfinite(arr).all():
            raise ValueError("volume data contains non-finite values")
        if arr.min() < HU_MIN or arr.max() > HU_MAX:
            raise ValueError(
                f"volume HU range [{arr.min():.1f}, {arr.max():.1f}] exceeds "
                f"[{HU_MIN:.0f}, {HU_MAX:.0f}]"
            )
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @property
    def dims(self):
        return self.data.shape

    def with_data(self, data, kind):
        return Volume(
            data=data,
            z_spacing_mm=self.z_spacing_mm,
            slice_thickness_mm=self.slice_thickness_mm,
            pixel_spacing_mm=self.pixel_spacing_mm,
            kind=kind,
            seed_provenance=self.seed_provenance,
        )


@dataclass(frozen=True)
class PhantomSpec:
    """Random-ellipsoid phantom inside an air-surrounded elliptical body."""

    dims: tuple[int, int, int]
    n_ellipsoids: int = 8
    hu_range: tuple[float, float] = (-80.0, 120.0)
    z_smoothness: float = 8.0  # minimum ellipsoid z semi-axis, in slices
    body_radius_fraction: float = 0.9
    seed: int = 0
    z_spacing_mm: float = 1.0
    slice_thickness_mm: float = 1.0
    pixel_spacing_mm: float = 1.0

    def __post_init__(self):
        s, m, n = self.dims
        if s < 3:
            raise ValueError(f"phantom needs S >= 3 slices, got {s}")
        if m < 4 or n < 4:
            raise ValueError(f"phantom in-plane dims too small: {m}x{n}")
        if self.n_ellipsoids < 1:
            raise ValueError("n_ellipsoids must be >= 1")
        lo, hi = self.hu_range
        if lo > hi:
            raise ValueError(f"inverted hu_range ({lo}, {hi})")
        if self.z_smoothness <= 0:
            raise ValueError("z_smoothness must be positive")
        if not 0 < self.body_radius_fraction <= 1:
            raise ValueError("body_radius_fraction must be in (0, 1]")


@dataclass(frozen=True)
class NoiseSpec:
    """Noise injection model; gaussian/signal_dependent draw independently
    per slice, correlated_control deliberately shares a component across
    slices (coupling = shared variance fraction)."""

    model: str = "gaussian"
    sigma: float = 30.0
    coupling: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.model not in NOISE_MODELS:
            raise ValueError(f"unknown noise model {self.model!r}")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if not 0 <= self.coupling <= 1:
            raise ValueError("coupling must be in [0, 1]")


@dataclass
class SliceTriplet:
    """One training unit: a center slice with its two neighbors.

    Clean (x_*) and noise (n_*) counterparts are carried only when the source
    volumes were supplied; then y = x + n holds exactly on all three slices.
    """

    y_prev: np.ndarray
    y_center: np.ndarray
    y_next: np.ndarray
    s: int
    k: int = 0
    x_prev: np.ndarray | None = None
    x_center: np.ndarray | None = None
    x_next: np.ndarray | None = None
    n_prev: np.ndarray | None = None
    n_center: np.ndarray | None = None
    n_next: np.ndarray | None = None

    @property
    def has_truth(self):
        return self.x_center is not None and self.n_center is not None


def generate_phantom(spec: PhantomSpec) -> Volume:
    """Deterministic random-ellipsoid phantom.

    Voxels outside the body ellipse are air; inside, the value is 0 HU plus
    the sum of the HU offsets of the ellipsoids covering the voxel. All
    ellipsoid z semi-axes are at least z_smoothness so that consecutive
    slices stay similar. Draws are taken as unit uniforms and then scaled,
    which makes geometry comparable across specs sharing a seed.
    """
    s, m, n = spec.dims
    rng = np.random.default_rng(spec.seed)

    cy, cx = (m - 1) / 2.0, (n - 1) / 2.0
    ry = spec.body_radius_fraction * (m - 1) / 2.0
    rx = spec.body_radius_fraction * (n - 1) / 2.0
    yy, xx = np.mgrid[0:m, 0:n]
    body = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0

    vol = np.where(body, 0.0, AIR_HU)[None].repeat(s, axis=0)

    zz = np.arange(s, dtype=np.float64)
    hu_lo, hu_hi = spec.hu_range
    for _ in range(spec.n_ellipsoids):
        u = rng.random(8)
        # z semi-axes span most of the stack so the steep ellipsoid ends fall
        # outside it; raising the z_smoothness floor then only flattens the
        # in-volume profile (monotone similarity gain).
        az = max(s * (0.55 + 0.40 * u[0]), spec.z_smoothness * (1.0 + 2.0 * u[1]))
        z_margin = max(0.0, az - 0.5 * s - 2.0)
        z0 = s / 2.0 + (2.0 * u[2] - 1.0) * z_margin
        y0 = cy + ry * 0.65 * (2.0 * u[3] - 1.0)
        x0 = cx + rx * 0.65 * (2.0 * u[4] - 1.0)
        ay = m * (0.10 + 0.15 * u[5])
        ax = n * (0.10 + 0.15 * u[6])
        hu = hu_lo + (hu_hi - hu_lo) * u[7]
        inside = (
            ((zz[:, None, None] - z0) / az) ** 2
            + ((yy[None] - y0) / ay) ** 2
            + ((xx[None] - x0) / ax) ** 2
        ) <= 1.0
        vol[inside & body[None]] += hu

    vol = np.clip(vol, HU_MIN, HU_MAX)
    return Volume(
        data=vol,
        z_spacing_mm=spec.z_spacing_mm,
        slice_thickness_mm=spec.slice_thickness_mm,
        pixel_spacing_mm=spec.pixel_spacing_mm,
        kind="clean",
        seed_provenance=spec.seed,
    )


def add_noise(volume: Volume, spec: NoiseSpec) -> tuple[Volume, Volume]:
    """Corrupt a clean volume; returns (noisy, noise) with noisy = clean + noise.

    The stored noise is recomputed as noisy - clean after the float32
    rounding and HU clipping, so the additive identity holds bit-exactly.
    """
    if volume.kind != "clean":
        raise ValueError(f"add_noise expects a clean volume, got kind={volume.kind!r}")
    s, m, n = volume.dims
    rng = np.random.default_rng(spec.seed)

    if spec.model == "gaussian":
        noise = rng.normal(0.0, spec.sigma, size=(s, m, n))
    elif spec.model == "signal_dependent":
        x = volume.data.astype(np.float64)
        std = spec.sigma * np.sqrt(1.0 + np.maximum(x + 1000.0, 0.0) / 1000.0)
        noise = rng.normal(0.0, 1.0, size=(s, m, n)) * std
    else:  # correlated_control
        shared = rng.normal(0.0, spec.sigma, size=(m, n))
        indep = rng.normal(0.0, spec.sigma, size=(s, m, n))
        noise = np.sqrt(1.0 - spec.coupling) * indep + np.sqrt(spec.coupling) * shared[None]

    noisy32 = np.clip(
        volume.data.astype(np.float64) + noise, HU_MIN, HU_MAX
    ).astype(np.float32)
    noise32 = noisy32 - volume.data  # float32 arithmetic; additivity now exact
    noisy_v = Volume(
        data=noisy32,
        z_spacing_mm=volume.z_spacing_mm,
        slice_thickness_mm=volume.slice_thickness_mm,
        pixel_spacing_mm=volume.pixel_spacing_mm,
        kind="noisy",
        seed_provenance=spec.seed,
    )
    noise_v = noisy_v.with_data(noise32, kind="noise")
    return noisy_v, noise_v


def extract_triplets(
    noisy: Volume,
    clean: Volume | None = None,
    noise: Volume | None = None,
    volume_index: int = 0,
) -> list[SliceTriplet]:
    """Interior-slice triplets (centers 1 .. S-2), in slice order."""
    s = noisy.dims[0]
    if s < 3:
        raise ValueError(
            f"cannot extract neighbor triplets from {s} slices; need at least 3"
        )
    for other, label in ((clean, "clean"), (noise, "noise")):
        if other is not None and other.dims != noisy.dims:
            raise ValueError(
                f"{label} volume dims {other.dims} do not match noisy {noisy.dims}"
            )
    if clean is not None and noise is not None:
        if np.any((noisy.data - clean.data) - noise.data != 0):
            raise ValueError("noisy != clean + noise; volumes are inconsistent")

    y, x, nn = noisy.data, None, None
    if clean is not None:
        x = clean.data
    if noise is not None:
        nn = noise.data
    triplets = []
    for c in range(1, s - 1):
        triplets.append(
            SliceTriplet(
                y_prev=y[c - 1],
                y_center=y[c],
                y_next=y[c + 1],
                s=c,
                k=volume_index,
                x_prev=None if x is None else x[c - 1],
                x_center=None if x is None else x[c],
                x_next=None if x is None else x[c + 1],
                n_prev=None if nn is None else nn[c - 1],
                n_center=None if nn is None else nn[c],
                n_next=None if nn is None else nn[c + 1],
            )
        )
    return triplets


def slice_similarity(clean: Volume) -> np.ndarray:
    """Neighbor-prediction defect per interior slice.

    d_s = ||2 x_s - x_{s-1} - x_{s+1}||_2 / ||x_s||_2; zero when the slice is
    exactly the average of its neighbors.
    """
    if clean.kind != "clean":
        raise ValueError(f"slice_similarity expects a clean volume, got {clean.kind!r}")
    s = clean.dims[0]
    if s < 3:
        raise ValueError("similarity needs at least 3 slices")
    x = clean.data.astype(np.float64)
    out = np.empty(s - 2)
    for c in range(1, s - 1):
        denom = np.linalg.norm(x[c])
        if denom == 0.0:
            raise ValueError(f"slice {c} has zero norm; degenerate phantom")
        out[c - 1] = np.linalg.norm(2.0 * x[c] - x[c - 1] - x[c + 1]) / denom
    return out


# -- file I/O ------------------------------------------------------------


def _base_path(path) -> Path:
    p = Path(path)
    if p.suffix in (".vol", ".json"):
        return p.with_suffix("")
    return p


def save_volume(volume: Volume, path) -> tuple[Path, Path]:
    """Write <base>.vol (raw little-endian float32, slice-major) + sidecar."""
    base = _base_path(path)
    vol_path = base.with_suffix(".vol")
    json_path = base.with_suffix(".json")
    payload = np.ascontiguousarray(volume.data, dtype="<f4")
    vol_path.write_bytes(payload.tobytes())
    sidecar = {
        "format_version": FORMAT_VERSION,
        "dims": list(volume.dims),
        "z_spacing_mm": volume.z_spacing_mm,
        "slice_thickness_mm": volume.slice_thickness_mm,
        "pixel_spacing_mm": volume.pixel_spacing_mm,
        "kind": volume.kind,
        "seed": volume.seed_provenance,
    }
    json_path.write_text(json.dumps(sidecar, indent=2) + "\n")
    return vol_path, json_path


def load_volume(path) -> Volume:
    base = _base_path(path)
    vol_path = base.with_suffix(".vol")
    json_path = base.with_suffix(".json")
    if not json_path.exists():
        raise FileNotFoundError(f"missing volume sidecar {json_path}")
    if not vol_path.exists():
        raise FileNotFoundError(f"missing volume payload {vol_path}")
    sidecar = json.loads(json_path.read_text())
    version = sidecar.get("format_version")
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported volume format version {version!r}")
    dims = tuple(int(d) for d in sidecar["dims"])
    expected = int(np.prod(dims)) * 4
    raw = vol_path.read_bytes()
    if len(raw) != expected:
        raise ValueError(
            f"payload size mismatch in {vol_path}: expected {expected} bytes "
            f"for dims {dims}, got {len(raw)}"
        )
    data = np.frombuffer(raw, dtype="<f4").reshape(dims)
    return Volume(
        data=data,
        z_spacing_mm=float(sidecar["z_spacing_mm"]),
        slice_thickness_mm=float(sidecar["slice_thickness_mm"]),
        pixel_spacing_mm=float(sidecar["pixel_spacing_mm"]),
        kind=sidecar["kind"],
        seed_provenance=sidecar.get("seed"),
    )
