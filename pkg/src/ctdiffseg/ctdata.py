"""HU-preserving CT volume handling.

Volumes are (Z, Y, X) arrays of Hounsfield Units with physical voxel
spacing in mm. Everything here keeps raw HU quantitative: the
normalization to [-1, 1] is an invertible affine window map, never a
per-volume min-max rescale.
"""

import gzip
import json
import struct
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

HU_MIN = -1024
HU_MAX = 3071

# Air through dense consolidation; wide enough for every lung tissue class.
DEFAULT_WINDOW = (-1024, 600)


class PathologyLabel(IntEnum):
    """Per-voxel tissue classes (four pathology/tissue classes plus background)."""

    BACKGROUND = 0
    HEALTHY = 1
    GGO = 2
    FIBROSIS = 3
    EMPHYSEMA = 4


class VolumeError(ValueError):
    """Unreadable file, bad metadata, or out-of-range voxel values."""


@dataclass
class CtVolume:
    """3D scalar grid in Hounsfield Units with physical spacing.

    Attributes:
        voxels: (Z, Y, X) float32 array, integer-valued HU in [-1024, 3071].
        spacing: (z, y, x) voxel size in mm, strictly positive.
        origin: (z, y, x) world position of voxel (0, 0, 0) in mm.
    """

    voxels: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    origin: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels, dtype=np.float32)
        if self.voxels.ndim != 3:
            raise VolumeError(f"expected 3D voxel array, got {self.voxels.ndim}D")
        if any(s <= 0 for s in self.spacing):
            raise VolumeError(f"spacing must be strictly positive, got {self.spacing}")
        lo, hi = float(self.voxels.min()), float(self.voxels.max())
        if lo < HU_MIN or hi > HU_MAX:
            raise VolumeError(
                f"HU values outside [{HU_MIN}, {HU_MAX}]: observed range [{lo:.1f}, {hi:.1f}]"
            )

    @property
    def shape(self):
        return self.voxels.shape


@dataclass
class NormalizedVolume:
    """Volume affinely mapped to [-1, 1]; `window` records the map for inversion."""

    voxels: np.ndarray
    window: tuple
    spacing: tuple = (1.0, 1.0, 1.0)
    origin: tuple = (0.0, 0.0, 0.0)


@dataclass
class Patch:
    """Cubic HU sub-volume and its origin (voxel coordinates in the parent)."""

    voxels: np.ndarray
    origin_index: tuple

    @property
    def side(self):
        return self.voxels.shape[0]

    def mean_hu(self) -> float:
        return float(self.voxels.mean())


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------

def normalize_hu(v: CtVolume, window=DEFAULT_WINDOW) -> NormalizedVolume:
    """Affine map of HU to [-1, 1]: hu_min -> -1, hu_max -> +1, outside clipped."""
    hu_min, hu_max = float(window[0]), float(window[1])
    if not hu_min < hu_max:
        raise VolumeError(f"degenerate window {window}")
    x = (v.voxels.astype(np.float64) - hu_min) / (hu_max - hu_min) * 2.0 - 1.0
    x = np.clip(x, -1.0, 1.0)
    return NormalizedVolume(
        voxels=x.astype(np.float32),
        window=(hu_min, hu_max),
        spacing=v.spacing,
        origin=v.origin,
    )


def denormalize_hu(v: NormalizedVolume) -> CtVolume:
    """Inverse of normalize_hu, rounded to integer HU."""
    hu_min, hu_max = v.window
    hu = (v.voxels.astype(np.float64) + 1.0) / 2.0 * (hu_max - hu_min) + hu_min
    hu = np.rint(hu)
    return CtVolume(voxels=hu.astype(np.float32), spacing=v.spacing, origin=v.origin)


def normalize_values(hu, window=DEFAULT_WINDOW):
    """Window map for bare arrays (used on patches inside training loops)."""
    hu_min, hu_max = float(window[0]), float(window[1])
    x = (np.asarray(hu, dtype=np.float64) - hu_min) / (hu_max - hu_min) * 2.0 - 1.0
    return np.clip(x, -1.0, 1.0)


# ---------------------------------------------------------------------------
# Patch sampling
# ---------------------------------------------------------------------------

def sample_patches(v: CtVolume, side: int, count: int, seed: int,
                   lung_mask: np.ndarray | None = None) -> list:
    """Sample `count` patches with uniformly random origins.

    Origins are drawn with replacement from the valid origin set:
    positions where the full patch lies inside the volume and, if a
    lung mask is given, entirely inside the mask support. Deterministic
    given `seed`.
    """
    Z, Y, X = v.voxels.shape
    if side > min(Z, Y, X):
        raise VolumeError(f"patch side {side} exceeds volume dimensions {v.voxels.shape}")
    if count == 0:
        return []

    if lung_mask is None:
        nz, ny, nx = Z - side + 1, Y - side + 1, X - side + 1
        valid = None
        n_valid = nz * ny * nx
    else:
        mask = np.asarray(lung_mask) > 0
        if mask.shape != v.voxels.shape:
            raise VolumeError("lung_mask shape must match volume shape")
        # Integral image gives the in-mask voxel count of every side^3 window.
        csum = np.zeros((Z + 1, Y + 1, X + 1), dtype=np.int64)
        csum[1:, 1:, 1:] = np.cumsum(np.cumsum(np.cumsum(mask, 0), 1), 2)
        s = side
        win = (csum[s:, s:, s:] - csum[:-s, s:, s:] - csum[s:, :-s, s:] - csum[s:, s:, :-s]
               + csum[:-s, :-s, s:] + csum[:-s, s:, :-s] + csum[s:, :-s, :-s]
               - csum[:-s, :-s, :-s])
        valid = np.argwhere(win == s ** 3)
        n_valid = len(valid)
        if n_valid == 0:
            raise VolumeError("lung_mask admits no fully-inside patch origin")

    rng = np.random.default_rng(seed)
    picks = rng.integers(0, n_valid, size=count)
    patches = []
    for p in picks:
        if valid is None:
            z, rem = divmod(int(p), ny * nx)
            y, x = divmod(rem, nx)
        else:
            z, y, x = (int(c) for c in valid[p])
        patches.append(Patch(
            voxels=v.voxels[z:z + side, y:y + side, x:x + side].copy(),
            origin_index=(z, y, x),
        ))
    return patches


# ---------------------------------------------------------------------------
# Synthetic phantoms
# ---------------------------------------------------------------------------

TEXTURE_KINDS = ("flat", "stripes", "speckle")


@dataclass
class PhantomRegion:
    label: PathologyLabel
    geometry: dict            # {"kind": "box", "lo": [z,y,x], "hi": [z,y,x]} or
                              # {"kind": "ellipsoid", "center": [...], "radii": [...]}
    hu_mean: float
    hu_std: float
    texture: str = "flat"


@dataclass
class PhantomSpec:
    shape: tuple
    regions: list = field(default_factory=list)
    seed: int = 0
    spacing: tuple = (0.6, 0.6, 0.6)

    def to_json(self) -> str:
        return json.dumps({
            "shape": list(self.shape),
            "seed": self.seed,
            "spacing": list(self.spacing),
            "regions": [{
                "label": r.label.name,
                "geometry": r.geometry,
                "hu_mean": r.hu_mean,
                "hu_std": r.hu_std,
                "texture": r.texture,
            } for r in self.regions],
        }, indent=2, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "PhantomSpec":
        d = json.loads(text)
        regions = [PhantomRegion(
            label=PathologyLabel[r["label"].upper()],
            geometry=r["geometry"],
            hu_mean=float(r["hu_mean"]),
            hu_std=float(r["hu_std"]),
            texture=r.get("texture", "flat"),
        ) for r in d["regions"]]
        return PhantomSpec(
            shape=tuple(d["shape"]),
            regions=regions,
            seed=int(d.get("seed", 0)),
            spacing=tuple(d.get("spacing", (0.6, 0.6, 0.6))),
        )


def _region_mask(geom: dict, shape) -> np.ndarray:
    kind = geom["kind"]
    if kind == "box":
        lo, hi = geom["lo"], geom["hi"]
        for a in range(3):
            if not (0 <= lo[a] < hi[a] <= shape[a]):
                raise VolumeError(f"box {lo}..{hi} not within shape {shape}")
        m = np.zeros(shape, dtype=bool)
        m[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]] = True
        return m
    if kind == "ellipsoid":
        c, r = geom["center"], geom["radii"]
        for a in range(3):
            if not (0 <= c[a] - r[a] and c[a] + r[a] <= shape[a]):
                raise VolumeError(f"ellipsoid {c}+-{r} not within shape {shape}")
        zz, yy, xx = np.ogrid[:shape[0], :shape[1], :shape[2]]
        return (((zz - c[0]) / r[0]) ** 2 + ((yy - c[1]) / r[1]) ** 2
                + ((xx - c[2]) / r[2]) ** 2) <= 1.0
    raise VolumeError(f"unknown geometry kind {kind!r}")


def _texture_field(kind: str, shape, rng, std: float) -> np.ndarray:
    """Zero-mean texture modulation; std scales the amplitude."""
    if kind == "flat":
        return np.zeros(shape)
    if kind == "stripes":
        # Reticular pattern: oblique sinusoidal planes, wavelength 6 voxels.
        zz, yy, xx = np.meshgrid(np.arange(shape[0]), np.arange(shape[1]),
                                 np.arange(shape[2]), indexing="ij")
        phase = float(rng.uniform(0, 2 * np.pi))
        return 1.5 * std * np.sin(2 * np.pi * (zz + yy + xx) / (3 * 6.0) + phase)
    if kind == "speckle":
        # Blobby correlated field, ~3 voxel correlation length.
        f = gaussian_filter(rng.standard_normal(shape), sigma=3.0)
        s = f.std()
        return 1.5 * std * (f / s if s > 0 else f)
    raise VolumeError(f"unknown texture kind {kind!r}; choose from {TEXTURE_KINDS}")


def generate_phantom(spec: PhantomSpec):
    """Build a labeled synthetic HU volume.

    Each region is filled with Gaussian noise N(hu_mean, hu_std) plus a
    zero-mean texture modulation; background is air at -1000 HU. The
    label volume exactly matches painted geometry. Deterministic given
    spec.seed.

    Returns:
        (CtVolume, labels) where labels is a (Z, Y, X) uint8 array of
        PathologyLabel values.
    """
    shape = tuple(spec.shape)
    hu = np.full(shape, -1000.0, dtype=np.float64)
    labels = np.zeros(shape, dtype=np.uint8)

    for i, reg in enumerate(spec.regions):
        if reg.texture not in TEXTURE_KINDS:
            raise VolumeError(f"unknown texture kind {reg.texture!r}")
        m = _region_mask(reg.geometry, shape)
        clash = m & (labels != 0) & (labels != int(reg.label))
        if clash.any():
            raise VolumeError(
                f"region {i} ({reg.label.name}) overlaps a differently-labeled region"
            )
        rng = np.random.default_rng([spec.seed, i])
        noise = rng.normal(reg.hu_mean, reg.hu_std, size=int(m.sum()))
        tex = _texture_field(reg.texture, shape, rng, reg.hu_std)[m]
        tex = tex - tex.mean() if tex.size else tex
        hu[m] = noise + tex
        labels[m] = int(reg.label)

    hu = np.clip(np.rint(hu), HU_MIN, HU_MAX)
    vol = CtVolume(voxels=hu.astype(np.float32), spacing=spec.spacing)
    return vol, labels


# ---------------------------------------------------------------------------
# File formats: raw int16 + JSON sidecar, and minimal NIfTI-1
# ---------------------------------------------------------------------------

_NIFTI_DTYPES = {2: np.uint8, 4: np.int16, 8: np.int32, 16: np.float32, 64: np.float64}
_NIFTI_CODES = {np.dtype(np.uint8): 2, np.dtype(np.int16): 4,
                np.dtype(np.float32): 16}


def _sidecar_path(path: Path) -> Path:
    return path.with_suffix(".json")


def _load_raw(path: Path) -> CtVolume:
    side = _sidecar_path(path)
    if not side.exists():
        raise VolumeError(f"missing spacing metadata: sidecar {side} not found")
    meta = json.loads(side.read_text())
    if "spacing" not in meta:
        raise VolumeError(f"missing spacing metadata in {side}")
    shape = tuple(meta["shape"])
    dtype = np.dtype(meta.get("dtype", "int16")).newbyteorder("<")
    raw = path.read_bytes()
    expected = int(np.prod(shape)) * dtype.itemsize
    if len(raw) != expected:
        raise VolumeError(f"unreadable file {path}: {len(raw)} bytes, expected {expected}")
    vox = np.frombuffer(raw, dtype=dtype).reshape(shape).astype(np.float32)
    return CtVolume(voxels=vox, spacing=tuple(meta["spacing"]),
                    origin=tuple(meta.get("origin", (0.0, 0.0, 0.0))))


def _save_raw(vol: CtVolume, path: Path, dtype="int16", descrip=""):
    arr = vol.voxels
    if dtype == "int16":
        arr = np.rint(arr).astype("<i2")
    else:
        arr = arr.astype(np.dtype(dtype).newbyteorder("<"))
    path.write_bytes(arr.tobytes())
    meta = {
        "shape": list(vol.voxels.shape),
        "spacing": list(vol.spacing),
        "origin": list(vol.origin),
        "dtype": dtype,
    }
    if descrip:
        meta["descrip"] = descrip
    _sidecar_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True))


def _load_nifti(path: Path) -> CtVolume:
    opener = gzip.open if path.name.endswith(".gz") else open
    try:
        with opener(path, "rb") as f:
            blob = f.read()
    except OSError as e:
        raise VolumeError(f"unreadable file {path}: {e}") from e
    if len(blob) < 352:
        raise VolumeError(f"unreadable file {path}: truncated header ({len(blob)} bytes)")

    hdr = blob[:348]
    sizeof_hdr = struct.unpack("<i", hdr[0:4])[0]
    if sizeof_hdr != 348 or blob[344:348] not in (b"n+1\x00", b"ni1\x00"):
        raise VolumeError(f"unreadable file {path}: not a NIfTI-1 file")
    dim = struct.unpack("<8h", hdr[40:56])
    if dim[0] < 3:
        raise VolumeError(f"unreadable file {path}: expected 3D data, dim0={dim[0]}")
    nx, ny, nz = dim[1], dim[2], dim[3]
    datatype, bitpix = struct.unpack("<2h", hdr[70:74])
    pixdim = struct.unpack("<8f", hdr[76:108])
    vox_offset = struct.unpack("<f", hdr[108:112])[0]
    scl_slope, scl_inter = struct.unpack("<2f", hdr[112:120])

    if datatype not in _NIFTI_DTYPES:
        raise VolumeError(f"unreadable file {path}: unsupported datatype code {datatype}")
    sx, sy, sz = pixdim[1], pixdim[2], pixdim[3]
    if sx <= 0 or sy <= 0 or sz <= 0:
        raise VolumeError(f"missing spacing metadata in {path}: pixdim={pixdim[1:4]}")

    dt = np.dtype(_NIFTI_DTYPES[datatype]).newbyteorder("<")
    off = int(vox_offset) if vox_offset else 352
    count = nx * ny * nz
    data = blob[off:off + count * dt.itemsize]
    if len(data) < count * dt.itemsize:
        raise VolumeError(f"unreadable file {path}: truncated data section")
    # NIfTI stores x fastest; reshape to (Z, Y, X).
    vox = np.frombuffer(data, dtype=dt).reshape(nz, ny, nx).astype(np.float64)
    slope = scl_slope if scl_slope != 0.0 and np.isfinite(scl_slope) else 1.0
    inter = scl_inter if np.isfinite(scl_inter) else 0.0
    vox = vox * slope + inter

    lo, hi = float(vox.min()), float(vox.max())
    if lo < HU_MIN or hi > HU_MAX:
        raise VolumeError(
            f"HU values outside [{HU_MIN}, {HU_MAX}] after slope/intercept: "
            f"observed range [{lo:.1f}, {hi:.1f}]"
        )
    # srow_* carries the translation; diagonal terms duplicate pixdim.
    srow = struct.unpack("<12f", hdr[280:328])
    origin = (float(srow[11]), float(srow[7]), float(srow[3]))
    return CtVolume(voxels=vox.astype(np.float32), spacing=(sz, sy, sx), origin=origin)


def _save_nifti(vol: CtVolume, path: Path, dtype="int16", descrip=""):
    nz, ny, nx = vol.voxels.shape
    sz, sy, sx = vol.spacing
    oz, oy, ox = vol.origin
    if dtype == "int16":
        arr, code = np.rint(vol.voxels).astype("<i2"), 4
    elif dtype == "uint8":
        arr, code = np.rint(vol.voxels).astype(np.uint8), 2
    else:
        arr, code = vol.voxels.astype("<f4"), 16

    hdr = bytearray(348)
    struct.pack_into("<i", hdr, 0, 348)
    struct.pack_into("<8h", hdr, 40, 3, nx, ny, nz, 1, 1, 1, 1)
    struct.pack_into("<2h", hdr, 70, code, arr.dtype.itemsize * 8)
    struct.pack_into("<8f", hdr, 76, 1.0, sx, sy, sz, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<f", hdr, 108, 352.0)          # vox_offset
    struct.pack_into("<2f", hdr, 112, 1.0, 0.0)      # scl_slope, scl_inter
    hdr[148:228] = descrip.encode()[:80].ljust(80, b"\x00")
    struct.pack_into("<h", hdr, 252, 1)              # sform_code
    struct.pack_into("<12f", hdr, 280,
                     sx, 0.0, 0.0, ox,
                     0.0, sy, 0.0, oy,
                     0.0, 0.0, sz, oz)
    hdr[344:348] = b"n+1\x00"

    payload = bytes(hdr) + b"\x00" * 4 + arr.tobytes()
    if path.name.endswith(".gz"):
        # mtime pinned so identical volumes produce identical bytes
        with open(path, "wb") as raw:
            with gzip.GzipFile(fileobj=raw, mode="wb", mtime=0) as f:
                f.write(payload)
    else:
        path.write_bytes(payload)


def load_volume(path) -> CtVolume:
    """Load a CT volume from .nii/.nii.gz or .raw (+JSON sidecar); raw HU out."""
    path = Path(path)
    if not path.exists():
        raise VolumeError(f"unreadable file {path}: no such file")
    name = path.name.lower()
    if name.endswith(".nii") or name.endswith(".nii.gz"):
        return _load_nifti(path)
    if name.endswith(".raw"):
        return _load_raw(path)
    raise VolumeError(f"unsupported format for {path} (use .nii, .nii.gz, or .raw)")


def save_volume(vol: CtVolume, path, dtype="int16", descrip=""):
    """Write a volume to .nii/.nii.gz or .raw (+JSON sidecar).

    `descrip` is embedded in the NIfTI header / raw sidecar (commands put
    the config hash there).
    """
    path = Path(path)
    name = path.name.lower()
    if name.endswith(".nii") or name.endswith(".nii.gz"):
        _save_nifti(vol, path, dtype=dtype, descrip=descrip)
    elif name.endswith(".raw"):
        _save_raw(vol, path, dtype=dtype, descrip=descrip)
    else:
        raise VolumeError(f"unsupported format for {path} (use .nii, .nii.gz, or .raw)")


def quantize_window_8bit(vol: CtVolume, window=DEFAULT_WINDOW, levels: int = 256) -> CtVolume:
    """Quantize the window to `levels` gray values (the non-HU-preserving baseline).

    Window endpoints map to levels 0 and levels-1 exactly; everything in
    between collapses onto the level grid, discarding sub-step HU detail.
    """
    lo, hi = float(window[0]), float(window[1])
    step = (hi - lo) / (levels - 1)
    q = np.clip(np.rint((vol.voxels.astype(np.float64) - lo) / step), 0, levels - 1)
    hu = np.rint(lo + q * step)
    return CtVolume(voxels=hu.astype(np.float32), spacing=vol.spacing, origin=vol.origin)
