"""Core data types, seeded randomness, cube/label I/O and synthetic scenes.

Cubes are stored as float32 ``(height, width, bands)`` arrays in row-major
``(y, x, band)`` order, which is also the on-disk payload layout, so a
write/read round trip is bit-exact.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .errors import (
    BadCenter,
    ConstantCube,
    HeaderMismatch,
    InfeasibleSpec,
    PatchClamped,
    ShapeMismatch,
    TruncatedPayload,
)

DEFAULT_PATCH = 24
_SEED_MASK = (1 << 64) - 1


# --------------------------------------------------------------------------
# Randomness
# --------------------------------------------------------------------------


class SeededRng:
    """Deterministic random stream backed by numpy's Philox-4x64 generator.

    Philox is counter-based, and the seed is expanded through
    ``SeedSequence``; both are specified bit-for-bit, so the stream for a given
    ``(seed, path)`` is identical on every platform. ``child`` derives
    independent sub-streams by appending integer keys to the path, which lets
    each stochastic step own its stream without consuming draws from others.
    """

    algorithm = "philox4x64-10/seedsequence"

    def __init__(self, seed: int, path: tuple[int, ...] = ()):
        self.seed = int(seed) & _SEED_MASK
        self.path = tuple(int(p) for p in path)
        entropy = [self.seed, *self.path]
        self.gen = np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))

    def child(self, *keys: int) -> "SeededRng":
        return SeededRng(self.seed, self.path + tuple(keys))

    def __repr__(self) -> str:
        return f"SeededRng(seed={self.seed}, path={self.path})"


# --------------------------------------------------------------------------
# Data types
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class HsiCube:
    data: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=np.float32)
        if arr.ndim != 3:
            raise ShapeMismatch(f"cube must be 3-D (H, W, B), got shape {arr.shape}")
        h, w, b = arr.shape
        if h < 3 or w < 3 or b < 1:
            raise ShapeMismatch(f"cube needs H, W >= 3 and B >= 1, got {arr.shape}")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def bands(self) -> int:
        return self.data.shape[2]

    def __eq__(self, other):
        if not isinstance(other, HsiCube):
            return NotImplemented
        return self.data.shape == other.data.shape and bool(np.array_equal(self.data, other.data))

    __hash__ = None


@dataclass(frozen=True)
class LabelMap:
    """Per-pixel class ids; 0 means unlabeled."""

    labels: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.labels)
        if arr.ndim != 2:
            raise ShapeMismatch(f"label map must be 2-D, got shape {arr.shape}")
        if arr.size and (arr.min() < 0 or arr.max() > np.iinfo(np.uint16).max):
            raise ShapeMismatch("label ids must fit in uint16")
        arr = np.ascontiguousarray(arr, dtype=np.uint16)
        arr.setflags(write=False)
        object.__setattr__(self, "labels", arr)

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    @property
    def class_ids(self) -> list[int]:
        ids = np.unique(self.labels)
        return [int(c) for c in ids if c != 0]

    def __eq__(self, other):
        if not isinstance(other, LabelMap):
            return NotImplemented
        return bool(np.array_equal(self.labels, other.labels))

    __hash__ = None


@dataclass(frozen=True)
class Patch:
    center: tuple[int, int]
    size: int
    values: np.ndarray


@dataclass(frozen=True)
class SceneSpec:
    """Parameters of a synthetic piecewise-constant scene.

    ``region_granularity`` is the expected number of pixels per Voronoi cell
    and ``signature_separation`` the minimum RMS (per-band) distance between
    any two class signatures, which makes it directly comparable to
    ``noise_sigma``.
    """

    height: int = 64
    width: int = 64
    bands: int = 16
    num_classes: int = 5
    region_granularity: float = 400.0
    signature_separation: float = 0.15
    noise_sigma: float = 0.0

    def validate(self) -> None:
        if self.num_classes < 2:
            raise InfeasibleSpec("num_classes must be >= 2")
        if self.signature_separation <= 0:
            raise InfeasibleSpec("signature_separation must be > 0")
        if self.noise_sigma < 0:
            raise InfeasibleSpec("noise_sigma must be >= 0")
        if self.height < 3 or self.width < 3 or self.bands < 1:
            raise InfeasibleSpec("scene needs height, width >= 3 and bands >= 1")
        if self.region_granularity <= 0:
            raise InfeasibleSpec("region_granularity must be > 0")


# --------------------------------------------------------------------------
# Operations
# --------------------------------------------------------------------------


def normalize_cube(cube: HsiCube) -> HsiCube:
    """Global min-max scaling of every value to [0, 1]."""
    x = cube.data.astype(np.float64)
    finite = x[np.isfinite(x)]
    if finite.size == 0:
        raise ConstantCube("cube has no finite values")
    lo, hi = finite.min(), finite.max()
    if hi <= lo:
        raise ConstantCube(f"cube is constant (value {lo})")
    out = (x - lo) / (hi - lo)
    return HsiCube(np.clip(out, 0.0, 1.0))


def _clamped_size(size: int, height: int, width: int) -> int:
    if size < 1:
        raise ValueError("patch size must be >= 1")
    limit = min(height, width)
    if size > limit:
        warnings.warn(f"patch size {size} exceeds image ({height}x{width}); using {limit}",
                      PatchClamped, stacklevel=3)
        return limit
    return size


def extract_patch(cube: HsiCube, center: tuple[int, int], size: int = DEFAULT_PATCH) -> Patch:
    """Cut a ``size x size x B`` block around ``center`` with mirror padding.

    The block spans rows ``r - size//2 .. r - size//2 + size - 1`` (same for
    columns). Outside the image, samples are mirrored about the border with
    the edge pixel repeated (``a b c | c b a``).
    """
    r, c = int(center[0]), int(center[1])
    if not (0 <= r < cube.height and 0 <= c < cube.width):
        raise BadCenter(f"center {center} outside {cube.height}x{cube.width} image")
    size = _clamped_size(size, cube.height, cube.width)
    rows = _mirror_index(np.arange(r - size // 2, r - size // 2 + size), cube.height)
    cols = _mirror_index(np.arange(c - size // 2, c - size // 2 + size), cube.width)
    values = cube.data[np.ix_(rows, cols)]
    return Patch((r, c), size, values)


def _mirror_index(idx: np.ndarray, n: int) -> np.ndarray:
    period = 2 * n
    m = np.mod(idx, period)
    return np.where(m < n, m, period - 1 - m)


class PatchSampler:
    """Batched patch extraction; pads the cube once and slices views."""

    def __init__(self, cube: HsiCube, size: int = DEFAULT_PATCH):
        self.size = _clamped_size(size, cube.height, cube.width)
        before = self.size // 2
        after = self.size - 1 - before
        self.padded = np.pad(cube.data, ((before, after), (before, after), (0, 0)), mode="symmetric")
        self.shape = cube.data.shape

    def patches(self, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
        """Return an ``(n, size, size, B)`` float32 array of patches."""
        s = self.size
        rows = np.asarray(rows, dtype=np.intp)
        cols = np.asarray(cols, dtype=np.intp)
        ri = rows[:, None, None] + np.arange(s)[None, :, None]
        ci = cols[:, None, None] + np.arange(s)[None, None, :]
        return self.padded[ri, ci]


def principal_projection(samples: np.ndarray, k: int, iters: int = 200) -> tuple[np.ndarray, np.ndarray]:
    """Leading principal directions by deflated power iteration.

    Returns ``(mean, components)`` with ``components`` of shape ``(B, k')``
    where ``k' = min(k, B)``. Each component has its first nonzero coordinate
    positive; a degenerate (zero-variance) direction comes back as zeros.
    """
    x = np.asarray(samples, dtype=np.float64)
    x = x.reshape(-1, x.shape[-1])
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / max(len(x), 1)
    b = cov.shape[0]
    k = min(k, b)
    comps = np.zeros((b, k))
    start = 1.0 / np.arange(1, b + 1)
    start /= np.linalg.norm(start)
    for j in range(k):
        v = start.copy()
        for _ in range(iters):
            w = cov @ v
            n = np.linalg.norm(w)
            if n < 1e-300:
                v = np.zeros(b)
                break
            v = w / n
        nz = np.flatnonzero(np.abs(v) > 1e-12)
        if nz.size and v[nz[0]] < 0:
            v = -v
        comps[:, j] = v
        lam = float(v @ cov @ v)
        cov = cov - lam * np.outer(v, v)
    return mean, comps


def _smooth_signature(gen: np.random.Generator, bands: int) -> np.ndarray:
    grid = np.linspace(0.0, 1.0, bands)
    sig = np.full(bands, gen.uniform(0.35, 0.5))
    for _ in range(3):
        mu = gen.uniform(-0.1, 1.1)
        width = gen.uniform(0.15, 0.35)
        amp = gen.uniform(-0.15, 0.15)
        sig += amp * np.exp(-0.5 * ((grid - mu) / width) ** 2)
    return sig


def _rms(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.sqrt(np.mean((a - b) ** 2)))


def _class_signatures(gen: np.random.Generator, spec: SceneSpec, tries: int = 5000) -> np.ndarray:
    """Base signature plus smooth per-class offsets, scaled so the closest pair
    of classes is exactly ``signature_separation`` apart (RMS over bands).

    Offsets are drawn so that every pair also differs in mean brightness by at
    least half their RMS distance; this keeps the band-mean edge map informative
    at every class boundary.
    """
    sep = spec.signature_separation
    for _ in range(tries):
        base = _smooth_signature(gen, spec.bands)
        # evenly spread brightness levels keep the closest pair from collapsing
        levels = gen.permutation(np.linspace(-1.0, 1.0, spec.num_classes))
        offsets: list[np.ndarray] = []
        for _ in range(tries):
            level = levels[len(offsets)] + gen.uniform(-0.1, 0.1)
            cand = _smooth_signature(gen, spec.bands) - 0.4 + level
            if all(abs(cand.mean() - o.mean()) >= 0.5 * _rms(cand, o) for o in offsets):
                offsets.append(cand)
                if len(offsets) == spec.num_classes:
                    break
        else:
            break
        d = np.stack(offsets)
        d -= d.mean(axis=0)
        closest = min(_rms(d[i], d[j]) for i in range(len(d)) for j in range(i))
        sigs = base + d * (sep / closest)
        if sigs.min() >= 0.02 and sigs.max() <= 1.0:
            return sigs
    raise InfeasibleSpec(
        f"could not place {spec.num_classes} signatures {sep} apart inside [0.02, 1]")


def _voronoi_layout(gen: np.random.Generator, spec: SceneSpec) -> np.ndarray:
    h, w, k = spec.height, spec.width, spec.num_classes
    n_cells = max(k, int(round(h * w / spec.region_granularity)))
    seeds = np.column_stack([gen.uniform(0, h, n_cells), gen.uniform(0, w, n_cells)])
    yy, xx = np.mgrid[0:h, 0:w]
    pix = np.column_stack([yy.ravel() + 0.5, xx.ravel() + 0.5])
    _, cell = cKDTree(seeds).query(pix)
    cell_class = np.concatenate([gen.permutation(k), gen.integers(0, k, n_cells - k)]) + 1
    return cell_class[cell].reshape(h, w)


def generate_scene(spec: SceneSpec, rng: SeededRng) -> tuple[HsiCube, LabelMap]:
    """Draw a Voronoi ground-truth map, class signatures and noisy spectra."""
    spec.validate()
    min_share = 0.01 * spec.height * spec.width
    for attempt in range(10):
        labels = _voronoi_layout(rng.child(0, attempt).gen, spec)
        counts = np.bincount(labels.ravel(), minlength=spec.num_classes + 1)[1:]
        if counts.min() >= max(min_share, 1):
            break
    else:
        raise InfeasibleSpec("a class stayed below 1% of pixels after 10 reseeds")
    sigs = _class_signatures(rng.child(1).gen, spec)
    cube = HsiCube(sigs[labels - 1])
    return add_noise(cube, spec.noise_sigma, rng.child(2)), LabelMap(labels)


def add_noise(cube: HsiCube, sigma: float, rng: SeededRng) -> HsiCube:
    """Additive i.i.d. Gaussian noise of scale ``sigma`` on every value."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0:
        return cube
    data = cube.data.astype(np.float64)
    return HsiCube(data + sigma * rng.gen.standard_normal(data.shape))


# --------------------------------------------------------------------------
# File I/O
# --------------------------------------------------------------------------


def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".json")


def _read_header(path: Path, dtype_tag: str, order: str, fields: tuple[str, ...]) -> dict:
    side = _sidecar(path)
    try:
        header = json.loads(side.read_text())
    except FileNotFoundError:
        raise HeaderMismatch(f"missing sidecar {side}") from None
    except json.JSONDecodeError as exc:
        raise HeaderMismatch(f"{side}: invalid JSON ({exc})") from None
    for key in fields:
        val = header.get(key)
        if not isinstance(val, int) or isinstance(val, bool) or val <= 0:
            raise HeaderMismatch(f"{side}: field {key!r} must be a positive integer, got {val!r}")
    if header.get("dtype") != dtype_tag:
        raise HeaderMismatch(f"{side}: dtype must be {dtype_tag!r}, got {header.get('dtype')!r}")
    if header.get("order") != order:
        raise HeaderMismatch(f"{side}: order must be {order!r}, got {header.get('order')!r}")
    return header


def _read_payload(path: Path, dtype: str, count: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    itemsize = np.dtype(dtype).itemsize
    if len(raw) < count * itemsize:
        raise TruncatedPayload(f"{path}: expected {count * itemsize} bytes, found {len(raw)}")
    if len(raw) > count * itemsize:
        raise HeaderMismatch(f"{path}: payload has {len(raw)} bytes, header implies {count * itemsize}")
    return np.frombuffer(raw, dtype=dtype, count=count)


def write_cube(cube: HsiCube, path) -> None:
    path = Path(path)
    header = {"height": cube.height, "width": cube.width, "bands": cube.bands,
              "dtype": "f32", "order": "yxb"}
    path.write_bytes(cube.data.astype("<f4").tobytes(order="C"))
    _sidecar(path).write_text(json.dumps(header, indent=2) + "\n")


def read_cube(path) -> HsiCube:
    path = Path(path)
    h = _read_header(path, "f32", "yxb", ("height", "width", "bands"))
    flat = _read_payload(path, "<f4", h["height"] * h["width"] * h["bands"])
    return HsiCube(flat.reshape(h["height"], h["width"], h["bands"]).astype(np.float32))


def write_labels(labels: LabelMap, path) -> None:
    path = Path(path)
    header = {"height": labels.height, "width": labels.width, "dtype": "u16", "order": "yx"}
    path.write_bytes(labels.labels.astype("<u2").tobytes(order="C"))
    _sidecar(path).write_text(json.dumps(header, indent=2) + "\n")


def read_labels(path) -> LabelMap:
    path = Path(path)
    h = _read_header(path, "u16", "yx", ("height", "width"))
    flat = _read_payload(path, "<u2", h["height"] * h["width"])
    return LabelMap(flat.reshape(h["height"], h["width"]).astype(np.uint16))
