"""Patch classifier, weak/strong augmentation and the loss stack.

The classifier is a two-layer perceptron (tanh hidden layer) on pooled patch
features:

* the band-wise mean over the whole patch (``B`` values), and
* a 3x3 grid of block means projected onto the cube's leading
  ``min(B, 8)`` principal directions (``9 * B_r`` values).

Features are standardized with statistics taken from every pixel of the
scene. Gradients are analytic; every loss returns ``(value, grads)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .errors import EmptyBatch, ShapeMismatch
from .hsicore import HsiCube, Patch, PatchSampler, SeededRng, principal_projection

MAX_PROJECTED = 8


# --------------------------------------------------------------------------
# Features
# --------------------------------------------------------------------------


def _block_bounds(size: int) -> list[tuple[int, int]]:
    out = []
    for i in range(3):
        lo = (i * size) // 3
        hi = max(((i + 1) * size) // 3, lo + 1)
        lo = min(lo, size - 1)
        out.append((lo, min(hi, size)))
    return out


@dataclass(frozen=True)
class FeatureSpec:
    patch_size: int
    proj_mean: np.ndarray       # (B,)
    proj_components: np.ndarray  # (B, B_r)
    feat_mean: np.ndarray       # (D,)
    feat_scale: np.ndarray      # (D,)

    @property
    def bands(self) -> int:
        return len(self.proj_mean)

    @property
    def dim(self) -> int:
        return self.bands + 9 * self.proj_components.shape[1]


def raw_patch_features(patches: np.ndarray, proj_mean, proj_components) -> np.ndarray:
    """Unstandardized features of an ``(n, s, s, B)`` patch batch."""
    p = np.asarray(patches, dtype=np.float64)
    if p.ndim == 3:
        p = p[None]
    n, s, _, b = p.shape
    band_mean = p.mean(axis=(1, 2))
    bounds = _block_bounds(s)
    blocks = np.stack([p[:, r0:r1, c0:c1].mean(axis=(1, 2))
                       for r0, r1 in bounds for c0, c1 in bounds], axis=1)  # (n, 9, B)
    proj = (blocks - proj_mean) @ proj_components
    return np.concatenate([band_mean, proj.reshape(n, -1)], axis=1)


def dense_raw_features(sampler: PatchSampler, proj_mean, proj_components) -> np.ndarray:
    """Features of the un-augmented patch around every pixel, via box sums."""
    pad = sampler.padded.astype(np.float64)
    h, w, b = sampler.shape
    s = sampler.size
    integ = np.zeros((pad.shape[0] + 1, pad.shape[1] + 1, b))
    integ[1:, 1:] = pad.cumsum(0).cumsum(1)

    def box(r0, r1, c0, c1):
        return (integ[r1:r1 + h, c1:c1 + w] - integ[r0:r0 + h, c1:c1 + w]
                - integ[r1:r1 + h, c0:c0 + w] + integ[r0:r0 + h, c0:c0 + w]) / ((r1 - r0) * (c1 - c0))

    band_mean = box(0, s, 0, s).reshape(h * w, b)
    bounds = _block_bounds(s)
    blocks = np.stack([box(r0, r1, c0, c1).reshape(h * w, b)
                       for r0, r1 in bounds for c0, c1 in bounds], axis=1)
    proj = (blocks - proj_mean) @ proj_components
    return np.concatenate([band_mean, proj.reshape(h * w, -1)], axis=1)


def fit_feature_spec(cube: HsiCube, patch_size: int) -> tuple[FeatureSpec, PatchSampler, np.ndarray]:
    """Fit projection and standardization on the whole scene.

    Returns the FeatureSpec, the sampler used, and the standardized dense features
    (one row per pixel, row-major).
    """
    sampler = PatchSampler(cube, patch_size)
    mean, comps = principal_projection(cube.data, min(cube.bands, MAX_PROJECTED))
    raw = dense_raw_features(sampler, mean, comps)
    mu = raw.mean(axis=0)
    sd = raw.std(axis=0)
    sd[sd < 1e-12] = 1.0
    spec = FeatureSpec(sampler.size, mean, comps, mu, sd)
    return spec, sampler, (raw - mu) / sd


def patch_features(patches: np.ndarray, spec: FeatureSpec) -> np.ndarray:
    raw = raw_patch_features(patches, spec.proj_mean, spec.proj_components)
    return (raw - spec.feat_mean) / spec.feat_scale


# --------------------------------------------------------------------------
# Parameters and forward pass
# --------------------------------------------------------------------------


@dataclass
class ClassifierParams:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    @classmethod
    def init(cls, in_dim: int, hidden: int, num_classes: int, rng: SeededRng) -> "ClassifierParams":
        g = rng.gen
        return cls(
            g.normal(0.0, 1.0 / np.sqrt(in_dim), (in_dim, hidden)),
            np.zeros(hidden),
            g.normal(0.0, 1.0 / np.sqrt(hidden), (hidden, num_classes)),
            np.zeros(num_classes),
        )

    @classmethod
    def zeros_like(cls, other: "ClassifierParams") -> "ClassifierParams":
        return cls(*(np.zeros_like(a) for a in other.arrays()))

    def arrays(self) -> list[np.ndarray]:
        return [getattr(self, f.name) for f in fields(self)]

    def names(self) -> list[str]:
        return [f.name for f in fields(self)]

    def copy(self) -> "ClassifierParams":
        return ClassifierParams(*(a.copy() for a in self.arrays()))

    def __add__(self, other: "ClassifierParams") -> "ClassifierParams":
        return ClassifierParams(*(a + b for a, b in zip(self.arrays(), other.arrays())))

    def scale(self, c: float) -> "ClassifierParams":
        return ClassifierParams(*(a * c for a in self.arrays()))

    @property
    def in_dim(self) -> int:
        return self.w1.shape[0]

    @property
    def num_classes(self) -> int:
        return self.w2.shape[1]


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _hidden(params: ClassifierParams, x: np.ndarray) -> np.ndarray:
    return np.tanh(x @ params.w1 + params.b1)


def forward(params: ClassifierParams, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(logits, probabilities)`` for a feature matrix (or one row)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.in_dim:
        raise ShapeMismatch(f"expected {params.in_dim} features, got {x.shape[-1]}")
    logits = _hidden(params, x) @ params.w2 + params.b2
    return logits, softmax(logits)


def forward_patch(params: ClassifierParams, patch: Patch | np.ndarray, spec: FeatureSpec):
    values = patch.values if isinstance(patch, Patch) else np.asarray(patch)
    if values.shape[-3:] != (spec.patch_size, spec.patch_size, spec.bands):
        raise ShapeMismatch(
            f"patch shape {values.shape[-3:]} != {(spec.patch_size, spec.patch_size, spec.bands)}")
    return forward(params, patch_features(values, spec))


def _backward(params: ClassifierParams, x: np.ndarray, dlogits: np.ndarray) -> ClassifierParams:
    h = _hidden(params, x)
    gw2 = h.T @ dlogits
    gb2 = dlogits.sum(axis=0)
    dh = (dlogits @ params.w2.T) * (1.0 - h * h)
    gw1 = x.T @ dh
    gb1 = dh.sum(axis=0)
    return ClassifierParams(gw1, gb1, gw2, gb2)


def _onehot(y: np.ndarray, k: int) -> np.ndarray:
    out = np.zeros((len(y), k))
    out[np.arange(len(y)), y - 1] = 1.0
    return out


# --------------------------------------------------------------------------
# Losses
# --------------------------------------------------------------------------


def _cross_entropy(params, x, y):
    y = np.asarray(y, dtype=np.int64)
    if np.any((y < 1) | (y > params.num_classes)):
        raise ValueError(f"labels must lie in 1..{params.num_classes}")
    logits, p = forward(params, x)
    n = len(y)
    value = -float(log_softmax(logits)[np.arange(n), y - 1].mean())
    grads = _backward(params, x, (p - _onehot(y, params.num_classes)) / n)
    return value, grads


def supervised_loss(params: ClassifierParams, x: np.ndarray, y: np.ndarray):
    """Mean cross-entropy on labeled samples (labels 1..K)."""
    if len(y) == 0:
        raise EmptyBatch("supervised loss needs at least one labeled sample")
    return _cross_entropy(params, x, y)


def easy_loss(params: ClassifierParams, x_strong: np.ndarray, pseudo: np.ndarray):
    """Cross-entropy of strong-view predictions against hard pseudo-labels."""
    if len(pseudo) == 0:
        return 0.0, ClassifierParams.zeros_like(params)
    return _cross_entropy(params, x_strong, pseudo)


def sharpen(p: np.ndarray, temperature: float) -> np.ndarray:
    """Temperature-scaled distribution ``p ** (1/T)``, renormalized."""
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    with np.errstate(divide="ignore"):
        logp = np.log(np.asarray(p, dtype=np.float64))
    return softmax(logp / temperature)


def kl_divergence(target: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Row-wise ``sum target * log(target / p)`` with ``0 log 0 = 0``."""
    t = np.asarray(target, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(t > 0, t * (np.log(t) - np.log(p)), 0.0)
    return terms.sum(axis=-1)


def ambiguous_loss(params: ClassifierParams, x_strong: np.ndarray, targets: np.ndarray):
    """Mean KL(target || p_strong); ``targets`` are treated as constants.

    ``targets`` should already be temperature-sharpened weak-view
    distributions (see :func:`sharpen`).
    """
    if len(targets) == 0:
        return 0.0, ClassifierParams.zeros_like(params)
    t = np.asarray(targets, dtype=np.float64)
    logits, p = forward(params, x_strong)
    logp = log_softmax(logits)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(t > 0, t * (np.log(t) - logp), 0.0)
    n = len(t)
    value = float(terms.sum(axis=1).mean())
    # d/dlogits of KL(t || softmax) is p - t for rows of t summing to 1
    grads = _backward(params, x_strong, (p - t) / n)
    return value, grads


def lambda_schedule(t: float, t_max: float, lambda_max: float = 0.5) -> float:
    """Linear ramp of the ambiguous-loss weight from 0 to ``lambda_max``."""
    if t_max <= 0:
        return lambda_max
    return lambda_max * min(1.0, max(0.0, t / t_max))


@dataclass(frozen=True)
class LossBreakdown:
    l_sup: float
    l_easy: float
    l_amb: float
    lambda_a: float
    l_unsup: float
    l_total: float


def total_loss(params: ClassifierParams, x_lab, y_lab, x_easy=None, y_easy=None,
               x_amb=None, t_amb=None, lambda_a: float = 0.0):
    """Supervised + easy + ``lambda_a`` * ambiguous loss and its gradient."""
    l_sup, g = supervised_loss(params, x_lab, y_lab)
    l_easy = l_amb = 0.0
    if x_easy is not None and len(x_easy):
        l_easy, ge = easy_loss(params, x_easy, y_easy)
        g = g + ge
    if x_amb is not None and len(x_amb):
        l_amb, ga = ambiguous_loss(params, x_amb, t_amb)
        g = g + ga.scale(lambda_a)
    l_unsup = l_easy + lambda_a * l_amb
    return LossBreakdown(l_sup, l_easy, l_amb, lambda_a, l_unsup, l_sup + l_unsup), g


# --------------------------------------------------------------------------
# Optimizer
# --------------------------------------------------------------------------


class Adam:
    def __init__(self, params: ClassifierParams, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(a) for a in params.arrays()]
        self.v = [np.zeros_like(a) for a in params.arrays()]
        self.t = 0

    def step(self, params: ClassifierParams, grads: ClassifierParams) -> None:
        """Update ``params`` in place."""
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for a, g, m, v in zip(params.arrays(), grads.arrays(), self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            a -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# --------------------------------------------------------------------------
# Augmentation
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class AugmentedPair:
    weak: np.ndarray
    strong: np.ndarray
    flip_h: np.ndarray
    flip_v: np.ndarray


def augment_batch(patches: np.ndarray, rng: SeededRng, sigma_s: float = 0.05) -> AugmentedPair:
    """Weak view: random horizontal/vertical flips. Strong view: same flips,
    plus Gaussian noise of scale ``sigma_s``, clamped to [0, 1]."""
    if sigma_s < 0:
        raise ValueError("sigma_s must be >= 0")
    p = np.asarray(patches)
    squeeze = p.ndim == 3
    if squeeze:
        p = p[None]
    n = len(p)
    g = rng.gen
    flip_h = g.random(n) < 0.5
    flip_v = g.random(n) < 0.5
    weak = p.copy()
    weak[flip_h] = weak[flip_h][:, :, ::-1]
    weak[flip_v] = weak[flip_v][:, ::-1]
    if sigma_s > 0:
        noise = g.standard_normal(weak.shape, dtype=np.float32) * np.float32(sigma_s)
        strong = np.clip(weak + noise, 0.0, 1.0)
    else:
        strong = weak.copy()
    if squeeze:
        weak, strong = weak[0], strong[0]
    return AugmentedPair(weak, strong, flip_h, flip_v)


def augment(patch: Patch | np.ndarray, rng: SeededRng, sigma_s: float = 0.05) -> AugmentedPair:
    values = patch.values if isinstance(patch, Patch) else patch
    return augment_batch(values, rng, sigma_s)


def flip_horizontal(values: np.ndarray) -> np.ndarray:
    return np.asarray(values)[..., :, ::-1, :]


def flip_vertical(values: np.ndarray) -> np.ndarray:
    return np.asarray(values)[..., ::-1, :, :]


# --------------------------------------------------------------------------
# Checkpoints
# --------------------------------------------------------------------------

_SPEC_ARRAYS = ("proj_mean", "proj_components", "feat_mean", "feat_scale")


def save_checkpoint(directory, params: ClassifierParams, spec: FeatureSpec, epoch: int, seed: int) -> None:
    """Write ``params.bin`` (little-endian float32) and ``manifest.json``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    layers = list(zip(params.names(), params.arrays()))
    layers += [(name, getattr(spec, name)) for name in _SPEC_ARRAYS]
    blob = b"".join(np.asarray(a, dtype="<f4").tobytes() for _, a in layers)
    (d / "params.bin").write_bytes(blob)
    manifest = {
        "layers": [{"name": n, "shape": list(np.shape(a))} for n, a in layers],
        "patch_size": spec.patch_size,
        "epoch": epoch,
        "seed": seed,
        "dtype": "f32",
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


def load_checkpoint(directory) -> tuple[ClassifierParams, FeatureSpec, dict]:
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    flat = np.frombuffer((d / "params.bin").read_bytes(), dtype="<f4")
    arrays = {}
    off = 0
    for layer in manifest["layers"]:
        n = int(np.prod(layer["shape"])) if layer["shape"] else 1
        if off + n > flat.size:
            raise ShapeMismatch("checkpoint payload shorter than its manifest")
        arrays[layer["name"]] = flat[off:off + n].reshape(layer["shape"]).astype(np.float64)
        off += n
    params = ClassifierParams(arrays["w1"], arrays["b1"], arrays["w2"], arrays["b2"])
    spec = FeatureSpec(manifest["patch_size"], *(arrays[k] for k in _SPEC_ARRAYS))
    return params, spec, manifest
