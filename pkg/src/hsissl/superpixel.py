"""SLIC superpixels over a 3-component principal projection of the cube."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .hsicore import HsiCube, principal_projection

# 4-connectivity structuring element
_FOUR = ndimage.generate_binary_structure(2, 1)

# projected spectra are rescaled so the leading component spans this many
# units, like the lightness channel SLIC's compactness was tuned for
SPECTRAL_RANGE = 100.0


@dataclass(frozen=True)
class SuperpixelSegmentation:
    assignment: np.ndarray          # (H, W) int region ids 0..M-1
    region_sizes: np.ndarray        # (M,)
    region_spectral_mean: np.ndarray  # (M, B)
    adjacency: tuple[frozenset, ...]

    @property
    def num_regions(self) -> int:
        return len(self.region_sizes)


def target_region_count(height: int, width: int, eps: float) -> int:
    """Number of superpixels for ``eps`` pixels per superpixel (at least 1)."""
    if eps < 1:
        raise ValueError("eps must be >= 1")
    return max(1, int(round(height * width / eps)))


def region_adjacency(assignment: np.ndarray) -> tuple[frozenset, ...]:
    """Regions sharing a 4-connected pixel edge, as a tuple indexed by region id."""
    a = np.asarray(assignment)
    m = int(a.max()) + 1 if a.size else 0
    pairs = []
    if a.shape[0] > 1:
        pairs.append(np.column_stack([a[:-1, :].ravel(), a[1:, :].ravel()]))
    if a.shape[1] > 1:
        pairs.append(np.column_stack([a[:, :-1].ravel(), a[:, 1:].ravel()]))
    nbrs: list[set] = [set() for _ in range(m)]
    if pairs:
        p = np.concatenate(pairs)
        p = p[p[:, 0] != p[:, 1]]
        p = np.unique(np.sort(p, axis=1), axis=0)
        for i, j in p:
            nbrs[i].add(int(j))
            nbrs[j].add(int(i))
    return tuple(frozenset(s) for s in nbrs)


def _grid_centers(h: int, w: int, m: int) -> np.ndarray:
    # ny x nx <= m cells with roughly square spacing; of the two row counts
    # around the ideal, keep the one that places more centers
    ideal = math.sqrt(m * h / w)
    best = None
    for ny in sorted({max(1, math.floor(ideal)), max(1, math.ceil(ideal))}):
        ny = min(ny, h, m)
        nx = max(1, min(w, m // ny))
        key = (ny * nx, -abs(ny - ideal))
        if best is None or key > best[0]:
            best = (key, ny, nx)
    _, ny, nx = best
    ys = (np.arange(ny) + 0.5) * h / ny
    xs = (np.arange(nx) + 0.5) * w / nx
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return np.column_stack([yy.ravel(), xx.ravel()])


def _spectral_features(cube: HsiCube) -> np.ndarray:
    data = cube.data.astype(np.float64)
    mean, comps = principal_projection(data, 3)
    proj = (data.reshape(-1, cube.bands) - mean) @ comps
    span = float(np.ptp(proj[:, 0])) if proj.shape[1] else 0.0
    scale = SPECTRAL_RANGE / span if span > 0 else 1.0
    return proj.reshape(cube.height, cube.width, -1) * scale


def _assign(feat, pos, centers_f, centers_p, step, compactness):
    """One SLIC assignment sweep; ties go to the lower center id."""
    h, w = feat.shape[:2]
    best = np.full((h, w), np.inf)
    label = np.full((h, w), -1, dtype=np.int64)
    radius = int(math.ceil(step))
    wgt = (compactness / step) ** 2
    for k in range(len(centers_p)):
        cy, cx = centers_p[k]
        if not np.isfinite(cy):
            continue
        y0, y1 = max(0, int(cy) - radius), min(h, int(cy) + radius + 1)
        x0, x1 = max(0, int(cx) - radius), min(w, int(cx) + radius + 1)
        f = feat[y0:y1, x0:x1]
        p = pos[y0:y1, x0:x1]
        d = ((f - centers_f[k]) ** 2).sum(-1) + wgt * ((p - centers_p[k]) ** 2).sum(-1)
        sub = best[y0:y1, x0:x1]
        better = d < sub
        sub[better] = d[better]
        label[y0:y1, x0:x1][better] = k
    missing = label < 0
    if missing.any():
        live = np.flatnonzero(np.isfinite(centers_p[:, 0]))
        fm, pm = feat[missing], pos[missing]
        d = ((fm[:, None, :] - centers_f[live][None]) ** 2).sum(-1) \
            + wgt * ((pm[:, None, :] - centers_p[live][None]) ** 2).sum(-1)
        label[missing] = live[np.argmin(d, axis=1)]
    return label


def _update(feat, pos, label, k):
    flat = label.ravel()
    counts = np.bincount(flat, minlength=k).astype(np.float64)
    cf = np.stack([np.bincount(flat, weights=feat[..., i].ravel(), minlength=k)
                   for i in range(feat.shape[-1])], axis=1)
    cp = np.stack([np.bincount(flat, weights=pos[..., i].ravel(), minlength=k)
                   for i in range(2)], axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        cf /= counts[:, None]
        cp /= counts[:, None]
    cp[counts == 0] = np.nan
    return cf, cp


def _enforce_connectivity(label: np.ndarray, min_size: float) -> np.ndarray:
    """Split regions into 4-connected components and absorb fragments.

    Each original label keeps its largest component if that component has at
    least ``min_size`` pixels. Every other component merges into the largest
    adjacent kept region (ties: lower id). Fragments are visited smallest
    first; a fragment with no kept neighbour yet waits for the next sweep.
    """
    h, w = label.shape
    comp = np.full((h, w), -1, dtype=np.int64)
    comp_owner = []
    n = 0
    for lab in np.unique(label):
        cc, nc = ndimage.label(label == lab, structure=_FOUR)
        mask = cc > 0
        comp[mask] = cc[mask] - 1 + n
        comp_owner.extend([int(lab)] * nc)
        n += nc
    sizes = np.bincount(comp.ravel(), minlength=n)
    owner = np.array(comp_owner)

    # largest component per original label (first occurrence wins ties)
    kept = np.zeros(n, dtype=bool)
    for lab in np.unique(owner):
        idx = np.flatnonzero(owner == lab)
        top = idx[np.argmax(sizes[idx])]
        if sizes[top] >= min_size:
            kept[top] = True
    if not kept.any():
        kept[int(np.argmax(sizes))] = True

    adj = region_adjacency(comp)
    target = np.arange(n)
    region_size = sizes.astype(np.int64).copy()
    pending = sorted(np.flatnonzero(~kept), key=lambda c: (sizes[c], c))
    while pending:
        waiting = []
        for c in pending:
            roots = {int(target[j]) for j in adj[c] if kept[target[j]]}
            if not roots:
                waiting.append(c)
                continue
            dest = min(roots, key=lambda r: (-region_size[r], r))
            target[c] = dest
            region_size[dest] += sizes[c]
            kept[c] = True
        if len(waiting) == len(pending):
            raise RuntimeError("connectivity cleanup stalled")
        pending = waiting
    return target[comp]


def _relabel_by_first_pixel(label: np.ndarray) -> np.ndarray:
    flat = label.ravel()
    _, first = np.unique(flat, return_index=True)
    order = np.argsort(first)
    remap = np.empty(int(flat.max()) + 1, dtype=np.int64)
    remap[np.unique(flat)[order]] = np.arange(len(order))
    return remap[label]


def summarize(cube: HsiCube, assignment: np.ndarray) -> SuperpixelSegmentation:
    """Build the segmentation record (sizes, means, adjacency) for an assignment."""
    a = np.array(assignment, dtype=np.int64)
    m = int(a.max()) + 1
    flat = a.ravel()
    sizes = np.bincount(flat, minlength=m)
    data = cube.data.reshape(-1, cube.bands).astype(np.float64)
    sums = np.zeros((m, cube.bands))
    np.add.at(sums, flat, data)
    means = sums / sizes[:, None]
    a.setflags(write=False)
    return SuperpixelSegmentation(a, sizes, means, region_adjacency(a))


def slic_segment(cube: HsiCube, m_regions: int, compactness: float = 10.0,
                 iters: int = 10) -> SuperpixelSegmentation:
    """Segment ``cube`` into at most ``m_regions`` connected superpixels.

    Distance is ``d_spec^2 + (compactness / S)^2 * d_xy^2`` with
    ``S = sqrt(H*W/M)``. Centers start on a regular grid, so the result is a
    deterministic function of the inputs.
    """
    h, w = cube.height, cube.width
    if not 1 <= m_regions <= h * w:
        raise ValueError(f"m_regions must be in [1, {h * w}], got {m_regions}")
    if iters < 1:
        raise ValueError("iters must be >= 1")
    step = math.sqrt(h * w / m_regions)
    feat = _spectral_features(cube)
    yy, xx = np.mgrid[0:h, 0:w]
    pos = np.stack([yy, xx], axis=-1).astype(np.float64)

    centers_p = _grid_centers(h, w, m_regions)
    iy = np.clip(centers_p[:, 0].astype(int), 0, h - 1)
    ix = np.clip(centers_p[:, 1].astype(int), 0, w - 1)
    centers_f = feat[iy, ix].copy()
    k = len(centers_p)
    label = None
    for _ in range(iters):
        label = _assign(feat, pos, centers_f, centers_p, step, compactness)
        centers_f, centers_p = _update(feat, pos, label, k)
    label = _enforce_connectivity(label, step * step / 4.0)
    return summarize(cube, _relabel_by_first_pixel(label))
