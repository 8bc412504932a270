"""Edge-aware superpixel label propagation.

Pipeline, run once before training:

1. superpixels that contain labeled pixels take the modal class among them;
2. the remaining superpixels are matched to class prototypes by cosine
   similarity divided by ``1 + E_j`` (``E_j``: the region's mean edge
   intensity);
3. every non-majority superpixel is re-voted by its neighbours, each vote
   weighted by ``1 / (E_k + eps)``;
4. region labels are expanded to pixels and a class-balanced set of
   pseudo-labeled pixels is drawn for semi-supervised training.

Class ids are 1..K throughout; 0 marks "unassigned".
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from .edgemap import edge_map, region_edge_intensity
from .errors import DimensionMismatch, EmptyClass, HsiError, ZeroVector
from .hsicore import HsiCube, LabelMap, SeededRng
from .superpixel import SuperpixelSegmentation, slic_segment, target_region_count

VOTE_EPS = 1e-6


class Provenance(IntEnum):
    MAJORITY = 0
    SIMILARITY = 1
    CORRECTED = 2


@dataclass(frozen=True)
class ClassSpectralPrototype:
    class_id: int
    mean_spectrum: np.ndarray


@dataclass(frozen=True)
class PseudoLabelState:
    stage1_region_labels: np.ndarray
    stage2_region_labels: np.ndarray
    pixel_pseudo_labels: np.ndarray   # (H, W), stage-2 labels with true labels kept
    provenance: np.ndarray            # per region, Provenance values
    stage1_pixel_labels: np.ndarray


@dataclass(frozen=True)
class BalancedSample:
    pixels: dict[int, np.ndarray]   # class id -> flat pixel indices

    def flat_indices(self) -> np.ndarray:
        if not self.pixels:
            return np.zeros(0, dtype=np.int64)
        return np.concatenate([self.pixels[c] for c in sorted(self.pixels)])

    def labels(self) -> np.ndarray:
        if not self.pixels:
            return np.zeros(0, dtype=np.int64)
        return np.concatenate([np.full(len(self.pixels[c]), c) for c in sorted(self.pixels)])


# --------------------------------------------------------------------------
# Primitive scores
# --------------------------------------------------------------------------


def cosine_similarity(v_i, v_j) -> float:
    a = np.asarray(v_i, dtype=np.float64)
    b = np.asarray(v_j, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ZeroVector("cosine similarity of a zero vector is undefined")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def penalized_similarity(sim, e_j):
    """Edge-penalized similarity ``sim / (1 + e_j)``."""
    if np.any(np.asarray(e_j) < 0):
        raise ValueError("edge intensity must be nonnegative")
    return sim / (1.0 + e_j)


def similarity_matrix(region_means: np.ndarray, prototypes: np.ndarray) -> np.ndarray:
    """Cosine similarity, rows = regions, columns = classes."""
    r = np.asarray(region_means, dtype=np.float64)
    p = np.asarray(prototypes, dtype=np.float64)
    rn = np.linalg.norm(r, axis=1)
    pn = np.linalg.norm(p, axis=1)
    if np.any(rn == 0):
        raise ZeroVector(f"region(s) {np.flatnonzero(rn == 0).tolist()} have a zero mean spectrum")
    if np.any(pn == 0):
        raise ZeroVector("a class prototype is the zero vector")
    return np.clip((r @ p.T) / np.outer(rn, pn), -1.0, 1.0)


# --------------------------------------------------------------------------
# Stages
# --------------------------------------------------------------------------


def class_prototypes(cube: HsiCube, labels: LabelMap) -> list[ClassSpectralPrototype]:
    """Mean spectrum of each class's labeled pixels."""
    lab = labels.labels.ravel()
    data = cube.data.reshape(-1, cube.bands).astype(np.float64)
    protos = []
    for c in labels.class_ids:
        v = data[lab == c].mean(axis=0)
        if not np.any(v):
            raise ZeroVector(f"class {c} prototype is the zero vector")
        protos.append(ClassSpectralPrototype(c, v))
    return protos


def majority_propagate(seg: SuperpixelSegmentation, labels: LabelMap) -> np.ndarray:
    """Modal labeled class per region (ties: smallest id); 0 where unlabeled."""
    if labels.labels.shape != seg.assignment.shape:
        raise DimensionMismatch("label map and segmentation dimensions differ")
    lab = labels.labels.ravel().astype(np.int64)
    if not lab.any():
        raise HsiError("label map has no labeled pixels")
    reg = seg.assignment.ravel()
    k = int(lab.max())
    mask = lab > 0
    votes = np.zeros((seg.num_regions, k + 1), dtype=np.int64)
    np.add.at(votes, (reg[mask], lab[mask]), 1)
    out = np.argmax(votes[:, 1:], axis=1) + 1   # argmax takes the first maximum
    out[votes[:, 1:].sum(axis=1) == 0] = 0
    return out


def match_unlabeled_regions(seg: SuperpixelSegmentation, prototypes: list[ClassSpectralPrototype],
                            region_edges: np.ndarray, assigned: np.ndarray | None = None
                            ) -> tuple[np.ndarray, np.ndarray]:
    """Label regions without majority labels by the best penalized similarity.

    Returns ``(labels, scores)`` where ``scores`` is the penalized similarity
    matrix (regions x classes). Only rows with ``assigned == 0`` receive a
    label; the rest of ``labels`` copies ``assigned``.
    """
    if not prototypes:
        raise HsiError("no class prototypes")
    if assigned is None:
        assigned = np.zeros(seg.num_regions, dtype=np.int64)
    ids = np.array([p.class_id for p in prototypes])
    order = np.argsort(ids, kind="stable")
    ids = ids[order]
    protos = np.stack([prototypes[i].mean_spectrum for i in order])
    todo = np.flatnonzero(assigned == 0)
    scores = np.full((seg.num_regions, len(ids)), np.nan)
    out = np.array(assigned, dtype=np.int64)
    if todo.size:
        sim = similarity_matrix(seg.region_spectral_mean[todo], protos)
        pen = penalized_similarity(sim, np.asarray(region_edges, dtype=np.float64)[todo, None])
        scores[todo] = pen
        out[todo] = ids[np.argmax(pen, axis=1)]
    return out, scores


def neighbor_correct(stage1: np.ndarray, adjacency, region_edges: np.ndarray,
                     correctable: np.ndarray | None = None, eps: float = VOTE_EPS) -> np.ndarray:
    """One synchronous pass of edge-weighted neighbour voting.

    Regions flagged in ``correctable`` (default: all) take
    ``argmax_c sum_{k in N(j)} [y_k = c] / (E_k + eps)`` over their neighbours'
    stage-1 labels. Ties keep the stage-1 label if it is among the winners,
    otherwise the smallest class id. Regions without neighbours are kept.
    """
    stage1 = np.asarray(stage1, dtype=np.int64)
    edges = np.asarray(region_edges, dtype=np.float64)
    weight = 1.0 / (edges + eps)
    if correctable is None:
        correctable = np.ones(len(stage1), dtype=bool)
    out = stage1.copy()
    for j in np.flatnonzero(correctable):
        nbrs = sorted(adjacency[j])
        if not nbrs:
            continue
        score: dict[int, float] = {}
        for k in nbrs:
            score[int(stage1[k])] = score.get(int(stage1[k]), 0.0) + weight[k]
        best = max(score.values())
        winners = sorted(c for c, s in score.items() if s == best)
        out[j] = stage1[j] if stage1[j] in winners else winners[0]
    return out


def expand_to_pixels(region_labels: np.ndarray, seg: SuperpixelSegmentation,
                     labels: LabelMap) -> np.ndarray:
    pix = np.asarray(region_labels)[seg.assignment]
    true = labels.labels.astype(np.int64)
    return np.where(true > 0, true, pix)


def balanced_sample(pixel_labels: np.ndarray, labels: LabelMap, per_class: int,
                    rng: SeededRng, classes=None) -> BalancedSample:
    """Draw up to ``per_class`` pseudo-labeled, not truly labeled pixels per class."""
    flat = np.asarray(pixel_labels).ravel()
    free = labels.labels.ravel() == 0
    if classes is None:
        classes = sorted(int(c) for c in np.unique(flat) if c > 0)
    out = {}
    for c in classes:
        pool = np.flatnonzero((flat == c) & free)
        if pool.size == 0:
            warnings.warn(f"class {c} has no pseudo-labeled pixels; skipped", EmptyClass, stacklevel=2)
            continue
        take = min(per_class, pool.size)
        out[c] = np.sort(rng.child(c).gen.choice(pool, size=take, replace=False))
    return BalancedSample(out)


def expand_and_sample(region_labels: np.ndarray, seg: SuperpixelSegmentation, labels: LabelMap,
                      per_class: int, rng: SeededRng) -> tuple[np.ndarray, BalancedSample]:
    """Pixel pseudo-label map plus a class-balanced draw from it."""
    pix = expand_to_pixels(region_labels, seg, labels)
    return pix, balanced_sample(pix, labels, per_class, rng)


# --------------------------------------------------------------------------
# End to end
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class EaslpResult:
    segmentation: SuperpixelSegmentation
    region_edges: np.ndarray
    state: PseudoLabelState
    stage1_scores: np.ndarray


def propagate(cube: HsiCube, labels: LabelMap, eps_pixels: float = 50, compactness: float = 10.0,
              slic_iters: int = 10, seg: SuperpixelSegmentation | None = None) -> EaslpResult:
    """Run segmentation, matching and neighbour correction on ``cube``."""
    if (cube.height, cube.width) != (labels.height, labels.width):
        raise DimensionMismatch("cube and label map dimensions differ")
    if not labels.class_ids:
        raise HsiError("label map has no labeled pixels")
    if seg is None:
        m = target_region_count(cube.height, cube.width, eps_pixels)
        seg = slic_segment(cube, m, compactness=compactness, iters=slic_iters)
    edges = region_edge_intensity(edge_map(cube), seg)
    majority = majority_propagate(seg, labels)
    stage1, scores = match_unlabeled_regions(seg, class_prototypes(cube, labels), edges, majority)
    correctable = majority == 0
    stage2 = neighbor_correct(stage1, seg.adjacency, edges, correctable)
    prov = np.where(majority > 0, Provenance.MAJORITY, Provenance.SIMILARITY)
    prov = np.where(correctable & (stage2 != stage1), Provenance.CORRECTED, prov)
    state = PseudoLabelState(
        stage1_region_labels=stage1,
        stage2_region_labels=stage2,
        pixel_pseudo_labels=expand_to_pixels(stage2, seg, labels),
        provenance=prov.astype(np.int64),
        stage1_pixel_labels=expand_to_pixels(stage1, seg, labels),
    )
    return EaslpResult(seg, edges, state, scores)


def pseudo_label_accuracy(pixel_labels: np.ndarray, truth: LabelMap, labels: LabelMap) -> float:
    """Agreement with ground truth over pixels that have truth but no training label."""
    t = truth.labels
    mask = (t > 0) & (labels.labels == 0)
    if not mask.any():
        return float("nan")
    return float(np.mean(np.asarray(pixel_labels)[mask] == t[mask]))
