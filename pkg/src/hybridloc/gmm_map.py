"""Gaussian-mixture geometric map with a voxel-hash spatial index.

Each component carries a precomputed whitener ``W = S^-1/2 R^T`` (so that
``||W (x - mu)||`` is the Mahalanobis distance) and its eigen-axes sorted by
ascending variance; the first axis is the flat direction, i.e. the normal of
the planar patch the component approximates.

Cell masses are normalized Gaussian probabilities estimated by a fixed
Halton quasi-Monte Carlo set: the same standard-normal point set is pushed
through every component and binned into cells, so one pass yields the mass
of every candidate cell and results are bit-reproducible.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import ndtri
from scipy.stats import qmc

from .errors import DegenerateCovariance, EmptyMixture, NonPsdCovariance, ParseError

QMC_POINTS = 4096
MIN_EIG = 1e-12


@lru_cache(maxsize=4)
def standard_normal_qmc(n: int = QMC_POINTS) -> np.ndarray:
    """Unscrambled 3-D Halton points mapped to N(0, I); the origin is skipped."""
    u = qmc.Halton(d=3, scramble=False).random(n + 1)[1:]
    z = ndtri(u)
    z.setflags(write=False)
    return z


def _eig_sorted(cov: np.ndarray):
    vals, vecs = np.linalg.eigh(0.5 * (cov + cov.T))
    order = np.argsort(vals)
    vecs = vecs[:, order]
    # deterministic axis signs: largest-magnitude entry positive
    for i in range(3):
        j = np.argmax(np.abs(vecs[:, i]))
        if vecs[j, i] < 0:
            vecs[:, i] = -vecs[:, i]
    return vals[order], vecs


def precompute_whitener(cov) -> np.ndarray:
    """``S^-1/2 R^T`` from the eigen-decomposition ``cov = R S R^T``."""
    cov = np.asarray(cov, dtype=float)
    vals, vecs = _eig_sorted(cov)
    if vals[0] < MIN_EIG:
        vals, vecs = _eig_sorted(cov + 1e-9 * np.eye(3))
        if vals[0] < MIN_EIG:
            raise DegenerateCovariance(f"smallest eigenvalue {vals[0]:.3e}")
    return (vecs / np.sqrt(vals)).T


@dataclass(frozen=True)
class GaussianComponent:
    weight: float
    mean: np.ndarray
    cov: np.ndarray
    id: int = 0
    whitener: np.ndarray = field(init=False, repr=False)
    axes: np.ndarray = field(init=False, repr=False)
    eigvals: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        mean = np.array(self.mean, dtype=float).reshape(3)
        cov = np.array(self.cov, dtype=float).reshape(3, 3)
        if not np.allclose(cov, cov.T, atol=1e-12, rtol=0):
            raise NonPsdCovariance(f"component {self.id}: covariance not symmetric")
        vals, vecs = _eig_sorted(cov)
        if vals[0] < MIN_EIG:
            if vals[0] < -1e-12:
                raise NonPsdCovariance(f"component {self.id}: eigenvalue {vals[0]:.3e}")
            raise DegenerateCovariance(f"component {self.id}: eigenvalue {vals[0]:.3e}")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)
        object.__setattr__(self, "eigvals", vals)
        object.__setattr__(self, "axes", vecs)
        object.__setattr__(self, "whitener", (vecs / np.sqrt(vals)).T)

    @property
    def normal(self) -> np.ndarray:
        return self.axes[:, 0]

    @property
    def sqrt_cov(self) -> np.ndarray:
        """``L`` with ``L L^T = cov`` (inverse of the whitener)."""
        return self.axes * np.sqrt(self.eigvals)


class GaussianMixture:
    """Immutable list of components plus stacked arrays for vectorized queries."""

    def __init__(self, components: Sequence[GaussianComponent]):
        comps = list(components)
        for i, c in enumerate(comps):
            if c.id != i:
                raise ValueError(f"component at index {i} has id {c.id}")
        self.components = tuple(comps)
        if comps:
            self.weights = np.array([c.weight for c in comps])
            self.means = np.stack([c.mean for c in comps])
            self.covs = np.stack([c.cov for c in comps])
            self.whiteners = np.stack([c.whitener for c in comps])
            self.normals = np.stack([c.normal for c in comps])
            self.min_eigs = np.array([c.eigvals[0] for c in comps])
        else:
            self.weights = np.zeros(0)
            self.means = np.zeros((0, 3))
            self.covs = np.zeros((0, 3, 3))
            self.whiteners = np.zeros((0, 3, 3))
            self.normals = np.zeros((0, 3))
            self.min_eigs = np.zeros(0)

    @classmethod
    def from_arrays(cls, weights, means, covs) -> "GaussianMixture":
        return cls([GaussianComponent(float(w), m, c, id=i)
                    for i, (w, m, c) in enumerate(zip(weights, means, covs))])

    def __len__(self) -> int:
        return len(self.components)

    def __getitem__(self, i: int) -> GaussianComponent:
        return self.components[i]

    def __iter__(self):
        return iter(self.components)


# ---------------------------------------------------------------- voxel grid

@dataclass(frozen=True)
class VoxelGrid:
    """Hash from integer cell index to the sorted ids of intersecting components.

    Cell ``i`` covers ``[i * resolution, (i + 1) * resolution)`` on each axis.
    """

    resolution: float
    cells: dict

    def cell_of(self, p) -> tuple:
        i = np.floor(np.asarray(p, dtype=float) / self.resolution).astype(np.int64)
        return (int(i[0]), int(i[1]), int(i[2]))

    def lookup(self, p) -> tuple:
        return self.cells.get(self.cell_of(p), ())

    def __eq__(self, other) -> bool:
        return (isinstance(other, VoxelGrid) and self.resolution == other.resolution
                and self.cells == other.cells)

    def __len__(self) -> int:
        return len(self.cells)


def _cell_masses(comp: GaussianComponent, resolution: float, n: int = QMC_POINTS):
    """Unique cells hit by the component's QMC samples and their mass estimates."""
    z = standard_normal_qmc(n)
    X = comp.mean + z @ comp.sqrt_cov.T
    idx = np.floor(X / resolution).astype(np.int64)
    cells, counts = np.unique(idx, axis=0, return_counts=True)
    return cells, counts / float(n)


def box_mass(comp: GaussianComponent, cell, resolution: float = 0.1) -> float:
    """Probability mass of ``comp`` inside one axis-aligned cube cell."""
    z = standard_normal_qmc()
    X = comp.mean + z @ comp.sqrt_cov.T
    idx = np.floor(X / resolution).astype(np.int64)
    inside = np.all(idx == np.asarray(cell, dtype=np.int64), axis=1)
    return float(np.count_nonzero(inside)) / len(z)


def build_voxel_index(mixture: GaussianMixture, resolution: float = 0.1,
                      rel_threshold: float = 0.1) -> VoxelGrid:
    """Register each component in every cell holding at least ``rel_threshold``
    of that component's largest cell mass, among cells of its 3-sigma box."""
    if len(mixture) == 0:
        raise EmptyMixture("cannot index an empty mixture")
    buckets: dict = {}
    for comp in mixture:
        cells, mass = _cell_masses(comp, resolution)
        half = 3.0 * np.sqrt(np.diag(comp.cov))
        lo = np.floor((comp.mean - half) / resolution)
        hi = np.floor((comp.mean + half) / resolution)
        in_box = np.all((cells >= lo) & (cells <= hi), axis=1)
        if np.any(in_box):
            cells, mass = cells[in_box], mass[in_box]
        keep = mass >= rel_threshold * mass.max()
        for c in cells[keep]:
            buckets.setdefault((int(c[0]), int(c[1]), int(c[2])), []).append(comp.id)
    return VoxelGrid(resolution, {k: tuple(sorted(v)) for k, v in buckets.items()})


# ---------------------------------------------------------------- file format

def save_map(mixture: GaussianMixture, path) -> None:
    doc = {"components": [
        {"weight": float(c.weight), "mean": [float(x) for x in c.mean],
         "cov": [float(x) for x in c.cov.reshape(9)]}
        for c in mixture
    ]}
    Path(path).write_text(json.dumps(doc, indent=1))


def load_map(path) -> GaussianMixture:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: line {exc.lineno}: {exc.msg}") from None
    if not isinstance(doc, dict) or not isinstance(doc.get("components"), list):
        raise ParseError(f"{path}: missing 'components' list")
    comps = []
    for i, rec in enumerate(doc["components"]):
        where = f"{path}: components[{i}]"
        if not isinstance(rec, dict):
            raise ParseError(f"{where}: expected an object")
        for key, n in (("weight", None), ("mean", 3), ("cov", 9)):
            if key not in rec:
                raise ParseError(f"{where}: missing field '{key}'")
            val = rec[key]
            if n is None:
                if not isinstance(val, (int, float)):
                    raise ParseError(f"{where}.{key}: expected a number")
            elif not isinstance(val, list) or len(val) != n:
                got = len(val) if isinstance(val, list) else type(val).__name__
                raise ParseError(f"{where}.{key}: expected {n} numbers, got {got}")
        cov = np.array(rec["cov"], dtype=float).reshape(3, 3)
        if not np.allclose(cov, cov.T, atol=1e-12, rtol=0) or np.linalg.eigvalsh(
                0.5 * (cov + cov.T))[0] <= 0:
            raise NonPsdCovariance(f"{where}.cov: not symmetric positive definite")
        comps.append(GaussianComponent(float(rec["weight"]), rec["mean"], cov, id=i))
    total = sum(c.weight for c in comps)
    if comps and abs(total - 1.0) > 1e-6:
        raise ParseError(f"{path}: weights sum to {total}, expected 1")
    return GaussianMixture(comps)
