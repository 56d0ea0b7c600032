"""Reference implementations used only by the tests.

They are deliberately brute force and share no code paths with the
package beyond its data types.
"""
from __future__ import annotations

import numpy as np


# ---------------------------------------------------------------- association

def scan_ray(origin, bearing, means, covs, gate, max_range=np.inf):
    """Exhaustive scan over every component.

    Returns ``(best, passing)``: ``best`` is the gated component of smallest
    line-to-mean Mahalanobis distance (or None) and ``passing`` maps every
    gated component id to ``(distance, depth)``. Depth is measured to each
    component's plane, whose normal is the flattest covariance axis.
    """
    passing = {}
    for i, (m, C) in enumerate(zip(means, covs)):
        Ci = np.linalg.inv(C)
        # closest point on the line in the metric of C: minimize (o + s d - m)^T Ci (.)
        r = origin - m
        s = -(bearing @ Ci @ r) / (bearing @ Ci @ bearing)
        q = r + s * bearing
        dist = float(np.sqrt(q @ Ci @ q))
        w, V = np.linalg.eigh(C)
        n = V[:, 0]
        den = n @ bearing
        if abs(den) < 1e-6:
            continue
        depth = float(n @ (m - origin) / den)
        if dist <= gate and 0 < depth <= max_range:
            passing[i] = (dist, depth)
    if not passing:
        return None, passing
    best = min(passing, key=lambda i: (passing[i][0], passing[i][1], i))
    return best, passing


class ScanOracle:
    """:func:`scan_ray` with per-component inverses and normals precomputed.

    Evaluates every component for each ray in one vectorized pass; used
    where tens of thousands of rays have to be checked.
    """

    def __init__(self, means, covs):
        self.means = np.asarray(means, dtype=float)
        covs = np.asarray(covs, dtype=float)
        self.Ci = np.linalg.inv(covs)
        self.normals = np.linalg.eigh(covs)[1][:, :, 0]

    def scan(self, origin, bearing, gate, max_range=np.inf):
        r = origin - self.means
        Cd = self.Ci @ bearing
        s = -np.einsum("ni,ni->n", r, Cd) / (Cd @ bearing)
        q = r + s[:, None] * bearing
        dist = np.sqrt(np.einsum("ni,nij,nj->n", q, self.Ci, q))
        den = self.normals @ bearing
        ok = np.abs(den) >= 1e-6
        depth = np.where(ok, np.einsum("ni,ni->n", self.normals, -r) / np.where(ok, den, 1.0),
                         -1.0)
        hit = ok & (dist <= gate) & (depth > 0) & (depth <= max_range)
        passing = {int(i): (float(dist[i]), float(depth[i])) for i in np.flatnonzero(hit)}
        if not passing:
            return None, passing
        best = min(passing, key=lambda i: (passing[i][0], passing[i][1], i))
        return best, passing


# ---------------------------------------------------------------- voxel mass

def mc_box_mass(mean, cov, cell, resolution, n=400_000, seed=0):
    """Plain Monte-Carlo estimate of a Gaussian's mass inside one cube cell."""
    rng = np.random.default_rng(seed)
    X = rng.multivariate_normal(mean, cov, size=n)
    idx = np.floor(X / resolution).astype(np.int64)
    return float(np.mean(np.all(idx == np.asarray(cell), axis=1)))


# ---------------------------------------------------------------- covariance

def random_spd(rng, n, cond=1e3):
    Q, _ = np.linalg.qr(rng.normal(size=(n, n)))
    ev = np.exp(rng.uniform(0, np.log(cond), size=n))
    return (Q * ev) @ Q.T


def dense_marginal_cov(H, idx):
    """Marginal covariance of ``idx`` by inverting the full matrix."""
    return np.linalg.inv(H)[np.ix_(idx, idx)]


def mc_least_squares_cov(J, sigma, idx, n_samples=100_000, seed=0):
    """Sample covariance of the LS estimate under Gaussian measurement noise.

    Draws noise on ``z = J x + e``, solves each problem, and returns the
    empirical covariance of the ``idx`` entries of the estimate.
    """
    rng = np.random.default_rng(seed)
    m = J.shape[0]
    E = rng.normal(size=(n_samples, m)) * sigma
    # the LS estimate error is linear in the noise: dx = (J^T W J)^-1 J^T W e
    W = 1.0 / sigma ** 2
    P = np.linalg.solve(J.T @ (J * W[:, None]), (J * W[:, None]).T)
    X = E @ P.T
    return np.cov(X[:, idx], rowvar=False)


def occlusion_pick(passing, margin):
    """Smallest-distance component within ``margin`` of the front-most gated depth."""
    if not passing:
        return None
    front = min(d for _, d in passing.values())
    band = [(v[0], v[1], i) for i, v in passing.items() if v[1] <= front + margin]
    return min(band)[2]
