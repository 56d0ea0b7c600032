"""Least-squares estimation on the state manifold.

A small dense Levenberg-Marquardt core drives three problems: per-frame
instant localization, windowed motion-only bundle adjustment (with either
raw reprojection factors or marginalized pose priors as the visual term)
and per-landmark structure-only refinement. Covariances are read off the
final normal equation via Schur complements.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.linalg import solveh_banded

from .errors import (InsufficientObservations, SingularInformation,
                     SingularReducedBlock, TriangulationDiverged)
from .factors import (MIN_DEPTH, PinholeCamera, PosePriorFactor, PreintegratedBatch,
                      RobustKernel, inertial_batch,
                      inertial_information, inertial_jacobians, inertial_residual,
                      make_pose_prior, pose_prior_residual, projection_jacobian,
                      robust_cost, robust_weight)
from .imu import PreintegratedFactor
from .lie import hat, log_so3_batch, right_jacobian_inv, right_jacobian_inv_batch
from .state import (GRAVITY, STATE_DIM, Extrinsics, StateVector, boxminus, boxplus,
                    boxplus_many)

BLOCK_NAMES = ("phi", "t", "v", "bg", "ba")
POSE_MASK = np.array([True] * 6 + [False] * 9)
FULL_MASK = np.ones(STATE_DIM, dtype=bool)
MIN_REPROJ_FACTORS = 6
PRIOR_HUBER = float(np.sqrt(12.59))   # chi2_6(0.95)


# ---------------------------------------------------------------- normal equation

@dataclass
class NormalEquation:
    """``H dx = b`` with ``b = -J^T W r``; ``ordering`` lists (name, offset, size)."""

    H: np.ndarray
    b: np.ndarray
    ordering: list

    def indices(self, names) -> np.ndarray:
        if isinstance(names, str):
            names = [names]
        table = {n: (o, s) for n, o, s in self.ordering}
        out = []
        for n in names:
            if n not in table:
                raise KeyError(f"no block named {n!r}; have {[o[0] for o in self.ordering]}")
            o, s = table[n]
            out.extend(range(o, o + s))
        return np.array(out, dtype=int)

    def names_with_prefix(self, prefix: str) -> list:
        return [n for n, _, _ in self.ordering if n.split(".")[0] == prefix]


@dataclass(frozen=True)
class MarginalCovariance:
    block: str
    sigma: np.ndarray


def schur_marginal(ne: NormalEquation, keep):
    """Marginal information ``(H_tt - H_tr H_rr^-1 H_rt, b_t - H_tr H_rr^-1 b_r)``."""
    t = ne.indices(keep)
    r = np.setdiff1d(np.arange(len(ne.b)), t)
    Htt = ne.H[np.ix_(t, t)]
    if r.size == 0:
        return 0.5 * (Htt + Htt.T), ne.b[t].copy()
    Hrr = ne.H[np.ix_(r, r)]
    Htr = ne.H[np.ix_(t, r)]
    if np.linalg.cond(Hrr) > 1e12:
        Hrr = Hrr + 1e-12 * np.eye(len(r))
    try:
        X = np.linalg.solve(Hrr, np.column_stack([Htr.T, ne.b[r]]))
    except np.linalg.LinAlgError as exc:
        raise SingularReducedBlock(str(exc)) from None
    if not np.all(np.isfinite(X)):
        raise SingularReducedBlock("non-finite Schur complement")
    Hbar = Htt - Htr @ X[:, :-1]
    bbar = ne.b[t] - Htr @ X[:, -1]
    return 0.5 * (Hbar + Hbar.T), bbar


def recover_covariance(ne: NormalEquation, block: str, state: StateVector | None = None,
                       frame: str = "body") -> MarginalCovariance:
    """Marginal covariance of one block, propagated through the boxplus chart.

    For ``*.phi`` the tangent covariance is mapped by ``J_r^-1(phi)``; for
    ``*.t`` with ``frame="world"`` it is rotated by ``R_WB``; other blocks are
    returned as-is.
    """
    Hbar, _ = schur_marginal(ne, block)
    try:
        if np.linalg.cond(Hbar) > 1e14:
            raise np.linalg.LinAlgError("ill-conditioned")
        sigma = np.linalg.inv(Hbar)
    except np.linalg.LinAlgError as exc:
        raise SingularInformation(f"{block}: {exc}") from None
    kind = block.split(".")[-1]
    if state is not None and kind == "phi":
        J = right_jacobian_inv(state.phi)
        sigma = J @ sigma @ J.T
    elif state is not None and kind == "t" and frame == "world":
        R = state.R_WB
        sigma = R @ sigma @ R.T
    return MarginalCovariance(block, 0.5 * (sigma + sigma.T))


# ---------------------------------------------------------------- factors

class ReprojectionFactor:
    """All observations of fixed landmarks from one frame (motion-only)."""

    def __init__(self, var: int, points, pixels, extr: Extrinsics, cam: PinholeCamera,
                 sigma_px: float = 1.0, kernel: RobustKernel = RobustKernel(),
                 ids=None):
        self.vars = (var,)
        self.points = np.asarray(points, dtype=float).reshape(-1, 3)
        self.pixels = np.asarray(pixels, dtype=float).reshape(-1, 2)
        self.extr = extr
        self.cam = cam
        self.inv_sigma = 1.0 / sigma_px
        self.kernel = kernel
        self.ids = None if ids is None else np.asarray(ids)

    def __len__(self):
        return len(self.points)

    def _residual(self, x: StateVector):
        R_CW, t_CW = self.extr.camera_pose(x)
        p_C = self.points @ R_CW.T + t_CW
        ok = p_C[:, 2] > MIN_DEPTH
        z = np.where(ok, p_C[:, 2], 1.0)
        u = np.column_stack([self.cam.fx * p_C[:, 0] / z + self.cam.cx,
                             self.cam.fy * p_C[:, 1] / z + self.cam.cy])
        return (u - self.pixels) * self.inv_sigma, ok, p_C

    def cost(self, states) -> float:
        r, ok, _ = self._residual(states[self.vars[0]])
        if not np.all(ok):
            return np.inf
        return float(np.sum(robust_cost(np.sum(r * r, axis=1), self.kernel)))

    def weights(self, x: StateVector) -> np.ndarray:
        r, ok, _ = self._residual(x)
        return np.where(ok, robust_weight(np.sum(r * r, axis=1), self.kernel), 0.0)

    def linearize(self, states):
        x = states[self.vars[0]]
        r, ok, p_C = self._residual(x)
        e_sq = np.sum(r * r, axis=1)
        w = np.where(ok, robust_weight(e_sq, self.kernel), 0.0)
        cost = float(np.sum(robust_cost(e_sq[ok], self.kernel)))
        R_CW = self.extr.R_CB @ x.R_BW
        Jpi = projection_jacobian(self.cam, np.where(ok[:, None], p_C, [0, 0, 1.0]))
        P = self.points
        # -R_CW [p]x, written out for speed
        Px = np.zeros((len(P), 3, 3))
        Px[:, 0, 1], Px[:, 0, 2] = -P[:, 2], P[:, 1]
        Px[:, 1, 0], Px[:, 1, 2] = P[:, 2], -P[:, 0]
        Px[:, 2, 0], Px[:, 2, 1] = -P[:, 1], P[:, 0]
        J = np.empty((len(P), 2, 6))
        J[:, :, 0:3] = -Jpi @ (R_CW @ Px)
        J[:, :, 3:6] = Jpi @ self.extr.R_CB
        J *= self.inv_sigma
        J2 = J.reshape(-1, 6)
        Jw = J2 * np.repeat(w, 2)[:, None]
        H = np.zeros((STATE_DIM, STATE_DIM))
        H[:6, :6] = Jw.T @ J2
        g = np.zeros(STATE_DIM)
        g[:6] = Jw.T @ r.reshape(-1)
        return cost, {(self.vars[0], self.vars[0]): H}, {self.vars[0]: g}


class InertialFactor:
    def __init__(self, var_j: int, var_k: int, f: PreintegratedFactor,
                 g: np.ndarray = GRAVITY):
        self.vars = (var_j, var_k)
        self.f = f
        self.g = g
        info = inertial_information(f)
        self.sqrt_info = np.linalg.cholesky(info).T

    def cost(self, states) -> float:
        e = inertial_residual(states[self.vars[0]], states[self.vars[1]], self.f, self.g,
                              check_duration=False)
        r = self.sqrt_info @ e
        return float(r @ r)

    def linearize(self, states):
        xj, xk = states[self.vars[0]], states[self.vars[1]]
        e = inertial_residual(xj, xk, self.f, self.g, check_duration=False)
        Jj, Jk = inertial_jacobians(xj, xk, self.f, self.g, check_duration=False)
        L = self.sqrt_info
        r = L @ e
        A, B = L @ Jj, L @ Jk
        j, k = self.vars
        H = {(j, j): A.T @ A, (j, k): A.T @ B, (k, j): B.T @ A, (k, k): B.T @ B}
        g = {j: A.T @ r, k: B.T @ r}
        return float(r @ r), H, g


class InertialChainFactor:
    """Inertial factors between consecutive variables, evaluated as one batch."""

    def __init__(self, pairs, factors: Sequence[PreintegratedFactor],
                 g: np.ndarray = GRAVITY):
        self.pairs = [tuple(p) for p in pairs]
        self.vars = tuple(sorted({v for p in self.pairs for v in p}))
        self.batch = PreintegratedBatch(factors)
        self.g = g
        self.sqrt_info = np.stack([np.linalg.cholesky(inertial_information(f)).T
                                   for f in factors])

    def _split(self, states):
        return ([states[j] for j, _ in self.pairs], [states[k] for _, k in self.pairs])

    def cost(self, states) -> float:
        xj, xk = self._split(states)
        e = inertial_batch(xj, xk, self.batch, self.g, jacobians=False)
        r = np.einsum("nij,nj->ni", self.sqrt_info, e)
        return float(np.sum(r * r))

    def _linearize_pairs(self, states):
        xj, xk = self._split(states)
        e, (Jj, Jk) = inertial_batch(xj, xk, self.batch, self.g)
        L = self.sqrt_info
        r = np.einsum("nij,nj->ni", L, e)
        AB = np.concatenate([L @ Jj, L @ Jk], axis=2)           # (N, 15, 30)
        HH = AB.transpose(0, 2, 1) @ AB
        gg = np.einsum("nji,nj->ni", AB, r)
        return float(np.sum(r * r)), HH, gg

    def accumulate(self, states, H, g, sel):
        """Add into a dense system directly; pairs of free, adjacent variables
        go in as one 30x30 block."""
        cost, HH, gg = self._linearize_pairs(states)
        D = STATE_DIM
        for n, (j, k) in enumerate(self.pairs):
            sj, sk = sel[j], sel[k]
            if (sj is not None and sk is not None and sj[1] is None and sk[1] is None
                    and sk[0].start == sj[0].stop):
                sl = slice(sj[0].start, sk[0].stop)
                H[sl, sl] += HH[n]
                g[sl] += gg[n]
                continue
            for (a, ia), (b_, ib) in (((j, 0), (j, 0)), ((j, 0), (k, D)),
                                      ((k, D), (j, 0)), ((k, D), (k, D))):
                yield (a, b_), HH[n, ia:ia + D, ib:ib + D]
            yield (j,), gg[n, :D]
            yield (k,), gg[n, D:]
        self._last_cost = cost

    def linearize(self, states):
        xj, xk = self._split(states)
        e, (Jj, Jk) = inertial_batch(xj, xk, self.batch, self.g)
        L = self.sqrt_info
        r = np.einsum("nij,nj->ni", L, e)
        A, B = L @ Jj, L @ Jk
        At, Bt = A.transpose(0, 2, 1), B.transpose(0, 2, 1)
        AA, AB, BB = At @ A, At @ B, Bt @ B
        gA = np.einsum("nji,nj->ni", A, r)
        gB = np.einsum("nji,nj->ni", B, r)
        H: dict = {}
        g: dict = {}
        for n, (j, k) in enumerate(self.pairs):
            for key, blk in (((j, j), AA[n]), ((j, k), AB[n]), ((k, j), AB[n].T),
                             ((k, k), BB[n])):
                H[key] = H[key] + blk if key in H else blk
            g[j] = g[j] + gA[n] if j in g else gA[n]
            g[k] = g[k] + gB[n] if k in g else gB[n]
        return float(np.sum(r * r)), H, g


class StatePriorFactor:
    """Gaussian prior on the full 15-dim error state around ``mean``."""

    def __init__(self, var: int, mean: StateVector, info: np.ndarray):
        self.vars = (var,)
        self.mean = mean
        self.info = 0.5 * (np.asarray(info, float) + np.asarray(info, float).T)

    def _res(self, x):
        e = boxminus(x, self.mean)
        J = np.eye(STATE_DIM)
        J[0:3, 0:3] = right_jacobian_inv(e[0:3])
        return e, J

    def cost(self, states) -> float:
        e, _ = self._res(states[self.vars[0]])
        return float(e @ self.info @ e)

    def linearize(self, states):
        e, J = self._res(states[self.vars[0]])
        JtI = J.T @ self.info
        v = self.vars[0]
        return float(e @ self.info @ e), {(v, v): JtI @ J}, {v: JtI @ e}


class PosePriorTerm:
    """Robustified pose prior ``rho(||e_pose||^2_info)`` on one frame."""

    def __init__(self, var: int, prior: PosePriorFactor,
                 kernel: RobustKernel = RobustKernel("huber", PRIOR_HUBER), damping=1e-6):
        self.vars = (var,)
        self.prior = prior
        info = 0.5 * (prior.info + prior.info.T)
        if prior.rank_deficient:
            info = info + damping * np.eye(6)
        self.info = info
        self.kernel = kernel

    def cost(self, states) -> float:
        e, _ = pose_prior_residual(states[self.vars[0]], self.prior)
        return float(robust_cost(e @ self.info @ e, self.kernel))

    def linearize(self, states):
        e, J6 = pose_prior_residual(states[self.vars[0]], self.prior)
        s = float(e @ self.info @ e)
        w = float(robust_weight(s, self.kernel))
        J = np.zeros((6, STATE_DIM))
        J[:, :6] = J6
        JtI = J.T @ self.info
        v = self.vars[0]
        return float(robust_cost(s, self.kernel)), {(v, v): w * (JtI @ J)}, {v: w * (JtI @ e)}


class PosePriorBatch:
    """Several robustified pose priors (one per variable) evaluated together."""

    def __init__(self, vars_, priors: Sequence[PosePriorFactor],
                 kernel: RobustKernel = RobustKernel("huber", PRIOR_HUBER), damping=1e-6):
        terms = [PosePriorTerm(v, p, kernel, damping) for v, p in zip(vars_, priors)]
        self.vars = tuple(vars_)
        self.kernel = kernel
        self.info = np.stack([t.info for t in terms])
        self.R_hat = np.stack([p.R_hat for p in priors])
        self.t_hat = np.stack([p.t_hat for p in priors])

    def _residual(self, states):
        R_BW = np.stack([states[v]._R_BW for v in self.vars])
        t = np.stack([states[v].t for v in self.vars])
        e = np.empty((len(self.vars), 6))
        e[:, :3] = log_so3_batch(self.R_hat @ R_BW)
        e[:, 3:] = t - self.t_hat
        s = np.einsum("ni,nij,nj->n", e, self.info, e)
        return e, s

    def cost(self, states) -> float:
        _, s = self._residual(states)
        return float(np.sum(robust_cost(s, self.kernel)))

    def linearize(self, states):
        e, s = self._residual(states)
        w = robust_weight(s, self.kernel)
        J = np.zeros((len(self.vars), 6, STATE_DIM))
        J[:, :3, :3] = right_jacobian_inv_batch(e[:, :3])
        J[:, 3:, 3:6] = np.eye(3)
        JtI = J.transpose(0, 2, 1) @ self.info * w[:, None, None]
        Hn = JtI @ J
        gn = np.einsum("nij,nj->ni", JtI, e)
        H = {(v, v): Hn[i] for i, v in enumerate(self.vars)}
        g = {v: gn[i] for i, v in enumerate(self.vars)}
        return float(np.sum(robust_cost(s, self.kernel))), H, g


# ---------------------------------------------------------------- LM core

@dataclass(frozen=True)
class SolverConfig:
    max_iters: int = 20
    tol: float = 1e-8
    lambda_init: float = 1e-4
    lambda_up: float = 10.0
    lambda_down: float = 0.5


@dataclass
class SolveStats:
    iterations: int = 0
    converged: bool = False
    initial_cost: float = 0.0
    final_cost: float = 0.0
    cost_history: list = field(default_factory=list)
    seconds: float = 0.0


class Problem:
    def __init__(self, states: Sequence[StateVector], names: Sequence[str],
                 masks: Sequence[np.ndarray], factors: Sequence):
        self.states = list(states)
        self.names = list(names)
        self.masks = [np.asarray(m, dtype=bool) for m in masks]
        self.factors = list(factors)
        self.offsets = []
        self.ordering = []
        off = 0
        for name, m in zip(self.names, self.masks):
            self.offsets.append(off)
            loc = 0
            for bi, bname in enumerate(BLOCK_NAMES):
                sel = m[3 * bi:3 * bi + 3]
                if sel.all():
                    self.ordering.append((f"{name}.{bname}", off + loc, 3))
                    loc += 3
                elif sel.any():
                    raise ValueError("masks must select whole 3-vectors")
            off += int(m.sum())
        self.dim = off

    def cost(self, states) -> float:
        return float(sum(f.cost(states) for f in self.factors))

    def linearize(self, states):
        n = self.dim
        H = np.zeros((n, n))
        g = np.zeros(n)
        cost = 0.0
        sel = self._selectors()
        for f in self.factors:
            if hasattr(f, "accumulate"):
                Hb, gb = {}, {}
                for key, blk in f.accumulate(states, H, g, sel):
                    if len(key) == 2:
                        Hb[key] = Hb[key] + blk if key in Hb else blk
                    else:
                        gb[key[0]] = gb[key[0]] + blk if key[0] in gb else blk
                c = f._last_cost
            else:
                c, Hb, gb = f.linearize(states)
            cost += c
            for (a, b), blk in Hb.items():
                sa, sb = sel[a], sel[b]
                if sa is None or sb is None:
                    continue
                (ra, ia), (rb, ib) = sa, sb
                if ia is None and ib is None:
                    H[ra, rb] += blk
                else:
                    H[ra, rb] += blk[np.ix_(self.masks[a], self.masks[b])]
            for a, blk in gb.items():
                sa = sel[a]
                if sa is not None:
                    g[sa[0]] += blk if sa[1] is None else blk[self.masks[a]]
        return cost, H, -g

    def _selectors(self):
        """Per variable: None when fixed, else (slice into H, None if unmasked)."""
        if getattr(self, "_sel", None) is None:
            out = []
            for off, m in zip(self.offsets, self.masks):
                k = int(m.sum())
                out.append(None if k == 0 else
                           (slice(off, off + k), None if k == STATE_DIM else m))
            self._sel = out
        return self._sel

    def retract(self, states, dx):
        out = list(states)
        idx, ds = [], []
        for i, m in enumerate(self.masks):
            if not m.any():
                continue
            d = np.zeros(STATE_DIM)
            d[m] = dx[self.offsets[i]:self.offsets[i] + m.sum()]
            idx.append(i)
            ds.append(d)
        if idx:
            for i, x in zip(idx, boxplus_many([states[i] for i in idx], np.array(ds))):
                out[i] = x
        return out


def _bandwidth(H: np.ndarray) -> int:
    rows, cols = np.nonzero(H)
    return int(np.max(np.abs(rows - cols))) if rows.size else 0


def _solve_damped(H: np.ndarray, b: np.ndarray, lam: float, bw: int | None = None
                  ) -> np.ndarray:
    """Solve ``(H + lam diag(H)) dx = b``; banded Cholesky when H is a chain.

    ``bw`` is the half bandwidth of the sparsity pattern, computed if omitted.
    """
    n = len(b)
    d = np.maximum(np.diag(H), 1e-12)
    bw = _bandwidth(H) if bw is None else bw
    if n >= 60 and bw < n // 3:
        ab = np.zeros((bw + 1, n))
        for k in range(bw + 1):
            ab[k, :n - k] = np.diagonal(H, -k)
        ab[0] += lam * d
        try:
            return solveh_banded(ab, b, lower=True, check_finite=False)
        except (np.linalg.LinAlgError, ValueError):
            pass
    return np.linalg.solve(H + lam * np.diag(d), b)


def lm_solve(problem: Problem, cfg: SolverConfig = SolverConfig(), want_ne: bool = True):
    t0 = time.perf_counter()
    states = problem.states
    stats = SolveStats()
    cost, H, b = problem.linearize(states)
    stats.initial_cost = cost
    stats.cost_history.append(cost)
    lam = cfg.lambda_init
    fresh = True
    bw = _bandwidth(H)   # sparsity is fixed for the whole solve
    if problem.dim == 0 or cost <= 1e-24:
        stats.converged = True
    while not stats.converged and stats.iterations < cfg.max_iters:
        stats.iterations += 1
        try:
            dx = _solve_damped(H, b, lam, bw)
        except np.linalg.LinAlgError:
            lam *= cfg.lambda_up
            continue
        cand = problem.retract(states, dx)
        new_cost = problem.cost(cand)
        if np.isfinite(new_cost) and new_cost <= cost:
            rel = (cost - new_cost) / max(cost, 1e-300)
            states, cost = cand, new_cost
            stats.cost_history.append(cost)
            lam = max(lam * cfg.lambda_down, 1e-12)
            if rel < cfg.tol or cost <= 1e-24 or np.linalg.norm(dx) < 1e-12:
                stats.converged = True
                fresh = False
                break
            cost, H, b = problem.linearize(states)
            fresh = True
        else:
            lam *= cfg.lambda_up
            if np.linalg.norm(dx) < 1e-14:
                stats.converged = True
    stats.final_cost = cost
    ne = None
    if want_ne:
        if not fresh:
            _, H, b = problem.linearize(states)
        ne = NormalEquation(H, b, list(problem.ordering))
    stats.seconds = time.perf_counter() - t0
    problem.states = states
    return states, ne, stats


# ---------------------------------------------------------------- instant localization

@dataclass
class InstantResult:
    x_k: StateVector
    x_km1: StateVector | None
    ne: NormalEquation
    stats: SolveStats
    mean_reproj_px: float
    reproj: ReprojectionFactor


def solve_instant(x_k: StateVector, x_km1: StateVector | None,
                  reproj: ReprojectionFactor, inertial: PreintegratedFactor | None = None,
                  prior: StatePriorFactor | None = None, g: np.ndarray = GRAVITY,
                  cfg: SolverConfig = SolverConfig()) -> InstantResult:
    """Motion-only solve for the current frame (and the previous one when an
    inertial factor links them). Landmarks stay fixed.

    Ordering names are ``"k.*"`` and ``"k-1.*"``. Without an inertial factor only
    the current pose ``[phi, t]`` is estimated.
    """
    if len(reproj) < MIN_REPROJ_FACTORS:
        raise InsufficientObservations(
            f"{len(reproj)} reprojection factors, need {MIN_REPROJ_FACTORS}")
    if inertial is None:
        r = ReprojectionFactor(0, reproj.points, reproj.pixels, reproj.extr, reproj.cam,
                               1.0 / reproj.inv_sigma, reproj.kernel, reproj.ids)
        factors = [r]
        if prior is not None:
            factors.append(StatePriorFactor(0, prior.mean, prior.info))
        problem = Problem([x_k], ["k"], [POSE_MASK], factors)
        states, ne, stats = lm_solve(problem, cfg)
        xk_hat, xkm1_hat = states[0], None
    else:
        if x_km1 is None:
            raise ValueError("inertial factor needs the previous state")
        r = ReprojectionFactor(1, reproj.points, reproj.pixels, reproj.extr, reproj.cam,
                               1.0 / reproj.inv_sigma, reproj.kernel, reproj.ids)
        factors = [r, InertialFactor(0, 1, inertial, g)]
        if prior is not None:
            factors.append(StatePriorFactor(0, prior.mean, prior.info))
        problem = Problem([x_km1, x_k], ["k-1", "k"], [FULL_MASK, FULL_MASK], factors)
        states, ne, stats = lm_solve(problem, cfg)
        xkm1_hat, xk_hat = states
    res, ok, _ = r._residual(xk_hat)
    err = np.linalg.norm(res[ok], axis=1) / r.inv_sigma
    mean_px = float(err.mean()) if err.size else np.inf
    return InstantResult(xk_hat, xkm1_hat, ne, stats, mean_px, r)


def marginalize_visual(reproj: ReprojectionFactor | None, x_hat: StateVector,
                       frame_id: int = -1, rank_tol: float = 1e-9,
                       keep_gradient: bool = True) -> PosePriorFactor:
    """Collapse a frame's visual factors into a 6-dof pose prior at ``x_hat``.

    The information is the IRLS-weighted ``J^T W J`` at ``x_hat``. With
    ``keep_gradient`` the linear term is kept too: the prior mean moves by the
    Gauss-Newton step ``-H^+ g`` so the quadratic matches the visual cost to
    second order even when ``x_hat`` was pulled off the visual optimum by
    other factors.
    """
    if reproj is None or len(reproj) == 0:
        return make_pose_prior(x_hat, np.zeros((6, 6)), frame_id, rank_deficient=True)
    r = ReprojectionFactor(0, reproj.points, reproj.pixels, reproj.extr, reproj.cam,
                           1.0 / reproj.inv_sigma, reproj.kernel)
    _, Hs, gs = r.linearize([x_hat])
    info = Hs[(0, 0)][:6, :6]
    info = 0.5 * (info + info.T)
    ev = np.linalg.eigvalsh(info)
    deficient = bool(ev[-1] <= 0 or ev[0] <= rank_tol * ev[-1])
    center = x_hat
    if keep_gradient and not deficient:
        d = np.zeros(STATE_DIM)
        d[:6] = -np.linalg.solve(info, gs[0][:6])
        center = boxplus(x_hat, d)
    return make_pose_prior(center, info, frame_id, rank_deficient=deficient)


# ---------------------------------------------------------------- windowed BA

@dataclass(frozen=True)
class WindowConfig:
    size: int = 15
    max_iters: int = 10
    convergence_tol: float = 1e-8
    fix_oldest: bool = True
    fix_oldest_blocks: tuple = ("phi", "t", "v", "bg", "ba")

    def __post_init__(self):
        if self.size < 2:
            raise ValueError("window size must be at least 2")


@dataclass
class WindowResult:
    states: list
    stats: SolveStats


def windowed_motion_ba(states: Sequence[StateVector],
                       inertial: Sequence[PreintegratedFactor | None],
                       pose_priors: Sequence[PosePriorFactor | None] | None = None,
                       reproj: Sequence[ReprojectionFactor | None] | None = None,
                       cfg: WindowConfig = WindowConfig(), g: np.ndarray = GRAVITY
                       ) -> WindowResult:
    """Motion-only BA over a window.

    Exactly one visual backend is given: ``pose_priors`` (one per frame) or
    ``reproj`` (one batch per frame). ``inertial[i]`` links frames i and i+1.
    """
    n = len(states)
    if n < 2:
        raise ValueError("window needs at least two frames")
    if (pose_priors is None) == (reproj is None):
        raise ValueError("give exactly one of pose_priors / reproj")
    factors = []
    pairs = [(i, i + 1) for i, f in enumerate(inertial) if f is not None]
    if pairs:
        factors.append(InertialChainFactor(pairs, [inertial[i] for i, _ in pairs], g))
    if pose_priors is not None:
        idx = [i for i, p in enumerate(pose_priors) if p is not None]
        if idx:
            factors.append(PosePriorBatch(idx, [pose_priors[i] for i in idx]))
    else:
        for i, r in enumerate(reproj):
            if r is not None and len(r):
                factors.append(ReprojectionFactor(i, r.points, r.pixels, r.extr, r.cam,
                                                  1.0 / r.inv_sigma, r.kernel))
    masks = [FULL_MASK] * n
    if cfg.fix_oldest:
        m0 = FULL_MASK.copy()
        for bi, bname in enumerate(BLOCK_NAMES):
            if bname in cfg.fix_oldest_blocks:
                m0[3 * bi:3 * bi + 3] = False
        masks = [m0] + masks[1:]
    problem = Problem(states, [str(i) for i in range(n)], masks, factors)
    solver = SolverConfig(max_iters=cfg.max_iters, tol=cfg.convergence_tol)
    out, _, stats = lm_solve(problem, solver, want_ne=False)
    return WindowResult(out, stats)


# ---------------------------------------------------------------- structure-only BA

def structure_only_ba(position, observations, cam: PinholeCamera, plane_normal=None,
                      plane_point=None, plane_var: float | None = None,
                      sigma_px: float = 1.0, max_iters: int = 10,
                      max_mean_px: float = 5.0) -> np.ndarray:
    """Refine one landmark with poses fixed.

    ``observations`` is a list of ``(R_CW, t_CW, pixel)``. When a plane is given
    the penalty ``(n^T (p - mu))^2 / plane_var`` is added.
    """
    if len(observations) < 2:
        raise InsufficientObservations("landmark seen from fewer than two frames")
    planes = None
    if plane_normal is not None:
        planes = (np.asarray(plane_normal, float)[None], np.asarray(plane_point, float)[None],
                  np.array([float(plane_var)]))
    p, ok, mean_px = structure_only_ba_batch([position], [observations], cam, planes,
                                             sigma_px, max_iters, max_mean_px)
    if not ok[0]:
        raise TriangulationDiverged(f"mean reprojection error {mean_px[0]:.2f} px")
    return p[0]


def structure_only_ba_batch(positions, observations, cam: PinholeCamera, planes=None,
                            sigma_px: float = 1.0, max_iters: int = 10,
                            max_mean_px: float = 5.0):
    """Independent 3-dof LM per landmark, run in lockstep.

    ``observations[m]`` lists ``(R_CW, t_CW, pixel)`` for landmark ``m``;
    ``planes`` is ``(normals, points, variances)`` or None. Returns
    ``(positions, ok, mean_px)``; ``ok`` is False where a landmark fell behind
    a camera, became non-finite or ended above ``max_mean_px``.
    """
    M = len(positions)
    K = max(len(o) for o in observations)
    R = np.zeros((M, K, 3, 3))
    T = np.zeros((M, K, 3))
    U = np.zeros((M, K, 2))
    valid = np.zeros((M, K), dtype=bool)
    for m, obs in enumerate(observations):
        for j, (Rj, tj, uj) in enumerate(obs):
            R[m, j], T[m, j], U[m, j] = Rj, tj, uj
            valid[m, j] = True
    T[~valid] = (0.0, 0.0, 1.0)           # padding sits in front of the camera
    R[~valid] = np.eye(3)
    nobs = valid.sum(axis=1)
    vmask = valid[..., None].astype(float)
    if planes is not None:
        n = np.asarray(planes[0], float)
        mu = np.asarray(planes[1], float)
        sw = 1.0 / np.sqrt(np.asarray(planes[2], float))

    def evaluate(p):
        p_C = np.einsum("mkij,mj->mki", R, p) + T
        front = (p_C[..., 2] > MIN_DEPTH) | ~valid
        z = np.where(front, p_C[..., 2], 1.0)
        u = np.stack([cam.fx * p_C[..., 0] / z + cam.cx,
                      cam.fy * p_C[..., 1] / z + cam.cy], axis=-1)
        r = (u - U) / sigma_px * vmask
        cost = np.sum(r * r, axis=(1, 2))
        rp = None
        if planes is not None:
            rp = sw * np.einsum("mi,mi->m", n, p - mu)
            cost = cost + rp * rp
        cost = np.where(np.all(front, axis=1), cost, np.inf)
        return cost, r, rp, np.where(front[..., None], p_C, (0.0, 0.0, 1.0))

    p = np.asarray(positions, dtype=float).reshape(M, 3).copy()
    cost, r, rp, p_C = evaluate(p)
    alive = np.isfinite(cost)
    lam = np.full(M, 1e-4)
    done = ~alive
    for _ in range(max_iters):
        if np.all(done):
            break
        Jpi = projection_jacobian(cam, p_C)                      # (M, K, 2, 3)
        J = (Jpi @ R / sigma_px) * vmask[..., None]
        H = np.einsum("mkai,mkaj->mij", J, J)
        g = np.einsum("mkai,mka->mi", J, r)
        if planes is not None:
            Jp = sw[:, None] * n
            H = H + Jp[:, :, None] * Jp[:, None, :]
            g = g + Jp * rp[:, None]
        diag = np.einsum("mii->mi", H) + 1e-12
        A = H + lam[:, None, None] * (diag[:, :, None] * np.eye(3))
        step = -np.linalg.solve(A, g[..., None])[..., 0]
        step[done] = 0.0
        c_new, r_new, rp_new, pc_new = evaluate(p + step)
        acc = (c_new <= cost) & ~done
        rel = np.where(acc, (cost - c_new) / np.maximum(cost, 1e-300), np.inf)
        p[acc] += step[acc]
        r[acc] = r_new[acc]
        p_C[acc] = pc_new[acc]
        if planes is not None:
            rp[acc] = rp_new[acc]
        cost = np.where(acc, c_new, cost)
        lam = np.where(acc, lam * 0.5, lam * 10.0)
        done |= acc & ((rel < 1e-10) | (c_new < 1e-24))
    err = np.linalg.norm(r, axis=2) * sigma_px
    mean_px = err.sum(axis=1) / np.maximum(nobs, 1)
    ok = alive & np.all(np.isfinite(p), axis=1) & (mean_px <= max_mean_px)
    return p, ok, mean_px


def crlb_position_std(ne: NormalEquation, state: StateVector, name: str = "k") -> float:
    """sqrt(trace) of the world-frame position covariance implied by ``ne``.

    Uses the full [phi, t] marginal so rotation uncertainty contributes via
    ``p_W = -R_WB t``.
    """
    Hbar, _ = schur_marginal(ne, [f"{name}.phi", f"{name}.t"])
    S = np.linalg.inv(Hbar)
    # p_W(boxplus) derivatives: dp/dphi = [p]x, dp/dt = -R_WB
    J = np.hstack([hat(state.p_W), -state.R_WB])
    return float(np.sqrt(np.trace(J @ S @ J.T)))

