"""Discrete Information Bottleneck solver and rate-relevance curve checks.

The trade-off weight ``beta`` multiplies the rate: the solver maximises
I(Z; M) - beta * I(Z; X). In the usual self-consistent iteration this is an
inverse temperature of 1 / beta on the KL distortion.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .info import JointPMF, entropy, mutual_information

MERGE_TOL = 1e-6
CORNER_RATE = 1e-6


@dataclass
class StochasticEncoder:
    p_z_given_x: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.p_z_given_x, dtype=float)
        if q.ndim != 2 or np.any(q < 0) or np.any(np.abs(q.sum(axis=1) - 1.0) > 1e-10):
            raise ValueError("encoder rows must be non-negative and sum to 1")
        self.p_z_given_x = q

    @property
    def z_size(self) -> int:
        return self.p_z_given_x.shape[1]


@dataclass
class IBCurvePoint:
    beta: float
    rate: float
    relevance: float
    epsilon: float
    objective: float
    converged: bool = True
    iterations: int = 0

    def row(self) -> list:
        return [self.beta, self.rate, self.relevance, self.epsilon, self.objective, int(self.converged)]


@dataclass
class CurveGeometryReport:
    monotone: bool
    convex: bool
    slope_errors: list = field(default_factory=list)
    slope_betas: list = field(default_factory=list)
    beta_epsilon_monotone: bool = True
    flagged: list = field(default_factory=list)
    n_points: int = 0


def encoder_terms(j: JointPMF, q: np.ndarray):
    """Rate I(Z;X) and relevance I(Z;M) of an encoder p(z|x)."""
    px = j.p_x
    pxz = px[:, None] * q
    pmz = j.p @ q
    rate = mutual_information(JointPMF(pxz / pxz.sum()))
    rel = mutual_information(JointPMF(pmz / pmz.sum()))
    return rate, rel


def _kl_rows(post: np.ndarray, dec: np.ndarray) -> np.ndarray:
    """D[x, z] = KL(p(m|x) || p(m|z)); post is (m, x), dec is (m, z)."""
    with np.errstate(divide="ignore"):
        log_post = np.where(post > 0, np.log(np.where(post > 0, post, 1.0)), 0.0)
        log_dec = np.log(dec)
    neg_ent = np.sum(post * log_post, axis=0)  # (x,)
    # -inf * 0 would be nan: only keep m where p(m|x) > 0
    cross = np.einsum("mx,mz->xz", post, np.where(np.isfinite(log_dec), log_dec, -1e300))
    return neg_ent[:, None] - cross


def _update(j: JointPMF, q: np.ndarray, beta: float) -> np.ndarray:
    px = j.p_x
    post = j.posteriors()
    pz = px @ q
    with np.errstate(invalid="ignore", divide="ignore"):
        dec = np.where(pz > 0, (j.p @ q) / np.where(pz > 0, pz, 1.0), 0.0)
    d = _kl_rows(post, dec)
    with np.errstate(divide="ignore"):
        logits = np.log(pz)[None, :] - d / beta
    logits -= logits.max(axis=1, keepdims=True)
    new = np.exp(logits)
    new /= new.sum(axis=1, keepdims=True)
    # symbols with no mass carry no constraint; pin them to the marginal
    dead = px <= 0
    if np.any(dead):
        new[dead] = pz / pz.sum()
    return new


def _objective(j: JointPMF, q: np.ndarray, beta: float):
    rate, rel = encoder_terms(j, q)
    return rel - beta * rate, rate, rel


def _iterate(j, q, beta, tol, max_iters, history=None):
    obj, rate, rel = _objective(j, q, beta)
    if history is not None:
        history.append(obj)
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        q_new = _update(j, q, beta)
        new_obj, rate, rel = _objective(j, q_new, beta)
        if history is not None:
            history.append(new_obj)
        step = np.max(np.abs(q_new - q))
        q = q_new
        if abs(new_obj - obj) < tol and step < np.sqrt(tol):
            obj = new_obj
            converged = True
            break
        obj = new_obj
    return q, obj, rate, rel, converged, it


def _point(j, q, beta, converged, iters):
    obj, rate, rel = _objective(j, q, beta)
    i_total = mutual_information(j)
    eps = i_total - rel
    # round-off can push a lossless encoder a few ulps past I(X;M)
    if -1e-12 <= eps < 0:
        eps = 0.0
    return IBCurvePoint(beta, rate, rel, eps, obj, converged, iters)


def solve_ib(j: JointPMF, beta: float, z_size: int | None = None, seed: int = 0,
             tol: float = 1e-9, max_iters: int = 10_000, init=None, history=None):
    """Maximise I(Z;M) - beta I(Z;X) by alternating self-consistent updates.

    Returns ``(StochasticEncoder, IBCurvePoint)``. Non-convergence is reported
    on the point's ``converged`` flag rather than raised.
    """
    if beta <= 0:
        raise ValueError("beta must be positive")
    z_size = j.x_size if z_size is None else z_size
    if not 1 <= z_size <= j.x_size:
        raise ValueError(f"z_size must lie in [1, {j.x_size}]")
    if init is None:
        rng = np.random.default_rng(seed)
        q = rng.dirichlet(np.ones(z_size), size=j.x_size)
    else:
        q = np.array(init, dtype=float)
    q, _, _, _, converged, iters = _iterate(j, q, beta, tol, max_iters, history)
    return StochasticEncoder(q), _point(j, q, beta, converged, iters)


def trace_curve(j: JointPMF, betas, z_size: int | None = None, seed: int = 0, restarts: int = 3,
                tol: float = 1e-9, max_iters: int = 10_000, perturb: float = 1e-3) -> list[IBCurvePoint]:
    """Solve along a descending beta schedule with warm starts.

    Each beta is solved from the previous encoder (slightly perturbed) and from
    ``restarts - 1`` fresh random encoders; the best objective is kept. A
    second pass in ascending beta re-solves each point from its smaller-beta
    neighbour and keeps any improvement.
    """
    betas = [float(b) for b in betas]
    if not betas or any(b <= 0 for b in betas):
        raise ValueError("beta schedule must be non-empty and positive")
    if any(a <= b for a, b in zip(betas, betas[1:])):
        raise ValueError("beta schedule must be strictly descending")
    z_size = j.x_size if z_size is None else z_size
    rng = np.random.default_rng(seed)
    points, encoders = [], []
    prev = None
    for k, beta in enumerate(betas):
        candidates = []
        if prev is not None:
            start = prev + perturb * rng.random(prev.shape)
            start /= start.sum(axis=1, keepdims=True)
            candidates.append(solve_ib(j, beta, z_size, tol=tol, max_iters=max_iters, init=start))
            n_fresh = max(restarts - 1, 0)
        else:
            n_fresh = max(restarts, 1)
        for r in range(n_fresh):
            candidates.append(solve_ib(j, beta, z_size, seed=seed + 7919 * k + r, tol=tol, max_iters=max_iters))
        enc, pt = max(candidates, key=lambda c: c[1].objective)
        prev = enc.p_z_given_x
        encoders.append(prev)
        points.append(pt)
    # reverse pass: a solution found at a smaller beta can seed a better
    # optimum at the larger one when the forward pass got stuck
    for k in range(len(betas) - 2, -1, -1):
        start = encoders[k + 1] + perturb * rng.random(encoders[k + 1].shape)
        start /= start.sum(axis=1, keepdims=True)
        enc, pt = solve_ib(j, betas[k], z_size, tol=tol, max_iters=max_iters, init=start)
        if pt.objective > points[k].objective + tol:
            encoders[k], points[k] = enc.p_z_given_x, pt
    return sorted(points, key=lambda p: (p.relevance, p.rate))


def _merge(points, tol=MERGE_TOL):
    pts = sorted(points, key=lambda p: (p.relevance, p.rate))
    groups: list[list[IBCurvePoint]] = []
    for p in pts:
        if groups and p.relevance - groups[-1][0].relevance < tol:
            groups[-1].append(p)
        else:
            groups.append([p])
    return groups


def check_curve_geometry(points, slope_tol: float = 0.15, tol: float = 1e-6,
                         allow_degenerate: bool = False) -> CurveGeometryReport:
    """Monotonicity, convexity and the slope = 1/beta identity on a traced curve.

    Points closer than 1e-6 nats in relevance are merged. Merged clusters
    (for example every beta past the trivial-encoder threshold) and points at
    the zero-rate corner are excluded from the slope comparison and flagged.

    Channels whose optimal curve is a straight segment (a deterministic
    message, say) only ever produce its two end points; ``allow_degenerate``
    accepts such a curve and checks monotonicity alone.
    """
    groups = _merge(points)
    if len(groups) < 3:
        if not allow_degenerate or not groups:
            raise ValueError(f"need >= 3 points with distinct relevance, got {len(groups)}")
        rate = np.array([g[0].rate for g in groups])
        by_beta = sorted(points, key=lambda p: p.beta)
        eps = np.array([p.epsilon for p in by_beta])
        return CurveGeometryReport(bool(np.all(np.diff(rate) >= -tol)), True, [], [],
                                   bool(np.all(np.diff(eps) >= -tol)),
                                   [f"degenerate curve: {len(groups)} distinct point(s)"], len(groups))
    reps = [g[0] for g in groups]
    rel = np.array([p.relevance for p in reps])
    rate = np.array([p.rate for p in reps])
    d_rel = np.diff(rel)
    slopes = np.diff(rate) / d_rel

    monotone = bool(np.all(np.diff(rate) >= -tol))
    # convexity as non-decreasing chord slopes; a tolerance scaled by the
    # slope keeps near-saturated, steep segments from tripping on round-off
    convex = bool(np.all(np.diff(slopes) >= -tol * np.maximum(1.0, np.abs(slopes[1:]))))

    errors, used, flagged = [], [], []
    for k in range(1, len(reps) - 1):
        p = reps[k]
        if len(groups[k]) > 1:
            flagged.append(f"beta={p.beta:g}: {len(groups[k])} merged points")
            continue
        if p.rate < CORNER_RATE:
            flagged.append(f"beta={p.beta:g}: trivial-encoder corner")
            continue
        fd = (rate[k + 1] - rate[k - 1]) / (rel[k + 1] - rel[k - 1])
        target = 1.0 / p.beta
        errors.append(abs(fd - target) / target)
        used.append(p.beta)

    by_beta = sorted((p for p in points), key=lambda p: p.beta)
    eps = np.array([p.epsilon for p in by_beta])
    be_mono = bool(np.all(np.diff(eps) >= -tol))
    return CurveGeometryReport(monotone, convex, errors, used, be_mono, flagged, len(reps))


def rate_bound(j: JointPMF) -> float:
    return entropy(j.p_x)


def deterministic_grid_search(j: JointPMF, beta: float, z_size: int):
    """Best IB objective over every deterministic encoder into z_size symbols."""
    best = None
    for labels in np.ndindex(*([z_size] * j.x_size)):
        q = np.zeros((j.x_size, z_size))
        q[np.arange(j.x_size), labels] = 1.0
        obj, rate, rel = _objective(j, q, beta)
        if best is None or obj > best[0] + 1e-15:
            best = (obj, rate, rel, labels)
    return best
