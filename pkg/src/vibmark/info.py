"""Exact information quantities over small discrete alphabets.

Everything is in nats. Joints are dense ``(m_size, x_size)`` arrays with the
message on axis 0 and the observation on axis 1.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

PMF_TOL = 1e-12
MAX_ALPHABET = 64


class PMFError(ValueError):
    """Raised when an array is not a valid probability mass function."""


def _check_pmf(p: np.ndarray, what: str = "pmf") -> np.ndarray:
    p = np.asarray(p, dtype=float)
    if p.size == 0:
        raise PMFError(f"{what} is empty")
    if not np.all(np.isfinite(p)):
        raise PMFError(f"{what} has non-finite entries")
    if np.any(p < 0):
        raise PMFError(f"{what} has negative mass (min {p.min():.3g})")
    total = p.sum()
    if abs(total - 1.0) > PMF_TOL:
        raise PMFError(f"{what} sums to {total!r}, not 1")
    return p


def _clamp(value: float) -> float:
    # accumulation noise can push exact zeros slightly negative
    if value < 0.0 and value >= -PMF_TOL:
        return 0.0
    return float(value)


def _xlogx_ratio(p: np.ndarray, q: np.ndarray) -> float:
    """sum p * ln(p / q) over p > 0, with 0 ln 0 := 0."""
    mask = p > 0
    return float(np.sum(p[mask] * (np.log(p[mask]) - np.log(q[mask]))))


@dataclass(frozen=True)
class JointPMF:
    """Joint distribution p(m, x) over a message and an observation."""

    p: np.ndarray

    def __post_init__(self):
        p = np.array(self.p, dtype=float)
        if p.ndim != 2:
            raise PMFError(f"joint must be 2-D, got shape {p.shape}")
        if p.shape[0] > MAX_ALPHABET or p.shape[1] > MAX_ALPHABET:
            raise PMFError(f"alphabets are capped at {MAX_ALPHABET} symbols")
        _check_pmf(p, "joint")
        p.setflags(write=False)
        object.__setattr__(self, "p", p)

    @property
    def m_size(self) -> int:
        return self.p.shape[0]

    @property
    def x_size(self) -> int:
        return self.p.shape[1]

    @property
    def p_m(self) -> np.ndarray:
        return self.p.sum(axis=1)

    @property
    def p_x(self) -> np.ndarray:
        return self.p.sum(axis=0)

    def posteriors(self) -> np.ndarray:
        """Columns p(m | x); zero-marginal columns are left as zeros."""
        px = self.p_x
        out = np.zeros_like(self.p)
        nz = px > 0
        out[:, nz] = self.p[:, nz] / px[nz]
        return out

    @classmethod
    def from_conditional(cls, p_m, p_x_given_m) -> "JointPMF":
        """Build from a prior p(m) and a row-stochastic channel p(x | m)."""
        p_m = np.asarray(p_m, dtype=float)
        ch = np.asarray(p_x_given_m, dtype=float)
        return cls(p_m[:, None] * ch)

    @classmethod
    def product(cls, p_m, p_x) -> "JointPMF":
        return cls(np.outer(p_m, p_x))

    # plain-text matrix format: "m_size x_size" header then one row per message
    def dumps(self) -> str:
        lines = [f"{self.m_size} {self.x_size}"]
        for row in self.p:
            lines.append(" ".join(repr(float(v)) for v in row))
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "JointPMF":
        rows = [ln.split() for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
        if not rows or len(rows[0]) != 2:
            raise PMFError("first line must be 'm_size x_size'")
        m_size, x_size = int(rows[0][0]), int(rows[0][1])
        body = rows[1:]
        if len(body) != m_size or any(len(r) != x_size for r in body):
            raise PMFError(f"expected {m_size} rows of {x_size} probabilities")
        return cls(np.array([[float(v) for v in r] for r in body]))

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path) -> "JointPMF":
        return cls.loads(Path(path).read_text())


def entropy(p) -> float:
    """Shannon entropy in nats."""
    p = _check_pmf(np.ravel(p))
    nz = p[p > 0]
    return _clamp(-float(np.sum(nz * np.log(nz))))


def kl_divergence(p, q) -> float:
    """D_KL(p || q) in nats. Raises when p puts mass where q has none."""
    p = _check_pmf(np.ravel(p), "p")
    q = _check_pmf(np.ravel(q), "q")
    if p.shape != q.shape:
        raise PMFError(f"support mismatch: {p.shape} vs {q.shape}")
    if np.any((p > 0) & (q <= 0)):
        raise PMFError("p has mass where q is zero; divergence is infinite")
    return _clamp(_xlogx_ratio(p, q))


def mutual_information(j: JointPMF) -> float:
    """I(M; X) of a joint."""
    p = j.p
    indep = np.outer(p.sum(axis=1), p.sum(axis=0))
    return _clamp(_xlogx_ratio(p, indep))


def mutual_information_matrix(p) -> float:
    """I between the two axes of any non-negative matrix summing to one."""
    return mutual_information(JointPMF(p))


def conditional_mutual_information(p3) -> float:
    """I(M; X | T) for a three-way array indexed ``[m, x, t]``.

    Computed as the expectation over t of KL(p(m,x|t) || p(m|t) p(x|t)).
    """
    p3 = np.asarray(p3, dtype=float)
    if p3.ndim != 3:
        raise PMFError(f"three-way joint must be 3-D, got shape {p3.shape}")
    _check_pmf(p3, "three-way joint")
    total = 0.0
    for t in range(p3.shape[2]):
        slab = p3[:, :, t]
        pt = slab.sum()
        if pt <= 0:
            continue
        cond = slab / pt
        indep = np.outer(cond.sum(axis=1), cond.sum(axis=0))
        total += pt * _xlogx_ratio(cond, indep)
    return _clamp(total)


def apply_statistic(j: JointPMF, t) -> JointPMF:
    """Push a joint through a deterministic statistic of X.

    ``t`` is a Partition or a plain block-index vector over the X alphabet.
    """
    block_of = np.asarray(getattr(t, "block_of", t), dtype=int)
    if block_of.shape != (j.x_size,):
        raise PMFError(f"partition covers {block_of.size} symbols, alphabet has {j.x_size}")
    n_blocks = int(block_of.max()) + 1
    out = np.zeros((j.m_size, n_blocks))
    for x, b in enumerate(block_of):
        out[:, b] += j.p[:, x]
    # renormalise away summation drift
    return JointPMF(out / out.sum())


def three_way(j: JointPMF, t) -> np.ndarray:
    """p(m, x, t) for a deterministic statistic t = T(x)."""
    block_of = np.asarray(getattr(t, "block_of", t), dtype=int)
    n_blocks = int(block_of.max()) + 1
    p3 = np.zeros((j.m_size, j.x_size, n_blocks))
    p3[:, np.arange(j.x_size), block_of] = j.p
    return p3


def random_joint(rng: np.random.Generator, m_size: int, x_size: int, concentration: float = 1.0) -> JointPMF:
    """Dirichlet-sampled joint, flat over all m_size * x_size cells."""
    p = rng.dirichlet(np.full(m_size * x_size, concentration)).reshape(m_size, x_size)
    return JointPMF(p / p.sum())
