"""One-step risk maps on finite probability rows, and their upper envelopes.

Every map R(.|q) here is monotone, translation invariant (R(v + c) =
R(v) + c for scalar c) and centralized (R(0) = 0).  The supported kinds:

- ``neutral``: the plain expectation.
- ``entropic``: (1/lam) log E[exp(lam v)], evaluated with a max shift so it
  never overflows.
- ``density_band``: sup of E[xi v] over densities xi with g1 <= xi <= g2 and
  E[xi] = 1 (g1 = 0, g2 = 1/beta recovers average value-at-risk).
- ``mean_semideviation``: mean plus lam times the upper semideviation of
  order r.
- ``shortfall``: the utility-shortfall level, i.e. the unique m with
  E[u(v - m)] = 0 for a piecewise-linear increasing u with u(0) = 0.

The core evaluator is vectorized over stacks of rows (and optionally stacks
of value vectors), which is what makes value iteration cheap.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .mdp import FiniteMCP

__all__ = [
    "AxiomCheck",
    "AxiomReport",
    "PiecewiseLinearUtility",
    "RiskMapSpec",
    "RISK_KINDS",
    "check_axioms_of",
    "check_risk_axioms",
    "density_band",
    "entropic",
    "entropic_upper_envelope",
    "eval_risk",
    "maximize_ratio_over_box",
    "mean_semideviation",
    "risk_values",
    "shortfall",
    "shortfall_upper_envelope",
]

RISK_KINDS = ("neutral", "entropic", "density_band", "mean_semideviation", "shortfall")


class PiecewiseLinearUtility:
    """Continuous piecewise-linear increasing u with u(0) = 0.

    ``breakpoints`` are strictly increasing knots; ``slopes`` has one more
    entry than ``breakpoints`` (slope below the first knot, between knots,
    above the last).  Slopes must lie in [l, L] with 0 < l <= 1 <= L, the
    normalization under which shortfall levels are well behaved.
    """

    def __init__(self, breakpoints=(), slopes=(1.0,)):
        self.breakpoints = np.asarray(breakpoints, dtype=float).reshape(-1)
        self.slopes = np.asarray(slopes, dtype=float).reshape(-1)
        if len(self.slopes) != len(self.breakpoints) + 1:
            raise ValueError("need len(slopes) == len(breakpoints) + 1")
        if len(self.breakpoints) > 1 and np.any(np.diff(self.breakpoints) <= 0):
            raise ValueError("breakpoints must be strictly increasing")
        if np.any(self.slopes <= 0):
            raise ValueError("slopes must be positive (u increasing)")
        if self.l > 1.0 or self.L < 1.0:
            raise ValueError("slopes must straddle 1: min <= 1 <= max")
        # Knot values, anchored so that u(0) = 0.
        k = len(self.breakpoints)
        vals = np.zeros(k)
        if k:
            j0 = int(np.searchsorted(self.breakpoints, 0.0, side="right"))
            if j0 > 0:
                vals[j0 - 1] = self.slopes[j0] * self.breakpoints[j0 - 1]
                for j in range(j0 - 2, -1, -1):
                    vals[j] = vals[j + 1] - self.slopes[j + 1] * (
                        self.breakpoints[j + 1] - self.breakpoints[j]
                    )
            if j0 < k:
                vals[j0] = self.slopes[j0] * self.breakpoints[j0]
                for j in range(j0 + 1, k):
                    vals[j] = vals[j - 1] + self.slopes[j] * (
                        self.breakpoints[j] - self.breakpoints[j - 1]
                    )
        self._knot_values = vals

    @property
    def l(self) -> float:
        return float(self.slopes.min())

    @property
    def L(self) -> float:
        return float(self.slopes.max())

    @classmethod
    def linear(cls) -> "PiecewiseLinearUtility":
        return cls((), (1.0,))

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        if len(self.breakpoints) == 0:
            return self.slopes[0] * x
        seg = np.searchsorted(self.breakpoints, x, side="right")
        ref = np.where(seg > 0, self.breakpoints[np.maximum(seg - 1, 0)], self.breakpoints[0])
        base = np.where(seg > 0, self._knot_values[np.maximum(seg - 1, 0)], self._knot_values[0])
        return base + self.slopes[seg] * (x - ref)

    def to_dict(self) -> dict:
        return {"breakpoints": self.breakpoints.tolist(), "slopes": self.slopes.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "PiecewiseLinearUtility":
        return cls(data.get("breakpoints", ()), data.get("slopes", (1.0,)))

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, PiecewiseLinearUtility)
            and np.array_equal(self.breakpoints, other.breakpoints)
            and np.array_equal(self.slopes, other.slopes)
        )

    def __repr__(self) -> str:
        return f"PiecewiseLinearUtility({self.breakpoints.tolist()}, {self.slopes.tolist()})"


@dataclass(frozen=True)
class RiskMapSpec:
    """Which risk map to use and its parameters.

    ``lam`` is the entropic sensitivity (any nonzero float) or, for
    mean-semideviation, the risk-preference weight in [-1, 1].  ``band`` is
    the (g1, g2) density corridor with 0 <= g1 <= 1 <= g2.  ``shortfall_tol``
    is the bisection tolerance for shortfall levels.
    """

    kind: str
    lam: float = 0.0
    r: float = 2.0
    band: tuple[float, float] = (1.0, 1.0)
    utility: PiecewiseLinearUtility | None = None
    shortfall_tol: float = 1e-11

    def __post_init__(self) -> None:
        if self.kind not in RISK_KINDS:
            raise ValueError(f"unknown risk kind {self.kind!r}")
        if self.kind == "entropic" and self.lam == 0.0:
            raise ValueError("entropic risk needs lam != 0 (use kind='neutral' for the limit)")
        if self.kind == "mean_semideviation":
            if not -1.0 <= self.lam <= 1.0:
                raise ValueError("mean_semideviation needs lam in [-1, 1]")
            if self.r < 1.0:
                raise ValueError("mean_semideviation needs order r >= 1")
        if self.kind == "density_band":
            g1, g2 = self.band
            if not (0.0 <= g1 <= 1.0 <= g2):
                raise ValueError("density band needs 0 <= g1 <= 1 <= g2")
        if self.kind == "shortfall" and self.utility is None:
            object.__setattr__(self, "utility", PiecewiseLinearUtility.linear())

    @property
    def claims(self) -> frozenset[str]:
        """Structural properties this kind is expected to satisfy."""
        coherent = frozenset({"convex", "homogeneous", "subadditive"})
        if self.kind == "neutral" or self.kind == "density_band":
            return coherent
        if self.kind == "entropic":
            return frozenset({"convex"}) if self.lam > 0 else frozenset()
        if self.kind == "mean_semideviation":
            return coherent if self.lam >= 0 else frozenset({"homogeneous"})
        return frozenset()

    def to_dict(self) -> dict:
        out: dict = {"kind": self.kind}
        if self.kind in ("entropic", "mean_semideviation"):
            out["lambda"] = self.lam
        if self.kind == "mean_semideviation":
            out["r"] = self.r
        if self.kind == "density_band":
            out["band"] = list(self.band)
        if self.kind == "shortfall":
            out["utility"] = self.utility.to_dict()
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "RiskMapSpec":
        util = data.get("utility")
        return cls(
            kind=data["kind"],
            lam=float(data.get("lambda", 0.0)),
            r=float(data.get("r", 2.0)),
            band=tuple(data.get("band", (1.0, 1.0))),
            utility=None if util is None else PiecewiseLinearUtility.from_dict(util),
            shortfall_tol=float(data.get("shortfall_tol", 1e-11)),
        )


# ---------------------------------------------------------------------------
# Vectorized evaluation kernel
# ---------------------------------------------------------------------------


def _as_stack(v, rows):
    rows = np.atleast_2d(np.asarray(rows, dtype=float))
    v = np.asarray(v, dtype=float)
    if v.ndim == 1:
        V = np.broadcast_to(v, rows.shape)
    else:
        if v.shape != rows.shape:
            raise ValueError(f"value stack {v.shape} does not match rows {rows.shape}")
        V = v
    return V, rows


def _logsumexp_rows(A: np.ndarray) -> np.ndarray:
    amax = np.max(A, axis=1)
    out = np.empty_like(amax)
    finite = np.isfinite(amax)
    if np.any(finite):
        Af = A[finite]
        mf = amax[finite]
        out[finite] = mf + np.log(np.sum(np.exp(Af - mf[:, None]), axis=1))
    # +inf max -> +inf; all -inf (impossible for probability rows) -> -inf
    out[~finite] = amax[~finite]
    return out


def _entropic_rows(V: np.ndarray, rows: np.ndarray, lam: float) -> np.ndarray:
    with np.errstate(divide="ignore"):
        A = np.log(rows) + lam * V
    return _logsumexp_rows(A) / lam


def _band_rows(V: np.ndarray, rows: np.ndarray, g1: float, g2: float) -> np.ndarray:
    if g2 - g1 < 1e-15:
        return np.sum(rows * V, axis=1)
    # The maximizing density puts g2 on the largest outcomes, g1 on the
    # smallest, with a single interior value where the budget E[xi] = 1
    # crosses.  The crossing happens at cumulative mass (1 - g1)/(g2 - g1).
    order = np.argsort(-V, axis=1, kind="stable")
    Vs = np.take_along_axis(V, order, axis=1)
    Qs = np.take_along_axis(rows, order, axis=1)
    cum = np.cumsum(Qs, axis=1)
    m_star = (1.0 - g1) / (g2 - g1)
    k = np.argmax(cum >= m_star - 1e-15, axis=1)
    ar = np.arange(rows.shape[0])
    cum_k = cum[ar, k]
    q_k = Qs[ar, k]
    before = cum_k - q_k
    xi = np.full_like(rows, g1)
    mask = np.arange(rows.shape[1])[None, :] < k[:, None]
    xi[mask] = g2
    # Interior weight chosen so the q-weighted density integrates to one.
    with np.errstate(divide="ignore", invalid="ignore"):
        xi_k = (1.0 - g2 * before - g1 * (1.0 - cum_k)) / q_k
    xi[ar, k] = np.where(q_k > 0, xi_k, g1)
    return np.sum(Qs * xi * Vs, axis=1)


def _semidev_rows(V: np.ndarray, rows: np.ndarray, lam: float, r: float) -> np.ndarray:
    mean = np.sum(rows * V, axis=1)
    excess = np.maximum(V - mean[:, None], 0.0)
    dev = np.sum(rows * excess**r, axis=1) ** (1.0 / r)
    return mean + lam * dev


def _shortfall_rows(
    V: np.ndarray, rows: np.ndarray, utility: PiecewiseLinearUtility, tol: float
) -> np.ndarray:
    # E[u(v - m)] is continuous and strictly decreasing in m with a unique
    # root in [min v, max v]; bisect all rows in lock step.
    lo = V.min(axis=1)
    hi = V.max(axis=1)
    for _ in range(200):
        if np.max(hi - lo) <= tol:
            break
        mid = 0.5 * (lo + hi)
        g = np.sum(rows * utility(V - mid[:, None]), axis=1)
        take_hi = g >= 0
        lo = np.where(take_hi, mid, lo)
        hi = np.where(take_hi, hi, mid)
    return 0.5 * (lo + hi)


def risk_values(spec: RiskMapSpec, v, rows) -> np.ndarray:
    """Evaluate R(v | q) for a stack of probability rows.

    ``rows`` has shape (m, n).  ``v`` is either a shared length-n vector or
    an (m, n) stack paired row-by-row.  Returns a length-m array.
    """
    V, rows = _as_stack(v, rows)
    if spec.kind == "neutral":
        return np.sum(rows * V, axis=1)
    if spec.kind == "entropic":
        return _entropic_rows(V, rows, spec.lam)
    if spec.kind == "density_band":
        return _band_rows(V, rows, *spec.band)
    if spec.kind == "mean_semideviation":
        return _semidev_rows(V, rows, spec.lam, spec.r)
    return _shortfall_rows(V, rows, spec.utility, spec.shortfall_tol)


def eval_risk(spec: RiskMapSpec, v, q) -> float:
    """R(v | q) for a single probability row q."""
    return float(risk_values(spec, np.asarray(v, dtype=float), np.asarray(q, dtype=float)[None, :])[0])


def entropic(v, q, lam: float) -> float:
    """(1/lam) log sum_y q(y) exp(lam v(y)), overflow-safe."""
    if lam == 0.0:
        raise ValueError("lam must be nonzero")
    return eval_risk(RiskMapSpec("entropic", lam=lam), v, q)


def density_band(v, q, g1: float, g2: float) -> float:
    """sup{ sum q xi v : g1 <= xi <= g2, sum q xi = 1 }."""
    return eval_risk(RiskMapSpec("density_band", band=(g1, g2)), v, q)


def mean_semideviation(v, q, lam: float, r: float = 2.0) -> float:
    """mean + lam * (upper semideviation of order r)."""
    return eval_risk(RiskMapSpec("mean_semideviation", lam=lam, r=r), v, q)


def shortfall(v, q, utility: PiecewiseLinearUtility, tol: float = 1e-11) -> float:
    """Unique m with sum_y q(y) u(v(y) - m) = 0, by bisection."""
    return eval_risk(RiskMapSpec("shortfall", utility=utility, shortfall_tol=tol), v, q)


# ---------------------------------------------------------------------------
# Linear-fractional maximization and upper envelopes
# ---------------------------------------------------------------------------


def maximize_ratio_over_box(u, p, lo, hi, tol: float = 1e-12, max_iter: int = 200):
    """Maximize sum(p d u) / sum(p d) over the box lo <= d <= hi.

    Dinkelbach iteration: given a ratio guess theta, the inner maximizer of
    sum(p d (u - theta)) is the threshold vertex d_y = hi_y if u_y > theta
    else lo_y (ties to lo).  The objective is piecewise linear in theta, so
    the iteration reaches the optimum in finitely many steps; we stop when
    the guess moves by less than ``tol``.  Returns (value, argmax d).
    """
    u = np.asarray(u, dtype=float)
    p = np.asarray(p, dtype=float)
    lo = np.broadcast_to(np.asarray(lo, dtype=float), u.shape)
    hi = np.broadcast_to(np.asarray(hi, dtype=float), u.shape)
    if np.any(lo <= 0):
        raise ValueError("box lower bounds must be positive")
    if np.any(hi < lo):
        raise ValueError("box upper bounds must dominate lower bounds")

    d = lo.copy()
    theta = float(np.dot(p * d, u) / np.dot(p, d))
    for _ in range(max_iter):
        d = np.where(u > theta, hi, lo)
        theta_new = float(np.dot(p * d, u) / np.dot(p, d))
        if abs(theta_new - theta) < tol:
            return theta_new, d
        theta = theta_new
    raise RuntimeError("ratio maximization did not converge")


def entropic_upper_envelope(u, q, b) -> float:
    """sup over |f| <= b of sum q e^f u / sum q e^f.

    Because the objective only depends on the tilt e^f, this is a ratio
    maximization over the box [exp(-b), exp(b)].  Entries of b above 700
    are rejected rather than silently overflowing.
    """
    b = np.broadcast_to(np.asarray(b, dtype=float), np.shape(u)).astype(float)
    if np.any(b < 0):
        raise ValueError("bound b must be nonnegative")
    if np.any(b > 700):
        raise ValueError("bound b exceeds the exp overflow guard (700)")
    value, _ = maximize_ratio_over_box(u, q, np.exp(-b), np.exp(b))
    return value


def shortfall_upper_envelope(u, q, l: float, L: float) -> float:
    """sup over slope reweightings delta in [l, L] of sum(delta q u)/sum(delta q)."""
    if not 0 < l <= L:
        raise ValueError("need 0 < l <= L")
    u = np.asarray(u, dtype=float)
    value, _ = maximize_ratio_over_box(u, q, np.full(u.shape, l), np.full(u.shape, L))
    return value


# ---------------------------------------------------------------------------
# Axiom checking
# ---------------------------------------------------------------------------


@dataclass
class AxiomCheck:
    name: str
    claimed: bool
    passed: bool
    n_checked: int
    max_violation: float
    witness: dict | None = None


@dataclass
class AxiomReport:
    checks: dict[str, AxiomCheck] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        """All required axioms (base ones plus whatever the kind claims) hold."""
        return all(c.passed for c in self.checks.values() if c.claimed)


_BASE_AXIOMS = ("monotonicity", "translation_invariance", "centralization")

# Check names vs. the adjectives used in RiskMapSpec.claims.
_CLAIM_OF_CHECK = {
    "convexity": "convex",
    "positive_homogeneity": "homogeneous",
    "subadditivity": "subadditive",
}


def check_axioms_of(
    fn: Callable[[np.ndarray, np.ndarray], np.ndarray],
    claims: frozenset[str] | set[str],
    rows: np.ndarray,
    values: np.ndarray,
    rng: np.random.Generator,
    tol: float = 1e-9,
) -> AxiomReport:
    """Sampled axiom checks for a batched risk evaluator.

    ``fn(V, rows)`` must accept an (m, n) stack of value vectors paired with
    (m, n) probability rows and return m risk values.  Base axioms are always
    exercised; convexity / positive homogeneity / subadditivity are exercised
    too but only count against the report when listed in ``claims``.
    """
    m, n = rows.shape
    V = values
    U = V + np.abs(rng.normal(0.0, 1.5, size=(m, n)))
    shifts = rng.normal(0.0, 3.0, size=m)
    scales = rng.uniform(0.0, 2.0, size=m)
    alphas = rng.uniform(0.0, 1.0, size=m)
    W = rng.normal(0.0, 2.0, size=(m, n))

    rv = fn(V, rows)
    ru = fn(U, rows)
    rw = fn(W, rows)

    report = AxiomReport()

    def record(name: str, lhs: np.ndarray, rhs: np.ndarray, extra: dict) -> None:
        viol = lhs - rhs
        worst = int(np.argmax(viol))
        passed = bool(viol[worst] <= tol)
        witness = None
        if not passed:
            witness = {
                "axiom": name,
                "row": rows[worst].tolist(),
                "v": V[worst].tolist(),
                "lhs": float(lhs[worst]),
                "rhs": float(rhs[worst]),
            }
            for k, vv in extra.items():
                witness[k] = vv[worst].tolist() if vv.ndim > 1 else float(vv[worst])
        report.checks[name] = AxiomCheck(
            name=name,
            claimed=name in _BASE_AXIOMS or _CLAIM_OF_CHECK.get(name, name) in claims,
            passed=passed,
            n_checked=m,
            max_violation=float(viol[worst]),
            witness=witness,
        )

    record("monotonicity", rv, ru, {"u": U})
    record("translation_invariance", np.abs(fn(V + shifts[:, None], rows) - (rv + shifts)), np.zeros(m), {"c": shifts})
    record("centralization", np.abs(fn(np.zeros_like(V), rows)), np.zeros(m), {})
    mix = alphas[:, None] * V + (1 - alphas[:, None]) * W
    record("convexity", fn(mix, rows), alphas * rv + (1 - alphas) * rw, {"u": W, "alpha": alphas})
    record("positive_homogeneity", np.abs(fn(scales[:, None] * V, rows) - scales * rv), np.zeros(m), {"s": scales})
    record("subadditivity", fn(V + W, rows), rv + rw, {"u": W})
    return report


def check_risk_axioms(
    spec: RiskMapSpec,
    mcp: FiniteMCP,
    n_samples: int = 1000,
    seed: int = 0,
    tol: float = 1e-9,
) -> AxiomReport:
    """Sampled axiom checks for ``spec`` on transition rows drawn from ``mcp``."""
    rng = np.random.default_rng(seed)
    all_rows = mcp.stacked_transition
    idx = rng.integers(0, all_rows.shape[0], size=n_samples)
    rows = all_rows[idx]
    values = rng.normal(0.0, 2.0, size=rows.shape)
    return check_axioms_of(lambda V, R: risk_values(spec, V, R), spec.claims, rows, values, rng, tol)
