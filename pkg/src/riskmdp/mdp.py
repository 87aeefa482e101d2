"""Finite Markov control processes and weighted-norm utilities.

A model is a finite state set {0..n-1}, a per-state list of action labels,
a transition row for each (state, action) pair and a scalar running cost
for each pair.  Value functions are plain 1-d numpy arrays indexed by state.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

__all__ = [
    "FiniteMCP",
    "PolicyVector",
    "ValidationReport",
    "WeightSpec",
    "level_set",
    "policy_transition_and_cost",
    "seminorm_via_centering",
    "validate_mcp",
    "weighted_norm",
    "weighted_seminorm",
]


@dataclass
class FiniteMCP:
    """Finite-state, finite-action controlled Markov chain with running costs.

    ``transition[x]`` is an ``(n_actions(x), n_states)`` array of probability
    rows and ``cost[x]`` the matching vector of running costs.  Action sets
    may differ in size between states.  ``state_coords`` optionally embeds
    states in R^d (used by grid discretizations and coordinate-based costs).
    """

    actions: list[list[str]]
    transition: list[np.ndarray]
    cost: list[np.ndarray]
    state_coords: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.transition = [np.asarray(rows, dtype=float) for rows in self.transition]
        self.cost = [np.asarray(c, dtype=float).reshape(-1) for c in self.cost]
        if self.state_coords is not None:
            coords = np.asarray(self.state_coords, dtype=float)
            if coords.ndim == 1:
                coords = coords[:, None]
            self.state_coords = coords

    @property
    def n_states(self) -> int:
        return len(self.actions)

    def n_actions(self, x: int) -> int:
        return len(self.actions[x])

    def row(self, x: int, a: int) -> np.ndarray:
        """Transition row q(.|x,a)."""
        return self.transition[x][a]

    # Stacked views: all (x, a) rows concatenated in state order.  These are
    # the hot path for value iteration, so they are computed once and cached.

    @cached_property
    def row_offsets(self) -> np.ndarray:
        counts = [self.n_actions(x) for x in range(self.n_states)]
        return np.concatenate([[0], np.cumsum(counts)]).astype(np.intp)

    @cached_property
    def stacked_transition(self) -> np.ndarray:
        return np.vstack(self.transition)

    @cached_property
    def stacked_cost(self) -> np.ndarray:
        return np.concatenate(self.cost)

    def with_cost(self, cost: list[np.ndarray]) -> "FiniteMCP":
        """Copy of the model with a replaced cost table."""
        return FiniteMCP(
            actions=[list(a) for a in self.actions],
            transition=[rows.copy() for rows in self.transition],
            cost=[np.asarray(c, dtype=float).reshape(-1).copy() for c in cost],
            state_coords=None if self.state_coords is None else self.state_coords.copy(),
        )

    def restrict_to_policy(self, policy: "PolicyVector") -> "FiniteMCP":
        """Single-action model induced by a deterministic policy."""
        if policy.deterministic is None:
            raise ValueError("restrict_to_policy needs a deterministic policy")
        f = policy.deterministic
        return FiniteMCP(
            actions=[[self.actions[x][f[x]]] for x in range(self.n_states)],
            transition=[self.transition[x][f[x]][None, :].copy() for x in range(self.n_states)],
            cost=[np.array([self.cost[x][f[x]]]) for x in range(self.n_states)],
            state_coords=None if self.state_coords is None else self.state_coords.copy(),
        )

    # JSON interchange.  Field names are part of the on-disk contract.

    def to_dict(self) -> dict:
        return {
            "n_states": self.n_states,
            "actions": [list(a) for a in self.actions],
            "transition": [rows.tolist() for rows in self.transition],
            "cost": [c.tolist() for c in self.cost],
            "coords": None if self.state_coords is None else self.state_coords.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "FiniteMCP":
        n = int(data["n_states"])
        actions = [list(a) for a in data["actions"]]
        if len(actions) != n:
            raise ValueError(f"n_states={n} but {len(actions)} action lists")
        coords = data.get("coords")
        return cls(
            actions=actions,
            transition=[np.asarray(rows, dtype=float) for rows in data["transition"]],
            cost=[np.asarray(c, dtype=float) for c in data["cost"]],
            state_coords=None if coords is None else np.asarray(coords, dtype=float),
        )

    def save_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load_json(cls, path) -> "FiniteMCP":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class PolicyVector:
    """Single-step policy: one action index per state, or one mixture row."""

    deterministic: np.ndarray | None = None
    randomized: list[np.ndarray] | None = None

    @classmethod
    def det(cls, indices) -> "PolicyVector":
        return cls(deterministic=np.asarray(indices, dtype=np.intp))

    @classmethod
    def rand(cls, rows) -> "PolicyVector":
        return cls(randomized=[np.asarray(r, dtype=float) for r in rows])

    @property
    def is_deterministic(self) -> bool:
        return self.deterministic is not None

    def validate(self, mcp: FiniteMCP, tol: float = 1e-12) -> None:
        if (self.deterministic is None) == (self.randomized is None):
            raise ValueError("policy must be exactly one of deterministic/randomized")
        if self.deterministic is not None:
            if len(self.deterministic) != mcp.n_states:
                raise ValueError("policy length != n_states")
            for x, a in enumerate(self.deterministic):
                if not 0 <= a < mcp.n_actions(x):
                    raise ValueError(f"action index {a} out of range at state {x}")
        else:
            if len(self.randomized) != mcp.n_states:
                raise ValueError("policy length != n_states")
            for x, probs in enumerate(self.randomized):
                if len(probs) != mcp.n_actions(x):
                    raise ValueError(f"mixture length mismatch at state {x}")
                if np.any(probs < 0) or abs(probs.sum() - 1.0) > tol:
                    raise ValueError(f"mixture at state {x} is not a probability vector")


@dataclass(frozen=True)
class WeightSpec:
    """Weight bundle w = 1 + w0/K used for invariant-ball seminorms."""

    w0: np.ndarray
    K: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "w0", np.asarray(self.w0, dtype=float))
        if self.K <= 0:
            raise ValueError("K must be positive")
        if np.any(self.w0 < 0):
            raise ValueError("w0 must be nonnegative")

    @property
    def w(self) -> np.ndarray:
        return 1.0 + self.w0 / self.K


@dataclass
class ValidationReport:
    ok: bool
    violations: list[str] = field(default_factory=list)


def validate_mcp(mcp: FiniteMCP, row_sum_tol: float = 1e-12) -> ValidationReport:
    """Structural checks: shapes, stochastic rows, finite costs."""
    bad: list[str] = []
    n = mcp.n_states
    for x in range(n):
        if mcp.n_actions(x) == 0:
            bad.append(f"empty action set at x={x}")
            continue
        rows = mcp.transition[x]
        if rows.ndim != 2 or rows.shape != (mcp.n_actions(x), n):
            bad.append(f"transition shape {rows.shape} at x={x}, want ({mcp.n_actions(x)}, {n})")
            continue
        if mcp.cost[x].shape != (mcp.n_actions(x),):
            bad.append(f"cost shape {mcp.cost[x].shape} at x={x}")
        if not np.all(np.isfinite(mcp.cost[x])):
            bad.append(f"non-finite cost at x={x}")
        for a in range(mcp.n_actions(x)):
            row = rows[a]
            neg = np.flatnonzero(row < 0)
            if neg.size:
                y = int(neg[0])
                bad.append(f"negative entry {row[y]:.12g} at (x={x}, a={a}, y={y})")
            s = row.sum()
            if not np.isfinite(s) or abs(s - 1.0) > row_sum_tol:
                bad.append(f"row sum {s:.12g} at (x={x}, a={a})")
    if mcp.state_coords is not None and len(mcp.state_coords) != n:
        bad.append(f"coords length {len(mcp.state_coords)} != n_states {n}")
    return ValidationReport(ok=not bad, violations=bad)


def weighted_norm(v, w) -> float:
    """max_x |v(x)| / w(x) for strictly positive weights w."""
    v = np.asarray(v, dtype=float)
    w = np.asarray(w, dtype=float)
    if v.shape != w.shape:
        raise ValueError(f"shape mismatch: {v.shape} vs {w.shape}")
    if np.any(w <= 0):
        raise ValueError("weights must be strictly positive")
    if v.size == 0:
        return 0.0
    return float(np.max(np.abs(v) / w))


def weighted_seminorm(v, w) -> float:
    """max_{x != y} |v(x) - v(y)| / (w(x) + w(y)), by exhaustive pair scan.

    Quadratic in the number of states; fine for the grid sizes this package
    targets (n <= a few thousand).
    """
    v = np.asarray(v, dtype=float)
    w = np.asarray(w, dtype=float)
    if v.shape != w.shape:
        raise ValueError(f"shape mismatch: {v.shape} vs {w.shape}")
    if np.any(w <= 0):
        raise ValueError("weights must be strictly positive")
    if v.size < 2:
        return 0.0
    diff = np.abs(v[:, None] - v[None, :])
    scale = w[:, None] + w[None, :]
    return float(np.max(diff / scale))


def seminorm_via_centering(v, w, tol: float = 1e-10) -> tuple[float, float]:
    """Seminorm as min_c ||v + c||_w, located by ternary search.

    The objective is a max of finitely many V-shaped functions of c with
    slopes +-1/w(x), hence strictly unimodal; ternary search on the bracket
    [-2 max|v|, 2 max|v|] converges.  Returns (value, argmin c).
    """
    v = np.asarray(v, dtype=float)
    w = np.asarray(w, dtype=float)
    hi = 2.0 * float(np.max(np.abs(v))) if v.size else 0.0
    lo = -hi

    def f(c: float) -> float:
        return weighted_norm(v + c, w)

    while hi - lo > tol:
        m1 = lo + (hi - lo) / 3.0
        m2 = hi - (hi - lo) / 3.0
        if f(m1) <= f(m2):
            hi = m2
        else:
            lo = m1
    c_star = 0.5 * (lo + hi)
    return f(c_star), c_star


def level_set(w0, radius: float) -> np.ndarray:
    """Indices of states with w0[x] <= radius."""
    w0 = np.asarray(w0, dtype=float)
    return np.flatnonzero(w0 <= radius)


def policy_transition_and_cost(mcp: FiniteMCP, policy: PolicyVector) -> tuple[np.ndarray, np.ndarray]:
    """Kernel and cost of the chain induced by a single-step policy."""
    policy.validate(mcp)
    n = mcp.n_states
    P = np.empty((n, n))
    c = np.empty(n)
    if policy.is_deterministic:
        for x, a in enumerate(policy.deterministic):
            P[x] = mcp.transition[x][a]
            c[x] = mcp.cost[x][a]
    else:
        for x, probs in enumerate(policy.randomized):
            P[x] = probs @ mcp.transition[x]
            c[x] = probs @ mcp.cost[x]
    return P, c
