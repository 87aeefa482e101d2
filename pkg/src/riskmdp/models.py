"""Model builders: grid discretizations of controlled diffusions, costs,
and a few small built-in chains used throughout the tests.

The discretization puts a regular grid on [-extent, extent]^d, evaluates the
one-step Gaussian transition density at the nodes, scales by the cell volume
and renormalizes each row; probability mass that would leave the grid is
therefore folded back proportionally.  No truncation-error bound is claimed;
refining the grid is the intended way to study it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .mdp import FiniteMCP

__all__ = [
    "DiffusionSpec",
    "GridSpec",
    "PowerCost",
    "QuadraticCost",
    "TabulatedCost",
    "attach_cost",
    "builtin_chain",
    "diffusion_entropic_weight",
    "discretize_diffusion",
    "gaussian_kernel_row",
    "grid_nodes",
]


@dataclass(frozen=True)
class GridSpec:
    """Regular tensor grid on [-extent, extent] per axis (odd point counts
    keep the origin on the grid)."""

    points: int | tuple[int, ...] = 201
    extent: float | tuple[float, ...] = 5.0

    def axes(self, dim: int) -> list[np.ndarray]:
        pts = (self.points,) * dim if isinstance(self.points, int) else tuple(self.points)
        ext = (self.extent,) * dim if isinstance(self.extent, (int, float)) else tuple(self.extent)
        if len(pts) != dim or len(ext) != dim:
            raise ValueError("grid spec does not match the model dimension")
        if any(p < 3 for p in pts):
            raise ValueError("need at least 3 points per axis")
        return [np.linspace(-e, e, p) for p, e in zip(pts, ext)]


def grid_nodes(grid: GridSpec, dim: int) -> tuple[np.ndarray, float]:
    """Node coordinates (n, dim) in row-major order, and the cell volume."""
    axes = grid.axes(dim)
    mesh = np.meshgrid(*axes, indexing="ij")
    coords = np.stack([m.ravel() for m in mesh], axis=1)
    vol = float(np.prod([ax[1] - ax[0] for ax in axes]))
    return coords, vol


@dataclass
class DiffusionSpec:
    """One-step linear diffusion x' = A x + b(x, a) + D(a) W, W ~ N(0, I).

    ``drift`` gives a constant drift vector per action label; an optional
    ``drift_linear`` matrix per action makes it affine, clipped to norm
    sqrt(drift_bound) so the bound stays honest.  ``gamma_tilde`` bounds
    |A x|^2 <= gamma_tilde |x|^2, ``ellipticity`` bounds the eigenvalues of
    D D^T into [1/ellipticity, ellipticity].
    """

    dim: int
    A: np.ndarray
    actions: list[str]
    drift: dict[str, np.ndarray]
    diffusion: dict[str, np.ndarray]
    gamma_tilde: float
    drift_bound: float
    ellipticity: float
    drift_linear: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.A = np.asarray(self.A, dtype=float).reshape(self.dim, self.dim)
        self.drift = {k: np.asarray(v, dtype=float).reshape(self.dim) for k, v in self.drift.items()}
        self.diffusion = {
            k: np.asarray(v, dtype=float).reshape(self.dim, self.dim) for k, v in self.diffusion.items()
        }
        self.drift_linear = {
            k: np.asarray(v, dtype=float).reshape(self.dim, self.dim) for k, v in self.drift_linear.items()
        }

    def validate(self) -> None:
        if not 0 < self.gamma_tilde < 1:
            raise ValueError("gamma_tilde must be in (0, 1)")
        sig = float(np.linalg.eigvalsh(self.A.T @ self.A).max())
        if sig > self.gamma_tilde + 1e-12:
            raise ValueError(f"|Ax|^2 reaches {sig:.6g} |x|^2 > gamma_tilde = {self.gamma_tilde}")
        for a in self.actions:
            if a not in self.drift or a not in self.diffusion:
                raise ValueError(f"missing drift or diffusion for action {a!r}")
            DDt = self.diffusion[a] @ self.diffusion[a].T
            eig = np.linalg.eigvalsh(DDt)
            if eig.min() < 1.0 / self.ellipticity - 1e-12 or eig.max() > self.ellipticity + 1e-12:
                raise ValueError(f"diffusion for action {a!r} violates the ellipticity bounds")

    def drift_at(self, x: np.ndarray, a: str) -> np.ndarray:
        """b(x, a), clipped into the ball of squared norm drift_bound."""
        b = np.broadcast_to(self.drift[a], x.shape).copy()
        if a in self.drift_linear:
            b = b + x @ self.drift_linear[a].T
        norms = np.linalg.norm(b, axis=-1, keepdims=True)
        cap = np.sqrt(self.drift_bound)
        scale = np.where(norms > cap, cap / np.maximum(norms, 1e-300), 1.0)
        return b * scale


def gaussian_kernel_row(mean: np.ndarray, cov_inv: np.ndarray, nodes: np.ndarray, cell_volume: float) -> np.ndarray:
    """Unnormalized transition weights: Gaussian density times cell volume."""
    d = nodes.shape[1]
    diff = nodes - mean
    quad = np.einsum("nd,de,ne->n", diff, cov_inv, diff)
    det = float(np.linalg.det(cov_inv))
    norm = (2.0 * np.pi) ** (-d / 2.0) * np.sqrt(det)
    return norm * np.exp(-0.5 * quad) * cell_volume


def discretize_diffusion(spec: DiffusionSpec, grid: GridSpec) -> FiniteMCP:
    """Finite chain on the grid nodes with renormalized Gaussian rows.

    Costs are zero; attach them with :func:`attach_cost`.  Supported up to
    dim = 3 (the node count explodes beyond that).
    """
    spec.validate()
    if spec.dim > 3:
        raise ValueError("grid discretization supports dim <= 3")
    nodes, vol = grid_nodes(grid, spec.dim)
    n = len(nodes)
    transition = [np.empty((len(spec.actions), n)) for _ in range(n)]
    for ai, a in enumerate(spec.actions):
        DDt = spec.diffusion[a] @ spec.diffusion[a].T
        cov_inv = np.linalg.inv(DDt)
        det = float(np.linalg.det(cov_inv))
        norm = (2.0 * np.pi) ** (-spec.dim / 2.0) * np.sqrt(det)
        means = nodes @ spec.A.T + spec.drift_at(nodes, a)
        # Chunk source states so dim = 3 grids do not blow up memory.
        chunk = max(1, int(2_000_000 // n))
        for start in range(0, n, chunk):
            m = means[start : start + chunk]
            diff = nodes[None, :, :] - m[:, None, :]
            quad = np.einsum("snd,de,sne->sn", diff, cov_inv, diff)
            block = norm * np.exp(-0.5 * quad) * vol
            sums = block.sum(axis=1, keepdims=True)
            if np.any(sums <= 0):
                raise ValueError("a transition row lost all mass; grid too coarse or extent too small")
            block /= sums
            for i in range(block.shape[0]):
                transition[start + i][ai] = block[i]
    actions = [list(spec.actions) for _ in range(n)]
    cost = [np.zeros(len(spec.actions)) for _ in range(n)]
    return FiniteMCP(actions=actions, transition=transition, cost=cost, state_coords=nodes)


@dataclass(frozen=True)
class TabulatedCost:
    table: list


@dataclass(frozen=True)
class QuadraticCost:
    """c(x, a) = c0 |x|^2 + action_terms[label]."""

    c0: float
    action_terms: dict[str, float] | None = None


@dataclass(frozen=True)
class PowerCost:
    """c(x, a) = c0 w1(x)^q — carries its exponent q so certificate
    configurations can refer to the same power of the weight."""

    c0: float
    q: float
    w1: np.ndarray


def attach_cost(mcp: FiniteMCP, form) -> FiniteMCP:
    """New model with costs given by a tabulated/quadratic/power form."""
    n = mcp.n_states
    if isinstance(form, TabulatedCost):
        if len(form.table) != n:
            raise ValueError("tabulated cost length != n_states")
        cost = [np.asarray(c, dtype=float) for c in form.table]
        for x, c in enumerate(cost):
            if c.shape != (mcp.n_actions(x),):
                raise ValueError(f"cost shape mismatch at state {x}")
        return mcp.with_cost(cost)
    if isinstance(form, QuadraticCost):
        if mcp.state_coords is None:
            raise ValueError("quadratic cost needs state coordinates")
        sq = np.sum(mcp.state_coords**2, axis=1)
        terms = form.action_terms or {}
        cost = [
            np.array([form.c0 * sq[x] + terms.get(lbl, 0.0) for lbl in mcp.actions[x]])
            for x in range(n)
        ]
        return mcp.with_cost(cost)
    if isinstance(form, PowerCost):
        w1 = np.asarray(form.w1, dtype=float)
        if w1.shape != (n,):
            raise ValueError("w1 length != n_states")
        if np.any(w1 < 0):
            raise ValueError("w1 must be nonnegative")
        vals = form.c0 * w1**form.q
        cost = [np.full(mcp.n_actions(x), vals[x]) for x in range(n)]
        return mcp.with_cost(cost)
    raise TypeError(f"unknown cost form {type(form).__name__}")


def diffusion_entropic_weight(grid: GridSpec, gamma: float, spec: DiffusionSpec) -> tuple[np.ndarray, float]:
    """Quadratic drift weight for the entropic map on the grid.

    Returns (w1_hat, eps) with w1_hat(x) = (eps/2) |x|^2 and
    eps = ((gamma - gamma_tilde) / gamma) / ellipticity, the largest
    curvature for which the Gaussian tilt keeps the drift factor at gamma.
    """
    if not spec.gamma_tilde < gamma < 1:
        raise ValueError("need gamma_tilde < gamma < 1")
    eps = (gamma - spec.gamma_tilde) / gamma / spec.ellipticity
    nodes, _ = grid_nodes(grid, spec.dim)
    w1_hat = 0.5 * eps * np.sum(nodes**2, axis=1)
    return w1_hat, eps


def builtin_chain(name: str, **params) -> FiniteMCP:
    """Small named chains: uniform2, biased2, ring(n), random_seeded(n, m, seed)."""
    if name == "uniform2":
        return FiniteMCP(
            actions=[["a"], ["a"]],
            transition=[np.array([[0.5, 0.5]]), np.array([[0.5, 0.5]])],
            cost=[np.array([0.0]), np.array([1.0])],
            state_coords=np.array([[0.0], [1.0]]),
        )
    if name == "biased2":
        return FiniteMCP(
            actions=[["a"], ["a"]],
            transition=[np.array([[0.6, 0.4]]), np.array([[0.3, 0.7]])],
            cost=[np.array([0.0]), np.array([1.0])],
            state_coords=np.array([[0.0], [1.0]]),
        )
    if name == "ring":
        n = int(params.get("n", 5))
        if n < 3:
            raise ValueError("ring needs n >= 3")
        transition = []
        for x in range(n):
            row = np.zeros(n)
            row[(x - 1) % n] = 0.5
            row[(x + 1) % n] = 0.5
            transition.append(row[None, :])
        # Cost 1 at state 0, else 0: the long-run mean cost is 1/n.
        cost = [np.array([1.0 if x == 0 else 0.0]) for x in range(n)]
        return FiniteMCP(
            actions=[["a"]] * n,
            transition=transition,
            cost=cost,
            state_coords=np.arange(n, dtype=float)[:, None],
        )
    if name == "random_seeded":
        n = int(params.get("n", 4))
        m = int(params.get("m", 2))
        seed = int(params.get("seed", 0))
        rng = np.random.default_rng(seed)
        transition = []
        cost = []
        for _ in range(n):
            raw = rng.uniform(0.1, 1.0, size=(m, n))
            transition.append(raw / raw.sum(axis=1, keepdims=True))
            cost.append(rng.uniform(0.0, 1.0, size=m))
        return FiniteMCP(
            actions=[[f"a{j}" for j in range(m)] for _ in range(n)],
            transition=transition,
            cost=cost,
            state_coords=np.arange(n, dtype=float)[:, None],
        )
    raise ValueError(f"unknown builtin chain {name!r}")
