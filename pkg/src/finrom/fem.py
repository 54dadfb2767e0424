"""Reference elements, quadrature rules, a damped Newton driver, and small
linear-algebra helpers shared by the truth, reduced, and hyperreduced solvers.

Elements are fixed at quadratic Lagrange: 6-node triangles in 2D and 3-node
line elements on ports. There is no element-order genericity on purpose.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse
import scipy.sparse.linalg

from .errors import ConfigError, ConvergenceError, SolverError

# Node order for the quadratic triangle: vertices (0,0), (1,0), (0,1), then
# the midpoints of edges (v0,v1), (v1,v2), (v2,v0).
TRI6_NODES = np.array(
    [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.5, 0.0], [0.5, 0.5], [0.0, 0.5]]
)

# Quadratic line on [0, 1]: endpoints first, midpoint last.
LINE3_NODES = np.array([0.0, 1.0, 0.5])


@dataclass(frozen=True)
class ReferenceElement:
    """A quadratic Lagrange reference element ("triangle" or "line")."""

    kind: str

    def __post_init__(self):
        if self.kind not in ("triangle", "line"):
            raise ConfigError(f"unknown element kind {self.kind!r}")

    @property
    def node_count(self) -> int:
        return 6 if self.kind == "triangle" else 3

    @property
    def dim(self) -> int:
        return 2 if self.kind == "triangle" else 1

    def tabulate(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Shape-function values and reference gradients at ``points``.

        ``points`` has shape (n, dim) (or (n,) for lines). Returns
        ``(values, grads)`` of shapes (n, node_count) and
        (n, node_count, dim). No domain check; see :func:`evaluate_shape`.
        """
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        if self.kind == "triangle":
            x, y = pts[:, 0], pts[:, 1]
            l0, l1, l2 = 1.0 - x - y, x, y
            vals = np.stack(
                [
                    l0 * (2 * l0 - 1),
                    l1 * (2 * l1 - 1),
                    l2 * (2 * l2 - 1),
                    4 * l0 * l1,
                    4 * l1 * l2,
                    4 * l2 * l0,
                ],
                axis=1,
            )
            zeros = np.zeros_like(x)
            # gradients of barycentric coords: dl0 = (-1,-1), dl1 = (1,0), dl2 = (0,1)
            gx = np.stack(
                [
                    -(4 * l0 - 1),
                    4 * l1 - 1,
                    zeros,
                    4 * (l0 - l1),
                    4 * l2,
                    -4 * l2,
                ],
                axis=1,
            )
            gy = np.stack(
                [
                    -(4 * l0 - 1),
                    zeros,
                    4 * l2 - 1,
                    -4 * l1,
                    4 * l1,
                    4 * (l0 - l2),
                ],
                axis=1,
            )
            grads = np.stack([gx, gy], axis=2)
        else:
            t = pts[:, 0]
            vals = np.stack(
                [(1 - t) * (1 - 2 * t), t * (2 * t - 1), 4 * t * (1 - t)], axis=1
            )
            grads = np.stack([4 * t - 3, 4 * t - 1, 4 - 8 * t], axis=1)[:, :, None]
        return vals, grads


def evaluate_shape(elem: ReferenceElement, point) -> tuple[np.ndarray, np.ndarray]:
    """Evaluate shape functions at one reference point, with a domain check.

    Raises ValueError if the point lies outside the reference element
    (barycentric coordinates outside [0, 1] beyond 1e-12).
    """
    p = np.atleast_1d(np.asarray(point, dtype=float))
    tol = 1e-12
    if elem.kind == "triangle":
        bary = np.array([1.0 - p[0] - p[1], p[0], p[1]])
    else:
        bary = np.array([1.0 - p[0], p[0]])
    if bary.min() < -tol or bary.max() > 1.0 + tol:
        raise ValueError(f"point {p} outside reference {elem.kind}")
    vals, grads = elem.tabulate(p[None, : elem.dim])
    return vals[0], grads[0]


@dataclass(frozen=True)
class QuadratureRule:
    """Points and nonnegative weights, reference or physical."""

    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "points", np.asarray(self.points, dtype=float))
        object.__setattr__(self, "weights", np.asarray(self.weights, dtype=float))
        if self.weights.min() < 0:
            raise ConfigError("quadrature weights must be nonnegative")

    def __len__(self) -> int:
        return len(self.weights)


# Symmetric triangle rules on the unit triangle {x,y >= 0, x+y <= 1}.
# Weights sum to 1/2 (the reference area). Orbit data: (a, weight) pairs give
# the permutations of (a, a, 1-2a); the 6-point orbit of the degree-6 rule
# uses all permutations of (a, b, 1-a-b).
_TRI_RULES = {}


def _orbit3(a):
    b = 1.0 - 2.0 * a
    return [(a, a), (b, a), (a, b)]


def _orbit6(a, b):
    c = 1.0 - a - b
    return [(a, b), (b, a), (a, c), (c, a), (b, c), (c, b)]


def _build_tri_rules():
    rules = {}
    # degree 2, 3 points
    pts = _orbit3(1.0 / 6.0)
    rules[2] = (np.array(pts), np.full(3, 1.0 / 6.0))
    # degree 4, 6 points
    pts = _orbit3(0.445948490915965) + _orbit3(0.091576213509771)
    w = np.concatenate(
        [np.full(3, 0.223381589678011), np.full(3, 0.109951743655322)]
    )
    rules[4] = (np.array(pts), 0.5 * w)
    # degree 6, 12 points
    pts = (
        _orbit3(0.063089014491502)
        + _orbit3(0.249286745170910)
        + _orbit6(0.310352451033785, 0.053145049844816)
    )
    w = np.concatenate(
        [
            np.full(3, 0.050844906370207),
            np.full(3, 0.116786275726379),
            np.full(6, 0.082851075618374),
        ]
    )
    rules[6] = (np.array(pts), 0.5 * w)
    return rules


_TRI_RULES = _build_tri_rules()


def gauss_rule(order: int, kind: str) -> QuadratureRule:
    """A rule integrating polynomials of degree <= ``order`` exactly.

    Triangle rules are symmetric rules on the unit triangle (orders 2, 4, 6);
    line rules are Gauss-Legendre on [0, 1] for any order >= 1.
    """
    if kind == "line":
        if order < 1:
            raise ConfigError(f"unsupported line rule order {order}")
        n = (order + 2) // 2
        x, w = np.polynomial.legendre.leggauss(n)
        return QuadratureRule(0.5 * (x + 1.0), 0.5 * w)
    if kind == "triangle":
        avail = sorted(_TRI_RULES)
        for deg in avail:
            if order <= deg:
                pts, w = _TRI_RULES[deg]
                return QuadratureRule(pts.copy(), w.copy())
        raise ConfigError(f"unsupported triangle rule order {order} (max {avail[-1]})")
    raise ConfigError(f"unknown quadrature kind {kind!r}")


@dataclass(frozen=True)
class NewtonConfig:
    abs_tol: float = 1e-10
    rel_tol: float = 0.0
    step_tol: float = 1e-12
    max_iters: int = 30
    max_halvings: int = 8

    def __post_init__(self):
        if self.abs_tol <= 0 or self.rel_tol < 0 or self.step_tol < 0:
            raise ConfigError("Newton tolerances must be positive")
        if self.max_iters < 1:
            raise ConfigError("max_iters must be >= 1")


@dataclass
class NewtonResult:
    x: np.ndarray
    iters: int
    history: list = field(default_factory=list)


def _default_linear_solve(jac, res):
    if scipy.sparse.issparse(jac):
        return scipy.sparse.linalg.spsolve(jac.tocsc(), res)
    return scipy.linalg.solve(jac, res)


def newton_solve(residual_fn, jacobian_fn, x0, cfg: NewtonConfig | None = None,
                 linear_solve=None) -> NewtonResult:
    """Damped Newton: full steps, halved on residual increase.

    Stops when the residual norm drops below abs_tol (or rel_tol relative to
    the initial residual), or when the Newton step is below step_tol relative
    to the iterate. ``linear_solve(jac, res)`` returns the Newton update
    ``dx`` with ``jac @ dx = res``; the default dispatches on dense/sparse.
    Raises SolverError on a singular Jacobian and ConvergenceError (carrying
    the best iterate) when max_iters is exhausted.
    """
    cfg = cfg or NewtonConfig()
    solve = linear_solve or _default_linear_solve
    x = np.array(x0, dtype=float)
    r = np.asarray(residual_fn(x), dtype=float)
    rnorm = float(np.linalg.norm(r))
    history = [rnorm]
    r0norm = rnorm

    def converged(rn):
        return rn <= cfg.abs_tol or (cfg.rel_tol > 0 and rn <= cfg.rel_tol * r0norm)

    if converged(rnorm):
        return NewtonResult(x, 0, history)

    best_x, best_norm = x.copy(), rnorm
    for it in range(1, cfg.max_iters + 1):
        jac = jacobian_fn(x)
        try:
            with np.errstate(divide="ignore", invalid="ignore"):
                dx = solve(jac, r)
        except (scipy.linalg.LinAlgError, RuntimeError) as exc:
            raise SolverError(f"linear solve failed at Newton iteration {it}: {exc}")
        if not np.all(np.isfinite(dx)):
            raise SolverError(f"singular Jacobian at Newton iteration {it}")

        # near the solution the Newton step bounds the error, so a tiny step
        # means the iterate is converged even when the assembled residual sits
        # at its floating-point evaluation floor above abs_tol
        if cfg.step_tol > 0 and np.linalg.norm(dx) <= cfg.step_tol * max(
            1.0, float(np.linalg.norm(x))
        ):
            x = x - dx
            rnorm = float(np.linalg.norm(residual_fn(x)))
            history.append(rnorm)
            return NewtonResult(x, it, history)

        step = 1.0
        for _ in range(cfg.max_halvings + 1):
            x_new = x - step * dx
            r_new = np.asarray(residual_fn(x_new), dtype=float)
            rn = float(np.linalg.norm(r_new))
            if np.isfinite(rn) and rn < rnorm:
                break
            step *= 0.5
        # accept the final candidate even if damping did not find a decrease;
        # Newton frequently recovers on the next iteration
        x, r, rnorm = x_new, r_new, rn
        history.append(rnorm)
        if rnorm < best_norm:
            best_x, best_norm = x.copy(), rnorm
        if converged(rnorm):
            return NewtonResult(x, it, history)

    raise ConvergenceError(
        f"Newton did not converge in {cfg.max_iters} iterations "
        f"(best residual {best_norm:.3e})",
        best=best_x,
        history=history,
    )


def min_singular_value(matrix, tol: float = 1e-8, dense_cutoff: int = 1500) -> float:
    """Smallest singular value of a square matrix.

    Dense SVD below ``dense_cutoff``; above it, a shift-invert Lanczos on the
    normal equations (matching the dense result to ``tol`` relative).
    """
    if tol <= 0:
        raise ConfigError("tol must be positive")
    sparse_in = scipy.sparse.issparse(matrix)
    n, m = matrix.shape
    if n != m:
        raise ValueError(f"matrix must be square, got {matrix.shape}")
    if n <= dense_cutoff:
        a = matrix.toarray() if sparse_in else np.asarray(matrix, dtype=float)
        return float(scipy.linalg.svdvals(a)[-1])
    a = matrix.tocsc() if sparse_in else scipy.sparse.csc_matrix(matrix)
    ata = (a.T @ a).tocsc()
    vals = scipy.sparse.linalg.eigsh(
        ata, k=1, sigma=0.0, which="LM", tol=tol, return_eigenvectors=False
    )
    return float(np.sqrt(max(vals[0], 0.0)))


def extreme_eigs_sym(matrix, tol: float = 1e-8, dense_cutoff: int = 500):
    """(lambda_min, lambda_max) of a symmetric positive-definite matrix."""
    sparse_in = scipy.sparse.issparse(matrix)
    n = matrix.shape[0]
    if matrix.shape[0] != matrix.shape[1]:
        raise ValueError(f"matrix must be square, got {matrix.shape}")
    if n <= dense_cutoff:
        a = matrix.toarray() if sparse_in else np.asarray(matrix, dtype=float)
        w = scipy.linalg.eigvalsh(a)
        lo, hi = float(w[0]), float(w[-1])
    else:
        a = matrix.tocsc() if sparse_in else scipy.sparse.csc_matrix(matrix)
        hi = float(
            scipy.sparse.linalg.eigsh(a, k=1, which="LA", tol=tol,
                                      return_eigenvectors=False)[0]
        )
        lo = float(
            scipy.sparse.linalg.eigsh(a, k=1, sigma=0.0, which="LM", tol=tol,
                                      return_eigenvectors=False)[0]
        )
    if lo <= 0:
        raise SolverError(f"matrix is not positive definite (lambda_min={lo:.3e})")
    return lo, hi


class Timer:
    """Minimal wall-clock context manager used in solve reports."""

    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.seconds = time.perf_counter() - self.start
        return False
