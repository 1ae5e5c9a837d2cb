"""Coordinate-chart Riemannian metrics, curvature, and the model zoo.

Everything lives in a single global chart.  A :class:`ManifoldSpec` bundles a
metric callable with (optionally) hand-coded first and second metric
derivatives; Christoffel symbols and the Riemann tensor are assembled from
those with the conventions

    Gamma^k_ij = 1/2 g^{kl} (d_i g_jl + d_j g_il - d_l g_ij)
    R^l_ijk    = (R(d_i, d_j) d_k)^l
               = d_i Gamma^l_jk - d_j Gamma^l_ik
                 + Gamma^l_im Gamma^m_jk - Gamma^l_jm Gamma^m_ik

so that constant sectional curvature K means
``<R(u,w)w,u> = K (|u|^2|w|^2 - <u,w>^2)``.

Models: ``euclidean``, ``hyperbolic`` (upper half-space, curvature -k^2),
``product`` (structural block metric), ``sl2r`` and ``heisenberg`` (the two
left-invariant 3-dimensional metrics with explicit charts), plus ``custom``
for user metrics differentiated by finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Tuple

import numpy as np

from .errors import ChartDomainError, ModelParameterError

Array = np.ndarray

UNIT_TOL = 1e-6            # acceptance slack for "unit vector" preconditions
SYMMETRIZE_GUARD = 1e-6    # max asymmetry tolerated before an op is rejected


@dataclass(frozen=True)
class TangentVector:
    """A chart point together with chart components of a tangent vector."""

    base: Array
    components: Array

    def __post_init__(self):
        object.__setattr__(self, "base", np.asarray(self.base, dtype=float))
        object.__setattr__(self, "components",
                           np.asarray(self.components, dtype=float))
        if not (np.all(np.isfinite(self.base))
                and np.all(np.isfinite(self.components))):
            raise ValueError("tangent vector has non-finite entries")

    def __neg__(self) -> "TangentVector":
        return TangentVector(self.base, -self.components)


@dataclass(frozen=True)
class CurvatureData:
    """Christoffel symbols and Riemann tensor at a chart point.

    ``christoffel[k, i, j] = Gamma^k_ij`` and
    ``riemann[l, i, j, k] = (R(d_i, d_j) d_k)^l``.
    """

    at: Array
    christoffel: Array
    riemann: Array


@dataclass(frozen=True)
class ManifoldSpec:
    """Immutable description of a Riemannian metric in one global chart.

    ``metric_d1`` and ``metric_d2`` hold analytic derivatives
    ``d1[k,i,j] = d_k g_ij`` and ``d2[m,k,i,j] = d_m d_k g_ij``; when absent
    (or when ``derivative_mode == 'fd'``) central finite differences of
    ``metric_eval`` are used with steps ``fd_step`` / ``fd_step2``.

    ``chart_margin`` returns a positive number inside the chart's validity
    domain (distance-like); ``None`` means the chart is all of R^n.
    ``curvature_bounds`` is ``(R0, R0')`` with ``|K| <= R0`` and
    ``|nabla R| <= R0'`` where known (0.0 is allowed for flat factors).
    """

    dimension: int
    metric_eval: Callable[[Array], Array]
    model_tag: str = "custom"
    params: tuple = ()
    derivative_mode: str = "analytic"
    fd_step: float = 1e-5
    fd_step2: float = 1e-4
    metric_d1: Optional[Callable[[Array], Array]] = None
    metric_d2: Optional[Callable[[Array], Array]] = None
    chart_margin: Optional[Callable[[Array], float]] = None
    curvature_bounds: Optional[Tuple[float, float]] = None
    factors: Optional[Tuple["ManifoldSpec", "ManifoldSpec"]] = None

    # -- metric helpers ----------------------------------------------------

    def metric(self, p: Array) -> Array:
        p = np.asarray(p, dtype=float)
        self.check_in_chart(p)
        g = np.asarray(self.metric_eval(p), dtype=float)
        if g.shape != (self.dimension, self.dimension):
            raise ValueError(f"metric returned shape {g.shape}, "
                             f"expected {(self.dimension, self.dimension)}")
        return g

    def metric_inverse(self, p: Array) -> Array:
        return np.linalg.inv(self.metric(p))

    def inner(self, p: Array, u: Array, w: Array) -> float:
        return float(np.asarray(u) @ self.metric(p) @ np.asarray(w))

    def norm(self, p: Array, w: Array) -> float:
        q = self.inner(p, w, w)
        return float(np.sqrt(max(q, 0.0)))

    def unit_vector(self, p: Array, w: Array) -> TangentVector:
        """Normalize chart components ``w`` at ``p`` to a g-unit tangent vector."""
        n = self.norm(p, w)
        if n < 1e-14:
            raise ValueError("cannot normalize a (near-)zero vector")
        return TangentVector(p, np.asarray(w, dtype=float) / n)

    def is_unit(self, v: TangentVector, tol: float = UNIT_TOL) -> bool:
        return abs(self.inner(v.base, v.components, v.components) - 1.0) <= tol

    def check_in_chart(self, p: Array) -> None:
        if not np.all(np.isfinite(p)):
            raise ChartDomainError(f"non-finite chart point {p}")
        if self.chart_margin is not None and self.chart_margin(p) <= 0.0:
            raise ChartDomainError(f"point {p} outside chart domain")

    # -- derivative assembly -----------------------------------------------

    def metric_derivative(self, p: Array) -> Array:
        """d1[k,i,j] = d_k g_ij, analytic when available else central FD."""
        if self.derivative_mode == "analytic" and self.metric_d1 is not None:
            return np.asarray(self.metric_d1(p), dtype=float)
        return _fd_metric_d1(self, p)

    def metric_second_derivative(self, p: Array) -> Array:
        """d2[m,k,i,j] = d_m d_k g_ij."""
        if self.derivative_mode == "analytic" and self.metric_d2 is not None:
            return np.asarray(self.metric_d2(p), dtype=float)
        return _fd_metric_d2(self, p)


def _fd_metric_d1(spec: ManifoldSpec, p: Array) -> Array:
    n = spec.dimension
    h = spec.fd_step
    out = np.empty((n, n, n))
    for k in range(n):
        e = np.zeros(n)
        e[k] = h
        _check_fd_stencil(spec, p, e)
        out[k] = (spec.metric(p + e) - spec.metric(p - e)) / (2.0 * h)
    return out


def _fd_metric_d2(spec: ManifoldSpec, p: Array) -> Array:
    # nested central differences: outer step fd_step2 applied to d1
    n = spec.dimension
    h = spec.fd_step2
    out = np.empty((n, n, n, n))
    for m in range(n):
        e = np.zeros(n)
        e[m] = h
        _check_fd_stencil(spec, p, e)
        out[m] = (spec.metric_derivative(p + e)
                  - spec.metric_derivative(p - e)) / (2.0 * h)
    return out


def _check_fd_stencil(spec: ManifoldSpec, p: Array, e: Array) -> None:
    if spec.chart_margin is not None:
        if spec.chart_margin(p + e) <= 0.0 or spec.chart_margin(p - e) <= 0.0:
            raise ChartDomainError(
                f"finite-difference stencil at {p} escapes the chart domain")


# --------------------------------------------------------------------------
# curvature
# --------------------------------------------------------------------------

def christoffel_from(g_inv: Array, d1: Array) -> Array:
    sym = (np.einsum("ijl->ijl", d1) + np.einsum("jil->ijl", d1)
           - np.einsum("lij->ijl", d1))
    return 0.5 * np.einsum("kl,ijl->kij", g_inv, sym)


def curvature_at(spec: ManifoldSpec, p: Array) -> CurvatureData:
    """Christoffel symbols and Riemann tensor at ``p``.

    Derivatives come from the spec's analytic closures or from central
    finite differences, per ``derivative_mode``.
    """
    p = np.asarray(p, dtype=float)
    g = spec.metric(p)
    eig_min = np.linalg.eigvalsh(g)[0]
    if eig_min <= 0.0 or not np.isfinite(eig_min):
        raise ChartDomainError(f"metric singular at {p} (min eigenvalue {eig_min})")
    gi = np.linalg.inv(g)
    d1 = spec.metric_derivative(p)
    gam = christoffel_from(gi, d1)

    d2 = spec.metric_second_derivative(p)
    dginv = -np.einsum("ka,mab,bl->mkl", gi, d1, gi)
    sym = (np.einsum("ijl->ijl", d1) + np.einsum("jil->ijl", d1)
           - np.einsum("lij->ijl", d1))
    dsym = (np.einsum("mijl->mijl", d2) + np.einsum("mjil->mijl", d2)
            - np.einsum("mlij->mijl", d2))
    dgam = (0.5 * np.einsum("mkl,ijl->mkij", dginv, sym)
            + 0.5 * np.einsum("kl,mijl->mkij", gi, dsym))

    riem = (np.einsum("iljk->lijk", dgam) - np.einsum("jlik->lijk", dgam)
            + np.einsum("lim,mjk->lijk", gam, gam)
            - np.einsum("ljm,mik->lijk", gam, gam))
    return CurvatureData(at=p, christoffel=gam, riemann=riem)


def christoffel_at(spec: ManifoldSpec, p: Array) -> Array:
    """Gamma[k,i,j] at ``p`` (no second derivatives needed)."""
    g = spec.metric(p)
    return christoffel_from(np.linalg.inv(g), spec.metric_derivative(p))


def sectional_curvature(spec: ManifoldSpec, p: Array, u: Array, w: Array) -> float:
    """K(span(u, w)) = <R(u,w)w, u> / (|u|^2 |w|^2 - <u,w>^2)."""
    p = np.asarray(p, dtype=float)
    u = np.asarray(u, dtype=float)
    w = np.asarray(w, dtype=float)
    g = spec.metric(p)
    den = (u @ g @ u) * (w @ g @ w) - (u @ g @ w) ** 2
    if den < 1e-14:
        raise ValueError("degenerate plane: u, w are (near-)linearly dependent")
    riem = curvature_at(spec, p).riemann
    ruwwu = np.einsum("lijk,i,j,k,lm,m->", riem, u, w, w, g, u)
    return float(ruwwu / den)


def jacobi_operator(spec: ManifoldSpec, v: TangentVector, frame: Array) -> Array:
    """Matrix of R(., v)v on span(frame), entries ``<R(e_a, v)v, e_b>``.

    ``frame`` is an (n-1, n) array of g-orthonormal chart vectors spanning
    the orthogonal complement of the unit vector ``v``.  The raw matrix must
    be symmetric to within the symmetrization guard; the symmetric part is
    returned.
    """
    p, w = v.base, v.components
    if not spec.is_unit(v):
        raise ValueError(f"jacobi_operator requires a unit vector, |v|_g^2 = "
                         f"{spec.inner(p, w, w):.12g}")
    frame = np.atleast_2d(np.asarray(frame, dtype=float))
    g = spec.metric(p)
    gram = frame @ g @ frame.T
    if not np.allclose(gram, np.eye(len(frame)), atol=1e-6):
        raise ValueError("frame is not g-orthonormal")
    if np.max(np.abs(frame @ g @ w)) > 1e-6:
        raise ValueError("frame is not perpendicular to v")
    riem = curvature_at(spec, p).riemann
    mat = np.einsum("lijk,ai,j,k,lm,bm->ab", riem, frame, w, w, g, frame)
    asym = np.max(np.abs(mat - mat.T)) if mat.size else 0.0
    if asym > SYMMETRIZE_GUARD:
        raise ModelParameterError(
            f"Jacobi operator asymmetry {asym:.3e} exceeds guard; "
            f"metric derivatives look inconsistent")
    return 0.5 * (mat + mat.T)


def perpendicular_frame(spec: ManifoldSpec, v: TangentVector) -> Array:
    """Deterministic g-orthonormal basis of v-perp, shape (n-1, n).

    Gram-Schmidt over [v, e_1, ..., e_n] in the metric at the footpoint,
    dropping the most v-parallel coordinate direction.
    """
    n = spec.dimension
    g = spec.metric(v.base)
    out = [np.asarray(v.components, dtype=float) / spec.norm(v.base, v.components)]
    for k in range(n):
        cand = np.zeros(n)
        cand[k] = 1.0
        for o in out:
            cand = cand - (o @ g @ cand) * o
        nrm = np.sqrt(max(cand @ g @ cand, 0.0))
        if nrm > 1e-8:
            out.append(cand / nrm)
        if len(out) == n:
            break
    if len(out) != n:
        raise ValueError("failed to complete an orthonormal frame")
    return np.array(out[1:])


# --------------------------------------------------------------------------
# model builders
# --------------------------------------------------------------------------

def _euclidean(n: int) -> ManifoldSpec:
    eye = np.eye(n)
    zero1 = np.zeros((n, n, n))
    zero2 = np.zeros((n, n, n, n))
    return ManifoldSpec(
        dimension=n,
        metric_eval=lambda p: eye,
        model_tag="euclidean",
        params=(("n", n),),
        metric_d1=lambda p: zero1,
        metric_d2=lambda p: zero2,
        curvature_bounds=(0.0, 0.0),
    )


def _hyperbolic(k: float, n: int) -> ManifoldSpec:
    """Upper half-space {x_n > 0} with metric delta/(k x_n)^2, curvature -k^2."""
    k2 = k * k

    def metric(p):
        return np.eye(n) / (k2 * p[-1] ** 2)

    def d1(p):
        out = np.zeros((n, n, n))
        out[n - 1] = -2.0 * np.eye(n) / (k2 * p[-1] ** 3)
        return out

    def d2(p):
        out = np.zeros((n, n, n, n))
        out[n - 1, n - 1] = 6.0 * np.eye(n) / (k2 * p[-1] ** 4)
        return out

    return ManifoldSpec(
        dimension=n,
        metric_eval=metric,
        model_tag="hyperbolic",
        params=(("k", k), ("n", n)),
        metric_d1=d1,
        metric_d2=d2,
        chart_margin=lambda p: float(p[-1]) - 1e-300,
        curvature_bounds=(k2, 0.0),
    )


def _sl2r(a: float, b: float) -> ManifoldSpec:
    """Universal cover of SL(2,R), chart (t, x, y), left-invariant metric

        ds^2 = dt^2/|a+b| + |a+b| e^{-2t} dx^2 + (dy + sqrt(2b) e^{-t} dx)^2
    """
    m = abs(a + b)
    c = np.sqrt(2.0 * b)

    def metric(p):
        t = p[0]
        g = np.zeros((3, 3))
        g[0, 0] = 1.0 / m
        g[1, 1] = (m + 2.0 * b) * np.exp(-2.0 * t)
        g[1, 2] = g[2, 1] = c * np.exp(-t)
        g[2, 2] = 1.0
        return g

    def d1(p):
        t = p[0]
        out = np.zeros((3, 3, 3))
        out[0, 1, 1] = -2.0 * (m + 2.0 * b) * np.exp(-2.0 * t)
        out[0, 1, 2] = out[0, 2, 1] = -c * np.exp(-t)
        return out

    def d2(p):
        t = p[0]
        out = np.zeros((3, 3, 3, 3))
        out[0, 0, 1, 1] = 4.0 * (m + 2.0 * b) * np.exp(-2.0 * t)
        out[0, 0, 1, 2] = out[0, 0, 2, 1] = c * np.exp(-t)
        return out

    return ManifoldSpec(
        dimension=3,
        metric_eval=metric,
        model_tag="sl2r",
        params=(("a", a), ("b", b)),
        metric_d1=d1,
        metric_d2=d2,
    )


def _heisenberg(b: float) -> ManifoldSpec:
    """Heisenberg group, chart (x, y, z), ds^2 = dx^2/b + dz^2 + (dy - x dz)^2."""

    def metric(p):
        x = p[0]
        g = np.zeros((3, 3))
        g[0, 0] = 1.0 / b
        g[1, 1] = 1.0
        g[1, 2] = g[2, 1] = -x
        g[2, 2] = 1.0 + x * x
        return g

    def d1(p):
        x = p[0]
        out = np.zeros((3, 3, 3))
        out[0, 1, 2] = out[0, 2, 1] = -1.0
        out[0, 2, 2] = 2.0 * x
        return out

    def d2(p):
        out = np.zeros((3, 3, 3, 3))
        out[0, 0, 2, 2] = 2.0
        return out

    return ManifoldSpec(
        dimension=3,
        metric_eval=metric,
        model_tag="heisenberg",
        params=(("b", b),),
        metric_d1=d1,
        metric_d2=d2,
    )


def product_spec(left: ManifoldSpec, right: ManifoldSpec) -> ManifoldSpec:
    """Structural Riemannian product: block metric and block derivatives."""
    nl, nr = left.dimension, right.dimension
    n = nl + nr

    def metric(p):
        g = np.zeros((n, n))
        g[:nl, :nl] = left.metric(p[:nl])
        g[nl:, nl:] = right.metric(p[nl:])
        return g

    def d1(p):
        out = np.zeros((n, n, n))
        out[:nl, :nl, :nl] = left.metric_derivative(p[:nl])
        out[nl:, nl:, nl:] = right.metric_derivative(p[nl:])
        return out

    def d2(p):
        out = np.zeros((n, n, n, n))
        out[:nl, :nl, :nl, :nl] = left.metric_second_derivative(p[:nl])
        out[nl:, nl:, nl:, nl:] = right.metric_second_derivative(p[nl:])
        return out

    margin = None
    if left.chart_margin is not None or right.chart_margin is not None:
        def margin(p):
            vals = []
            if left.chart_margin is not None:
                vals.append(left.chart_margin(p[:nl]))
            if right.chart_margin is not None:
                vals.append(right.chart_margin(p[nl:]))
            return min(vals)

    bounds = None
    if left.curvature_bounds is not None and right.curvature_bounds is not None:
        bounds = (max(left.curvature_bounds[0], right.curvature_bounds[0]),
                  max(left.curvature_bounds[1], right.curvature_bounds[1]))

    mode = "analytic"
    if left.derivative_mode == "fd" or right.derivative_mode == "fd":
        mode = "fd"

    return ManifoldSpec(
        dimension=n,
        metric_eval=metric,
        model_tag="product",
        params=(("left", left), ("right", right)),
        derivative_mode=mode,
        metric_d1=d1 if mode == "analytic" else None,
        metric_d2=d2 if mode == "analytic" else None,
        chart_margin=margin,
        curvature_bounds=bounds,
        factors=(left, right),
    )


def make_model(tag: str, **params) -> ManifoldSpec:
    """Construct one of the named model manifolds.

    Parameters
    ----------
    tag : str
        ``euclidean`` (n), ``hyperbolic`` (k, n), ``product`` (left, right),
        ``sl2r`` (a, b), ``heisenberg`` (b), or ``custom``
        (n, metric, optionally chart_margin / fd_step).

    Raises
    ------
    ModelParameterError
        If the parameters violate the model's constraints; the message names
        the constraint.
    """
    if tag == "euclidean":
        n = int(params.get("n", 3))
        if n < 1:
            raise ModelParameterError("euclidean model requires n >= 1")
        return _euclidean(n)
    if tag == "hyperbolic":
        k = float(params.get("k", 1.0))
        n = int(params.get("n", 2))
        if k <= 0:
            raise ModelParameterError(f"hyperbolic model requires k > 0, got k={k}")
        if n < 2:
            raise ModelParameterError("hyperbolic model requires n >= 2")
        return _hyperbolic(k, n)
    if tag == "product":
        left, right = params.get("left"), params.get("right")
        if not isinstance(left, ManifoldSpec) or not isinstance(right, ManifoldSpec):
            raise ModelParameterError(
                "product model requires 'left' and 'right' ManifoldSpec factors")
        return product_spec(left, right)
    if tag == "sl2r":
        a, b = float(params.get("a", -2.0)), float(params.get("b", 1.0))
        if b <= 0:
            raise ModelParameterError(f"sl2r model requires b > 0, got b={b}")
        if a + b >= 0:
            raise ModelParameterError(
                f"sl2r model requires a + b < 0, got a+b={a + b}")
        return _sl2r(a, b)
    if tag == "heisenberg":
        b = float(params.get("b", 1.0))
        if b <= 0:
            raise ModelParameterError(f"heisenberg model requires b > 0, got b={b}")
        return _heisenberg(b)
    if tag == "custom":
        n = params.get("n")
        metric = params.get("metric")
        if n is None or metric is None:
            raise ModelParameterError("custom model requires 'n' and 'metric'")
        return ManifoldSpec(
            dimension=int(n),
            metric_eval=metric,
            model_tag="custom",
            derivative_mode="fd",
            fd_step=float(params.get("fd_step", 1e-5)),
            fd_step2=float(params.get("fd_step2", 1e-4)),
            chart_margin=params.get("chart_margin"),
        )
    raise ModelParameterError(f"unknown model tag {tag!r}")


def with_derivative_mode(spec: ManifoldSpec, mode: str) -> ManifoldSpec:
    """Copy of ``spec`` evaluating derivatives in the given mode ('analytic'|'fd')."""
    if mode not in ("analytic", "fd"):
        raise ModelParameterError(f"unknown derivative mode {mode!r}")
    return replace(spec, derivative_mode=mode)


def default_anchor(spec: ManifoldSpec) -> Array:
    """Canonical base point used for seeded sampling on each model."""
    if spec.model_tag == "hyperbolic":
        p = np.zeros(spec.dimension)
        p[-1] = 1.0
        return p
    if spec.factors is not None:
        return np.concatenate([default_anchor(f) for f in spec.factors])
    return np.zeros(spec.dimension)
