"""Geodesic flow, parallel frames, distances and connecting geodesics.

Two trajectory backends share one interface:

* an adaptive ODE integrator (DOP853, PI step control) solving the geodesic
  equation jointly with the frame parallel-transport equations — works for
  every metric;
* exact closed forms (lines, half-space semicircles/verticals, and their
  Riemannian products) used automatically on the model spaces, where the
  far-range behaviour of stable/unstable limits would otherwise be limited
  by floating-point conditioning.

Trajectories are immutable once created; a per-trajectory memo slot is used
by :mod:`horolab.jacobi` to cache fundamental Jacobi solutions.
"""

from __future__ import annotations

from typing import Optional, Tuple

import numpy as np
from scipy.integrate import solve_ivp

from .errors import (ChartDomainError, ConjugatePointError, ConvergenceError,
                     IntegrationError)
from .manifolds import (ManifoldSpec, TangentVector, christoffel_at,
                        curvature_at, perpendicular_frame)

Array = np.ndarray

DEFAULT_TOL = 1e-11
ODE_CHART_FLOOR = 1e-12    # terminate ODE integration this close to the chart edge
CF_TIME_LIMIT = 320.0      # closed-form evaluation horizon per unit curvature


# --------------------------------------------------------------------------
# closed-form geodesics
# --------------------------------------------------------------------------

def closed_form_available(spec: ManifoldSpec) -> bool:
    if spec.model_tag in ("euclidean", "hyperbolic"):
        return True
    if spec.model_tag == "product" and spec.factors is not None:
        return all(closed_form_available(f) for f in spec.factors)
    return False


class _CfPoint:
    """Degenerate factor geodesic: a stationary point."""

    def __init__(self, p):
        self.p = np.asarray(p, dtype=float)
        self.t_limit = np.inf

    def state(self, t):
        return self.p, np.zeros_like(self.p)

    def transport(self, w, t_from, t_to):
        return np.asarray(w, dtype=float)


class _CfLine:
    """Euclidean geodesic: straight line, transport is the identity."""

    def __init__(self, p, v):
        self.p = np.asarray(p, dtype=float)
        self.v = np.asarray(v, dtype=float)
        self.t_limit = np.inf

    def state(self, t):
        return self.p + t * self.v, self.v

    def transport(self, w, t_from, t_to):
        return np.asarray(w, dtype=float)


class _CfHyp:
    """Unit-speed geodesic of the half-space model with curvature -k^2.

    Vertical lines y(t) = y0 exp(sigma k t) or semicircles
    (s, y) = (c + R tanh(tau), R sech(tau)), tau = k t + tau0, in the vertical
    2-plane spanned by the horizontal direction ``u`` and the last axis.
    Parallel transport uses the adapted orthonormal basis
    [velocity, in-plane normal, k y(t) w_i] with w_i horizontal, w_i ⟂ u.
    """

    def __init__(self, spec, p, v):
        self.n = spec.dimension
        self.k = dict(spec.params)["k"]
        p = np.asarray(p, dtype=float)
        v = np.asarray(v, dtype=float)
        k, n = self.k, self.n
        y0 = p[-1]
        vh = v[:-1]
        hn = np.linalg.norm(vh)
        self.p0 = p
        self.vertical = hn <= 1e-13 * k * y0
        if self.vertical:
            self.y0 = y0
            self.sigma = 1.0 if v[-1] >= 0 else -1.0
            self.u = None
            self.w_basis = np.eye(n - 1)  # rows: horizontal coordinates
            self.t_limit = CF_TIME_LIMIT / k
        else:
            u = vh / hn
            self.u = u
            self.tau0 = float(np.arcsinh(-v[-1] / hn))
            self.R = k * y0 * y0 / hn
            self.c = -self.R * np.tanh(self.tau0)  # plane coordinate s(0) = 0
            # horizontal basis orthogonal to u (euclidean Gram-Schmidt)
            w = []
            for i in range(n - 1):
                cand = np.zeros(n - 1)
                cand[i] = 1.0
                cand = cand - (u @ cand) * u
                for o in w:
                    cand = cand - (o @ cand) * o
                nrm = np.linalg.norm(cand)
                if nrm > 1e-8:
                    w.append(cand / nrm)
                if len(w) == n - 2:
                    break
            self.w_basis = np.array(w).reshape(len(w), n - 1)
            self.t_limit = (CF_TIME_LIMIT + abs(self.tau0)) / k

    def _plane_state(self, t):
        tau = self.k * t + self.tau0
        s = self.c + self.R * np.tanh(tau)
        y = self.R / np.cosh(tau)
        sd = self.k * self.R / np.cosh(tau) ** 2
        yd = -self.k * self.R * np.tanh(tau) / np.cosh(tau)
        return s, y, sd, yd

    def state(self, t):
        n = self.n
        x = np.empty(n)
        xd = np.empty(n)
        if self.vertical:
            y = self.y0 * np.exp(self.sigma * self.k * t)
            x[:-1] = self.p0[:-1]
            x[-1] = y
            xd[:-1] = 0.0
            xd[-1] = self.sigma * self.k * y
            return x, xd
        s, y, sd, yd = self._plane_state(t)
        x[:-1] = self.p0[:-1] + s * self.u
        x[-1] = y
        xd[:-1] = sd * self.u
        xd[-1] = yd
        return x, xd

    def _adapted_basis(self, t):
        """Rows: g-orthonormal parallel basis at time t."""
        n, k = self.n, self.k
        x, xd = self.state(t)
        y = x[-1]
        rows = [xd]
        if not self.vertical:
            normal = np.empty(n)
            s, yy, sd, yd = self._plane_state(t)
            normal[:-1] = -yd * self.u
            normal[-1] = sd
            rows.append(normal)
        for w in self.w_basis:
            out = np.zeros(n)
            out[:-1] = k * y * w
            rows.append(out)
        return np.array(rows)

    def transport(self, w, t_from, t_to):
        x_from, _ = self.state(t_from)
        g = np.eye(self.n) / (self.k * x_from[-1]) ** 2
        b_from = self._adapted_basis(t_from)
        coords = b_from @ g @ np.asarray(w, dtype=float)
        return coords @ self._adapted_basis(t_to)


class _CfProduct:
    """Product geodesic: factor geodesics at speeds alpha_i with sum alpha_i^2 = 1."""

    def __init__(self, spec, p, v):
        left, right = spec.factors
        nl = left.dimension
        p = np.asarray(p, dtype=float)
        v = np.asarray(v, dtype=float)
        self.nl = nl
        self.alphas = []
        self.parts = []
        for sub, ps, vs in ((left, p[:nl], v[:nl]), (right, p[nl:], v[nl:])):
            speed = sub.norm(ps, vs)
            self.alphas.append(speed)
            if speed <= 1e-14:
                self.parts.append(_CfPoint(ps))
            else:
                self.parts.append(_make_cf(sub, ps, vs / speed))
        limits = [part.t_limit / a if a > 0 else np.inf
                  for part, a in zip(self.parts, self.alphas)]
        self.t_limit = min(limits)

    def state(self, t):
        xs, xds = [], []
        for part, a in zip(self.parts, self.alphas):
            x, xd = part.state(a * t)
            xs.append(x)
            xds.append(a * xd)
        return np.concatenate(xs), np.concatenate(xds)

    def transport(self, w, t_from, t_to):
        w = np.asarray(w, dtype=float)
        nl = self.nl
        out = []
        for part, a, ws in zip(self.parts, self.alphas, (w[:nl], w[nl:])):
            out.append(part.transport(ws, a * t_from, a * t_to))
        return np.concatenate(out)


def _make_cf(spec, p, v):
    if spec.model_tag == "euclidean":
        return _CfLine(p, v)
    if spec.model_tag == "hyperbolic":
        return _CfHyp(spec, p, v)
    if spec.model_tag == "product":
        return _CfProduct(spec, p, v)
    raise ValueError(f"no closed-form geodesics for model {spec.model_tag!r}")


def closed_form_flow(spec: ManifoldSpec, v: TangentVector, t: float) -> TangentVector:
    """phi^t(v) on a model with closed-form geodesics."""
    geo = _make_cf(spec, v.base, v.components)
    x, xd = geo.state(t)
    return TangentVector(x, xd)


def closed_form_distance(spec: ManifoldSpec, p: Array, q: Array) -> float:
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if spec.model_tag == "euclidean":
        return float(np.linalg.norm(p - q))
    if spec.model_tag == "hyperbolic":
        k = dict(spec.params)["k"]
        yp, yq = p[-1], q[-1]
        if yp <= 0 or yq <= 0:
            raise ChartDomainError("half-space distance needs y > 0")
        arg = 1.0 + np.dot(p - q, p - q) / (2.0 * yp * yq)
        return float(np.arccosh(max(arg, 1.0)) / k)
    if spec.model_tag == "product":
        left, right = spec.factors
        nl = left.dimension
        dl = closed_form_distance(left, p[:nl], q[:nl])
        dr = closed_form_distance(right, p[nl:], q[nl:])
        return float(np.hypot(dl, dr))
    raise ValueError(f"no closed-form distance for model {spec.model_tag!r}")


def _busemann_terms(spec, p, v, x, T):
    """Return (speed, r) with d(c_{v/|v|}(|v| T), x) = speed*T + r, computed stably.

    ``v`` may have any length, including zero (stationary factor).
    """
    p = np.asarray(p, dtype=float)
    v = np.asarray(v, dtype=float)
    x = np.asarray(x, dtype=float)
    if spec.model_tag == "euclidean":
        a = float(np.linalg.norm(v))
        d0 = x - p
        if a <= 1e-14:
            return 0.0, float(np.linalg.norm(d0))
        dist = float(np.linalg.norm(d0 - T * v))
        r = (np.dot(d0, d0) - 2.0 * T * np.dot(d0, v)) / (dist + a * T)
        return a, float(r)
    if spec.model_tag == "hyperbolic":
        a = spec.norm(p, v)
        if a <= 1e-14:
            return 0.0, closed_form_distance(spec, p, x)
        k = dict(spec.params)["k"]
        geo = _CfHyp(spec, p, v / a)
        # beyond t_eff the residual d(c(t), x) - t has converged to machine
        # precision (error O(exp(-2 k t))), so freeze it there
        t_eff = min(a * T, (34.0 + abs(getattr(geo, "tau0", 0.0))) / k)
        q, _ = geo.state(t_eff)
        return a, float(closed_form_distance(spec, q, x) - t_eff)
    if spec.model_tag == "product":
        left, right = spec.factors
        nl = left.dimension
        al, rl = _busemann_terms(left, p[:nl], v[:nl], x[:nl], T)
        ar, rr = _busemann_terms(right, p[nl:], v[nl:], x[nl:], T)
        a = float(np.hypot(al, ar))
        dl, dr = al * T + rl, ar * T + rr
        dist = float(np.hypot(dl, dr))
        num = 2.0 * T * (al * rl + ar * rr) + rl * rl + rr * rr
        return a, float(num / (dist + a * T))
    raise ValueError(f"no closed-form Busemann terms for model {spec.model_tag!r}")


def busemann_residual(spec: ManifoldSpec, v: TangentVector, x: Array, T: float) -> float:
    """d(c_v(T), x) - T evaluated without large-T cancellation (models only)."""
    _, r = _busemann_terms(spec, v.base, v.components, x, T)
    return float(r)


# --------------------------------------------------------------------------
# trajectory object
# --------------------------------------------------------------------------

class GeodesicTrajectory:
    """A unit-speed geodesic with a parallel g-orthonormal frame of v-perp.

    Evaluate with :meth:`point`, :meth:`velocity`, :meth:`frame`,
    :meth:`tangent` and :meth:`jacobi_matrix` for any time in
    ``[t_min, t_max]``.  ``truncated_neg``/``truncated_pos`` record whether a
    requested span was cut short at the chart boundary.
    """

    def __init__(self, spec, v0, frame0, backend, t_min, t_max,
                 truncated_neg, truncated_pos, tol, sample_times):
        self.spec = spec
        self.v0 = v0
        self.frame0 = frame0
        self._backend = backend
        self.t_min = float(t_min)
        self.t_max = float(t_max)
        self.truncated_neg = bool(truncated_neg)
        self.truncated_pos = bool(truncated_pos)
        self.tol = tol
        self.sample_times = np.asarray(sample_times, dtype=float)
        self._memo = {}

    @property
    def dimension(self):
        return self.spec.dimension

    @property
    def constant_jacobi(self):
        return getattr(self._backend, "constant_jacobi", False)

    def _require(self, t):
        if not (self.t_min - 1e-12 <= t <= self.t_max + 1e-12):
            raise ChartDomainError(
                f"time {t} outside trajectory span [{self.t_min}, {self.t_max}]"
                + (" (truncated at chart boundary)"
                   if (self.truncated_neg or self.truncated_pos) else ""))

    def state(self, t: float):
        self._require(t)
        return self._backend.eval(t)

    def point(self, t: float) -> Array:
        return self.state(t)[0]

    def velocity(self, t: float) -> Array:
        return self.state(t)[1]

    def tangent(self, t: float) -> TangentVector:
        x, xd, _ = self.state(t)
        return TangentVector(x, xd)

    def frame(self, t: float) -> Array:
        return self.state(t)[2]

    def jacobi_matrix(self, t: float) -> Array:
        """Jacobi operator in the parallel frame, entries <R(e_a,c')c', e_b>."""
        if self.constant_jacobi:
            cached = self._memo.get("jacobi0")
            if cached is None:
                cached = self._jacobi_at(0.0)
                self._memo["jacobi0"] = cached
            return cached
        return self._jacobi_at(t)

    def _jacobi_at(self, t):
        x, xd, fr = self.state(t)
        riem = curvature_at(self.spec, x).riemann
        g = self.spec.metric(x)
        mat = np.einsum("lijk,ai,j,k,lm,bm->ab", riem, fr, xd, xd, g, fr)
        return 0.5 * (mat + mat.T)

    def transport(self, w: Array, t_from: float, t_to: float) -> Array:
        self._require(t_from)
        self._require(t_to)
        return self._backend.transport(w, t_from, t_to)

    def state_rows(self):
        """Rows (t, coords..., velocity..., frame entries...) for CSV dumps."""
        for t in self.sample_times:
            x, xd, fr = self.state(t)
            yield [t, *x, *xd, *fr.ravel()]


class _CfBackend:
    constant_jacobi = True

    def __init__(self, geo, frame0, g0):
        self.geo = geo
        self.frame0 = frame0
        self.g0 = g0

    def eval(self, t):
        x, xd = self.geo.state(t)
        fr = np.array([self.geo.transport(e, 0.0, t) for e in self.frame0])
        return x, xd, fr

    def transport(self, w, t_from, t_to):
        return self.geo.transport(w, t_from, t_to)


class _OdeBackend:
    constant_jacobi = False

    def __init__(self, spec, sol_pos, sol_neg):
        self.spec = spec
        self.sol_pos = sol_pos
        self.sol_neg = sol_neg

    def eval(self, t):
        n = self.spec.dimension
        sol = self.sol_pos if t >= 0 else self.sol_neg
        if sol is None:
            raise ChartDomainError(f"trajectory not integrated for t={t}")
        y = sol(t)
        return y[:n], y[n:2 * n], y[2 * n:].reshape(n - 1, n)

    def transport(self, w, t_from, t_to):
        if t_from == t_to:
            return np.asarray(w, dtype=float)
        spec = self.spec

        def rhs(t, wv):
            x, xd, _ = self.eval(t)
            gam = christoffel_at(spec, x)
            return -np.einsum("kij,i,j->k", gam, xd, wv)

        sol = solve_ivp(rhs, (t_from, t_to), np.asarray(w, dtype=float),
                        method="DOP853", rtol=1e-12, atol=1e-14,
                        dense_output=False)
        if not sol.success:
            raise IntegrationError("parallel transport failed", time=sol.t[-1])
        return sol.y[:, -1]


def _augmented_rhs(spec):
    n = spec.dimension

    def rhs(t, y):
        x = y[:n]
        xd = y[n:2 * n]
        fr = y[2 * n:].reshape(n - 1, n)
        gam = christoffel_at(spec, x)
        xdd = -np.einsum("kij,i,j->k", gam, xd, xd)
        frd = -np.einsum("kij,i,aj->ak", gam, xd, fr)
        return np.concatenate([xd, xdd, frd.ravel()])

    return rhs


def integrate_geodesic(spec: ManifoldSpec, v: TangentVector,
                       t_span: Tuple[float, float], tol: float = DEFAULT_TOL,
                       frame0: Optional[Array] = None) -> GeodesicTrajectory:
    """Adaptive integration of the geodesic + frame-transport equations.

    ``t_span = (t_lo, t_hi)`` with ``t_lo <= 0 <= t_hi``; the trajectory is
    anchored at ``c(0) = v.base``.  If the curve reaches the chart boundary
    the result is truncated and flagged, never extrapolated.
    """
    if not (1e-12 <= tol <= 1e-4):
        raise ValueError(f"tol must be in [1e-12, 1e-4], got {tol}")
    t_lo, t_hi = float(t_span[0]), float(t_span[1])
    if t_lo > 0 or t_hi < 0:
        raise ValueError("t_span must contain 0")
    if not spec.is_unit(v):
        raise ValueError("integrate_geodesic requires a unit tangent vector")
    if frame0 is None:
        frame0 = perpendicular_frame(spec, v)
    frame0 = np.asarray(frame0, dtype=float)

    rhs = _augmented_rhs(spec)
    y0 = np.concatenate([v.base, v.components, frame0.ravel()])

    events = None
    if spec.chart_margin is not None:
        def chart_event(t, y):
            return spec.chart_margin(y[:spec.dimension]) - ODE_CHART_FLOOR
        chart_event.terminal = True
        events = [chart_event]

    def run(direction_span):
        if direction_span[0] == direction_span[1]:
            return None, direction_span[1], False
        sol = solve_ivp(rhs, direction_span, y0, method="DOP853",
                        rtol=tol, atol=tol * 1e-2, dense_output=True,
                        events=events)
        if sol.status == -1:
            raise IntegrationError(
                f"geodesic integration broke down at t={sol.t[-1]:.6g}: {sol.message}",
                time=float(sol.t[-1]))
        truncated = sol.status == 1
        return sol.sol, float(sol.t[-1]), truncated

    sol_pos, t_max, trunc_pos = run((0.0, t_hi))
    sol_neg, t_min, trunc_neg = run((0.0, t_lo))

    nodes = []
    if sol_neg is not None:
        nodes.extend(np.linspace(t_min, 0.0, 33)[:-1])
    nodes.append(0.0)
    if sol_pos is not None:
        nodes.extend(np.linspace(0.0, t_max, 33)[1:])

    backend = _OdeBackend(spec, sol_pos, sol_neg)
    if sol_pos is None and sol_neg is None:
        # degenerate zero-length request: wrap constants
        backend = _CfBackend(_CfPoint(v.base), frame0, spec.metric(v.base))
    return GeodesicTrajectory(spec, v, frame0, backend, t_min, t_max,
                              trunc_neg, trunc_pos, tol, np.array(nodes))


def make_trajectory(spec: ManifoldSpec, v: TangentVector,
                    t_span: Tuple[float, float], tol: float = DEFAULT_TOL,
                    frame0: Optional[Array] = None,
                    backend: str = "auto") -> GeodesicTrajectory:
    """Trajectory via closed forms when the model admits them, else the ODE.

    ``backend`` may be ``'auto'``, ``'closed-form'`` or ``'ode'``.
    """
    use_cf = closed_form_available(spec) if backend == "auto" else backend == "closed-form"
    if not use_cf:
        return integrate_geodesic(spec, v, t_span, tol=tol, frame0=frame0)

    if not spec.is_unit(v):
        raise ValueError("make_trajectory requires a unit tangent vector")
    if frame0 is None:
        frame0 = perpendicular_frame(spec, v)
    frame0 = np.asarray(frame0, dtype=float)
    geo = _make_cf(spec, v.base, v.components)
    t_lo, t_hi = float(t_span[0]), float(t_span[1])
    lim = geo.t_limit
    t_min, trunc_neg = (t_lo, False) if t_lo >= -lim else (-lim, True)
    t_max, trunc_pos = (t_hi, False) if t_hi <= lim else (lim, True)
    nodes = np.linspace(t_min, t_max, 65)
    backend_obj = _CfBackend(geo, frame0, spec.metric(v.base))
    return GeodesicTrajectory(spec, v, frame0, backend_obj, t_min, t_max,
                              trunc_neg, trunc_pos, tol, nodes)


def flow(spec: ManifoldSpec, v: TangentVector, t: float,
         tol: float = DEFAULT_TOL) -> TangentVector:
    """The geodesic flow phi^t(v)."""
    if closed_form_available(spec):
        return closed_form_flow(spec, v, t)
    span = (min(t, 0.0), max(t, 0.0))
    traj = integrate_geodesic(spec, v, span, tol=tol)
    return traj.tangent(t)


# --------------------------------------------------------------------------
# parallel transport, distance, connecting geodesics
# --------------------------------------------------------------------------

def parallel_transport(traj: GeodesicTrajectory, w: Array,
                       t_from: float, t_to: float) -> Array:
    """Solve nabla_{c'} W = 0 along the trajectory from t_from to t_to."""
    return traj.transport(np.asarray(w, dtype=float), t_from, t_to)


def _shoot(spec, p, u, tol):
    """Chart point of exp_p(u) via the geodesic ODE over unit time."""
    n = spec.dimension

    def rhs(t, y):
        x, xd = y[:n], y[n:]
        gam = christoffel_at(spec, x)
        return np.concatenate([xd, -np.einsum("kij,i,j->k", gam, xd, xd)])

    events = None
    if spec.chart_margin is not None:
        def chart_event(t, y):
            return spec.chart_margin(y[:n]) - ODE_CHART_FLOOR
        chart_event.terminal = True
        events = [chart_event]
    sol = solve_ivp(rhs, (0.0, 1.0), np.concatenate([p, u]), method="DOP853",
                    rtol=min(tol, 1e-10), atol=min(tol, 1e-10) * 1e-2,
                    events=events)
    if sol.status != 0:
        raise ChartDomainError("shooting geodesic left the chart domain")
    return sol.y[:n, -1]


def geodesic_between(spec: ManifoldSpec, p: Array, q: Array,
                     tol: float = 1e-10, max_iter: int = 50) -> TangentVector:
    """Initial unit velocity of the geodesic from p to q (damped Newton shooting).

    The Euclidean-chart chord seeds the iteration; the returned vector ``v``
    satisfies ``c_v(d(p,q)) = q`` within ``tol`` in chart coordinates.
    """
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if np.allclose(p, q, atol=1e-15):
        raise ValueError("geodesic_between requires distinct endpoints")
    if closed_form_available(spec) and spec.model_tag == "euclidean":
        return spec.unit_vector(p, q - p)

    u = q - p
    res = _shoot(spec, p, u, tol) - q
    best = np.linalg.norm(res)
    n = spec.dimension
    for _ in range(max_iter):
        if best <= tol:
            return spec.unit_vector(p, u)
        jac = np.empty((n, n))
        h = max(1e-7, 1e-7 * np.linalg.norm(u))
        for j in range(n):
            du = np.zeros(n)
            du[j] = h
            jac[:, j] = (_shoot(spec, p, u + du, tol) - _shoot(spec, p, u - du, tol)) / (2 * h)
        if np.linalg.cond(jac) > 1e12:
            raise ConjugatePointError(
                "shooting Jacobian is near-singular (conjugate point between endpoints?)")
        step = np.linalg.solve(jac, -res)
        lam = 1.0
        while lam >= 1.0 / 64.0:
            cand = u + lam * step
            try:
                r_new = _shoot(spec, p, cand, tol) - q
            except ChartDomainError:
                lam *= 0.5
                continue
            if np.linalg.norm(r_new) < best:
                u, res, best = cand, r_new, np.linalg.norm(r_new)
                break
            lam *= 0.5
        else:
            break
    if best <= tol:
        return spec.unit_vector(p, u)
    raise ConvergenceError(
        f"shooting did not reach tolerance {tol:g}; best residual {best:.3e}",
        last=u, residual=float(best))


def distance(spec: ManifoldSpec, p: Array, q: Array, tol: float = 1e-10) -> float:
    """Geodesic distance: closed form on models, shooting length otherwise.

    The shooting path evaluates the lexicographically smaller endpoint first,
    which makes d(p, q) == d(q, p) exact by construction.
    """
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if closed_form_available(spec):
        return closed_form_distance(spec, p, q)
    if np.allclose(p, q, atol=1e-15):
        return 0.0
    a, b = (p, q) if tuple(p) <= tuple(q) else (q, p)
    return _shooting_length(spec, a, b, tol)


def _shooting_length(spec, p, q, tol):
    u = q - p
    res = _shoot(spec, p, u, tol) - q
    best = np.linalg.norm(res)
    n = spec.dimension
    for _ in range(50):
        if best <= tol:
            break
        jac = np.empty((n, n))
        h = max(1e-7, 1e-7 * np.linalg.norm(u))
        for j in range(n):
            du = np.zeros(n)
            du[j] = h
            jac[:, j] = (_shoot(spec, p, u + du, tol) - _shoot(spec, p, u - du, tol)) / (2 * h)
        step = np.linalg.solve(jac, -res)
        lam = 1.0
        while lam >= 1.0 / 64.0:
            cand = u + lam * step
            try:
                r_new = _shoot(spec, p, cand, tol) - q
            except ChartDomainError:
                lam *= 0.5
                continue
            if np.linalg.norm(r_new) < best:
                u, res, best = cand, r_new, np.linalg.norm(r_new)
                break
            lam *= 0.5
        else:
            break
    if best > tol:
        raise ConvergenceError(
            f"distance shooting stalled; best residual {best:.3e}",
            last=u, residual=float(best))
    return spec.norm(p, u)
