"""Jacobi tensors, two-point boundary problems, stable/unstable limits, Riccati.

All matrices live in the parallel orthonormal frame of a
:class:`~horolab.geodesics.GeodesicTrajectory`, so adjoints are transposes.
The linear Jacobi equation J'' + R(t) J = 0 is solved once per trajectory for
the fundamental pair

    A:  A(0) = 0,  A'(0) = Id        (geodesic-sphere tensor)
    J1: J1(0) = Id, J1'(0) = 0

and every other solution, including the two-point tensors S_{v,r}, is a
linear recombination of the pair.  In particular

    S_{v,r}'(0) = W(r) = -A(r)^{-1} J1(r),

since S_{v,r} = J1 + A W(r) matches both boundary conditions.

The stable limit S(v) = lim_r W(r) is extracted on an r-doubling schedule
with two acceptance rules: the plain Cauchy criterion of the approximants
(exponentially converging directions) and a Cauchy criterion on their
entrywise Aitken delta-squared extrapolations, which is exact for the
c/r tails contributed by flat directions.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.integrate import solve_ivp

from .errors import (ConjugatePointError, ConvergenceError, IntegrationError,
                     ModelViolationError, RiccatiBlowupError)
from .geodesics import GeodesicTrajectory, make_trajectory

Array = np.ndarray

PAIR_RTOL = 1e-12
PAIR_ATOL = 1e-14
ASYMMETRY_GUARD = 1e-6
SINGULAR_MIN = 1e-8          # sigma_min(A(r)) below this flags a conjugate point
MONOTONE_VIOLATION = 1e-6    # eigenvalue drop that flags a model violation


@dataclass(frozen=True)
class JacobiTensorState:
    """(J, J') at time ``t`` in the trajectory's parallel frame."""

    J: Array
    J_prime: Array
    t: float
    traj: GeodesicTrajectory

    def wronskian_with(self, other: "JacobiTensorState") -> "WronskianSample":
        return wronskian(self, other)


@dataclass(frozen=True)
class WronskianSample:
    """Omega(A, B)(t) = B^T A' - (B')^T A."""

    omega: Array
    t: float


@dataclass(frozen=True)
class StableTensorResult:
    """Limit tensor with convergence metadata.

    ``S`` is the accepted symmetric matrix (S(v), or U(v) when produced by
    :func:`unstable_tensor`); ``residual`` is the Cauchy difference of the
    rule that fired (``method`` is ``'cauchy'`` or ``'accelerated'``).
    """

    S: Array
    r_used: float
    residual: float
    converged: bool
    method: str
    asymmetry: float
    monotone: bool


# --------------------------------------------------------------------------
# fundamental pair with lazy extension
# --------------------------------------------------------------------------

class _FundamentalPair:
    def __init__(self, traj: GeodesicTrajectory, rtol=PAIR_RTOL, atol=PAIR_ATOL):
        self.traj = traj
        self.m = traj.dimension - 1
        self.rtol = rtol
        self.atol = atol
        mm = self.m * self.m
        eye = np.eye(self.m).ravel()
        self._y0 = np.concatenate([np.zeros(mm), eye, eye, np.zeros(mm)])
        self._pos = []   # (t_end, OdeSolution) covering successive [t_start, t_end]
        self._neg = []
        self._pos_ends = []
        self._neg_ends = []
        self._t_pos = 0.0
        self._t_neg = 0.0
        self._y_pos = self._y0.copy()
        self._y_neg = self._y0.copy()

    def _rhs(self, t, y):
        m = self.m
        mm = m * m
        A = y[0:mm].reshape(m, m)
        Ap = y[mm:2 * mm].reshape(m, m)
        J1 = y[2 * mm:3 * mm].reshape(m, m)
        J1p = y[3 * mm:].reshape(m, m)
        R = self.traj.jacobi_matrix(t)
        return np.concatenate([Ap.ravel(), (-R @ A).ravel(),
                               J1p.ravel(), (-R @ J1).ravel()])

    def _extend(self, t):
        traj = self.traj
        if t > 0:
            t = min(t, traj.t_max)
            if t <= self._t_pos:
                return
            sol = solve_ivp(self._rhs, (self._t_pos, t), self._y_pos,
                            method="DOP853", rtol=self.rtol, atol=self.atol,
                            dense_output=True)
            if not sol.success:
                raise IntegrationError(
                    f"Jacobi pair integration failed at t={sol.t[-1]:.6g}",
                    time=float(sol.t[-1]))
            self._pos.append(sol.sol)
            self._pos_ends.append(t)
            self._t_pos = t
            self._y_pos = sol.y[:, -1].copy()
        else:
            t = max(t, traj.t_min)
            if t >= self._t_neg:
                return
            sol = solve_ivp(self._rhs, (self._t_neg, t), self._y_neg,
                            method="DOP853", rtol=self.rtol, atol=self.atol,
                            dense_output=True)
            if not sol.success:
                raise IntegrationError(
                    f"Jacobi pair integration failed at t={sol.t[-1]:.6g}",
                    time=float(sol.t[-1]))
            self._neg.append(sol.sol)
            self._neg_ends.append(t)
            self._t_neg = t
            self._y_neg = sol.y[:, -1].copy()

    def eval(self, t: float):
        m = self.m
        mm = m * m
        if abs(t) < 1e-300:
            y = self._y0
        elif t > 0:
            if t > self._t_pos + 1e-12:
                self._extend(t)
            idx = bisect.bisect_left(self._pos_ends, t - 1e-12)
            idx = min(idx, len(self._pos) - 1)
            y = self._pos[idx](min(t, self._t_pos))
        else:
            if t < self._t_neg - 1e-12:
                self._extend(t)
            ends = [-e for e in self._neg_ends]
            idx = bisect.bisect_left(ends, -t - 1e-12)
            idx = min(idx, len(self._neg) - 1)
            y = self._neg[idx](max(t, self._t_neg))
        return (y[0:mm].reshape(m, m), y[mm:2 * mm].reshape(m, m),
                y[2 * mm:3 * mm].reshape(m, m), y[3 * mm:].reshape(m, m))


def fundamental_pair(traj: GeodesicTrajectory) -> _FundamentalPair:
    pair = traj._memo.get("pair")
    if pair is None:
        pair = _FundamentalPair(traj)
        traj._memo["pair"] = pair
    return pair


# --------------------------------------------------------------------------
# spec operations
# --------------------------------------------------------------------------

def integrate_jacobi(traj: GeodesicTrajectory, J0: Array, J0p: Array,
                     t_target: float) -> JacobiTensorState:
    """Jacobi tensor with data (J0, J0p) at t=0, evaluated at ``t_target``.

    Uses the trajectory's fundamental pair (solved as a first-order system
    with the configured tolerances); by linearity the requested solution is
    J(t) = J1(t) J0 + A(t) J0p.
    """
    if not (traj.t_min - 1e-12 <= t_target <= traj.t_max + 1e-12):
        raise ConvergenceError(
            f"trajectory span [{traj.t_min}, {traj.t_max}] does not cover "
            f"t={t_target}" + (" (chart-truncated)" if traj.truncated_pos
                               or traj.truncated_neg else ""))
    J0 = np.atleast_2d(np.asarray(J0, dtype=float))
    J0p = np.atleast_2d(np.asarray(J0p, dtype=float))
    A, Ap, J1, J1p = fundamental_pair(traj).eval(t_target)
    return JacobiTensorState(J=J1 @ J0 + A @ J0p,
                             J_prime=J1p @ J0 + Ap @ J0p,
                             t=float(t_target), traj=traj)


def jacobi_field(traj: GeodesicTrajectory, w0: Array, w0p: Array, t: float):
    """Single Jacobi field (frame components): returns (J(t), J'(t)) vectors."""
    A, Ap, J1, J1p = fundamental_pair(traj).eval(t)
    w0 = np.asarray(w0, dtype=float)
    w0p = np.asarray(w0p, dtype=float)
    return J1 @ w0 + A @ w0p, J1p @ w0 + Ap @ w0p


def a_tensor(traj: GeodesicTrajectory, t: float) -> JacobiTensorState:
    """The Jacobi tensor with A(0) = 0, A'(0) = Id."""
    m = traj.dimension - 1
    return integrate_jacobi(traj, np.zeros((m, m)), np.eye(m), t)


def _symmetrize(mat: Array, what: str):
    asym = float(np.max(np.abs(mat - mat.T))) if mat.size else 0.0
    if asym > ASYMMETRY_GUARD:
        raise ModelViolationError(
            f"{what}: discarded asymmetry {asym:.3e} exceeds {ASYMMETRY_GUARD:g}")
    return 0.5 * (mat + mat.T), asym


def bvp_stable_approx(traj: GeodesicTrajectory, r: float) -> Array:
    """S_{v,r}'(0): derivative at 0 of the Jacobi tensor with S(0)=Id, S(r)=0."""
    W, _ = _bvp_stable(traj, r)
    return W


def _bvp_stable(traj, r):
    if r <= 0:
        raise ValueError("bvp_stable_approx requires r > 0")
    A, _, J1, _ = fundamental_pair(traj).eval(r)
    sigma = np.linalg.svd(A, compute_uv=False)
    if sigma[-1] < SINGULAR_MIN * min(1.0, r):
        raise ConjugatePointError(
            f"A_v({r}) is near-singular (sigma_min={sigma[-1]:.3e}); "
            f"conjugate point obstructs the boundary-value solve")
    W = -np.linalg.solve(A, J1)
    return _symmetrize(W, f"S_(v,{r})'(0)")


def _reverse_trajectory(traj: GeodesicTrajectory, horizon: float):
    """Trajectory of -v sharing the initial frame (footpoints coincide)."""
    spec = traj.spec
    backend = "closed-form" if traj.constant_jacobi else "ode"
    return make_trajectory(spec, -traj.v0, (0.0, horizon), tol=traj.tol,
                           frame0=traj.frame0, backend=backend)


def bvp_unstable_approx(traj: GeodesicTrajectory, r: float,
                        reverse_traj: Optional[GeodesicTrajectory] = None) -> Array:
    """U_{v,r}'(0) = -S_{-v,r}'(0), frames aligned by sharing basis vectors."""
    if reverse_traj is None:
        reverse_traj = _reverse_trajectory(traj, r)
    return -bvp_stable_approx(reverse_traj, r)


def bvp_unstable_direct(traj: GeodesicTrajectory, r: float) -> Array:
    """Independent backward solve: tensor with U(0)=Id, U(-r)=0, returns U'(0)."""
    if r <= 0:
        raise ValueError("r must be positive")
    A, _, J1, _ = fundamental_pair(traj).eval(-r)
    sigma = np.linalg.svd(A, compute_uv=False)
    if sigma[-1] < SINGULAR_MIN * min(1.0, r):
        raise ConjugatePointError(
            f"A_v({-r}) is near-singular; conjugate point obstructs the solve")
    W, _ = _symmetrize(-np.linalg.solve(A, J1), f"U_(v,{r})'(0)")
    return W


def _aitken(w0, w1, w2):
    d1 = w1 - w0
    d2 = w2 - w1
    den = d2 - d1
    out = w2.copy()
    mask = np.abs(den) > 1e-14 * (1.0 + np.abs(w2))
    out[mask] = w2[mask] - d2[mask] ** 2 / den[mask]
    return out


def _opnorm(mat):
    return float(np.linalg.norm(mat, 2))


def stable_tensor(traj: GeodesicTrajectory, tol: float = 1e-6,
                  r0: float = 2.0, r_max: float = 64.0) -> StableTensorResult:
    """S(v) = lim_{r->inf} S_{v,r}'(0) by r-doubling.

    Acceptance fires on whichever happens first: successive raw approximants
    within ``tol`` in operator norm, or successive Aitken extrapolations
    within ``tol`` (handles the exact c/r tails of flat directions).  A
    non-monotone raw sequence (eigenvalue decrease beyond tolerance) raises
    :class:`ModelViolationError` — on a space without conjugate points the
    approximants increase in r as quadratic forms.
    """
    raws = []
    accel = []
    asym_max = 0.0
    monotone = True
    r = r0
    last_raw_res = np.inf
    while True:
        if r > traj.t_max + 1e-9:
            where = "chart boundary" if traj.truncated_pos else f"r_max={r_max:g}"
            last = raws[-1] if raws else None
            raise ConvergenceError(
                f"stable limit not converged before {where} "
                f"(last residual {last_raw_res:.3e} at r={r / 2:g})",
                last=last, residual=float(last_raw_res))
        W, asym = _bvp_stable(traj, r)
        asym_max = max(asym_max, asym)
        if raws:
            gap = W - raws[-1]
            min_eig = float(np.linalg.eigvalsh(0.5 * (gap + gap.T))[0])
            if min_eig < -MONOTONE_VIOLATION:
                raise ModelViolationError(
                    f"S_(v,r)'(0) decreased by {min_eig:.3e} from r={r / 2:g} "
                    f"to r={r:g}; possible conjugate points")
            monotone = monotone and (min_eig >= -1e-8)
            last_raw_res = _opnorm(gap)
            if last_raw_res <= tol:
                return StableTensorResult(S=W, r_used=float(r),
                                          residual=last_raw_res, converged=True,
                                          method="cauchy", asymmetry=asym_max,
                                          monotone=monotone)
        raws.append(W)
        if len(raws) >= 3:
            accel.append(_aitken(raws[-3], raws[-2], raws[-1]))
            if len(accel) >= 2:
                acc_res = _opnorm(accel[-1] - accel[-2])
                if acc_res <= tol:
                    X, asym = _symmetrize(accel[-1], "accelerated stable limit")
                    return StableTensorResult(S=X, r_used=float(r),
                                              residual=acc_res, converged=True,
                                              method="accelerated",
                                              asymmetry=max(asym_max, asym),
                                              monotone=monotone)
        if r >= min(r_max, traj.t_max) - 1e-9:
            last = raws[-1]
            raise ConvergenceError(
                f"stable limit not converged by r={r:g} "
                f"(raw residual {last_raw_res:.3e})",
                last=last, residual=float(last_raw_res))
        r *= 2.0


def unstable_tensor(traj: GeodesicTrajectory, tol: float = 1e-6,
                    r0: float = 2.0, r_max: float = 64.0,
                    reverse_traj: Optional[GeodesicTrajectory] = None
                    ) -> StableTensorResult:
    """U(v) = -S(-v), computed on the reversed trajectory with shared frame."""
    if reverse_traj is None:
        reverse_traj = _reverse_trajectory(traj, r_max)
    res = stable_tensor(reverse_traj, tol=tol, r0=r0, r_max=r_max)
    return StableTensorResult(S=-res.S, r_used=res.r_used, residual=res.residual,
                              converged=res.converged, method=res.method,
                              asymmetry=res.asymmetry, monotone=res.monotone)


def riccati_propagate(traj: GeodesicTrajectory, S0: Array, t_target: float,
                      rtol: float = 1e-12) -> Array:
    """Integrate S' + S^2 + R(t) = 0 from S(0) = S0 along the trajectory.

    The result at t is expressed in the parallel frame at t, so it compares
    directly with the stable tensor extracted at phi^t(v).  Blow-up (norm
    exceeding 1e8) raises :class:`RiccatiBlowupError` with the time.
    """
    S0 = np.atleast_2d(np.asarray(S0, dtype=float))
    if np.max(np.abs(S0 - S0.T)) > ASYMMETRY_GUARD:
        raise ValueError("riccati_propagate requires a symmetric initial value")
    m = traj.dimension - 1

    def rhs(t, y):
        S = y.reshape(m, m)
        return (-(S @ S) - traj.jacobi_matrix(t)).ravel()

    def blowup(t, y):
        return 1e8 - np.max(np.abs(y))
    blowup.terminal = True

    sol = solve_ivp(rhs, (0.0, t_target), S0.ravel(), method="DOP853",
                    rtol=rtol, atol=1e-14, events=[blowup], dense_output=False)
    if sol.status == 1:
        raise RiccatiBlowupError(
            f"Riccati solution blew up at t={sol.t_events[0][0]:.6g}",
            time=float(sol.t_events[0][0]))
    if not sol.success:
        raise IntegrationError(f"Riccati integration failed: {sol.message}",
                               time=float(sol.t[-1]))
    S = sol.y[:, -1].reshape(m, m)
    return 0.5 * (S + S.T)


def wronskian(state_a: JacobiTensorState, state_b: JacobiTensorState) -> WronskianSample:
    """Omega(A, B)(t) = B^T(t) A'(t) - (B'(t))^T A(t); constant for Jacobi tensors."""
    if state_a.traj is not state_b.traj:
        raise ValueError("Wronskian requires states on the same trajectory")
    if abs(state_a.t - state_b.t) > 1e-12:
        raise ValueError("Wronskian requires states at the same time")
    omega = state_b.J.T @ state_a.J_prime - state_b.J_prime.T @ state_a.J
    return WronskianSample(omega=omega, t=state_a.t)


def stable_solution_state(traj: GeodesicTrajectory, S_of_v: Array,
                          t: float) -> JacobiTensorState:
    """The stable Jacobi tensor S_v(t): data S_v(0)=Id, S_v'(0)=S(v)."""
    m = traj.dimension - 1
    return integrate_jacobi(traj, np.eye(m), S_of_v, t)
