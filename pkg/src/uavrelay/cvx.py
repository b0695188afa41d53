"""Small dense log-barrier solver for the smooth convex programs built by `sca`.

A program maximizes ``c @ x`` subject to box bounds and rows of the form

    A[i] @ x - b[i] + sum_j coef_j * atom_j(x) <= 0

where every atom is convex on its domain and ``coef_j >= 0``. Atoms are stored
in vectorized groups (one group = many instances of one atom kind) so that a
Newton step costs a handful of numpy calls regardless of the number of links.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from scipy.optimize import nnls

log = logging.getLogger(__name__)

LN2 = math.log(2.0)
DELTA = 1e-9  # positivity floor for perspective denominators and angle indicators


# ---------------------------------------------------------------------------
# atoms


class Atom:
    """A vectorized group of convex scalar functions of a few variables each.

    ``var`` is an (N, arity) integer array of variable indices. Subclasses
    implement ``value(xs)`` and ``derivs(xs)`` on the gathered (N, arity) block.
    """

    var: np.ndarray

    def __len__(self):
        return len(self.var)

    def value(self, xs: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def derivs(self, xs: np.ndarray):
        """Return (value (N,), grad (N, a), hess (N, a, a))."""
        raise NotImplementedError

    def in_domain(self, xs: np.ndarray) -> np.ndarray:
        return np.ones(len(xs), dtype=bool)


class NegPerspectiveLog(Atom):
    """-x * log2(1 + gamma * y / x) on x > 0, y >= 0 (negated concave rate)."""

    def __init__(self, var, gamma):
        self.var = np.asarray(var, dtype=int).reshape(-1, 2)
        self.gamma = np.broadcast_to(np.asarray(gamma, dtype=float), (len(self.var),)).copy()

    def in_domain(self, xs):
        return (xs[:, 0] > 0) & (xs[:, 1] >= 0)

    def value(self, xs):
        x, y = xs[:, 0], xs[:, 1]
        return -x * np.log1p(self.gamma * y / x) / LN2

    def derivs(self, xs):
        x, y, g = xs[:, 0], xs[:, 1], self.gamma
        u = y / x
        s = g * u
        l1 = np.log1p(s)
        val = -x * l1 / LN2
        grad = np.empty((len(x), 2))
        grad[:, 0] = -(l1 - s / (1.0 + s)) / LN2
        grad[:, 1] = -g / (1.0 + s) / LN2
        w = g * g / ((1.0 + s) ** 2 * x * LN2)
        hess = np.empty((len(x), 2, 2))
        hess[:, 0, 0] = w * u * u
        hess[:, 0, 1] = hess[:, 1, 0] = -w * u
        hess[:, 1, 1] = w
        return val, grad, hess


class ExpAffine(Atom):
    """exp(c + w @ x)."""

    def __init__(self, var, w, c):
        self.var = np.asarray(var, dtype=int)
        if self.var.ndim == 1:
            self.var = self.var[:, None]
        n, k = self.var.shape
        self.w = np.broadcast_to(np.asarray(w, dtype=float), (n, k)).copy()
        self.c = np.broadcast_to(np.asarray(c, dtype=float), (n,)).copy()

    def value(self, xs):
        return np.exp(self.c + np.sum(self.w * xs, axis=1))

    def derivs(self, xs):
        e = self.value(xs)
        grad = e[:, None] * self.w
        hess = e[:, None, None] * self.w[:, :, None] * self.w[:, None, :]
        return e, grad, hess


class PerspectiveExp2(Atom):
    """x * (2^(y/x) - 1) on x > 0: power needed to carry rate y on bandwidth x."""

    def __init__(self, var):
        self.var = np.asarray(var, dtype=int).reshape(-1, 2)

    def in_domain(self, xs):
        return xs[:, 0] > 0

    def value(self, xs):
        x, y = xs[:, 0], xs[:, 1]
        with np.errstate(over="ignore"):
            return x * np.expm1(LN2 * y / x)

    def derivs(self, xs):
        x, y = xs[:, 0], xs[:, 1]
        u = y / x
        with np.errstate(over="ignore", invalid="ignore"):
            e = np.exp(LN2 * u)
            val = x * np.expm1(LN2 * u)
            grad = np.empty((len(x), 2))
            grad[:, 0] = np.expm1(LN2 * u) - LN2 * u * e
            grad[:, 1] = LN2 * e
            w = LN2 * LN2 * e / x
        hess = np.empty((len(x), 2, 2))
        hess[:, 0, 0] = w * u * u
        hess[:, 0, 1] = hess[:, 1, 0] = -w * u
        hess[:, 1, 1] = w
        return val, grad, hess


class _AffineVector(Atom):
    """Helper for atoms of r = W @ x + u with W of shape (N, p, k)."""

    def __init__(self, var, W, u, c=0.0):
        self.var = np.asarray(var, dtype=int)
        if self.var.ndim == 1:
            self.var = self.var[:, None]
        n, k = self.var.shape
        W = np.asarray(W, dtype=float)
        if W.ndim == 2:
            W = np.broadcast_to(W, (n,) + W.shape)
        self.W = np.array(W)
        p = self.W.shape[1]
        self.u = np.broadcast_to(np.asarray(u, dtype=float), (n, p)).copy()
        self.c = np.broadcast_to(np.asarray(c, dtype=float), (n,)).copy()
        if np.any(self.c < 0):
            raise ValueError("constant offset must be non-negative")

    def residual(self, xs):
        return np.einsum("npk,nk->np", self.W, xs) + self.u


class SquaredNorm(_AffineVector):
    """c + |W x + u|^2."""

    def value(self, xs):
        r = self.residual(xs)
        return self.c + np.sum(r * r, axis=1)

    def derivs(self, xs):
        r = self.residual(xs)
        val = self.c + np.sum(r * r, axis=1)
        grad = 2.0 * np.einsum("npk,np->nk", self.W, r)
        hess = 2.0 * np.einsum("npk,npl->nkl", self.W, self.W)
        return val, grad, hess


class NormSqrt(_AffineVector):
    """sqrt(c + |W x + u|^2) with c >= 0."""

    def value(self, xs):
        r = self.residual(xs)
        return np.sqrt(self.c + np.sum(r * r, axis=1))

    def derivs(self, xs):
        r = self.residual(xs)
        val = np.sqrt(self.c + np.sum(r * r, axis=1))
        val_safe = np.maximum(val, 1e-300)
        g_r = r / val_safe[:, None]
        grad = np.einsum("npk,np->nk", self.W, g_r)
        # d2/dr2 sqrt(c+|r|^2) = (I - g g^T)/val
        eye = np.eye(r.shape[1])[None]
        h_r = (eye - g_r[:, :, None] * g_r[:, None, :]) / val_safe[:, None, None]
        hess = np.einsum("npk,npq,nql->nkl", self.W, h_r, self.W)
        return val, grad, hess


class QuadOverLin(Atom):
    """(w @ x_num + u)^2 / y, with y the last variable of each row (y > 0)."""

    def __init__(self, var, w, u):
        self.var = np.asarray(var, dtype=int)
        if self.var.ndim == 1:
            self.var = self.var[:, None]
        n, a = self.var.shape
        self.w = np.broadcast_to(np.asarray(w, dtype=float), (n, a - 1)).copy()
        self.u = np.broadcast_to(np.asarray(u, dtype=float), (n,)).copy()

    def in_domain(self, xs):
        return xs[:, -1] > 0

    def value(self, xs):
        num = np.sum(self.w * xs[:, :-1], axis=1) + self.u
        return num * num / xs[:, -1]

    def derivs(self, xs):
        y = xs[:, -1]
        num = np.sum(self.w * xs[:, :-1], axis=1) + self.u
        val = num * num / y
        # gradient (2 num w / y, -num^2 / y^2); Hessian (2 / y) v v^T with v = (w, -num / y)
        v = np.concatenate([self.w, -(num / y)[:, None]], axis=1)
        grad = np.concatenate([2.0 * num[:, None] * self.w / y[:, None], -(num * num / (y * y))[:, None]], axis=1)
        hess = (2.0 / y)[:, None, None] * v[:, :, None] * v[:, None, :]
        return val, grad, hess


# ---------------------------------------------------------------------------
# program


@dataclass
class _AtomTerm:
    atom: Atom
    rows: np.ndarray
    coef: np.ndarray


class ConvexProgram:
    """Maximize c @ x subject to box bounds, convex rows and affine equalities."""

    def __init__(self, n: int, lb=None, ub=None):
        self.n = int(n)
        self.lb = np.full(self.n, -np.inf) if lb is None else np.asarray(lb, dtype=float).copy()
        self.ub = np.full(self.n, np.inf) if ub is None else np.asarray(ub, dtype=float).copy()
        self.c = np.zeros(self.n)
        self._rhs: list[float] = []
        self._lin_rows: list[np.ndarray] = []
        self._lin_cols: list[np.ndarray] = []
        self._lin_vals: list[np.ndarray] = []
        self.terms: list[_AtomTerm] = []
        self._eq: list[tuple[np.ndarray, np.ndarray, float]] = []
        self._A = None

    # building ------------------------------------------------------------
    @property
    def m(self) -> int:
        return len(self._rhs)

    def new_rows(self, count: int, rhs=0.0) -> np.ndarray:
        """Allocate ``count`` rows ``(...) <= rhs``; returns their indices."""
        start = len(self._rhs)
        self._rhs.extend(np.broadcast_to(np.asarray(rhs, dtype=float), (count,)).tolist())
        self._A = None
        return np.arange(start, start + count)

    def add_linear(self, rows, cols, vals) -> None:
        rows, cols, vals = np.broadcast_arrays(np.asarray(rows), np.asarray(cols), np.asarray(vals, dtype=float))
        self._lin_rows.append(rows.ravel().astype(int))
        self._lin_cols.append(cols.ravel().astype(int))
        self._lin_vals.append(vals.ravel())
        self._A = None

    def add_atom(self, atom: Atom, rows, coef=1.0) -> None:
        rows = np.broadcast_to(np.asarray(rows, dtype=int), (len(atom),)).copy()
        coef = np.broadcast_to(np.asarray(coef, dtype=float), (len(atom),)).copy()
        if np.any(coef < 0):
            raise ValueError("atom coefficients must be non-negative to keep rows convex")
        keep = coef > 0
        if not keep.all():
            atom = _subset(atom, keep)
            rows, coef = rows[keep], coef[keep]
        if len(rows):
            self.terms.append(_AtomTerm(atom, rows, coef))

    def add_equality(self, cols, vals, rhs: float) -> None:
        self._eq.append((np.asarray(cols, dtype=int), np.asarray(vals, dtype=float), float(rhs)))

    def maximize(self, cols, vals=1.0) -> None:
        cols, vals = np.broadcast_arrays(np.asarray(cols), np.asarray(vals, dtype=float))
        self.c[:] = 0.0
        np.add.at(self.c, cols.astype(int), vals)

    # compiled views --------------------------------------------------------
    @property
    def A(self) -> np.ndarray:
        if self._A is None:
            A = np.zeros((self.m, self.n))
            if self._lin_rows:
                np.add.at(A, (np.concatenate(self._lin_rows), np.concatenate(self._lin_cols)),
                          np.concatenate(self._lin_vals))
            self._A = A
        return self._A

    @property
    def b(self) -> np.ndarray:
        return np.asarray(self._rhs, dtype=float)

    @property
    def E(self) -> tuple[np.ndarray, np.ndarray]:
        E = np.zeros((len(self._eq), self.n))
        e = np.zeros(len(self._eq))
        for i, (cols, vals, rhs) in enumerate(self._eq):
            np.add.at(E[i], cols, vals)
            e[i] = rhs
        return E, e

    # evaluation ------------------------------------------------------------
    def in_domain(self, x) -> bool:
        for term in self.terms:
            if not np.all(term.atom.in_domain(x[term.atom.var])):
                return False
        return True

    def row_values(self, x) -> np.ndarray:
        f = self.A @ x - self.b
        for term in self.terms:
            f += np.bincount(term.rows, term.coef * term.atom.value(x[term.atom.var]), minlength=self.m)
        return f

    def row_derivs(self, x, weights=None):
        """Row values, Jacobian, and (if ``weights``) sum_i weights_i * hess f_i."""
        m, n = self.m, self.n
        f = self.A @ x - self.b
        J = self.A.copy()
        H = np.zeros(n * n) if weights is not None else None
        for term in self.terms:
            atom = term.atom
            val, grad, hess = atom.derivs(x[atom.var])
            f += np.bincount(term.rows, term.coef * val, minlength=m)
            flat = (term.rows[:, None] * n + atom.var).ravel()
            J += np.bincount(flat, (term.coef[:, None] * grad).ravel(), minlength=m * n).reshape(m, n)
            if weights is not None:
                wt = (term.coef * weights[term.rows])[:, None, None] * hess
                idx = (atom.var[:, :, None] * n + atom.var[:, None, :]).reshape(-1)
                H += np.bincount(idx, wt.reshape(-1), minlength=n * n)
        if H is not None:
            H = H.reshape(n, n)
        return f, J, H


def _subset(atom: Atom, keep: np.ndarray) -> Atom:
    import copy

    out = copy.copy(atom)
    for name, val in vars(atom).items():
        if isinstance(val, np.ndarray) and len(val) == len(keep):
            setattr(out, name, val[keep])
    return out


# ---------------------------------------------------------------------------
# solver


@dataclass
class Solution:
    x: np.ndarray
    objective: float
    feasibility: float
    stationarity: float
    status: str  # "optimal" | "max-iters" | "infeasible"
    duals: np.ndarray = field(default=None, repr=False)
    newton_steps: int = 0

    @property
    def ok(self) -> bool:
        return self.status == "optimal"


@dataclass
class SolverOptions:
    t0: float = 1.0
    mu: float = 10.0
    gap_tol: float = 1e-8
    newton_tol: float = 1e-10
    newton_tol_final: float = 1e-14
    # centering also stops once the objective-scale error lam2 / (2 t) is at round-off
    newton_rel_tol: float = 1e-15
    max_newton: int = 200
    max_total_newton: int = 3000
    tol_feas: float = 1e-7
    tol_opt: float = 1e-6


def _box_margin(lb, ub, x):
    """Strictly interior copy of x with respect to the box."""
    x = np.array(x, dtype=float)
    width = ub - lb
    pad = np.where(np.isfinite(width), np.minimum(1e-6 * np.maximum(1.0, np.abs(width)), 0.25 * width),
                   1e-6 * np.maximum(1.0, np.abs(np.where(np.isfinite(lb), lb, np.where(np.isfinite(ub), ub, 0.0)))))
    lo = np.where(np.isfinite(lb), lb + pad, -np.inf)
    hi = np.where(np.isfinite(ub), ub - pad, np.inf)
    return np.clip(x, lo, hi)


class _Hessian:
    """Newton matrix ``U^T U + B``: U are the weighted row gradients, B holds the
    atom curvature plus the box terms, either as dense (n, n) or as stacked
    diagonal blocks (one array per block size)."""

    def __init__(self, U, dense=None, blocks=None, comps=None):
        self.U = U
        self.dense_B = dense
        self.blocks = blocks
        self.comps = comps

    def dense(self) -> np.ndarray:
        H = self.U.T @ self.U
        if self.dense_B is not None:
            return H + self.dense_B
        for comp, blk in zip(self.comps, self.blocks):
            H[comp[:, :, None], comp[:, None, :]] += blk
        return H


class _Barrier:
    """Centering machinery for one program (optionally with an extra Phase-I slack)."""

    def __init__(self, prog: ConvexProgram, c: np.ndarray, slack: bool):
        self.prog = prog
        self.slack = slack
        self.c = c
        self.lb, self.ub = prog.lb, prog.ub
        if slack:
            self.lb = np.append(self.lb, -np.inf)
            self.ub = np.append(self.ub, np.inf)
        self.has_lb = np.isfinite(self.lb)
        self.has_ub = np.isfinite(self.ub)
        self.lb_i = np.flatnonzero(self.has_lb)
        self.ub_i = np.flatnonzero(self.has_ub)
        E, e = prog.E
        if slack:
            E = np.hstack([E, np.zeros((len(e), 1))])
        self.E, self.e = E, e
        self.null_basis = scipy.linalg.null_space(E) if len(e) else None
        self.A, self.b = prog.A, prog.b
        self.m_total = prog.m + int(self.has_lb.sum() + self.has_ub.sum())
        nx = len(self.c)
        self.blocks = _atom_blocks(prog, nx) if prog.m < nx and not len(e) else None
        self.use_blocks = True
        n, m = prog.n, prog.m
        # scatter indices of every term into J (m x n) and into the curvature store
        self._jidx = [(t.rows[:, None] * n + t.atom.var).ravel() for t in prog.terms]
        if self.blocks is None:
            self._hsize = nx * nx
            self._hidx = [(t.atom.var[:, :, None] * nx + t.atom.var[:, None, :]).ravel() for t in prog.terms]
            self._diag = np.arange(nx) * (nx + 1)
        else:
            base = np.zeros(nx, dtype=int)
            pos = np.zeros(nx, dtype=int)
            size = np.zeros(nx, dtype=int)
            self._offsets = []
            off = 0
            for comp in self.blocks:
                cnt, sz = comp.shape
                self._offsets.append((off, cnt, sz))
                base[comp] = off + sz * sz * np.arange(cnt)[:, None]
                pos[comp] = np.arange(sz)[None, :]
                size[comp] = sz
                off += cnt * sz * sz
            self._hsize = off
            self._hidx = []
            for t in prog.terms:
                v = t.atom.var
                self._hidx.append((base[v][:, :, None] + pos[v][:, :, None] * size[v][:, :, None]
                                   + pos[v][:, None, :]).ravel())
            self._diag = base + pos * size + pos

    def rows(self, x):
        xx = x[:-1] if self.slack else x
        prog = self.prog
        f = self.A @ xx - self.b
        for term in prog.terms:
            f += np.bincount(term.rows, term.coef * term.atom.value(xx[term.atom.var]), minlength=prog.m)
        if self.slack:
            f -= x[-1]
        return f

    def strictly_feasible(self, x) -> bool:
        if not self._domain_ok(x):
            return False
        return bool(np.all(self.rows(x) < 0))

    def phi(self, x, t):
        f = self.rows(x)
        if np.any(f >= 0):
            return np.inf
        val = -t * (self.c @ x) - np.sum(np.log(-f))
        val -= np.sum(np.log(x[self.lb_i] - self.lb[self.lb_i]))
        val -= np.sum(np.log(self.ub[self.ub_i] - x[self.ub_i]))
        return val

    def grad_hess(self, x, t):
        """Row values, Jacobian, barrier gradient and the Newton matrix.

        Returns (f, J, g, H, dl, du) with H a ``_Hessian`` and dl, du the
        reciprocal distances to the lower/upper bounds.
        """
        prog = self.prog
        m, n = prog.m, prog.n
        xx = x[:-1] if self.slack else x
        f = self.A @ xx - self.b
        Jflat = np.zeros(m * n)
        derivs = []
        for term, jidx in zip(prog.terms, self._jidx):
            val, grad, hess = term.atom.derivs(xx[term.atom.var])
            f += np.bincount(term.rows, term.coef * val, minlength=m)
            Jflat += np.bincount(jidx, (term.coef[:, None] * grad).ravel(), minlength=m * n)
            derivs.append(hess)
        J = self.A + Jflat.reshape(m, n)
        if self.slack:
            f = f - x[-1]
            J = np.hstack([J, -np.ones((m, 1))])
        w = 1.0 / (-f)
        curv = np.zeros(self._hsize)
        for term, hidx, hess in zip(prog.terms, self._hidx, derivs):
            curv += np.bincount(hidx, ((term.coef * w[term.rows])[:, None, None] * hess).ravel(),
                                minlength=self._hsize)
        g = -t * self.c + J.T @ w
        dl = np.zeros(len(x))
        du = np.zeros(len(x))
        dl[self.lb_i] = 1.0 / (x[self.lb_i] - self.lb[self.lb_i])
        du[self.ub_i] = 1.0 / (self.ub[self.ub_i] - x[self.ub_i])
        g += du - dl
        curv[self._diag] += dl * dl + du * du
        U = J * w[:, None]
        nx = len(x)
        if self.blocks is None:
            H = _Hessian(U, dense=curv.reshape(nx, nx))
        else:
            blks = [curv[o:o + c * s * s].reshape(c, s, s) for o, c, s in self._offsets]
            H = _Hessian(U, blocks=blks, comps=self.blocks)
        return f, J, g, H, dl, du

    def max_box_step(self, x, dx):
        s = np.inf
        neg = self.has_lb & (dx < 0)
        if np.any(neg):
            s = min(s, np.min((self.lb[neg] - x[neg]) / dx[neg]))
        pos = self.has_ub & (dx > 0)
        if np.any(pos):
            s = min(s, np.min((self.ub[pos] - x[pos]) / dx[pos]))
        return s

    def newton_direction(self, g, H: _Hessian):
        if len(self.e):
            # reduced Newton step in the null space of the equality rows
            Z = self.null_basis
            return Z @ _spd_solve(Z.T @ H.dense() @ Z, -(Z.T @ g))
        if H.blocks is not None and self.use_blocks:
            dx = self._structured_solve(H, -g)
            if dx is not None:
                return dx
            # ill-conditioned: stay dense for the rest of this centering stage
            self.use_blocks = False
        return _spd_solve(H.dense(), -g)

    def _structured_solve(self, H: _Hessian, rhs):
        """Woodbury solve of (U^T U + B) x = rhs with B block diagonal.

        One step of iterative refinement is applied. Returns None when a block
        is not positive definite or the refined residual is still large; the
        caller then falls back to a dense factorization.
        """
        U = H.U
        inv = []
        for blk in H.blocks:
            try:
                np.linalg.cholesky(blk)
            except np.linalg.LinAlgError:
                return None
            inv.append(np.linalg.inv(blk))

        def apply(mats, R):
            out = np.empty_like(R)
            for comp, Bi in zip(H.comps, mats):
                out[comp] = Bi @ R[comp]
            return out

        Z = apply(inv, np.ascontiguousarray(U.T))
        S = np.eye(len(U)) + U @ Z
        try:
            cf = scipy.linalg.cho_factor(S, check_finite=False)
        except (np.linalg.LinAlgError, ValueError):
            return None

        def solve(r):
            y = apply(inv, r[:, None])
            return (y - Z @ scipy.linalg.cho_solve(cf, U @ y, check_finite=False))[:, 0]

        def residual(x):
            return rhs - apply(H.blocks, x[:, None])[:, 0] - U.T @ (U @ x)

        x = solve(rhs)
        x = x + solve(residual(x))
        if not np.all(np.isfinite(x)) or np.linalg.norm(residual(x)) > 1e-6 * np.linalg.norm(rhs):
            return None
        return x

    def center(self, x, t, opts: SolverOptions, budget: int, stop=None, tol=None):
        """Damped Newton on t*(-c@x) + barrier. Returns (x, steps, converged, stopped)."""
        tol = opts.newton_tol if tol is None else tol
        steps = 0
        prev_lam2 = None
        self.use_blocks = True
        phi_x = self.phi(x, t)
        while steps < min(opts.max_newton, budget):
            _, _, g, H, _, _ = self.grad_hess(x, t)
            dx = self.newton_direction(g, H)
            lam2 = float(-g @ dx)
            floor = t * opts.newton_rel_tol * max(1.0, abs(float(self.c @ x)))
            if lam2 / 2.0 <= max(tol, floor):
                return x, steps, True, False
            if lam2 / 2.0 <= opts.newton_tol and prev_lam2 is not None and lam2 > 0.25 * prev_lam2:
                # tightened tolerance reached the round-off floor
                return x, steps, True, False
            prev_lam2 = lam2
            s = min(1.0, 0.99 * self.max_box_step(x, dx))
            slope = g @ dx
            while True:
                x_new = x + s * dx
                phi_new = self.phi(x_new, t) if self._domain_ok(x_new) else np.inf
                if phi_new <= phi_x + 0.25 * s * slope:
                    break
                s *= 0.5
                if s < 1e-20:
                    return x, steps, False, False
            x, phi_x = x_new, phi_new
            steps += 1
            if stop is not None and stop(x):
                return x, steps, False, True
        return x, steps, False, False

    def _domain_ok(self, x):
        if np.any(x[self.lb_i] <= self.lb[self.lb_i]) or np.any(x[self.ub_i] >= self.ub[self.ub_i]):
            return False
        return self.prog.in_domain(x[:-1] if self.slack else x)


def _atom_blocks(prog: ConvexProgram, n: int, max_size: int = 8):
    """Group variables into connected components of the atom coupling graph.

    Returns a list of (count, size) index arrays, one per component size, or
    None when some component is too large for block inversion to pay off.
    """
    parent = np.arange(n)

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for term in prog.terms:
        for row in term.atom.var:
            r0 = find(row[0])
            for j in row[1:]:
                rj = find(j)
                if rj != r0:
                    parent[rj] = r0
    roots = np.array([find(i) for i in range(n)])
    groups: dict[int, list[int]] = {}
    for i, r in enumerate(roots):
        groups.setdefault(int(r), []).append(i)
    by_size: dict[int, list[list[int]]] = {}
    for members in groups.values():
        if len(members) > max_size:
            return None
        by_size.setdefault(len(members), []).append(members)
    return [np.array(v, dtype=int) for _, v in sorted(by_size.items())]


def _spd_solve(H, rhs):
    try:
        cf = scipy.linalg.cho_factor(H, check_finite=False)
        return scipy.linalg.cho_solve(cf, rhs, check_finite=False)
    except (np.linalg.LinAlgError, ValueError):
        reg = 1e-12 * max(1.0, float(np.max(np.abs(np.diag(H)))))
        return np.linalg.lstsq(H + reg * np.eye(len(H)), rhs, rcond=None)[0]


def _phase_one(prog: ConvexProgram, x0: np.ndarray, opts: SolverOptions):
    """Find a strictly feasible point by minimizing the max row violation."""
    x0 = _box_margin(prog.lb, prog.ub, x0)
    E, e = prog.E
    if len(e):
        # least-norm correction onto the equality set, then back into the box
        x0 = x0 + np.linalg.lstsq(E, e - E @ x0, rcond=None)[0]
        x0 = _box_margin(prog.lb, prog.ub, x0)
    if not prog.in_domain(x0):
        raise ValueError("warm start outside atom domains after box clipping")
    f = prog.row_values(x0)
    fmax = float(np.max(f)) if len(f) else -1.0
    if fmax < 0:
        return x0, 0, True
    pad = 1e-2 * (1.0 + abs(fmax))
    c = np.zeros(prog.n + 1)
    c[-1] = -1.0
    bar = _Barrier(prog, c, slack=True)
    x = np.append(x0, fmax + pad)
    t = 1.0 / pad
    steps = 0
    while steps < opts.max_total_newton:
        x, k, _, stopped = bar.center(x, t, opts, opts.max_total_newton - steps, stop=lambda z: z[-1] < 0)
        steps += k
        if stopped or x[-1] < 0:
            xs = x[:-1]
            if np.all(prog.row_values(xs) < 0):
                return xs, steps, True
        if bar.m_total / t < opts.gap_tol * 1e-2:
            break
        t *= opts.mu
    return x[:-1], steps, False


def _residuals(bar: _Barrier, x, t):
    """Feasibility and stationarity of the barrier point.

    Multipliers are the barrier duals corrected by one Newton step,
    lam_i = (w_i + w_i^2 grad f_i @ dx) / t with w_i = 1/(-f_i), clipped at 0,
    which removes the first-order centering error. Bound multipliers of bounds
    within 1/sqrt(t) of activity are then refit in closed form (each enters one
    coordinate only). The plain barrier duals are tried as well and the
    smaller of the two residuals is reported; both are valid certificates.
    """
    prog = bar.prog
    f, J, g, H, dl, du = bar.grad_hess(x, t)
    dx = bar.newton_direction(g, H)
    w = 1.0 / (-f)
    thr = max(1e-6, 1.0 / math.sqrt(t))
    lo = bar.has_lb & (x - bar.lb <= thr * np.maximum(1.0, np.abs(np.where(bar.has_lb, bar.lb, 0.0))))
    hi = bar.has_ub & (bar.ub - x <= thr * np.maximum(1.0, np.abs(np.where(bar.has_ub, bar.ub, 0.0))))
    scale = max(1.0, float(np.max(np.abs(prog.c))))

    def clamp(r):
        r = np.where(lo & (r < 0), 0.0, r)
        return np.where(hi & (r > 0), 0.0, r)

    def residual(lam, mu_lo, mu_hi):
        # flagged bounds get their multiplier chosen freely, others keep the estimate
        r = prog.c - J.T @ lam + np.where(lo, 0.0, mu_lo) - np.where(hi, 0.0, mu_hi)
        r = clamp(r)
        if len(bar.e):
            nu = np.linalg.lstsq(bar.E.T, r, rcond=None)[0]
            r = clamp(r - bar.E.T @ nu)
        return float(np.linalg.norm(r)) / scale

    lam0 = w / t
    stat0 = residual(lam0, dl / t, du / t)
    lam = np.maximum((w + w * w * (J @ dx)) / t, 0.0)
    stat = residual(lam, np.maximum((dl - dl * dl * dx) / t, 0.0), np.maximum((du + du * du * dx) / t, 0.0))
    if stat0 < stat:
        lam, stat = lam0, stat0
    feas = max(0.0, float(np.max(f)) if len(f) else 0.0)
    if len(bar.e):
        feas = max(feas, float(np.max(np.abs(bar.E @ x - bar.e))))
    return feas, stat, lam


def solve(prog: ConvexProgram, warm_start=None, options: SolverOptions | None = None) -> Solution:
    """Maximize ``prog.c @ x`` by the log-barrier method with damped Newton centering."""
    opts = options or SolverOptions()
    if np.any(prog.lb >= prog.ub):
        raise ValueError("every box must have lb < ub; fix a variable with add_equality instead")
    x0 = np.zeros(prog.n) if warm_start is None else np.asarray(warm_start, dtype=float)
    bar = _Barrier(prog, prog.c, slack=False)
    steps = 0
    if not bar.strictly_feasible(x0):
        x0, steps, ok = _phase_one(prog, x0, opts)
        if not ok:
            f = prog.row_values(x0)
            return Solution(x0, float(prog.c @ x0), float(max(0.0, f.max())), np.inf, "infeasible",
                            newton_steps=steps)
    x, t = x0, opts.t0
    status = "max-iters"
    while steps < opts.max_total_newton:
        last = bar.m_total / t < opts.gap_tol
        x, k, _, _ = bar.center(x, t, opts, opts.max_total_newton - steps,
                                tol=opts.newton_tol_final if last else None)
        steps += k
        if last:
            status = "optimal"
            break
        t *= opts.mu
    feas, stat, lam = _residuals(bar, x, t)
    if status == "optimal" and (feas > opts.tol_feas or stat > opts.tol_opt):
        log.debug("barrier finished with residuals feas=%.2e stat=%.2e", feas, stat)
        status = "max-iters"
    return Solution(x, float(prog.c @ x), feas, stat, status, duals=lam, newton_steps=steps)


def kkt_residual(prog: ConvexProgram, x, tol_active: float = 1e-6) -> tuple[float, float]:
    """(max constraint violation, scaled stationarity residual) at ``x``.

    Multipliers are recovered by non-negative least squares over the rows and
    bounds that are active within ``tol_active``; no solver state is used.
    """
    x = np.asarray(x, dtype=float)
    if not prog.in_domain(x):
        raise ValueError("point outside atom domains")
    f, J, _ = prog.row_derivs(x)
    E, e = prog.E
    viol = [0.0]
    if len(f):
        viol.append(float(np.max(f)))
    viol.append(float(np.max(np.where(np.isfinite(prog.lb), prog.lb - x, -np.inf), initial=-np.inf)))
    viol.append(float(np.max(np.where(np.isfinite(prog.ub), x - prog.ub, -np.inf), initial=-np.inf)))
    if len(e):
        viol.append(float(np.max(np.abs(E @ x - e))))
    feas = max(viol)

    grads = [J[f >= -tol_active]]
    lo_act = np.isfinite(prog.lb) & (x - prog.lb <= tol_active)
    hi_act = np.isfinite(prog.ub) & (prog.ub - x <= tol_active)
    eye = np.eye(prog.n)
    grads += [-eye[lo_act], eye[hi_act]]
    if len(e):
        grads += [E, -E]
    G = np.vstack(grads) if grads else np.zeros((0, prog.n))
    scale = max(1.0, float(np.max(np.abs(prog.c))))
    if len(G) == 0:
        return feas, float(np.linalg.norm(prog.c)) / scale
    _, res = nnls(G.T, prog.c, maxiter=50 * max(G.shape))
    return feas, float(res) / scale
