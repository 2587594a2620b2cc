"""Sparse nonlinear least-squares factor graph on mixed manifolds.

Variables live on SO(3), SE(3) or R^n; factors contribute Mahalanobis-weighted
residuals; optimization is Levenberg-Marquardt with retraction-based updates
on each variable's tangent space.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from . import manifold
from .manifold import ManifoldKind


class UnderconstrainedGraphError(RuntimeError):
    """The normal equations are rank deficient (gauge not fixed)."""

    def __init__(self, message: str, suspect_keys: Sequence["VariableKey"] = ()):
        super().__init__(message)
        self.suspect_keys = list(suspect_keys)


@dataclass(frozen=True)
class VariableKey:
    id: int
    kind: ManifoldKind
    timestamp: float = 0.0


class Values:
    """Map from VariableKey to a manifold element of the matching kind."""

    def __init__(self, data: dict | None = None):
        self._data = dict(data) if data else {}

    def set(self, key: VariableKey, element) -> None:
        self._data[key] = element

    def get(self, key: VariableKey):
        try:
            return self._data[key]
        except KeyError:
            raise KeyError(f"no value stored for variable {key}") from None

    def __contains__(self, key: VariableKey) -> bool:
        return key in self._data

    def keys(self):
        return self._data.keys()

    def copy(self) -> "Values":
        return Values(self._data)

    def retracted(self, key: VariableKey, delta: np.ndarray) -> "Values":
        out = self.copy()
        out.set(key, manifold.oplus(key.kind, self.get(key), delta))
        return out

    def __len__(self):
        return len(self._data)


class NoiseModel:
    """Gaussian noise with cached square-root information factor."""

    __slots__ = ("covariance", "sqrt_info")

    def __init__(self, covariance: np.ndarray):
        covariance = np.asarray(covariance, dtype=float)
        if not np.allclose(covariance, covariance.T, atol=1e-12):
            raise ValueError("covariance must be symmetric")
        L = np.linalg.cholesky(covariance)  # raises on non-SPD
        self.covariance = covariance
        # whiten(e) = L^-1 e, so |whiten(e)|^2 = e^T Sigma^-1 e
        self.sqrt_info = np.linalg.inv(L)

    @staticmethod
    def from_sigmas(sigmas) -> "NoiseModel":
        sigmas = np.asarray(sigmas, dtype=float)
        return NoiseModel(np.diag(sigmas ** 2))

    @staticmethod
    def isotropic(dim: int, sigma: float) -> "NoiseModel":
        return NoiseModel(np.eye(dim) * sigma ** 2)

    @property
    def dim(self) -> int:
        return self.covariance.shape[0]

    def whiten(self, e: np.ndarray) -> np.ndarray:
        return self.sqrt_info @ e


@dataclass
class Factor:
    """Residual-plus-Jacobians unit binding 1-3 variable keys.

    residual_fn(values) -> r (dim,)
    jacobian_fn(values) -> tuple of per-key matrices (dim x key.kind.dim)
    """

    keys: tuple[VariableKey, ...]
    residual_fn: Callable[[Values], np.ndarray]
    jacobian_fn: Callable[[Values], tuple[np.ndarray, ...]]
    noise: NoiseModel
    name: str = "factor"
    # optional fused path returning (residual, jacobians) in one evaluation
    combined_fn: Callable[[Values], tuple] | None = None

    @property
    def dim(self) -> int:
        return self.noise.dim


class FactorGraph:
    def __init__(self):
        self.factors: list[Factor] = []
        self.variables: set[VariableKey] = set()

    def add(self, factor: Factor) -> None:
        self.factors.append(factor)
        self.variables.update(factor.keys)

    def extend(self, factors) -> None:
        for f in factors:
            self.add(f)


@dataclass
class SolverSettings:
    max_iterations: int = 100
    rel_cost_tol: float = 1e-9
    dx_tol: float = 1e-10
    init_lambda: float = 1e-4
    lambda_up: float = 10.0
    lambda_down: float = 10.0
    max_lambda: float = 1e12


@dataclass
class SolveReport:
    final_cost: float = 0.0
    iterations: int = 0
    converged: bool = False
    cost_trace: list = field(default_factory=list)


def total_cost(graph: FactorGraph, values: Values) -> float:
    cost = 0.0
    for f in graph.factors:
        w = f.noise.whiten(f.residual_fn(values))
        cost += float(w @ w)
    return cost


def variable_offsets(graph: FactorGraph) -> tuple[dict[VariableKey, int], int]:
    """Tangent-space column offsets in timestamp order."""
    ordered = sorted(graph.variables, key=lambda k: (k.timestamp, k.id))
    offsets = {}
    pos = 0
    for key in ordered:
        offsets[key] = pos
        pos += key.kind.dim
    return offsets, pos


class Linearizer:
    """Evaluates the whitened Jacobian with a precomputed sparsity pattern.

    The block structure never changes between iterations, so row/column
    indices are built once and only the numeric entries are refreshed.
    """

    def __init__(self, graph: FactorGraph,
                 offsets: dict[VariableKey, int] | None = None):
        if offsets is None:
            offsets, _ = variable_offsets(graph)
        self.graph = graph
        self.offsets = offsets
        self.total_cols = sum(k.kind.dim for k in offsets)
        self.total_rows = sum(f.dim for f in graph.factors)

        rows, cols = [], []
        self._slices = []  # (factor, res row slice, per-key data slices)
        pos = 0
        row0 = 0
        for f in graph.factors:
            d = f.dim
            rr = np.arange(row0, row0 + d)
            spans = []
            for key in f.keys:
                dk = key.kind.dim
                c0 = offsets[key]
                rows.append(np.repeat(rr, dk))
                cols.append(np.tile(np.arange(c0, c0 + dk), d))
                spans.append(slice(pos, pos + d * dk))
                pos += d * dk
            self._slices.append((f, slice(row0, row0 + d), spans))
            row0 += d
        self._rows = np.concatenate(rows) if rows else np.empty(0, dtype=int)
        self._cols = np.concatenate(cols) if cols else np.empty(0, dtype=int)
        self._data = np.empty(pos)
        self._res = np.empty(row0)

    def __call__(self, values: Values):
        data, res = self._data, self._res
        for f, rspan, spans in self._slices:
            try:
                if f.combined_fn is not None:
                    r, Js = f.combined_fn(values)
                else:
                    r = f.residual_fn(values)
                    Js = f.jacobian_fn(values)
            except manifold.NearSingularError as err:
                raise manifold.NearSingularError(
                    f"linearization failed in {f.name}: {err}"
                ) from err
            W = f.noise.sqrt_info
            res[rspan] = W @ r
            for span, J in zip(spans, Js):
                data[span] = (W @ J).ravel()
        J = sp.coo_matrix((data, (self._rows, self._cols)),
                          shape=(self._res.shape[0], self.total_cols)).tocsr()
        return J, res.copy()


def linearize(graph: FactorGraph, values: Values,
              offsets: dict[VariableKey, int] | None = None):
    """Whitened block-sparse Jacobian and residual at the current estimate.

    Returns (J, r, offsets) with J (total_res_dim x total_tan_dim) in CSR form.
    """
    lin = Linearizer(graph, offsets)
    J, r = lin(values)
    return J, r, lin.offsets


def _retract_all(values: Values, offsets: dict[VariableKey, int],
                 delta: np.ndarray) -> Values:
    out = values.copy()
    for key, c0 in offsets.items():
        step = delta[c0:c0 + key.kind.dim]
        out.set(key, manifold.oplus(key.kind, values.get(key), step))
    return out


def _check_gauge(JtJ: sp.csc_matrix, offsets: dict[VariableKey, int],
                 rel_tol: float = 1e-12) -> None:
    """Raise UnderconstrainedGraphError if the undamped system is singular."""
    n = JtJ.shape[0]
    if n == 0:
        return
    suspects: list[VariableKey] = []
    # Jacobi-equilibrate first so wildly different factor strengths (tight
    # anchors vs soft smoothing terms) share one pivot scale, then factor a
    # tiny-shifted copy: the shift keeps exactly singular systems
    # factorizable while null directions show up as shift-sized pivots.
    diag = JtJ.diagonal()
    d = np.where(diag > 0.0, diag, 1.0)
    D = sp.diags(1.0 / np.sqrt(d), format="csc")
    scaled = (D @ JtJ @ D).tocsc()
    shift = rel_tol
    lu = splu((scaled + shift * sp.identity(n, format="csc")).tocsc(),
              permc_spec="NATURAL", diag_pivot_thresh=0.0,
              options={"SymmetricMode": True})
    dU = np.abs(lu.U.diagonal())
    bad = dU <= 1e3 * shift
    if not bad.any():
        return
    bad_cols = np.nonzero(bad)[0]
    for key, c0 in offsets.items():
        if any(c0 <= c < c0 + key.kind.dim for c in bad_cols):
            suspects.append(key)
    names = ", ".join(f"id={k.id}@t={k.timestamp:g}" for k in sorted(
        suspects, key=lambda k: (k.timestamp, k.id)))
    raise UnderconstrainedGraphError(
        f"underconstrained graph: null space touches variables [{names}]",
        suspects,
    )


def optimize(graph: FactorGraph, initial: Values,
             settings: SolverSettings | None = None) -> tuple[Values, SolveReport]:
    """Levenberg-Marquardt with multiplicative damping on the tangent space."""
    settings = settings or SolverSettings()
    report = SolveReport()
    values = initial.copy()
    if not graph.factors:
        report.converged = True
        return values, report

    missing = [k for k in graph.variables if k not in values]
    if missing:
        raise KeyError(f"initial values missing for variables: {missing}")

    offsets, ncols = variable_offsets(graph)
    eye = sp.identity(ncols, format="csc")
    lam = settings.init_lambda

    # One linearization per cost evaluation: the whitened residual norm is the
    # cost, and an accepted candidate's Jacobian seeds the next iteration.
    lin = Linearizer(graph, offsets)
    J, r = lin(values)
    cost = float(r @ r)
    report.cost_trace.append(cost)
    checked_gauge = False
    for it in range(settings.max_iterations):
        JtJ = (J.T @ J).tocsc()
        g = J.T @ r
        if not checked_gauge:
            _check_gauge(JtJ, offsets)
            checked_gauge = True

        accepted = False
        while lam <= settings.max_lambda:
            H = (JtJ + lam * eye).tocsc()
            try:
                delta = splu(H).solve(-g)
            except RuntimeError:
                lam *= settings.lambda_up
                continue
            candidate = _retract_all(values, offsets, delta)
            try:
                J_cand, r_cand = lin(candidate)
            except manifold.NearSingularError:
                # candidate stepped onto a singular chart; damp harder
                lam *= settings.lambda_up
                continue
            new_cost = float(r_cand @ r_cand)
            if np.isfinite(new_cost) and new_cost <= cost:
                values, J, r = candidate, J_cand, r_cand
                prev_cost = cost
                cost = new_cost
                lam = max(lam / settings.lambda_down, 1e-15)
                accepted = True
                break
            lam *= settings.lambda_up
        report.iterations = it + 1
        if not accepted:
            break
        report.cost_trace.append(cost)
        rel_drop = (prev_cost - cost) / max(prev_cost, 1e-300)
        if rel_drop < settings.rel_cost_tol or np.max(np.abs(delta)) < settings.dx_tol:
            report.converged = True
            break
    else:
        report.converged = False

    if not report.converged and report.cost_trace:
        # A rejected final step with an already-tiny gradient still counts.
        if len(report.cost_trace) >= 2:
            rel = (report.cost_trace[-2] - report.cost_trace[-1]) / max(
                report.cost_trace[-2], 1e-300)
            report.converged = rel < settings.rel_cost_tol
    report.final_cost = cost
    return values, report


def marginal_covariance(graph: FactorGraph, values: Values,
                        key: VariableKey) -> np.ndarray:
    """Block of (J^T J)^-1 for one variable at the current estimate."""
    J, _, offsets = linearize(graph, values)
    JtJ = (J.T @ J).tocsc()
    _check_gauge(JtJ, offsets)
    lu = splu(JtJ)
    c0 = offsets[key]
    d = key.kind.dim
    cov = np.empty((d, d))
    for i in range(d):
        e = np.zeros(JtJ.shape[0])
        e[c0 + i] = 1.0
        cov[:, i] = lu.solve(e)[c0:c0 + d]
    return 0.5 * (cov + cov.T)
