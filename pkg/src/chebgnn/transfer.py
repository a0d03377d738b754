"""Filter stability under Laplacian perturbations, and small-to-large size transfer.

All norms are spectral (operator 2-) norms of symmetric operators,
estimated matrix-free with Lanczos.  Plain power iteration is available
but stalls when the two largest eigenvalue magnitudes are close, which is
common for random symmetric perturbations.
"""
from __future__ import annotations

import io
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, List, NamedTuple, Optional, Sequence, Union

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .cheb import cheb_apply
from .data import Dataset, SbmConfig, gen_cluster_like
from .graph import Graph, graph_from_adjacency, normalized_laplacian, scaled_laplacian
from .nn import ModelSpec
from .training import MetricReport, TrainConfig, evaluate, make_batches, train

REPORT_SCHEMA = "chebgnn.stability/1"


class NonConvergenceWarning(RuntimeWarning):
    pass


class OperatorNorm(NamedTuple):
    value: float
    iterations: int
    converged: bool


DENSE_CUTOFF = 32


def spectral_norm(
    op: Union[sp.spmatrix, np.ndarray, Callable[[np.ndarray], np.ndarray]],
    n: Optional[int] = None,
    max_iter: int = 200,
    tol: float = 1e-8,
    seed: int = 0,
    method: str = "lanczos",
) -> OperatorNorm:
    """Largest absolute eigenvalue of a symmetric operator.

    ``method="lanczos"`` runs ARPACK from a seeded start vector (dense
    eigensolver below ``DENSE_CUTOFF`` rows); ``method="power"`` is plain
    power iteration on the square.  ``iterations`` counts operator
    applications for Lanczos and sweeps for power iteration.
    """
    if not callable(op):
        mat = op
        n = mat.shape[0]
        op = lambda x: mat @ x  # noqa: E731
    if method == "power":
        return _power_norm(op, n, max_iter, tol, seed)
    if method != "lanczos":
        raise ValueError(f"unknown method {method!r}")
    if n <= DENSE_CUTOFF:
        dense = np.asarray(op(np.eye(n)))
        dense = 0.5 * (dense + dense.T)
        return OperatorNorm(float(np.abs(np.linalg.eigvalsh(dense)).max()) if n else 0.0, n, True)
    calls = [0]

    def matvec(x):
        calls[0] += 1
        return op(np.ravel(x))

    v0 = np.random.default_rng(seed).standard_normal(n)
    if not np.any(matvec(v0)):  # a generic vector is annihilated only by the zero operator
        return OperatorNorm(0.0, 1, True)
    lin =spla.LinearOperator((n, n), matvec=matvec, dtype=np.float64)
    try:
        vals = spla.eigsh(lin, k=1, which="LM", v0=v0, maxiter=max_iter, tol=tol, return_eigenvectors=False)
        return OperatorNorm(float(abs(vals[0])), calls[0], True)
    except spla.ArpackNoConvergence as exc:
        best = float(np.abs(exc.eigenvalues).max()) if len(exc.eigenvalues) else 0.0
        return OperatorNorm(best, calls[0], False)


def _power_norm(op, n, max_iter, tol, seed) -> OperatorNorm:
    v = np.random.default_rng(seed).standard_normal(n)
    v /= np.linalg.norm(v)
    est = 0.0
    for it in range(1, max_iter + 1):
        w = op(v)
        new = float(np.linalg.norm(w))
        if new == 0.0:
            return OperatorNorm(0.0, it, True)
        u = op(w)
        nu = np.linalg.norm(u)
        if nu == 0.0:
            return OperatorNorm(new, it, True)
        v = u / nu
        if abs(new - est) <= tol * new:
            return OperatorNorm(new, it, True)
        est = new
    return OperatorNorm(est, max_iter, False)


# ---------------------------------------------------------------------------
# perturbations


@dataclass
class Perturbation:
    kind: str
    target: float
    E: sp.csr_matrix
    norm: float


def _rescale(e: sp.csr_matrix, eps: float, seed: int, max_iter: int):
    raw = spectral_norm(e, max_iter=max_iter, tol=1e-12, seed=seed).value
    if raw == 0.0:
        raise ValueError("perturbation direction is zero; cannot rescale")
    e = (eps / raw) * e
    return e, spectral_norm(e, max_iter=max_iter, tol=1e-12, seed=seed).value


def perturb_laplacian(
    lap: sp.spmatrix,
    kind: str = "weight",
    eps: float = 1e-2,
    seed: int = 0,
    n_toggles: int = 1,
    max_iter: int = 1000,
):
    """Return ``(lap + E, Perturbation)`` with a random symmetric ``E`` of norm ``eps``.

    ``kind="weight"`` draws Gaussian noise on the stored entries of ``lap``;
    ``kind="structural"`` toggles ``n_toggles`` random node pairs, i.e. adds
    ``-1`` to an absent pair or ``+1`` to a present one, as an edge
    insertion/removal would, before rescaling.
    """
    if not eps > 0:
        raise ValueError(f"eps must be positive, got {eps}")
    lap = sp.csr_matrix(lap)
    n = lap.shape[0]
    rng = np.random.default_rng(seed)
    if kind == "weight":
        upper = sp.triu(lap, format="coo")
        vals = rng.standard_normal(upper.nnz)
        e = sp.coo_matrix((vals, (upper.row, upper.col)), shape=(n, n))
        e = e + sp.triu(e, k=1).T
    elif kind == "structural":
        pairs = n * (n - 1) // 2
        if n_toggles < 1 or n_toggles > pairs:
            raise ValueError(f"cannot toggle {n_toggles} pairs in a {n}-node graph ({pairs} pairs)")
        iu, ju = np.triu_indices(n, k=1)
        pick = rng.choice(pairs, size=n_toggles, replace=False)
        r, c = iu[pick], ju[pick]
        present = np.asarray(lap[r, c]).ravel() != 0
        vals = np.where(present, 1.0, -1.0)
        e = sp.coo_matrix((np.r_[vals, vals], (np.r_[r, c], np.r_[c, r])), shape=(n, n))
    else:
        raise ValueError(f"unknown perturbation kind {kind!r}")
    e, realized = _rescale(sp.csr_matrix(e), eps, seed, max_iter)
    return sp.csr_matrix(lap + e), Perturbation(kind, eps, sp.csr_matrix(e), realized)


def perturb_adjacency(g: Graph, n_toggles: int = 1, seed: int = 0, max_iter: int = 1000):
    """Toggle edges of ``A`` and renormalize; ``E`` is whatever the Laplacian change is.

    Unlike :func:`perturb_laplacian` the norm is not controlled.
    """
    n = g.n_nodes
    pairs = n * (n - 1) // 2
    if n_toggles < 1 or n_toggles > pairs:
        raise ValueError(f"cannot toggle {n_toggles} pairs in a {n}-node graph ({pairs} pairs)")
    rng = np.random.default_rng(seed)
    iu, ju = np.triu_indices(n, k=1)
    pick = rng.choice(pairs, size=n_toggles, replace=False)
    a = g.adjacency.tolil()
    for u, v in zip(iu[pick], ju[pick]):
        w = 0.0 if a[u, v] != 0 else 1.0
        a[u, v] = a[v, u] = w
    g2 = graph_from_adjacency(a.tocsr())
    l1, l2 = normalized_laplacian(g), normalized_laplacian(g2)
    e = sp.csr_matrix(l2 - l1)
    realized = spectral_norm(e, max_iter=max_iter, tol=1e-12, seed=seed).value
    return l2, Perturbation("adjacency", float("nan"), e, realized)


# ---------------------------------------------------------------------------
# filter distance


def filter_distance(
    theta,
    lap: sp.spmatrix,
    lap2: sp.spmatrix,
    lambda_max: float = 2.0,
    max_iter: int = 200,
    tol: float = 1e-8,
    seed: int = 0,
    method: str = "lanczos",
) -> float:
    """Operator norm of ``g(L) - g(L')`` for the Chebyshev filter ``theta``.

    ``lap`` and ``lap2`` are normalized Laplacians; both are rescaled with
    the same ``lambda_max`` before the filter is applied.
    """
    if lap.shape != lap2.shape:
        raise ValueError(f"Laplacian shapes differ: {lap.shape} vs {lap2.shape}")
    s1 = scaled_laplacian(sp.csr_matrix(lap), lambda_max)
    s2 = scaled_laplacian(sp.csr_matrix(lap2), lambda_max)

    def diff(h):
        return cheb_apply(s1, theta, h)[0] - cheb_apply(s2, theta, h)[0]

    res = spectral_norm(diff, lap.shape[0], max_iter=max_iter, tol=tol, seed=seed, method=method)
    if not res.converged:
        warnings.warn(
            f"filter_distance did not converge in {max_iter} iterations", NonConvergenceWarning
        )
    return res.value


def chebyshev_lipschitz_bound(theta) -> float:
    """``sum_i |theta_i| * i^2``: Lipschitz constant of the filter on ``[-1, 1]``."""
    theta = np.asarray(theta, dtype=np.float64)
    return float(np.sum(np.abs(theta) * np.arange(len(theta)) ** 2))


# ---------------------------------------------------------------------------
# sweeps


@dataclass
class StabilityRow:
    epsilon: float
    realized_norm: float
    mean_distance: float
    std_distance: float
    ratio: float
    converged: bool = True


@dataclass
class StabilityReport:
    rows: List[StabilityRow]
    slope: float = float("nan")
    intercept: float = float("nan")
    r2: float = float("nan")
    insufficient_points: bool = False
    meta: dict = field(default_factory=dict)

    def fit(self) -> None:
        self.rows.sort(key=lambda r: r.epsilon)
        pts = [(r.realized_norm, r.mean_distance) for r in self.rows if r.realized_norm > 0 and r.mean_distance > 0]
        if len({x for x, _ in pts}) < 2:
            self.insufficient_points = True
            self.slope = self.intercept = self.r2 = float("nan")
            return
        x = np.log([p[0] for p in pts])
        y = np.log([p[1] for p in pts])
        self.slope, self.intercept = (float(v) for v in np.polyfit(x, y, 1))
        resid = y - (self.slope * x + self.intercept)
        ss_tot = float(((y - y.mean()) ** 2).sum())
        self.r2 = 1.0 - float((resid**2).sum()) / ss_tot if ss_tot > 0 else 1.0
        self.insufficient_points = False

    @property
    def ratios(self) -> np.ndarray:
        return np.array([r.ratio for r in self.rows])

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# schema={REPORT_SCHEMA}\n")
        buf.write("epsilon,realized_norm,mean_distance,std_distance,ratio\n")
        for r in self.rows:
            buf.write(f"{r.epsilon!r},{r.realized_norm!r},{r.mean_distance!r},{r.std_distance!r},{r.ratio!r}\n")
        flag = ",insufficient_points" if self.insufficient_points else ""
        buf.write(f"# slope={self.slope!r},intercept={self.intercept!r},r2={self.r2!r}{flag}\n")
        return buf.getvalue()


def stability_sweep(
    graph: Union[Graph, sp.spmatrix],
    theta,
    eps_list: Sequence[float],
    trials: int = 5,
    seed: int = 0,
    kind: str = "weight",
    lambda_max: float = 2.0,
    max_iter: int = 200,
) -> StabilityReport:
    """Average ``filter_distance`` over random perturbations at each ``eps`` and fit a log-log slope.

    Trial ``t`` at the ``j``-th epsilon uses seed ``SeedSequence([seed, j, t])``.
    """
    for eps in eps_list:
        if not 0.0 < eps <= 1.0:
            raise ValueError(f"epsilon values must lie in (0, 1], got {eps}")
    lap = normalized_laplacian(graph) if isinstance(graph, Graph) else sp.csr_matrix(graph)
    rows = []
    for j, eps in enumerate(eps_list):
        dists, norms, conv = [], [], True
        for t in range(trials):
            s = int(np.random.SeedSequence([seed, j, t]).generate_state(1)[0])
            lap2, pert = perturb_laplacian(lap, kind, eps, seed=s)
            with warnings.catch_warnings(record=True) as caught:
                warnings.simplefilter("always", NonConvergenceWarning)
                dists.append(filter_distance(theta, lap, lap2, lambda_max, max_iter=max_iter, seed=s))
            conv = conv and not any(issubclass(w.category, NonConvergenceWarning) for w in caught)
            norms.append(pert.norm)
        realized = float(np.mean(norms))
        mean_d = float(np.mean(dists))
        rows.append(
            StabilityRow(float(eps), realized, mean_d, float(np.std(dists)), mean_d / realized, conv)
        )
    report = StabilityReport(rows, meta={"trials": trials, "seed": seed, "kind": kind, "lambda_max": lambda_max})
    report.fit()
    return report


# ---------------------------------------------------------------------------
# size transfer


@dataclass
class TransferReport:
    small: MetricReport
    large: MetricReport
    gap: float
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"small": self.small.to_dict(), "large": self.large.to_dict(), "gap": self.gap, "meta": self.meta}


def size_transfer(
    train_cfg: SbmConfig,
    eval_cfg: SbmConfig,
    spec: ModelSpec,
    cfg: TrainConfig,
    n_train_graphs: int = 1200,
    n_eval_graphs: int = 200,
    out_dir=None,
    train_set: Optional[Dataset] = None,
) -> TransferReport:
    """Train on small SBM graphs, then evaluate the frozen models on larger ones.

    ``gap`` is mean(small test metric) - mean(large-graph metric).
    """
    for name in ("n_communities", "p", "q"):
        if getattr(train_cfg, name) != getattr(eval_cfg, name):
            raise ValueError(f"train and eval SBM configs differ in {name}")
    small = train_set if train_set is not None else gen_cluster_like(train_cfg, n_train_graphs)
    large = gen_cluster_like(eval_cfg, n_eval_graphs)
    report, runs = train(spec, small, cfg, out_dir=out_dir)
    large_batches = make_batches(large.graphs, cfg.batch_size)
    large_scores = [evaluate(run.model, large_batches)[1] for run in runs]
    large_report = MetricReport(report.metric, large_scores, list(report.seeds), failed=dict(report.failed))
    gap = report.mean - large_report.mean if runs else math.nan
    return TransferReport(
        report,
        large_report,
        gap,
        meta={
            "train_cfg": train_cfg.__dict__,
            "eval_cfg": eval_cfg.__dict__,
            "spec": spec.to_dict(),
            "n_train_graphs": len(small),
            "n_eval_graphs": n_eval_graphs,
        },
    )
