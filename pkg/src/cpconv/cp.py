"""CP (canonical polyadic) decomposition solvers.

A rank-R decomposition represents a D-way tensor as a sum of R outer
products; factor matrix m holds the mode-m vectors of all R components in
its columns.  Three fitting strategies are provided:

* :func:`cp_als`    -- alternating least squares, the standard baseline;
* :func:`cp_nls`    -- joint nonlinear least squares over all factor
  entries: Gauss-Newton steps from the normal equations with
  Levenberg-Marquardt damping, warm-started by a few ALS sweeps;
* :func:`cp_greedy` -- sequential deflation: fit the best rank-1 tensor to
  the running residual (by rank-1 ALS run to convergence) and subtract, R
  times.  Deliberately included as the weak baseline it is -- deflation
  can stall far from the best rank-R fit even when one exists.

All solvers are deterministic for a fixed ``SolverConfig.seed``, run
``restarts`` independent starts and keep the strictly best residual (ties
resolved to the earliest restart).  Results are returned in balanced form:
for each component the factor columns carry equal norms across modes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cpt1 import read_tensor, write_tensor
from .errors import SolverFailure
from .tensor_ops import as_tensor

__all__ = [
    "SolverConfig",
    "CPDecomposition",
    "reconstruct",
    "cp_als",
    "cp_nls",
    "cp_greedy",
    "save_decomposition",
    "load_decomposition",
]

INIT_MODES = ("random-gaussian", "als-warm-start", "extend-previous-rank")

# Sweeps of ALS used to warm-start Gauss-Newton.
ALS_WARM_SWEEPS = 20
# Ridge added to the ALS normal-equation diagonals; survives rank-deficient
# Khatri-Rao Grams without aborting.
ALS_RIDGE = 1e-10

_DEFAULT_ALS_SWEEPS = 500
_DEFAULT_GN_STEPS = 200


@dataclass(frozen=True)
class SolverConfig:
    """Knobs shared by all three solvers.

    ``max_iterations=None`` selects the per-solver default (500 ALS sweeps,
    200 Gauss-Newton steps).  ``tolerance`` stops a run once the relative
    change of the residual norm falls below it.
    """

    max_iterations: int | None = None
    tolerance: float = 1e-10
    damping_init: float = 1e-2
    restarts: int = 3
    seed: int = 0
    init: str = "als-warm-start"

    def __post_init__(self):
        if self.max_iterations is not None and self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if not self.tolerance > 0:
            raise ValueError("tolerance must be positive")
        if self.damping_init <= 0:
            raise ValueError("damping_init must be positive")
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")
        if self.init not in INIT_MODES:
            raise ValueError(f"init must be one of {INIT_MODES}, got {self.init!r}")


@dataclass
class CPDecomposition:
    """Factor matrices of one decomposition, plus optional component scales.

    ``lam`` holds per-component multipliers; it is absorbed into the
    factors by :meth:`normalized` and on export.  ``history`` records the
    solver's relative-residual trace (one entry per accepted sweep, step,
    or deflation) and takes no part in equality or serialization.
    """

    factors: list[np.ndarray]
    lam: np.ndarray | None = None
    history: list[float] | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if len(self.factors) < 2:
            raise ValueError("a decomposition needs at least two modes")
        ranks = {f.shape[1] for f in self.factors}
        if len(ranks) != 1:
            raise ValueError(f"factor matrices disagree on rank: {sorted(ranks)}")
        if self.rank < 1:
            raise ValueError("rank must be >= 1")
        for m, f in enumerate(self.factors):
            if f.ndim != 2:
                raise ValueError(f"factor {m} is not a matrix")
            if not np.all(np.isfinite(f)):
                raise ValueError(f"factor {m} contains non-finite elements")
        if self.lam is not None and self.lam.shape != (self.rank,):
            raise ValueError("lam must have one entry per component")

    @property
    def rank(self) -> int:
        return int(self.factors[0].shape[1])

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(int(f.shape[0]) for f in self.factors)

    def copy(self) -> "CPDecomposition":
        lam = None if self.lam is None else self.lam.copy()
        hist = None if self.history is None else list(self.history)
        return CPDecomposition([f.copy() for f in self.factors], lam, hist)

    def normalized(self) -> "CPDecomposition":
        """Absorb ``lam`` and balance column norms across modes."""
        factors = _balanced(_absorb(self.factors, self.lam))
        hist = None if self.history is None else list(self.history)
        return CPDecomposition(factors, None, hist)


def reconstruct(decomposition) -> np.ndarray:
    """Dense tensor of the decomposition: sum over components of the outer
    products of the factor columns."""
    if isinstance(decomposition, CPDecomposition):
        factors = _absorb(decomposition.factors, decomposition.lam)
    else:
        factors = [as_tensor(f, f"factor {m}") for m, f in enumerate(decomposition)]
    return _compose(factors)


def cp_als(t, rank: int, cfg: SolverConfig | None = None,
           warm_start: CPDecomposition | None = None) -> CPDecomposition:
    """Fit by alternating least squares.

    Each sweep solves the ridge-regularized normal equations for one factor
    at a time; the residual norm is non-increasing over sweeps (up to the
    tiny ridge).  Returns the best restart, normalized.
    """
    t = as_tensor(t)
    cfg = _checked(t, rank, cfg)
    max_sweeps = cfg.max_iterations or _DEFAULT_ALS_SWEEPS
    norm_t = float(np.linalg.norm(t.ravel()))

    best = None
    for idx, seed in enumerate(_restart_seeds(cfg)):
        factors = _initial_factors(t, rank, cfg, warm_start, idx, seed)
        factors, res, hist = _als_run(t, factors, max_sweeps, cfg.tolerance)
        best = _keep_best(best, (res, factors, hist))
    if best is None:
        raise SolverFailure(f"ALS produced non-finite results in all {cfg.restarts} restarts")
    _, factors, hist = best
    out = CPDecomposition(factors, history=[h / max(norm_t, 1e-300) for h in hist]).normalized()
    return out


def cp_nls(t, rank: int, cfg: SolverConfig | None = None,
           warm_start: CPDecomposition | None = None) -> CPDecomposition:
    """Fit by damped Gauss-Newton over all factor entries jointly.

    The step solves ``(JtJ + damping*I) delta = -Jt r`` where the Gram
    blocks of ``JtJ`` and the gradient are assembled from factor Grams and
    matricized-tensor-times-Khatri-Rao products; damping is multiplied by
    10 after a rejected step and divided by 10 after an accepted one.  The
    returned residual never exceeds the residual of the initialization.
    """
    t = as_tensor(t)
    cfg = _checked(t, rank, cfg)
    max_steps = cfg.max_iterations or _DEFAULT_GN_STEPS
    norm_t = float(np.linalg.norm(t.ravel()))

    best = None
    failures = 0
    for idx, seed in enumerate(_restart_seeds(cfg)):
        factors = _initial_factors(t, rank, cfg, warm_start, idx, seed)
        track = _BestTracker(t)
        track.consider(factors)
        if cfg.init != "random-gaussian":
            warm, _, _ = _als_run(t, factors, ALS_WARM_SWEEPS, cfg.tolerance)
            track.consider(warm)
        hist = _gauss_newton(t, track, max_steps, cfg.tolerance, cfg.damping_init)
        if not np.isfinite(track.best_res):
            failures += 1
            continue
        best = _keep_best(best, (track.best_res, track.best_factors, hist))
    if best is None:
        raise SolverFailure(
            f"Gauss-Newton produced non-finite results in all {failures} restarts"
        )
    _, factors, hist = best
    return CPDecomposition(factors, history=[h / max(norm_t, 1e-300) for h in hist]).normalized()


def cp_greedy(t, rank: int, cfg: SolverConfig | None = None) -> CPDecomposition:
    """Fit by best-rank-1 deflation.

    Component r is the converged rank-1 ALS fit (best of ``cfg.restarts``
    random starts) of the residual left by components 1..r-1.  The residual
    norm is non-increasing in the number of components.  The per-fit
    stopping rule is ``cfg.tolerance`` relative residual change or
    ``cfg.max_iterations`` sweeps (default 500), documented here because it
    is part of what "greedy" means for this implementation.
    """
    t = as_tensor(t)
    cfg = _checked(t, rank, cfg)
    norm_t = float(np.linalg.norm(t.ravel()))
    rng = np.random.default_rng(cfg.seed)

    residual = t.copy()
    columns: list[list[np.ndarray]] = []
    hist = []
    for _ in range(rank):
        fit = _best_rank1(residual, cfg, rng)
        columns.append(fit)
        residual = residual - _compose(fit)
        hist.append(float(np.linalg.norm(residual.ravel())) / max(norm_t, 1e-300))
    factors = [
        np.concatenate([cols[m] for cols in columns], axis=1)
        for m in range(t.ndim)
    ]
    return CPDecomposition(factors, history=hist).normalized()


# ---------------------------------------------------------------------------
# serialization: manifest of key = value lines plus one CPT1 file per factor


MANIFEST_NAME = "decomposition.txt"
_MANIFEST_FORMAT = "cpconv-cpd/1"
_DTYPE_NAMES = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}


def save_decomposition(d: CPDecomposition, directory) -> None:
    """Write ``decomposition.txt`` plus ``factor_<m>.cpt`` files.

    Component scales are absorbed into the factors on export.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    out = d.normalized()
    dtype = out.factors[0].dtype
    lines = [
        f"format = {_MANIFEST_FORMAT}",
        f"rank = {out.rank}",
        f"ndim = {len(out.factors)}",
        "modes = " + ",".join(str(n) for n in out.shape),
        f"dtype = {_DTYPE_NAMES[np.dtype(dtype)]}",
    ]
    for m, f in enumerate(out.factors):
        fname = f"factor_{m}.cpt"
        write_tensor(directory / fname, f)
        lines.append(f"factor_{m} = {fname}")
    (directory / MANIFEST_NAME).write_text("\n".join(lines) + "\n")


def load_decomposition(directory) -> CPDecomposition:
    directory = Path(directory)
    manifest = directory / MANIFEST_NAME
    if not manifest.is_file():
        raise ValueError(f"{directory}: no {MANIFEST_NAME} found")
    fields = {}
    for line in manifest.read_text().splitlines():
        line = line.strip()
        if not line:
            continue
        key, _, value = line.partition("=")
        fields[key.strip()] = value.strip()
    if fields.get("format") != _MANIFEST_FORMAT:
        raise ValueError(f"{manifest}: unsupported format {fields.get('format')!r}")
    rank = int(fields["rank"])
    ndim = int(fields["ndim"])
    modes = tuple(int(x) for x in fields["modes"].split(","))
    if len(modes) != ndim:
        raise ValueError(f"{manifest}: modes/ndim disagree")
    factors = []
    for m in range(ndim):
        f = read_tensor(directory / fields[f"factor_{m}"])
        if f.shape != (modes[m], rank):
            raise ValueError(
                f"{manifest}: factor {m} has shape {f.shape}, expected {(modes[m], rank)}"
            )
        factors.append(f)
    return CPDecomposition(factors)


# ---------------------------------------------------------------------------
# internals


def _checked(t: np.ndarray, rank: int, cfg: SolverConfig | None) -> SolverConfig:
    if t.ndim < 2:
        raise ValueError("decomposition targets must have at least two modes")
    if rank < 1:
        raise ValueError("rank must be >= 1")
    return cfg or SolverConfig()


def _restart_seeds(cfg: SolverConfig) -> np.ndarray:
    return np.random.default_rng(cfg.seed).integers(0, 2**63 - 1, size=cfg.restarts)


def _random_factors(shape, rank: int, rng: np.random.Generator) -> list[np.ndarray]:
    return [rng.standard_normal((n, rank)) for n in shape]


def _initial_factors(t, rank, cfg, warm_start, restart_idx, seed) -> list[np.ndarray]:
    rng = np.random.default_rng(seed)
    if cfg.init == "extend-previous-rank":
        if warm_start is None:
            raise ValueError("init 'extend-previous-rank' requires a warm_start decomposition")
        if restart_idx == 0:
            return _extended(t, warm_start, rank, cfg, rng)
        return _random_factors(t.shape, rank, rng)
    if warm_start is not None and restart_idx == 0:
        if warm_start.rank != rank:
            raise ValueError(
                f"warm_start has rank {warm_start.rank}, expected {rank} "
                "(use init='extend-previous-rank' to grow the rank)"
            )
        if warm_start.shape != t.shape:
            raise ValueError("warm_start mode sizes do not match the target tensor")
        return [f.copy() for f in _absorb(warm_start.factors, warm_start.lam)]
    return _random_factors(t.shape, rank, rng)


def _extended(t, warm_start: CPDecomposition, rank, cfg, rng) -> list[np.ndarray]:
    """Grow a lower-rank solution one component at a time.

    Each added component is a converged rank-1 ALS fit of the current
    residual (an all-zero appended column would be a stationary point of
    both ALS and Gauss-Newton, so it would never move).  The initial
    residual therefore never exceeds the warm start's residual.
    """
    if warm_start.shape != t.shape:
        raise ValueError("warm_start mode sizes do not match the target tensor")
    if warm_start.rank > rank:
        raise ValueError(
            f"cannot extend rank {warm_start.rank} down to {rank}"
        )
    factors = [f.copy() for f in _absorb(warm_start.factors, warm_start.lam)]
    for _ in range(rank - warm_start.rank):
        residual = t - _compose(factors)
        extra = _best_rank1(residual, cfg, rng)
        factors = [np.concatenate([f, e], axis=1) for f, e in zip(factors, extra)]
    return factors


def _compose(factors: list[np.ndarray]) -> np.ndarray:
    letters = "abcdefghijklmnopqrstuvwxy"
    ndim = len(factors)
    if ndim > len(letters):
        raise ValueError(f"at most {len(letters)} modes supported")
    expr = ",".join(letters[m] + "z" for m in range(ndim)) + "->" + letters[:ndim]
    return np.einsum(expr, *factors, optimize=ndim > 3)


def _residual_norm(t: np.ndarray, factors: list[np.ndarray]) -> float:
    return float(np.linalg.norm((t - _compose(factors)).ravel()))


def _absorb(factors: list[np.ndarray], lam: np.ndarray | None) -> list[np.ndarray]:
    if lam is None:
        return list(factors)
    ndim = len(factors)
    scale = np.abs(lam) ** (1.0 / ndim)
    out = [f * scale for f in factors]
    out[0] = out[0] * np.sign(lam)
    return out


def _balanced(factors: list[np.ndarray]) -> list[np.ndarray]:
    """Equalize each component's column norms across modes.

    Components with a zero column in any mode are zeroed everywhere (their
    contribution is zero regardless).
    """
    norms = np.stack([np.linalg.norm(f, axis=0) for f in factors])  # (D, R)
    total = np.prod(norms, axis=0)
    target = np.where(total > 0, total ** (1.0 / len(factors)), 0.0)
    out = []
    for f, n in zip(factors, norms):
        scale = np.where(n > 0, target / np.where(n > 0, n, 1.0), 0.0)
        out.append(f * scale)
    return out


def _keep_best(best, candidate):
    res = candidate[0]
    if not np.isfinite(res):
        return best
    if best is None or res < best[0]:
        return candidate
    return best


class _BestTracker:
    """Remembers the best (residual, factors) pair seen during one restart."""

    def __init__(self, t: np.ndarray):
        self.t = t
        self.best_res = np.inf
        self.best_factors: list[np.ndarray] | None = None

    def consider(self, factors: list[np.ndarray]) -> float:
        res = _residual_norm(self.t, factors)
        if np.isfinite(res) and res < self.best_res:
            self.best_res = res
            self.best_factors = [f.copy() for f in factors]
        return res


def _kr_chain(mats: list[np.ndarray]) -> np.ndarray:
    """Khatri-Rao product of a list, first matrix's rows varying slowest."""
    out = mats[0]
    for m in mats[1:]:
        out = (out[:, None, :] * m[None, :, :]).reshape(-1, out.shape[1])
    return out


def _unfoldings(t: np.ndarray) -> list[np.ndarray]:
    return [np.moveaxis(t, m, 0).reshape(t.shape[m], -1) for m in range(t.ndim)]


def _als_run(t, factors, max_sweeps, tol):
    """ALS sweeps until the relative residual change drops below ``tol``.

    Returns (best factors seen, their residual, per-sweep residual trace).
    """
    rank = factors[0].shape[1]
    eye = np.eye(rank)
    t_unf = _unfoldings(t)
    grams = [f.T @ f for f in factors]
    best_res = _residual_norm(t, factors)
    best = [f.copy() for f in factors]
    prev = best_res
    hist = []
    for _ in range(max_sweeps):
        for m in range(t.ndim):
            others = [factors[j] for j in range(t.ndim) if j != m]
            gram = np.ones((rank, rank))
            for j in range(t.ndim):
                if j != m:
                    gram = gram * grams[j]
            rhs = t_unf[m] @ _kr_chain(others)
            try:
                factors[m] = np.linalg.solve(gram + ALS_RIDGE * eye, rhs.T).T
            except np.linalg.LinAlgError:
                factors[m] = rhs @ np.linalg.pinv(gram + ALS_RIDGE * eye)
            grams[m] = factors[m].T @ factors[m]
        res = _residual_norm(t, factors)
        if not np.isfinite(res):
            break
        hist.append(res)
        if res < best_res:
            best_res = res
            best = [f.copy() for f in factors]
        if abs(prev - res) < tol * max(prev, 1e-300):
            break
        prev = res
    return best, best_res, hist


def _gauss_newton(t, track: _BestTracker, max_steps, tol, damping):
    """Damped Gauss-Newton from ``track.best_factors``; feeds every accepted
    iterate back into the tracker.  Returns the accepted-residual trace."""
    factors = [f.copy() for f in track.best_factors]
    sizes = [f.shape[0] for f in factors]
    ndim = len(factors)
    rank = factors[0].shape[1]
    offsets = np.cumsum([0] + [n * rank for n in sizes])
    total = offsets[-1]
    eye = np.eye(total)
    res = _residual_norm(t, factors)
    lam = damping
    hist = [res]
    for _ in range(max_steps):
        grams = [f.T @ f for f in factors]
        diff = _compose(factors) - t
        diff_unf = _unfoldings(diff)
        grad = np.empty(total)
        for m in range(ndim):
            others = [factors[j] for j in range(ndim) if j != m]
            grad[offsets[m]:offsets[m + 1]] = (diff_unf[m] @ _kr_chain(others)).ravel()
        hess = np.empty((total, total))
        for m in range(ndim):
            gm = np.ones((rank, rank))
            for j in range(ndim):
                if j != m:
                    gm = gm * grams[j]
            hess[offsets[m]:offsets[m + 1], offsets[m]:offsets[m + 1]] = np.kron(
                np.eye(sizes[m]), gm
            )
            for mp in range(m + 1, ndim):
                gmm = np.ones((rank, rank))
                for j in range(ndim):
                    if j != m and j != mp:
                        gmm = gmm * grams[j]
                block = np.einsum(
                    "ks,jr,rs->krjs", factors[m], factors[mp], gmm
                ).reshape(sizes[m] * rank, sizes[mp] * rank)
                hess[offsets[m]:offsets[m + 1], offsets[mp]:offsets[mp + 1]] = block
                hess[offsets[mp]:offsets[mp + 1], offsets[m]:offsets[m + 1]] = block.T
        accepted = False
        new_res = res
        for _ in range(12):
            try:
                delta = np.linalg.solve(hess + lam * eye, -grad)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            trial = [
                factors[m] + delta[offsets[m]:offsets[m + 1]].reshape(sizes[m], rank)
                for m in range(ndim)
            ]
            new_res = _residual_norm(t, trial)
            if np.isfinite(new_res) and new_res < res:
                factors = trial
                lam = max(lam / 10.0, 1e-14)
                accepted = True
                break
            lam *= 10.0
        if not accepted:
            break
        track.consider(factors)
        hist.append(new_res)
        if abs(res - new_res) < tol * max(res, 1e-300):
            res = new_res
            break
        res = new_res
    return hist


def _best_rank1(residual, cfg: SolverConfig, rng: np.random.Generator) -> list[np.ndarray]:
    """Best of ``cfg.restarts`` converged rank-1 ALS fits of ``residual``."""
    max_sweeps = cfg.max_iterations or _DEFAULT_ALS_SWEEPS
    best = None
    for _ in range(cfg.restarts):
        seed = int(rng.integers(0, 2**63 - 1))
        factors = _random_factors(residual.shape, 1, np.random.default_rng(seed))
        factors, res, _ = _als_run(residual, factors, max_sweeps, cfg.tolerance)
        best = _keep_best(best, (res, factors, None))
    if best is None:
        raise SolverFailure("rank-1 fits were non-finite in every restart")
    return best[1]
