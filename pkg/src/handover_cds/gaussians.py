"""Gaussian and Gaussian-mixture primitives.

Density evaluation, EM fitting, responsibilities, sampling, and exact
conditioning (the regression step used by every model downstream). All
math is float64; fitted mixtures are immutable and safe to share.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import FitError, FormatError, InputError, ModelIntegrityError
from . import jsonio

LOG_2PI = float(np.log(2.0 * np.pi))

# Diagonal floor added every M-step: COV_FLOOR_SCALE * trace of the data
# scatter / d, fixed per fit (see _data_floor).
COV_FLOOR_SCALE = 1e-8

MIXTURE_DOC_VERSION = 1


def _as_vector(x, name: str = "x") -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1:
        raise InputError(f"{name} must be a 1-D vector, got shape {arr.shape}")
    return arr


@dataclass(frozen=True)
class Gaussian:
    """Single multivariate normal with cached evaluation quantities."""

    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        mean = np.array(self.mean, dtype=np.float64)
        cov = np.array(self.covariance, dtype=np.float64)
        if mean.ndim != 1:
            raise InputError(f"mean must be 1-D, got shape {mean.shape}")
        d = mean.shape[0]
        if cov.shape != (d, d):
            raise InputError(f"covariance must be ({d},{d}), got {cov.shape}")
        if not np.all(np.isfinite(mean)) or not np.all(np.isfinite(cov)):
            raise ModelIntegrityError("non-finite Gaussian parameters")
        scale = max(1.0, float(np.abs(cov).max()))
        if np.abs(cov - cov.T).max() > 1e-12 * scale:
            raise ModelIntegrityError("covariance is not symmetric")
        cov = 0.5 * (cov + cov.T)
        try:
            chol = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError as exc:
            raise ModelIntegrityError(
                "covariance is not positive definite"
            ) from exc
        mean.setflags(write=False)
        cov.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "covariance", cov)
        log_det = 2.0 * float(np.sum(np.log(np.diag(chol))))
        inv_cov = np.linalg.inv(cov)
        chol.setflags(write=False)
        inv_cov.setflags(write=False)
        object.__setattr__(self, "_chol", chol)
        object.__setattr__(self, "_inv_cov", inv_cov)
        object.__setattr__(self, "_log_norm", -0.5 * (d * LOG_2PI + log_det))

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def log_pdf(self, X: np.ndarray) -> np.ndarray:
        """Log density at one point (d,) or a batch (N, d)."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        delta = X - self.mean  # (N, d)
        quad = np.einsum("ni,ij,nj->n", delta, self._inv_cov, delta)
        return self._log_norm - 0.5 * quad


@dataclass(frozen=True)
class GaussianMixture:
    """K-component joint density over stacked variables."""

    weights: np.ndarray
    components: tuple[Gaussian, ...]
    dim_labels: tuple[str, ...] = ()

    def __post_init__(self):
        weights = np.array(self.weights, dtype=np.float64)
        components = tuple(self.components)
        if len(components) < 1:
            raise ModelIntegrityError("mixture needs at least one component")
        if weights.shape != (len(components),):
            raise ModelIntegrityError(
                f"weights shape {weights.shape} != K={len(components)}"
            )
        if np.any(weights < 0.0):
            raise ModelIntegrityError("mixture weights must be nonnegative")
        if abs(float(weights.sum()) - 1.0) > 1e-9:
            raise ModelIntegrityError(
                f"mixture weights sum to {weights.sum():.12f}, not 1"
            )
        d = components[0].dim
        if any(c.dim != d for c in components):
            raise ModelIntegrityError("components differ in dimensionality")
        labels = tuple(self.dim_labels) if self.dim_labels else tuple(
            f"x{i}" for i in range(d)
        )
        if len(labels) != d:
            raise ModelIntegrityError(
                f"{len(labels)} dim_labels for {d} dimensions"
            )
        weights.setflags(write=False)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "components", components)
        object.__setattr__(self, "dim_labels", labels)
        # log weights with -inf for exact zeros, used by every evaluation
        with np.errstate(divide="ignore"):
            log_w = np.log(weights)
        log_w.setflags(write=False)
        object.__setattr__(self, "_log_weights", log_w)

    @property
    def n_components(self) -> int:
        return len(self.components)

    @property
    def dim(self) -> int:
        return self.components[0].dim

    def component_log_pdfs(self, X: np.ndarray) -> np.ndarray:
        """Per-component log densities, shape (N, K)."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.dim:
            raise InputError(
                f"points have dimension {X.shape[1]}, mixture has {self.dim}"
            )
        out = np.empty((X.shape[0], self.n_components))
        for g, comp in enumerate(self.components):
            out[:, g] = comp.log_pdf(X)
        return out


@dataclass(frozen=True)
class ConditioningSpec:
    """Which joint dimensions are observed and which are regressed."""

    input_dims: tuple[int, ...]
    output_dims: tuple[int, ...]

    def __post_init__(self):
        input_dims = tuple(int(i) for i in self.input_dims)
        output_dims = tuple(int(i) for i in self.output_dims)
        if not input_dims or not output_dims:
            raise InputError("input_dims and output_dims must be non-empty")
        if set(input_dims) & set(output_dims):
            raise InputError("input_dims and output_dims must be disjoint")
        if min(input_dims + output_dims) < 0:
            raise InputError("dimension indices must be nonnegative")
        object.__setattr__(self, "input_dims", input_dims)
        object.__setattr__(self, "output_dims", output_dims)

    def validate_against(self, dim: int) -> None:
        if max(self.input_dims + self.output_dims) >= dim:
            raise InputError(
                f"conditioning indices exceed joint dimension {dim}"
            )


@dataclass(frozen=True)
class EMConfig:
    """Settings for expectation-maximization fitting."""

    max_iter: int = 500
    tol: float = 1e-7
    n_restarts: int = 5
    seed: int = 0
    cov_floor_scale: float = COV_FLOOR_SCALE


def log_density(mix: GaussianMixture, x) -> float | np.ndarray:
    """log sum_g w_g N(x; mu_g, Sigma_g) at one point (d,) or batch (N, d)."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    log_pdfs = mix.component_log_pdfs(x) + mix._log_weights  # (N, K)
    m = log_pdfs.max(axis=1)
    out = m + np.log(np.exp(log_pdfs - m[:, None]).sum(axis=1))
    return float(out[0]) if single else out


def responsibilities(mix: GaussianMixture, x) -> np.ndarray:
    """Posterior component probabilities at one point or a batch.

    Entry g is proportional to w_g N(x; mu_g, Sigma_g); rows sum to 1.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    log_pdfs = mix.component_log_pdfs(x) + mix._log_weights
    log_pdfs -= log_pdfs.max(axis=1, keepdims=True)
    resp = np.exp(log_pdfs)
    resp /= resp.sum(axis=1, keepdims=True)
    return resp[0] if single else resp


def _kmeanspp_centers(X: np.ndarray, K: int, rng: np.random.Generator):
    n = X.shape[0]
    centers = np.empty((K, X.shape[1]))
    centers[0] = X[rng.integers(n)]
    d2 = np.sum((X - centers[0]) ** 2, axis=1)
    for j in range(1, K):
        total = d2.sum()
        if total <= 0.0:
            centers[j] = X[rng.integers(n)]
            continue
        centers[j] = X[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, np.sum((X - centers[j]) ** 2, axis=1))
    return centers


def _data_floor(X: np.ndarray, floor_scale: float) -> float:
    """Static diagonal floor for one fit: scaled trace of the data scatter.

    Keeping the floor constant across iterations preserves exact EM
    monotonicity even on rank-deficient data, where a floor that tracks
    the shrinking per-component trace makes the likelihood oscillate.
    """
    d = X.shape[1]
    scatter = np.atleast_2d(np.cov(X.T, bias=True))
    return floor_scale * float(np.trace(scatter)) / d


def _init_params(X: np.ndarray, K: int, rng: np.random.Generator,
                 floor: float):
    n, d = X.shape
    centers = _kmeanspp_centers(X, K, rng)
    dists = ((X[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    assign = dists.argmin(axis=1)
    eye = np.eye(d)
    global_cov = np.atleast_2d(np.cov(X.T, bias=True)) + floor * eye
    weights = np.full(K, 1.0 / K)
    means = centers.copy()
    covs = np.empty((K, d, d))
    for g in range(K):
        members = X[assign == g]
        if members.shape[0] > d:
            means[g] = members.mean(axis=0)
            covs[g] = np.atleast_2d(np.cov(members.T, bias=True)) + floor * eye
            weights[g] = members.shape[0] / n
        else:
            covs[g] = global_cov
    weights /= weights.sum()
    return weights, means, covs


def _weighted_log_pdfs(X, weights, means, covs):
    """log w_g + log N(x_n; mu_g, Sigma_g) -> (N, K); raises on singular."""
    n, d = X.shape
    K = weights.shape[0]
    out = np.empty((n, K))
    for g in range(K):
        try:
            chol = np.linalg.cholesky(covs[g])
        except np.linalg.LinAlgError as exc:
            raise FitError(
                f"component {g} covariance collapsed below the floor",
                diagnostics={"component": g,
                             "min_eig": float(np.linalg.eigvalsh(covs[g]).min())},
            ) from exc
        log_det = 2.0 * np.sum(np.log(np.diag(chol)))
        delta = X - means[g]
        sol = np.linalg.solve(chol, delta.T)  # (d, N)
        quad = np.sum(sol ** 2, axis=0)
        out[:, g] = np.log(weights[g]) - 0.5 * (d * LOG_2PI + log_det + quad)
    return out


def fit_em(
    data,
    K: int,
    config: EMConfig = EMConfig(),
    dim_labels: Sequence[str] = (),
    return_trace: bool = False,
):
    """Fit a K-component mixture by EM with k-means++ seeding and restarts.

    The per-iteration log-likelihood is monitored and must never decrease
    beyond a 1e-9 slack; violation raises FitError. Degenerate data that
    drives a covariance below the regularization floor also raises FitError.
    """
    X = np.asarray(data, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    if X.ndim != 2:
        raise InputError(f"data must be (N, d), got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise InputError("data contains non-finite values")
    n, d = X.shape
    if K < 1:
        raise InputError("K must be >= 1")
    if n < K * (d + 1):
        raise InputError(
            f"need at least K*(d+1)={K * (d + 1)} samples, got {n}"
        )

    floor = _data_floor(X, config.cov_floor_scale)
    best = None  # (ll, weights, means, covs, trace)
    failure: Optional[FitError] = None
    for restart in range(max(1, config.n_restarts)):
        rng = np.random.default_rng(config.seed + restart)
        try:
            weights, means, covs = _init_params(X, K, rng, floor)
            ll, weights, means, covs, trace = _em_loop(X, weights, means,
                                                       covs, config, floor)
        except FitError as exc:
            failure = exc
            continue
        if best is None or ll > best[0]:
            best = (ll, weights, means, covs, trace)
    if best is None:
        raise failure if failure is not None else FitError("EM failed")

    _, weights, means, covs, trace = best
    mix = GaussianMixture(
        weights=weights,
        components=tuple(Gaussian(means[g], covs[g]) for g in range(K)),
        dim_labels=tuple(dim_labels),
    )
    if return_trace:
        return mix, trace
    return mix


def _em_loop(X, weights, means, covs, config: EMConfig, floor: float):
    n, d = X.shape
    K = weights.shape[0]
    trace: list[float] = []
    prev_ll = -np.inf
    for _ in range(config.max_iter):
        # E-step with log-sum-exp
        log_wp = _weighted_log_pdfs(X, weights, means, covs)  # (N, K)
        m = log_wp.max(axis=1, keepdims=True)
        log_norms = m[:, 0] + np.log(np.exp(log_wp - m).sum(axis=1))
        ll = float(log_norms.sum())
        resp = np.exp(log_wp - log_norms[:, None])  # (N, K)

        if trace and ll < trace[-1] - 1e-9:
            raise FitError(
                "log-likelihood decreased during EM",
                diagnostics={"iteration": len(trace), "drop": trace[-1] - ll},
            )
        trace.append(ll)
        if np.isfinite(prev_ll) and (
            abs(ll - prev_ll) <= config.tol * max(1.0, abs(prev_ll))
        ):
            break
        prev_ll = ll

        # M-step
        nk = resp.sum(axis=0)  # (K,)
        if np.any(nk < 1e-12):
            raise FitError(
                "a mixture component starved during EM",
                diagnostics={"occupancies": nk.tolist()},
            )
        weights = nk / n
        means = (resp.T @ X) / nk[:, None]
        covs = np.empty((K, d, d))
        eye = np.eye(d)
        for g in range(K):
            delta = X - means[g]
            cov = (delta.T * resp[:, g]) @ delta / nk[g]
            covs[g] = 0.5 * (cov + cov.T) + floor * eye
    return trace[-1], weights, means, covs, trace


def _blocks(comp: Gaussian, spec: ConditioningSpec):
    idx_in = np.asarray(spec.input_dims)
    idx_out = np.asarray(spec.output_dims)
    mu_i = comp.mean[idx_in]
    mu_o = comp.mean[idx_out]
    s_ii = comp.covariance[np.ix_(idx_in, idx_in)]
    s_oi = comp.covariance[np.ix_(idx_out, idx_in)]
    s_oo = comp.covariance[np.ix_(idx_out, idx_out)]
    return mu_i, mu_o, s_ii, s_oi, s_oo


def input_marginal(mix: GaussianMixture, spec: ConditioningSpec) -> GaussianMixture:
    """Marginal mixture over the input dimensions (Gaussian sub-blocks)."""
    spec.validate_against(mix.dim)
    idx = np.asarray(spec.input_dims)
    comps = tuple(
        Gaussian(c.mean[idx], c.covariance[np.ix_(idx, idx)])
        for c in mix.components
    )
    labels = tuple(mix.dim_labels[i] for i in spec.input_dims)
    return GaussianMixture(mix.weights, comps, labels)


def gmr_condition(mix: GaussianMixture, spec: ConditioningSpec, x_in):
    """Exact conditional mean and covariance of output dims given inputs.

    Per-component Gaussian conditioning blended by the responsibilities of
    x_in under the input-marginal mixture; the covariance includes the
    between-component spread term.
    """
    spec.validate_against(mix.dim)
    x = _as_vector(x_in, "x_in")
    if x.shape[0] != len(spec.input_dims):
        raise InputError(
            f"x_in has length {x.shape[0]}, expected {len(spec.input_dims)}"
        )
    K = mix.n_components
    n_out = len(spec.output_dims)
    cond_means = np.empty((K, n_out))
    cond_covs = np.empty((K, n_out, n_out))
    log_h = np.empty(K)
    for g, comp in enumerate(mix.components):
        mu_i, mu_o, s_ii, s_oi, s_oo = _blocks(comp, spec)
        try:
            chol = np.linalg.cholesky(s_ii)
        except np.linalg.LinAlgError as exc:
            raise ModelIntegrityError(
                f"singular input-block covariance in component {g}"
            ) from exc
        delta = x - mu_i
        sol = np.linalg.solve(chol, delta)
        log_det = 2.0 * np.sum(np.log(np.diag(chol)))
        log_h[g] = (
            float(mix._log_weights[g])
            - 0.5 * (len(mu_i) * LOG_2PI + log_det + float(sol @ sol))
        )
        gain = s_oi @ np.linalg.inv(s_ii)  # (n_out, n_in)
        cond_means[g] = mu_o + gain @ delta
        cond_covs[g] = s_oo - gain @ s_oi.T
    log_h -= log_h.max()
    h = np.exp(log_h)
    h /= h.sum()
    mean = h @ cond_means  # (n_out,)
    centered = cond_means - mean
    cov = np.einsum("g,gij->ij", h, cond_covs)
    cov += np.einsum("g,gi,gj->ij", h, centered, centered)
    return mean, cov


def conditional_mean(mix: GaussianMixture, spec: ConditioningSpec,
                     X_in) -> np.ndarray:
    """Vectorized GMR conditional mean for a batch of inputs (N, n_in)."""
    spec.validate_against(mix.dim)
    X = np.atleast_2d(np.asarray(X_in, dtype=np.float64))
    if X.shape[1] != len(spec.input_dims):
        raise InputError(
            f"inputs have width {X.shape[1]}, expected {len(spec.input_dims)}"
        )
    marginal = input_marginal(mix, spec)
    h = responsibilities(marginal, X)  # (N, K)
    n_out = len(spec.output_dims)
    means = np.zeros((X.shape[0], n_out))
    for g, comp in enumerate(mix.components):
        mu_i, mu_o, s_ii, s_oi, _ = _blocks(comp, spec)
        gain = s_oi @ np.linalg.inv(s_ii)
        cond = mu_o + (X - mu_i) @ gain.T  # (N, n_out)
        means += h[:, [g]] * cond
    return means


def sample_mixture(mix: GaussianMixture, n: int, seed: int) -> np.ndarray:
    """Draw n joint samples, deterministic for a fixed seed; shape (n, d)."""
    if n < 1:
        raise InputError("n must be >= 1")
    rng = np.random.default_rng(seed)
    comp_idx = rng.choice(mix.n_components, size=n, p=mix.weights)
    z = rng.standard_normal((n, mix.dim))
    out = np.empty((n, mix.dim))
    for g, comp in enumerate(mix.components):
        mask = comp_idx == g
        if np.any(mask):
            out[mask] = comp.mean + z[mask] @ comp._chol.T
    return out


def mixture_to_document(mix: GaussianMixture) -> dict:
    return {
        "version": MIXTURE_DOC_VERSION,
        "K": mix.n_components,
        "dim_labels": list(mix.dim_labels),
        "weights": [float(w) for w in mix.weights],
        "components": [
            {
                "mean": [float(v) for v in c.mean],
                "covariance": [float(v) for v in c.covariance.ravel()],
            }
            for c in mix.components
        ],
    }


def mixture_from_document(doc: dict) -> GaussianMixture:
    if doc.get("version") != MIXTURE_DOC_VERSION:
        raise FormatError(
            f"unsupported mixture document version {doc.get('version')!r}"
        )
    K = int(doc["K"])
    comps = []
    for entry in doc["components"]:
        mean = np.asarray(entry["mean"], dtype=np.float64)
        d = mean.shape[0]
        cov = np.asarray(entry["covariance"], dtype=np.float64).reshape(d, d)
        comps.append(Gaussian(mean, cov))
    if len(comps) != K:
        raise ModelIntegrityError(f"document lists K={K} but has {len(comps)}")
    return GaussianMixture(
        weights=np.asarray(doc["weights"], dtype=np.float64),
        components=tuple(comps),
        dim_labels=tuple(doc.get("dim_labels") or ()),
    )


def save_mixture(mix: GaussianMixture, path) -> None:
    jsonio.write_document(path, mixture_to_document(mix))


def load_mixture(path) -> GaussianMixture:
    return mixture_from_document(jsonio.read_document(path))
