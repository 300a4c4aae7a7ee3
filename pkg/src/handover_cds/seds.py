"""Globally stable dynamical systems learned from demonstrations.

The velocity field is a responsibility-blended set of linear maps,
f(x) = sum_g h_g(x) (A_g x + b_g), tied to a joint position-velocity
mixture. Stability is enforced by construction: each A_g is
parameterized as -(L_g L_g^T + margin * I) + S_g with L_g lower
triangular and S_g skew symmetric, so the symmetric part stays negative
definite at every optimizer iterate and b_g = -A_g @ attractor pins the
single equilibrium.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import jsonio
from .errors import (
    FitError,
    FormatError,
    InputError,
    IntegrationError,
    ModelIntegrityError,
)
from .gaussians import (
    ConditioningSpec,
    EMConfig,
    Gaussian,
    GaussianMixture,
    fit_em,
    input_marginal,
    mixture_from_document,
    mixture_to_document,
    responsibilities,
)
from .trajectories import DemoSet, Frame

STABLE_DS_DOC_VERSION = 1

DEFAULT_STABILITY_MARGIN = 1e-3  # 1/s

COV_Q_FLOOR_ABS = 1e-10  # (m/s)^2, keeps the rebuilt joint covariance PD


@dataclass(frozen=True)
class State:
    """Position/velocity pair of one agent in the target frame."""

    position: np.ndarray
    velocity: np.ndarray

    def __post_init__(self):
        pos = np.asarray(self.position, dtype=np.float64)
        vel = np.asarray(self.velocity, dtype=np.float64)
        if pos.shape != vel.shape or pos.ndim != 1:
            raise InputError(
                f"state shapes disagree: {pos.shape} vs {vel.shape}"
            )
        if pos.shape[0] not in (1, 2, 3):
            raise InputError("state dimension must be 1, 2, or 3")
        if not (np.all(np.isfinite(pos)) and np.all(np.isfinite(vel))):
            raise InputError("non-finite state")
        pos.setflags(write=False)
        vel.setflags(write=False)
        object.__setattr__(self, "position", pos)
        object.__setattr__(self, "velocity", vel)

    @property
    def dim(self) -> int:
        return self.position.shape[0]


@dataclass(frozen=True)
class StableDS:
    """Mixture-encoded velocity field with a single attractor."""

    attractor: np.ndarray
    dynamics_mix: GaussianMixture      # joint over (position, velocity)
    linear_A: np.ndarray               # (K, d, d), 1/s
    linear_b: np.ndarray               # (K, d), m/s
    noise_scale: float
    stability_margin: float = DEFAULT_STABILITY_MARGIN

    def __post_init__(self):
        attractor = np.asarray(self.attractor, dtype=np.float64)
        A = np.asarray(self.linear_A, dtype=np.float64)
        b = np.asarray(self.linear_b, dtype=np.float64)
        d = attractor.shape[0]
        K = self.dynamics_mix.n_components
        if self.dynamics_mix.dim != 2 * d:
            raise ModelIntegrityError(
                f"joint mixture dimension {self.dynamics_mix.dim} != 2*{d}"
            )
        if A.shape != (K, d, d) or b.shape != (K, d):
            raise ModelIntegrityError("linear view shapes disagree with K, d")

        # structural consistency: the linear view must be exactly the
        # per-component regression of the joint mixture; the stability
        # inequalities themselves are verify_stability's job so that
        # reports on unstable matrices remain expressible
        for g in range(K):
            comp = self.dynamics_mix.components[g]
            s_pp = comp.covariance[:d, :d]
            s_vp = comp.covariance[d:, :d]
            mu_p, mu_v = comp.mean[:d], comp.mean[d:]
            if np.abs(s_vp - A[g] @ s_pp).max() > 1e-9 * max(
                1.0, float(np.abs(s_vp).max())
            ):
                raise ModelIntegrityError(
                    f"component {g}: mixture blocks inconsistent with A"
                )
            if np.linalg.norm(mu_v - (A[g] @ mu_p + b[g])) > 1e-9:
                raise ModelIntegrityError(
                    f"component {g}: mixture means inconsistent with (A, b)"
                )

        attractor.setflags(write=False)
        A.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "attractor", attractor)
        object.__setattr__(self, "linear_A", A)
        object.__setattr__(self, "linear_b", b)
        spec = ConditioningSpec(tuple(range(d)), tuple(range(d, 2 * d)))
        object.__setattr__(self, "_position_spec", spec)
        object.__setattr__(
            self, "_position_marginal", input_marginal(self.dynamics_mix, spec)
        )

    @property
    def dim(self) -> int:
        return self.attractor.shape[0]

    @property
    def n_components(self) -> int:
        return self.dynamics_mix.n_components

    def velocity_at(self, position) -> np.ndarray:
        """Blended linear field at one position (d,) or a batch (N, d)."""
        pos = np.asarray(position, dtype=np.float64)
        single = pos.ndim == 1
        pos2 = np.atleast_2d(pos)
        if pos2.shape[1] != self.dim:
            raise InputError(
                f"position has dimension {pos2.shape[1]}, model has {self.dim}"
            )
        h = responsibilities(self._position_marginal, pos2)  # (N, K)
        f = np.einsum("nk,kij,nj->ni", h, self.linear_A, pos2)
        f += h @ self.linear_b
        return f[0] if single else f


def velocity_at(ds: StableDS, position) -> np.ndarray:
    return ds.velocity_at(position)


@dataclass(frozen=True)
class FitReport:
    """Digest of one stable-DS fit."""

    objective: float                 # velocity MSE, (m/s)^2
    iterations: int
    margins: np.ndarray              # max eig of A_g + A_g^T per component
    per_demo_rmse: np.ndarray        # m/s
    gradient_norm: float


@dataclass(frozen=True)
class StabilityReport:
    passed: bool
    margins: np.ndarray              # per-component max eig of A + A^T
    offset_errors: np.ndarray        # per-component |b + A attractor|
    stability_margin: float


def verify_stability(ds: StableDS) -> StabilityReport:
    """Re-checks the attractor and negative-definiteness certificates."""
    K = ds.n_components
    margins = np.empty(K)
    offsets = np.empty(K)
    for g in range(K):
        margins[g] = float(
            np.linalg.eigvalsh(ds.linear_A[g] + ds.linear_A[g].T).max()
        )
        offsets[g] = float(
            np.linalg.norm(ds.linear_b[g] + ds.linear_A[g] @ ds.attractor)
        )
    passed = bool(
        np.all(margins <= -ds.stability_margin + 1e-10)
        and np.all(offsets <= 1e-9)
    )
    return StabilityReport(passed, margins, offsets, ds.stability_margin)


@dataclass(frozen=True)
class SedsConfig:
    """Fit settings: EM initialization plus constrained gradient descent."""

    stability_margin: float = DEFAULT_STABILITY_MARGIN
    max_iter: int = 2000
    grad_tol: float = 1e-6
    em: EMConfig = field(default_factory=EMConfig)
    projection_slack: float = 1e-2   # eigenvalue clearance when projecting
    armijo_c: float = 1e-4
    step_grow: float = 1.5
    step_shrink: float = 0.5
    initial_step: float = 1.0


class SedsObjective:
    """Velocity MSE over demo samples as a function of the free parameters.

    Free parameters are, per component, the lower triangle of L_g and the
    strict lower triangle of S_g; responsibilities come from the fixed
    position marginal so the objective is smooth in (L, S) only.
    """

    def __init__(self, positions, velocities, marginal: GaussianMixture,
                 margin: float):
        self.Z = np.asarray(positions, dtype=np.float64)   # (N, d)
        self.V = np.asarray(velocities, dtype=np.float64)  # (N, d)
        self.H = responsibilities(marginal, self.Z)        # (N, K)
        self.K = marginal.n_components
        self.d = self.Z.shape[1]
        self.margin = margin
        self._tril = np.tril_indices(self.d)
        self._skew = np.tril_indices(self.d, -1)
        self.n_tril = len(self._tril[0])
        self.n_skew = len(self._skew[0])
        self.n_params = self.K * (self.n_tril + self.n_skew)

    def pack(self, L: np.ndarray, S_lower: np.ndarray) -> np.ndarray:
        theta = np.empty(self.n_params)
        per = self.n_tril + self.n_skew
        for g in range(self.K):
            theta[g * per:g * per + self.n_tril] = L[g][self._tril]
            theta[g * per + self.n_tril:(g + 1) * per] = S_lower[g]
        return theta

    def unpack(self, theta: np.ndarray):
        per = self.n_tril + self.n_skew
        L = np.zeros((self.K, self.d, self.d))
        S = np.zeros((self.K, self.d, self.d))
        for g in range(self.K):
            L[g][self._tril] = theta[g * per:g * per + self.n_tril]
            S[g][self._skew] = theta[g * per + self.n_tril:(g + 1) * per]
            S[g] = S[g] - S[g].T
        return L, S

    def matrices(self, theta: np.ndarray) -> np.ndarray:
        """A_g = -(L_g L_g^T + margin I) + S_g, always feasible."""
        L, S = self.unpack(theta)
        eye = np.eye(self.d)
        return -(L @ np.transpose(L, (0, 2, 1)) + self.margin * eye) + S

    def _errors(self, A: np.ndarray) -> np.ndarray:
        f = np.einsum("nk,kij,nj->ni", self.H, A, self.Z)
        return f - self.V

    def value(self, theta: np.ndarray) -> float:
        err = self._errors(self.matrices(theta))
        return float(np.sum(err**2) / self.Z.shape[0])

    def gradient(self, theta: np.ndarray) -> np.ndarray:
        L, S = self.unpack(theta)
        eye = np.eye(self.d)
        A = -(L @ np.transpose(L, (0, 2, 1)) + self.margin * eye) + S
        err = self._errors(A)  # (N, d)
        G = (2.0 / self.Z.shape[0]) * np.einsum(
            "nk,ni,nj->kij", self.H, err, self.Z
        )
        grad = np.empty(self.n_params)
        per = self.n_tril + self.n_skew
        for g in range(self.K):
            dL = -(G[g] + G[g].T) @ L[g]
            dS = G[g] - G[g].T
            grad[g * per:g * per + self.n_tril] = dL[self._tril]
            grad[g * per + self.n_tril:(g + 1) * per] = dS[self._skew]
        return grad

    def project(self, A: np.ndarray, slack: float) -> np.ndarray:
        """Free parameters of the feasible matrices nearest to raw A_g."""
        L = np.zeros((self.K, self.d, self.d))
        S_lower = np.zeros((self.K, self.n_skew))
        for g in range(self.K):
            sym = 0.5 * (A[g] + A[g].T)
            skew = 0.5 * (A[g] - A[g].T)
            eigvals, eigvecs = np.linalg.eigh(sym)
            eigvals = np.minimum(eigvals, -(self.margin + slack))
            target = -(eigvecs * eigvals) @ eigvecs.T - self.margin * np.eye(self.d)
            L[g] = np.linalg.cholesky(0.5 * (target + target.T))
            S_lower[g] = skew[self._skew]
        return self.pack(L, S_lower)


def _descend(obj: SedsObjective, theta: np.ndarray, config: SedsConfig):
    """Deterministic gradient descent with backtracking line search."""
    value = obj.value(theta)
    step = config.initial_step
    iterations = 0
    grad_norm = np.inf
    for iterations in range(1, config.max_iter + 1):
        grad = obj.gradient(theta)
        grad_norm = float(np.linalg.norm(grad))
        if grad_norm <= config.grad_tol:
            iterations -= 1
            break
        accepted = False
        while step > 1e-18:
            candidate = theta - step * grad
            cand_value = obj.value(candidate)
            if cand_value <= value - config.armijo_c * step * grad_norm**2:
                theta, value = candidate, cand_value
                step *= config.step_grow
                accepted = True
                break
            step *= config.step_shrink
        if not accepted:
            break  # no descent direction at float precision
    return theta, value, iterations, grad_norm


def _stack_demo_samples(demos: DemoSet):
    positions = np.vstack([d.positions for d in demos.demos])
    velocities = np.vstack([d.velocities for d in demos.demos])
    return positions, velocities


def fit_stable_ds(
    demos: DemoSet, K: int, config: SedsConfig = SedsConfig()
) -> tuple[StableDS, FitReport]:
    """Fit a stable velocity field to preprocessed demonstrations.

    Demos must be in the target frame with velocities populated. The joint
    (position, velocity) mixture is EM-fit, its per-component regressions
    are projected to the stable parameterization, and the velocity MSE is
    minimized over the free parameters. The returned mixture is rebuilt so
    its conditional mean is exactly the blended linear field.
    """
    if len(demos) < 2:
        raise InputError("need at least 2 demonstrations")
    if any(d.velocities is None for d in demos.demos):
        raise InputError("demonstrations lack velocities; run preprocess")
    if any(d.frame is not Frame.TARGET for d in demos.demos):
        raise InputError("demonstrations are not in the target frame")
    if float(np.linalg.norm(demos.handover_point)) > 1e-6:
        raise InputError("attractor is not at the origin; run preprocess")

    positions, velocities = _stack_demo_samples(demos)
    d = positions.shape[1]
    attractor = np.zeros(d)

    joint = np.hstack([positions, velocities])  # (N, 2d)
    labels = tuple(f"position-{i}" for i in range(d)) + tuple(
        f"velocity-{i}" for i in range(d)
    )
    mix0 = fit_em(joint, K, config.em, dim_labels=labels)

    pos_spec = ConditioningSpec(tuple(range(d)), tuple(range(d, 2 * d)))
    marginal = input_marginal(mix0, pos_spec)
    obj = SedsObjective(positions, velocities, marginal,
                        config.stability_margin)

    # unconstrained per-component regression, projected to feasibility
    A_raw = np.empty((K, d, d))
    for g, comp in enumerate(mix0.components):
        s_pp = comp.covariance[:d, :d]
        s_vp = comp.covariance[d:, :d]
        A_raw[g] = s_vp @ np.linalg.inv(s_pp)
    theta = obj.project(A_raw, config.projection_slack)

    theta, objective, iterations, grad_norm = _descend(obj, theta, config)
    A = obj.matrices(theta)
    b = -np.einsum("kij,j->ki", A, attractor)

    ds = _assemble_stable_ds(
        mix0, marginal, A, b, attractor, positions, velocities, obj.H,
        config.stability_margin, labels,
    )
    stability = verify_stability(ds)
    if not stability.passed:
        raise FitError(
            "fitted system failed the stability certificates",
            diagnostics={"margins": stability.margins.tolist()},
        )
    per_demo = np.array([
        float(np.sqrt(np.mean(np.sum(
            (ds.velocity_at(demo.positions) - demo.velocities) ** 2, axis=1
        ))))
        for demo in demos.demos
    ])
    margins = stability.margins
    report = FitReport(
        objective=objective,
        iterations=iterations,
        margins=margins,
        per_demo_rmse=per_demo,
        gradient_norm=grad_norm,
    )
    return ds, report


def _assemble_stable_ds(mix0, marginal, A, b, attractor, positions,
                        velocities, H, margin, labels) -> StableDS:
    """Rebuild the joint mixture so GMR through it equals the linear view."""
    K, d = b.shape
    residual_sq = 0.0
    comps = []
    for g in range(K):
        mu_p = mix0.components[g].mean[:d]
        s_pp = mix0.components[g].covariance[:d, :d]
        mu_v = A[g] @ mu_p + b[g]
        cross = s_pp @ A[g].T              # (d, d), upper-right block
        res = velocities - (positions @ A[g].T + b[g])  # (N, d)
        w = H[:, g]
        q = (res.T * w) @ res / max(w.sum(), 1e-300)
        q = 0.5 * (q + q.T)
        q += max(COV_Q_FLOOR_ABS, 1e-8 * float(np.trace(q)) / d) * np.eye(d)
        s_vv = A[g] @ cross + q
        s_vv = 0.5 * (s_vv + s_vv.T)
        cov = np.block([[s_pp, cross], [cross.T, s_vv]])
        comps.append(Gaussian(np.concatenate([mu_p, mu_v]), cov))
        residual_sq += float(w @ np.sum(res**2, axis=1))
    mix = GaussianMixture(mix0.weights, tuple(comps), labels)
    noise_scale = float(
        np.sqrt(residual_sq / (positions.shape[0] * d))
    )
    return StableDS(
        attractor=attractor,
        dynamics_mix=mix,
        linear_A=A,
        linear_b=b,
        noise_scale=noise_scale,
        stability_margin=margin,
    )


def integrate(
    ds: StableDS,
    start,
    dt: float,
    max_t: float,
    stop_radius: float,
    perturb: Optional[tuple[float, np.ndarray]] = None,
) -> tuple[list[State], bool]:
    """Forward-Euler rollout until the attractor ball or the time budget.

    ``perturb`` optionally displaces the state by a vector at a given
    simulation time, for recovery experiments.
    """
    if dt <= 0.0 or stop_radius <= 0.0:
        raise InputError("dt and stop_radius must be positive")
    pos = np.asarray(start, dtype=np.float64).copy()
    if pos.shape != ds.attractor.shape:
        raise InputError("start has wrong dimension")
    perturb_step = None
    if perturb is not None:
        perturb_step = int(round(perturb[0] / dt))
    states = [State(pos.copy(), ds.velocity_at(pos))]
    if np.linalg.norm(pos - ds.attractor) < stop_radius:
        return states, True
    n_steps = int(np.ceil(max_t / dt - 1e-12))
    for step in range(n_steps):
        if perturb_step is not None and step == perturb_step:
            pos = pos + perturb[1]
        vel = ds.velocity_at(pos)
        pos = pos + dt * vel
        if not np.all(np.isfinite(pos)):
            raise IntegrationError(f"non-finite state at t={step * dt:.3f}")
        states.append(State(pos.copy(), ds.velocity_at(pos)))
        if np.linalg.norm(pos - ds.attractor) < stop_radius:
            return states, True
    return states, False


def integrate_batch(
    ds: StableDS,
    starts,
    dt: float,
    max_t: float,
    stop_radius: float,
    perturb_step=None,
    perturb_delta=None,
):
    """Vectorized rollouts; returns (final positions, converged, steps).

    ``perturb_step`` (per-rollout step indices) plus ``perturb_delta``
    (per-rollout displacement vectors) inject one displacement each.
    steps[i] is the step count at convergence, or the step budget.
    """
    if dt <= 0.0 or stop_radius <= 0.0:
        raise InputError("dt and stop_radius must be positive")
    P = np.array(starts, dtype=np.float64)  # (M, d)
    M = P.shape[0]
    if perturb_step is not None:
        perturb_step = np.asarray(perturb_step)
        perturb_delta = np.asarray(perturb_delta, dtype=np.float64)
    n_steps = int(np.ceil(max_t / dt - 1e-12))
    converged = (
        np.linalg.norm(P - ds.attractor, axis=1) < stop_radius
    )
    steps = np.where(converged, 0, n_steps)
    active = ~converged
    for step in range(n_steps):
        if not np.any(active):
            break
        if perturb_step is not None:
            hit = active & (perturb_step == step)
            if np.any(hit):
                P[hit] += perturb_delta[hit]
        vel = ds.velocity_at(P[active])
        P[active] += dt * vel
        if not np.all(np.isfinite(P[active])):
            raise IntegrationError(f"non-finite state at step {step}")
        dist = np.linalg.norm(P[active] - ds.attractor, axis=1)
        done = dist < stop_radius
        if np.any(done):
            idx = np.flatnonzero(active)[done]
            converged[idx] = True
            steps[idx] = step + 1
            active[idx] = False
    return P, converged, steps


def stable_ds_to_document(ds: StableDS) -> dict:
    doc = mixture_to_document(ds.dynamics_mix)
    doc.update(
        {
            "version": STABLE_DS_DOC_VERSION,
            "kind": "stable-ds",
            "attractor": [float(v) for v in ds.attractor],
            "stability_margin": float(ds.stability_margin),
            "noise_scale": float(ds.noise_scale),
            "linear_A": [
                [float(v) for v in ds.linear_A[g].ravel()]
                for g in range(ds.n_components)
            ],
            "linear_b": [
                [float(v) for v in ds.linear_b[g]]
                for g in range(ds.n_components)
            ],
        }
    )
    return doc


def stable_ds_from_document(doc: dict) -> StableDS:
    if doc.get("kind") != "stable-ds":
        raise FormatError("document is not a stable-ds bundle")
    mix = mixture_from_document({k: doc[k] for k in
                                 ("version", "K", "dim_labels", "weights",
                                  "components")})
    attractor = np.asarray(doc["attractor"], dtype=np.float64)
    d = attractor.shape[0]
    K = mix.n_components
    A = np.asarray(doc["linear_A"], dtype=np.float64).reshape(K, d, d)
    b = np.asarray(doc["linear_b"], dtype=np.float64).reshape(K, d)
    return StableDS(
        attractor=attractor,
        dynamics_mix=mix,
        linear_A=A,
        linear_b=b,
        noise_scale=float(doc["noise_scale"]),
        stability_margin=float(doc["stability_margin"]),
    )


def save_stable_ds(ds: StableDS, path) -> None:
    jsonio.write_document(path, stable_ds_to_document(ds))


def load_stable_ds(path) -> StableDS:
    ds = stable_ds_from_document(jsonio.read_document(path))
    report = verify_stability(ds)
    if not report.passed:
        raise ModelIntegrityError(
            "loaded dynamics fail the stability certificates "
            f"(margins {report.margins})"
        )
    return ds
