"""Coupled master/slave dynamical systems.

The master runs its own stable dynamics (or follows an observation
stream); a learned coupling mixture maps a scalar function of the master
state to an inferred slave target; the slave's stable dynamics are then
evaluated in coordinates shifted by that target. With the coupling gain
at zero the slave reduces exactly to its own dynamics, so the stability
certificates carry over for any bounded inferred target.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import jsonio
from .errors import (
    FormatError,
    InputError,
    IntegrationError,
    ModelIntegrityError,
)
from .gaussians import (
    ConditioningSpec,
    EMConfig,
    GaussianMixture,
    conditional_mean,
    fit_em,
    gmr_condition,
    mixture_from_document,
    mixture_to_document,
)
from .seds import (
    SedsConfig,
    StableDS,
    State,
    fit_stable_ds,
    stable_ds_from_document,
    stable_ds_to_document,
    verify_stability,
)
from .trajectories import DemoSet, trim_leading_rest

COUPLED_DOC_VERSION = 1


class CouplingKind(enum.Enum):
    NORM_PROXIMITY = "norm-proximity"
    IDENTITY_HEIGHT = "identity-height"
    IDENTITY = "identity"


@dataclass(frozen=True)
class CouplingFunction:
    """Scalar map from the master state into the coupling space."""

    kind: CouplingKind
    selector: tuple[int, ...]

    def __post_init__(self):
        selector = tuple(int(i) for i in self.selector)
        if not selector:
            raise InputError("coupling selector must name at least one dim")
        if self.kind is not CouplingKind.NORM_PROXIMITY and len(selector) != 1:
            raise InputError(
                f"{self.kind.value} coupling reads exactly one dimension"
            )
        object.__setattr__(self, "selector", selector)

    def __call__(self, master_pos) -> float:
        pos = np.asarray(master_pos, dtype=np.float64)
        if pos.shape[0] <= max(self.selector):
            raise InputError(
                f"master position lacks dimension {max(self.selector)}"
            )
        picked = pos[list(self.selector)]
        if self.kind is CouplingKind.NORM_PROXIMITY:
            return float(np.linalg.norm(picked))
        return float(picked[0])

    def batch(self, positions: np.ndarray) -> np.ndarray:
        picked = positions[:, list(self.selector)]
        if self.kind is CouplingKind.NORM_PROXIMITY:
            return np.linalg.norm(picked, axis=1)
        return picked[:, 0]


@dataclass(frozen=True)
class CouplingModel:
    """Mixture over (psi outputs, slave dims) with its coupling functions."""

    mix: GaussianMixture
    psi: tuple[CouplingFunction, ...]
    slave_dims: tuple[int, ...]

    def __post_init__(self):
        psi = tuple(self.psi)
        slave_dims = tuple(int(i) for i in self.slave_dims)
        if not psi or not slave_dims:
            raise InputError("coupling model needs psi and slave dims")
        if self.mix.dim != len(psi) + len(slave_dims):
            raise ModelIntegrityError(
                f"coupling mixture dimension {self.mix.dim} != "
                f"{len(psi)} psi outputs + {len(slave_dims)} slave dims"
            )
        object.__setattr__(self, "psi", psi)
        object.__setattr__(self, "slave_dims", slave_dims)
        n_in = len(psi)
        spec = ConditioningSpec(
            tuple(range(n_in)), tuple(range(n_in, self.mix.dim))
        )
        object.__setattr__(self, "_spec", spec)

    def psi_values(self, master_pos) -> np.ndarray:
        return np.array([fn(master_pos) for fn in self.psi])

    def psi_batch(self, positions: np.ndarray) -> np.ndarray:
        return np.column_stack([fn.batch(positions) for fn in self.psi])


def infer_slave_target(model: CouplingModel, master_pos) -> np.ndarray:
    """Conditional mean of the slave dims given psi(master position)."""
    mean, _ = gmr_condition(model.mix, model._spec,
                            model.psi_values(master_pos))
    return mean


def infer_slave_target_batch(model: CouplingModel,
                             positions: np.ndarray) -> np.ndarray:
    return conditional_mean(model.mix, model._spec,
                            model.psi_batch(positions))


def _hold_last(positions: np.ndarray, n: int) -> np.ndarray:
    if positions.shape[0] >= n:
        return positions[:n]
    pad = np.tile(positions[-1], (n - positions.shape[0], 1))
    return np.vstack([positions, pad])


def learn_coupling(
    leader_demos: DemoSet,
    follower_demos: DemoSet,
    psi: Sequence[CouplingFunction],
    K: int,
    slave_dims: Optional[Sequence[int]] = None,
    em: EMConfig = EMConfig(),
) -> CouplingModel:
    """EM-fit the coupling mixture over stacked (psi(leader), follower).

    Demo sets must be paired in order; each pair is aligned on absolute
    time by holding the shorter trajectory's final sample, preserving the
    lag structure of the interaction.
    """
    if len(leader_demos) == 0 or len(follower_demos) == 0:
        raise InputError("empty demonstration set")
    if len(leader_demos) != len(follower_demos):
        raise InputError(
            f"unpaired sets: {len(leader_demos)} leader vs "
            f"{len(follower_demos)} follower demos"
        )
    psi = tuple(psi)
    if slave_dims is None:
        slave_dims = tuple(range(follower_demos.dim))
    slave_dims = tuple(int(i) for i in slave_dims)

    rows = []
    for lead, follow in zip(leader_demos.demos, follower_demos.demos):
        n = max(lead.n_samples, follow.n_samples)
        lead_pos = _hold_last(lead.positions, n)
        follow_pos = _hold_last(follow.positions, n)
        psi_vals = np.column_stack([fn.batch(lead_pos) for fn in psi])
        rows.append(np.hstack([psi_vals, follow_pos[:, list(slave_dims)]]))
    stacked = np.vstack(rows)

    labels = tuple(fn.kind.value for fn in psi) + tuple(
        f"slave-{i}" for i in slave_dims
    )
    mix = fit_em(stacked, K, em, dim_labels=labels)
    return CouplingModel(mix=mix, psi=psi, slave_dims=slave_dims)


@dataclass(frozen=True)
class CoupledSystem:
    """Master dynamics + coupling channels + slave dynamics.

    The design keeps one scalar coupling channel per slave dimension
    (proximity and height are separate 2-D mixtures); together the
    channels' slave_dims must cover every slave dimension exactly once.
    """

    master: StableDS
    couplings: tuple[CouplingModel, ...]
    slave: StableDS
    alpha: float = 1.0
    beta: float = 1.0

    def __post_init__(self):
        if self.alpha < 0.0 or self.beta < 0.0:
            raise InputError("alpha and beta must be nonnegative")
        couplings = tuple(self.couplings)
        covered = [dim for ch in couplings for dim in ch.slave_dims]
        if sorted(covered) != list(range(self.slave.dim)):
            raise ModelIntegrityError(
                f"coupling channels cover slave dims {sorted(covered)}, "
                f"expected 0..{self.slave.dim - 1} exactly once"
            )
        for ch in couplings:
            for fn in ch.psi:
                if max(fn.selector) >= self.master.dim:
                    raise ModelIntegrityError(
                        "coupling selector exceeds master dimension"
                    )
        object.__setattr__(self, "couplings", couplings)

    def infer_slave_target(self, master_pos) -> np.ndarray:
        """Assemble the full slave target, one channel per dimension."""
        target = np.empty(self.slave.dim)
        for channel in self.couplings:
            target[list(channel.slave_dims)] = infer_slave_target(
                channel, master_pos
            )
        return target

    def infer_slave_target_batch(self, positions: np.ndarray) -> np.ndarray:
        target = np.empty((positions.shape[0], self.slave.dim))
        for channel in self.couplings:
            target[:, list(channel.slave_dims)] = infer_slave_target_batch(
                channel, positions
            )
        return target


@dataclass(frozen=True)
class InteractionState:
    """Joint state of one coupled session at time t."""

    master: State
    slave: State
    inferred_target: np.ndarray
    t: float

    def __post_init__(self):
        target = np.asarray(self.inferred_target, dtype=np.float64)
        if not np.all(np.isfinite(target)) or not np.isfinite(self.t):
            raise IntegrationError("non-finite interaction state")
        target.setflags(write=False)
        object.__setattr__(self, "inferred_target", target)


def initial_state(sys: CoupledSystem, master_start, slave_start,
                  t: float = 0.0) -> InteractionState:
    master_start = np.asarray(master_start, dtype=np.float64)
    slave_start = np.asarray(slave_start, dtype=np.float64)
    return InteractionState(
        master=State(master_start, np.zeros_like(master_start)),
        slave=State(slave_start, np.zeros_like(slave_start)),
        inferred_target=sys.infer_slave_target(master_start),
        t=t,
    )


def cds_step(
    sys: CoupledSystem,
    st: InteractionState,
    dt: float,
    master_override=None,
) -> InteractionState:
    """One coupled tick: master update, target inference, slave update.

    ``master_override`` switches the master to observation-driven mode:
    its position is replaced by the observed sample (positions only; the
    slave update never reads master velocity). The slave moves with
    velocity beta * f_slave(x_s - alpha * (target - x*_slave)), which
    reduces to the plain slave dynamics when the target sits on the
    slave's own attractor.
    """
    if dt <= 0.0:
        raise InputError("dt must be positive")
    if master_override is not None:
        new_master_pos = np.asarray(master_override, dtype=np.float64)
        if new_master_pos.shape != st.master.position.shape:
            raise InputError("override has wrong dimension")
        master_vel = (new_master_pos - st.master.position) / dt
    else:
        master_vel = sys.master.velocity_at(st.master.position)
        new_master_pos = st.master.position + dt * master_vel

    target = sys.infer_slave_target(new_master_pos)
    shifted = st.slave.position - sys.alpha * (target - sys.slave.attractor)
    slave_vel = sys.beta * sys.slave.velocity_at(shifted)
    new_slave_pos = st.slave.position + dt * slave_vel
    if not (
        np.all(np.isfinite(new_master_pos))
        and np.all(np.isfinite(new_slave_pos))
    ):
        raise IntegrationError(f"non-finite state at t={st.t + dt:.3f}")
    return InteractionState(
        master=State(new_master_pos, master_vel),
        slave=State(new_slave_pos, slave_vel),
        inferred_target=target,
        t=st.t + dt,
    )


def run_interaction(
    sys: CoupledSystem,
    master_start,
    slave_start,
    dt: float,
    max_t: float,
    stop_radius: float,
    master_overrides: Optional[np.ndarray] = None,
) -> tuple[list[InteractionState], bool]:
    """Step the coupled pair until both agents reach their attractors.

    ``master_overrides`` (one row per tick, last row held) switches the
    master to observation-driven mode for the whole run.
    """
    if dt <= 0.0 or stop_radius <= 0.0:
        raise InputError("dt and stop_radius must be positive")
    st = initial_state(sys, master_start, slave_start)
    states = [st]

    def both_converged(state: InteractionState) -> bool:
        return (
            np.linalg.norm(state.master.position - sys.master.attractor)
            < stop_radius
            and np.linalg.norm(state.slave.position - sys.slave.attractor)
            < stop_radius
        )

    if both_converged(st):
        return states, True
    if master_overrides is not None:
        master_overrides = np.atleast_2d(
            np.asarray(master_overrides, dtype=np.float64)
        )
    n_steps = int(np.ceil(max_t / dt - 1e-12))
    for step in range(n_steps):
        override = None
        if master_overrides is not None:
            override = master_overrides[min(step, len(master_overrides) - 1)]
        st = cds_step(sys, st, dt, master_override=override)
        states.append(st)
        if both_converged(st):
            return states, True
    return states, False


def run_interaction_batch(
    sys: CoupledSystem,
    master_starts,
    slave_starts,
    dt: float,
    max_t: float,
    stop_radius: float,
):
    """Vectorized self-driven interactions; returns final positions,
    converged flags, and step counts."""
    P_m = np.array(master_starts, dtype=np.float64)
    P_s = np.array(slave_starts, dtype=np.float64)
    M = P_m.shape[0]
    n_steps = int(np.ceil(max_t / dt - 1e-12))

    def converged_mask(pm, ps):
        return (
            np.linalg.norm(pm - sys.master.attractor, axis=1) < stop_radius
        ) & (np.linalg.norm(ps - sys.slave.attractor, axis=1) < stop_radius)

    converged = converged_mask(P_m, P_s)
    steps = np.where(converged, 0, n_steps)
    active = ~converged
    for step in range(n_steps):
        if not np.any(active):
            break
        pm = P_m[active]
        ps = P_s[active]
        pm = pm + dt * sys.master.velocity_at(pm)
        target = sys.infer_slave_target_batch(pm)
        shifted = ps - sys.alpha * (target - sys.slave.attractor)
        ps = ps + dt * sys.beta * sys.slave.velocity_at(shifted)
        if not (np.all(np.isfinite(pm)) and np.all(np.isfinite(ps))):
            raise IntegrationError(f"non-finite state at step {step}")
        P_m[active] = pm
        P_s[active] = ps
        done = converged_mask(pm, ps)
        if np.any(done):
            idx = np.flatnonzero(active)[done]
            converged[idx] = True
            steps[idx] = step + 1
            active[idx] = False
    return P_m, P_s, converged, steps


def standard_coupling_functions(proximity_dims=(0,), height_dim=1):
    """The default channel pair: normed proximity and raw (signed) height.

    Height stays signed because wrist altitude varies with where the
    motion starts; the norm is only meaningful for the approach distance.
    """
    return (
        CouplingFunction(CouplingKind.NORM_PROXIMITY, tuple(proximity_dims)),
        CouplingFunction(CouplingKind.IDENTITY_HEIGHT, (height_dim,)),
    )


def learn_coupled_system(
    leader_demos: DemoSet,
    follower_demos: DemoSet,
    dynamics_K: int = 6,
    coupling_K: int = 3,
    alpha: float = 1.0,
    beta: float = 1.0,
    seds_config: SedsConfig = SedsConfig(),
    coupling_em: EMConfig = EMConfig(),
):
    """Full 2-D pipeline: master + slave dynamics plus the two coupling
    channels (proximity-norm -> slave proximity, height -> slave height).

    Dynamics are fit on onset-trimmed demos (pre-motion dwell teaches a
    stand-still patch that stalls rollouts); the coupling channels see
    the untrimmed pairs because the dwell-while-leader-approaches phase
    is exactly the relation they encode.

    Returns (CoupledSystem, master FitReport, slave FitReport).
    """
    if leader_demos.dim != 2 or follower_demos.dim != 2:
        raise InputError("coupled pipeline expects 2-D (proximity, height)")
    master, master_report = fit_stable_ds(
        trim_leading_rest(leader_demos), dynamics_K, seds_config
    )
    slave, slave_report = fit_stable_ds(
        trim_leading_rest(follower_demos), dynamics_K, seds_config
    )
    prox_fn, height_fn = standard_coupling_functions()
    proximity = learn_coupling(
        leader_demos, follower_demos, (prox_fn,), coupling_K,
        slave_dims=(0,), em=coupling_em,
    )
    height = learn_coupling(
        leader_demos, follower_demos, (height_fn,), coupling_K,
        slave_dims=(1,), em=coupling_em,
    )
    sys = CoupledSystem(
        master=master,
        couplings=(proximity, height),
        slave=slave,
        alpha=alpha,
        beta=beta,
    )
    return sys, master_report, slave_report


def coupling_to_document(model: CouplingModel) -> dict:
    return {
        "kind": "coupling-model",
        "psi": [
            {"kind": fn.kind.value, "selector": list(fn.selector)}
            for fn in model.psi
        ],
        "slave_dims": list(model.slave_dims),
        "mix": mixture_to_document(model.mix),
    }


def coupling_from_document(doc: dict) -> CouplingModel:
    if doc.get("kind") != "coupling-model":
        raise FormatError("document is not a coupling model")
    psi = tuple(
        CouplingFunction(CouplingKind(entry["kind"]),
                         tuple(entry["selector"]))
        for entry in doc["psi"]
    )
    return CouplingModel(
        mix=mixture_from_document(doc["mix"]),
        psi=psi,
        slave_dims=tuple(doc["slave_dims"]),
    )


def coupled_system_to_document(sys: CoupledSystem) -> dict:
    return {
        "version": COUPLED_DOC_VERSION,
        "kind": "coupled-system",
        "alpha": float(sys.alpha),
        "beta": float(sys.beta),
        "master": stable_ds_to_document(sys.master),
        "slave": stable_ds_to_document(sys.slave),
        "couplings": [coupling_to_document(ch) for ch in sys.couplings],
    }


def coupled_system_from_document(doc: dict) -> CoupledSystem:
    if doc.get("kind") != "coupled-system":
        raise FormatError("document is not a coupled system")
    sys = CoupledSystem(
        master=stable_ds_from_document(doc["master"]),
        couplings=tuple(
            coupling_from_document(entry) for entry in doc["couplings"]
        ),
        slave=stable_ds_from_document(doc["slave"]),
        alpha=float(doc["alpha"]),
        beta=float(doc["beta"]),
    )
    for ds in (sys.master, sys.slave):
        if not verify_stability(ds).passed:
            raise ModelIntegrityError(
                "loaded coupled system fails stability certificates"
            )
    return sys


def save_coupled_system(sys: CoupledSystem, path) -> None:
    jsonio.write_document(path, coupled_system_to_document(sys))


def load_coupled_system(path) -> CoupledSystem:
    return coupled_system_from_document(jsonio.read_document(path))
