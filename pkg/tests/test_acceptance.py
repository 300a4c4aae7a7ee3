"""Acceptance criteria, one test per criterion, each printing a verdict.

Run with ``pytest tests/test_acceptance.py -s`` to see the per-criterion
lines. Tolerances and budgets are pinned here and must not be loosened.
"""

import json
import socket
import threading
import time
from contextlib import contextmanager

import numpy as np
import pytest

from conftest import make_linear_ds
from test_gaussians import quadrature_conditional_mean

from handover_cds.cds import (
    CoupledSystem,
    CouplingFunction,
    CouplingKind,
    CouplingModel,
    cds_step,
    infer_slave_target,
    initial_state,
)
from handover_cds.gaussians import (
    ConditioningSpec,
    EMConfig,
    Gaussian,
    GaussianMixture,
    fit_em,
    gmr_condition,
    input_marginal,
)
from handover_cds.recognition import (
    CausalVelocityEstimator,
    IntentLabel,
    StreamClassifier,
    _trial_prediction,
)
from handover_cds.seds import (
    SedsObjective,
    integrate,
    integrate_batch,
    verify_stability,
)
from handover_cds.trajectories import (
    generate_place_then_handover,
    generate_synthetic_handover,
    generate_synthetic_place,
    preprocess,
    project_yz,
)
from handover_cds.wire import LeaderSample, encode_message

ROLLOUT_SEED = 7


@contextmanager
def criterion(name):
    try:
        yield
    except BaseException:
        print(f"\n[ACCEPTANCE] {name}: FAIL")
        raise
    print(f"\n[ACCEPTANCE] {name}: PASS")


def scaled_box(demo_set, scale=2.0):
    lo, hi = demo_set.bounding_box()
    center, half = (lo + hi) / 2.0, (hi - lo) / 2.0
    return center - scale * half, center + scale * half


class TestStabilitySuite:
    def test_stability(self, leader_ds, follower_ds, processed_pair):
        with criterion("stability: certificates + 100/100 rollouts <= 10 s"):
            start = time.monotonic()
            rng = np.random.default_rng(ROLLOUT_SEED)
            for ds, demos in ((leader_ds, processed_pair[0]),
                              (follower_ds, processed_pair[1])):
                assert verify_stability(ds).passed
                lo, hi = scaled_box(demos)
                starts = rng.uniform(lo, hi, size=(100, 2))
                _, converged, steps = integrate_batch(
                    ds, starts, dt=1e-3, max_t=10.0, stop_radius=0.01
                )
                assert int(converged.sum()) == 100
                assert float(steps.max()) * 1e-3 <= 10.0
            elapsed = time.monotonic() - start
            assert elapsed < 60.0, f"stability suite took {elapsed:.1f}s"

    def test_lyapunov_decrease(self, leader_ds):
        with criterion("stability: Lyapunov decrease along rollouts"):
            states, _ = integrate(leader_ds, [0.5, 0.15], dt=1e-3,
                                  max_t=10.0, stop_radius=0.01)
            V = np.array([
                float(np.sum((s.position - leader_ds.attractor) ** 2))
                for s in states
            ])
            assert np.all(np.diff(V) < 1e-6)


class TestPerturbationSuite:
    def test_perturbation_recovery(self, leader_ds, processed_pair):
        with criterion("perturbation: 50/50 converge, extra time < 3 s"):
            rng = np.random.default_rng(ROLLOUT_SEED + 1)
            lo, hi = scaled_box(processed_pair[0])
            starts = rng.uniform(lo, hi, size=(50, 2))
            _, base_conv, base_steps = integrate_batch(
                leader_ds, starts, dt=1e-3, max_t=10.0, stop_radius=0.01
            )
            assert base_conv.all()
            directions = rng.normal(size=(50, 2))
            directions /= np.linalg.norm(directions, axis=1, keepdims=True)
            _, pert_conv, pert_steps = integrate_batch(
                leader_ds, starts, dt=1e-3, max_t=13.0, stop_radius=0.01,
                perturb_step=base_steps // 2,
                perturb_delta=0.10 * directions,
            )
            assert int(pert_conv.sum()) == 50
            extra = (pert_steps - base_steps) * 1e-3
            assert float(extra.max()) < 3.0


class TestGmrOracle:
    def test_quadrature_equivalence(self):
        with criterion("gmr: quadrature oracle within 1e-6 on 11-pt grids"):
            rng = np.random.default_rng(31)

            def random_cov(d):
                A = rng.normal(size=(d, d))
                return A @ A.T + (0.4 + rng.random()) * np.eye(d)

            def random_mixture(d, K):
                comps = tuple(
                    Gaussian(rng.normal(scale=1.5, size=d), random_cov(d))
                    for _ in range(K)
                )
                w = rng.random(K) + 0.5
                return GaussianMixture(w / w.sum(), comps)

            cases = [
                (random_mixture(2, 1), ConditioningSpec((0,), (1,))),
                (random_mixture(2, 2), ConditioningSpec((0,), (1,))),
                (random_mixture(2, 3), ConditioningSpec((1,), (0,))),
                (random_mixture(3, 2), ConditioningSpec((0, 1), (2,))),
                (random_mixture(3, 3), ConditioningSpec((2,), (0, 1))),
            ]
            for mix, spec in cases:
                for u in np.linspace(-1.5, 1.5, 11):
                    x_in = np.full(len(spec.input_dims), u)
                    mean, _ = gmr_condition(mix, spec, x_in)
                    oracle = quadrature_conditional_mean(mix, spec, x_in)
                    assert np.abs(mean - oracle).max() < 1e-6


class TestEmOracle:
    def test_two_component_recovery(self):
        with criterion("em: generator recovered within 0.15 / 0.05, < 10 s"):
            start = time.monotonic()
            rng = np.random.default_rng(123)
            n = 2000
            comp = rng.random(n) < 0.5
            data = np.where(comp, rng.normal(5.0, 1.0, n),
                            rng.normal(-5.0, 1.0, n))[:, None]
            mix = fit_em(data, K=2, config=EMConfig(seed=7))
            order = np.argsort([c.mean[0] for c in mix.components])
            means = np.array([mix.components[g].mean[0] for g in order])
            weights = mix.weights[order]
            assert abs(means[0] + 5.0) <= 0.15
            assert abs(means[1] - 5.0) <= 0.15
            assert abs(weights[0] - 0.5) <= 0.05
            assert abs(weights[1] - 0.5) <= 0.05
            assert time.monotonic() - start < 10.0


class TestGradientCheck:
    def test_analytic_vs_central_differences(self, processed_pair):
        with criterion("gradient: analytic vs central FD rel err < 1e-4"):
            demos = processed_pair[0]
            positions = np.vstack([d.positions for d in demos.demos])
            velocities = np.vstack([d.velocities for d in demos.demos])
            joint = np.hstack([positions, velocities])
            mix = fit_em(joint, K=2, config=EMConfig(seed=2, n_restarts=2))
            marginal = input_marginal(mix, ConditioningSpec((0, 1), (2, 3)))
            obj = SedsObjective(positions, velocities, marginal, margin=1e-3)
            rng = np.random.default_rng(77)
            h = 1e-6
            for _ in range(10):
                theta = rng.normal(scale=0.7, size=obj.n_params)
                grad = obj.gradient(theta)
                fd = np.empty_like(grad)
                for i in range(theta.size):
                    up, down = theta.copy(), theta.copy()
                    up[i] += h
                    down[i] -= h
                    fd[i] = (obj.value(up) - obj.value(down)) / (2.0 * h)
                rel = np.linalg.norm(grad - fd) / max(np.linalg.norm(fd),
                                                      1e-12)
                assert rel < 1e-4


def zero_target_channel(slave_dim: int) -> CouplingModel:
    comp = Gaussian([0.25, 0.0], [[0.05, 0.0], [0.0, 0.02]])
    mix = GaussianMixture(np.array([1.0]), (comp,))
    return CouplingModel(
        mix=mix,
        psi=(CouplingFunction(CouplingKind.IDENTITY, (slave_dim,)),),
        slave_dims=(slave_dim,),
    )


class TestCdsDecoupling:
    def test_decoupling_identity(self):
        with criterion("cds: decoupled slave step bit-for-bit"):
            master = make_linear_ds(-np.eye(2), np.zeros(2))
            slave = make_linear_ds(
                np.array([[-1.4, 0.6], [-0.6, -0.9]]), np.zeros(2)
            )
            system = CoupledSystem(
                master=master,
                couplings=(zero_target_channel(0), zero_target_channel(1)),
                slave=slave,
            )
            rng = np.random.default_rng(3)
            for _ in range(20):
                slave_start = rng.uniform(-0.5, 0.5, size=2)
                st = initial_state(system, np.zeros(2), slave_start)
                assert np.all(st.inferred_target == slave.attractor)
                stepped = cds_step(system, st, dt=1e-3)
                states, _ = integrate(slave, slave_start, dt=1e-3,
                                      max_t=1e-3, stop_radius=1e-12)
                assert np.array_equal(stepped.slave.position,
                                      states[1].position)

    def test_beta_zero_displacement(self, coupled_system):
        with criterion("cds: beta=0 slave displacement exactly zero"):
            from dataclasses import replace

            frozen = replace(coupled_system, beta=0.0)
            st = initial_state(frozen, np.array([0.45, 0.12]),
                               np.array([-0.4, 0.08]))
            for _ in range(25):
                new = cds_step(frozen, st, dt=1e-3)
                assert np.array_equal(new.slave.position, st.slave.position)
                st = new


class TestCouplingMonotonicity:
    def test_proximity_grid(self, coupled_system):
        with criterion(
            "coupling: slave target distance non-increasing over grid"
        ):
            grid = [0.4, 0.3, 0.2, 0.1, 0.05, 0.02]
            channel = coupled_system.couplings[0]
            dist = [
                abs(float(
                    infer_slave_target(channel, np.array([g, 0.0]))[0]
                ))
                for g in grid
            ]
            for nearer, farther in zip(dist[1:], dist[:-1]):
                assert nearer <= farther + 1e-3


class TestRecognition:
    def test_accuracy_and_sequence(self, leader_ds, model_bundle):
        with criterion(
            "recognition: >= 95% on 200 trials + single transition, < 30 s"
        ):
            start = time.monotonic()
            config = model_bundle.recognizer
            ev_h, _ = generate_synthetic_handover(100, seed=2900)
            ev_p = generate_synthetic_place(100, seed=2901)
            handover_trials = project_yz(preprocess(ev_h, 50.0), 1, 2)
            place_trials = project_yz(preprocess(ev_p, 50.0), 1, 2)
            hits = sum(
                _trial_prediction(leader_ds, config, d)
                for d in handover_trials.demos
            ) + sum(
                not _trial_prediction(leader_ds, config, d)
                for d in place_trials.demos
            )
            accuracy = hits / 200.0
            assert accuracy >= 0.95, f"accuracy {accuracy:.3f}"

            t, raw_pos, segment = generate_place_then_handover(seed=77)
            estimator = CausalVelocityEstimator()
            classifier = StreamClassifier(leader_ds, config)
            labels = []
            for ti, p in zip(t, raw_pos):
                sample = estimator.update(float(ti), p)
                est = classifier.update(float(ti), sample)
                labels.append(est.label is IntentLabel.HANDOVER)
            flips = np.diff(np.asarray(labels).astype(int))
            assert (flips == 1).sum() == 1
            assert (flips == -1).sum() == 0
            assert not np.asarray(labels)[segment == 0].any()
            assert time.monotonic() - start < 30.0


def scenario_stream(seed=77, hold_ticks=150):
    t, pos, _ = generate_place_then_handover(seed=seed)
    samples = [(float(ti), float(p[0]), float(p[1]))
               for ti, p in zip(t, pos)]
    t_end, y_end, z_end = samples[-1]
    samples += [(t_end + (i + 1) * 0.02, y_end, z_end)
                for i in range(hold_ticks)]
    return samples


class TestService:
    def test_gated_replay_over_tcp(self, tcp_service, model_bundle):
        with criterion(
            "service: gated place-then-handover replay over TCP"
        ):
            host, port = tcp_service["tcp"]
            samples = scenario_stream()
            replies = []
            with socket.create_connection((host, port)) as sock:
                sock.settimeout(10.0)
                file = sock.makefile("rwb")
                for t, y, z in samples:
                    file.write(encode_message(
                        LeaderSample(t=t, y=y, z=z)
                    ).encode())
                    file.flush()
                    replies.append(json.loads(file.readline()))
            followers = [r for r in replies if r["type"] == "follower"]
            intents = [r["intent"] for r in followers]
            ups = sum(
                1 for a, b in zip(intents, intents[1:])
                if a == "other" and b == "handover"
            )
            assert ups == 1
            gate = model_bundle.recognizer.proximity_gate
            for i in range(1, len(followers)):
                if intents[i] != "other":
                    continue
                leader_dist = float(np.hypot(samples[i][1], samples[i][2]))
                if leader_dist <= gate:
                    continue
                step = float(np.hypot(
                    followers[i]["y"] - followers[i - 1]["y"],
                    followers[i]["z"] - followers[i - 1]["z"],
                ))
                assert step <= 1e-3
            final = followers[-1]
            assert float(np.hypot(final["y"], final["z"])) <= 0.01

    def test_fuzz_one_million_lines(self, tcp_service):
        with criterion("service: 1e6 malformed lines, zero crashes"):
            import random

            rng = random.Random(99)
            host, port = tcp_service["tcp"]
            with socket.create_connection((host, port)) as sock:
                sock.settimeout(60.0)
                stop = []

                def drain():
                    try:
                        while not stop:
                            if not sock.recv(1 << 20):
                                break
                    except OSError:
                        pass

                drainer = threading.Thread(target=drain, daemon=True)
                drainer.start()
                payload = bytearray()
                for _ in range(1_000_000):
                    n = rng.randrange(0, 32)
                    payload += bytes(
                        rng.randrange(32, 127) for _ in range(n)
                    ) + b"\n"
                    if len(payload) > 1 << 18:
                        sock.sendall(payload)
                        payload.clear()
                sock.sendall(payload)
                time.sleep(0.3)
                stop.append(True)
            assert tcp_service["proc"].poll() is None
            with socket.create_connection((host, port)) as sock:
                sock.settimeout(5.0)
                line = sock.makefile("rb").readline()
                assert json.loads(line)["type"] == "follower"

    def test_tick_spacing_10s(self, tcp_service):
        with criterion("service: tick spacing 20 ms +/- 2 ms over 10 s"):
            host, port = tcp_service["tcp"]
            with socket.create_connection((host, port)) as sock:
                sock.settimeout(5.0)
                deadline = time.monotonic() + 10.0
                arrivals = []
                buf = b""
                while time.monotonic() < deadline:
                    chunk = sock.recv(65536)
                    now = time.monotonic()
                    buf += chunk
                    while b"\n" in buf:
                        _, buf = buf.split(b"\n", 1)
                        arrivals.append(now)
            spacing = np.diff(arrivals[5:])
            mean = float(np.mean(spacing))
            assert abs(mean - 0.020) <= 0.002, f"mean spacing {mean * 1e3:.2f} ms"
