"""Shared fixtures: synthetic datasets and trained models, fit once."""

import numpy as np
import pytest

from handover_cds.gaussians import Gaussian, GaussianMixture
from handover_cds.seds import SedsConfig, StableDS, fit_stable_ds
from handover_cds.trajectories import (
    generate_synthetic_handover,
    preprocess,
    project_yz,
    trim_leading_rest,
)

TRAIN_SEED = 101
TRAIN_PAIRS = 24


def make_linear_ds(A_list, attractor, centers=None, spread=0.05,
                   weights=None, q=1e-6, stability_margin=1e-3) -> StableDS:
    """Hand-built StableDS with a consistent joint mixture.

    Each component's velocity blocks are derived from its A so the
    regression through the mixture reproduces the linear view exactly.
    """
    A = np.asarray(A_list, dtype=np.float64)
    if A.ndim == 2:
        A = A[None]
    K, d, _ = A.shape
    attractor = np.asarray(attractor, dtype=np.float64)
    if centers is None:
        centers = np.tile(attractor, (K, 1))
    centers = np.asarray(centers, dtype=np.float64)
    if weights is None:
        weights = np.full(K, 1.0 / K)
    b = -np.einsum("kij,j->ki", A, attractor)
    comps = []
    for g in range(K):
        s_pp = spread * np.eye(d)
        mu_v = A[g] @ centers[g] + b[g]
        cross = s_pp @ A[g].T
        s_vv = A[g] @ cross + q * np.eye(d)
        cov = np.block([[s_pp, cross], [cross.T, 0.5 * (s_vv + s_vv.T)]])
        comps.append(Gaussian(np.concatenate([centers[g], mu_v]), cov))
    mix = GaussianMixture(np.asarray(weights, float), tuple(comps))
    return StableDS(
        attractor=attractor,
        dynamics_mix=mix,
        linear_A=A,
        linear_b=b,
        noise_scale=float(np.sqrt(q)),
        stability_margin=stability_margin,
    )


@pytest.fixture(scope="session")
def synthetic_world_sets():
    return generate_synthetic_handover(TRAIN_PAIRS, seed=TRAIN_SEED)


@pytest.fixture(scope="session")
def processed_pair(synthetic_world_sets):
    leader, follower = synthetic_world_sets
    leader2d = project_yz(preprocess(leader, 50.0), 1, 2)
    follower2d = project_yz(preprocess(follower, 50.0), 1, 2)
    return leader2d, follower2d


@pytest.fixture(scope="session")
def leader_fit(processed_pair):
    # dynamics fit on onset-trimmed demos, matching learn_coupled_system
    return fit_stable_ds(trim_leading_rest(processed_pair[0]), K=6,
                         config=SedsConfig())


@pytest.fixture(scope="session")
def leader_ds(leader_fit):
    return leader_fit[0]


@pytest.fixture(scope="session")
def follower_fit(processed_pair):
    return fit_stable_ds(trim_leading_rest(processed_pair[1]), K=6,
                         config=SedsConfig())


@pytest.fixture(scope="session")
def follower_ds(follower_fit):
    return follower_fit[0]


@pytest.fixture(scope="session")
def calibration_sets():
    from handover_cds.trajectories import generate_synthetic_place

    handover, _ = generate_synthetic_handover(40, seed=500)
    place = generate_synthetic_place(40, seed=501)
    handover2d = project_yz(preprocess(handover, 50.0), 1, 2)
    place2d = project_yz(preprocess(place, 50.0), 1, 2)
    return handover2d, place2d


@pytest.fixture(scope="session")
def recognizer(leader_ds, calibration_sets):
    from handover_cds.recognition import calibrate_recognizer

    handover2d, place2d = calibration_sets
    return calibrate_recognizer(leader_ds, handover2d, place2d)


@pytest.fixture(scope="session")
def coupled_system(processed_pair, leader_ds, follower_ds):
    from handover_cds.cds import (
        CoupledSystem,
        learn_coupling,
        standard_coupling_functions,
    )

    leader2d, follower2d = processed_pair
    prox_fn, height_fn = standard_coupling_functions()
    proximity = learn_coupling(leader2d, follower2d, (prox_fn,), K=3,
                               slave_dims=(0,))
    height = learn_coupling(leader2d, follower2d, (height_fn,), K=3,
                            slave_dims=(1,))
    return CoupledSystem(
        master=leader_ds, couplings=(proximity, height), slave=follower_ds,
        alpha=1.0, beta=1.0,
    )


@pytest.fixture(scope="session")
def bundle_dir(tmp_path_factory, coupled_system, recognizer, processed_pair):
    from handover_cds.bundle import save_bundle
    from handover_cds.recognition import recognizer_to_document

    leader2d, follower2d = processed_pair
    config, report = recognizer
    out = tmp_path_factory.mktemp("bundle")
    follower_rest = np.mean(
        [d.positions[0] for d in follower2d.demos], axis=0
    )
    leader_start = np.mean([d.positions[0] for d in leader2d.demos], axis=0)
    save_bundle(
        out, coupled_system, recognizer_to_document(config, report),
        follower_rest,
        extra_meta={
            "leader_start": [float(v) for v in leader_start],
            "seed": TRAIN_SEED,
            "hz": 50.0,
        },
    )
    return out


@pytest.fixture(scope="session")
def model_bundle(bundle_dir):
    from handover_cds.bundle import load_bundle

    return load_bundle(bundle_dir)


@pytest.fixture(scope="session")
def tcp_service(bundle_dir):
    """The streaming service as a real subprocess with TCP + WS listeners."""
    import re
    import subprocess
    import sys

    proc = subprocess.Popen(
        [sys.executable, "-m", "handover_cds", "serve",
         "--models", str(bundle_dir),
         "--listen", "127.0.0.1:0", "--ws-listen", "127.0.0.1:0"],
        stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True,
    )
    line = proc.stdout.readline()
    match = re.search(r"tcp=([\d.]+):(\d+)", line)
    ws_match = re.search(r"ws=([\d.]+):(\d+)", line)
    if not match:
        proc.terminate()
        raise RuntimeError(f"service did not report its port: {line!r}")
    yield {
        "proc": proc,
        "tcp": (match.group(1), int(match.group(2))),
        "ws": (ws_match.group(1), int(ws_match.group(2))),
    }
    proc.terminate()
    proc.wait(timeout=10)
