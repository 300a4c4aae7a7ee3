"""Command-line harness: train models, run simulations, evaluate, serve.

Exit codes: 0 success, 1 property or fit failure, 2 usage/IO error.
``CDS_LOG`` in {error, info, debug} controls logging verbosity.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import jsonio
from .bundle import load_bundle, save_bundle
from .cds import (
    infer_slave_target,
    learn_coupled_system,
    run_interaction_batch,
)
from .errors import (
    FitError,
    FormatError,
    HandoverCdsError,
    InputError,
    IntegrationError,
    ParseError,
    ProtocolError,
)
from .gaussians import ConditioningSpec, gmr_condition
from .recognition import calibrate_recognizer, recognizer_to_document
from .seds import integrate, integrate_batch, verify_stability
from .service import ServiceConfig, replay_offline, serve_forever
from .trajectories import (
    ActionLabel,
    GeometryConfig,
    Role,
    generate_synthetic_handover,
    generate_synthetic_place,
    load_demos,
    preprocess,
    project_yz,
)

log = logging.getLogger("handover_cds")

USAGE_ERROR, PROPERTY_ERROR = 2, 1


def _configure_logging() -> None:
    level = os.environ.get("CDS_LOG", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO,
              "debug": logging.DEBUG}
    if level not in levels:
        level = "error"
    logging.basicConfig(
        level=levels[level],
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )


def _parse_host_port(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    if not host or not port.isdigit():
        raise InputError(f"expected HOST:PORT, got {text!r}")
    return host, int(port)


def _parse_perturb(text: str) -> tuple[float, float]:
    """'0.10@50%' -> (0.10 m displacement, 0.5 fraction of the rollout)."""
    try:
        magnitude, at = text.split("@")
        fraction = float(at.rstrip("%")) / 100.0
        return float(magnitude), fraction
    except ValueError as exc:
        raise InputError(f"bad --perturb value {text!r}: {exc}") from exc


def _training_sets(args):
    """Leader/follower/calibration demo sets from CSV or the generator."""
    hz = args.hz
    if args.csv:
        demo_set = load_demos(args.csv)
        processed = project_yz(preprocess(demo_set, hz), 1, 2) \
            if demo_set.dim == 3 else preprocess(demo_set, hz)
        handover = processed.by_action(ActionLabel.HANDOVER)
        leader = handover.by_role(Role.LEADER)
        follower = handover.by_role(Role.FOLLOWER)
        place = processed.by_action(ActionLabel.PLACE).by_role(Role.LEADER)
        if len(place) == 0:
            place_raw = generate_synthetic_place(
                max(8, len(leader)), seed=args.seed + 2000
            )
            place = project_yz(preprocess(place_raw, hz), 1, 2)
        cal_raw, _ = generate_synthetic_handover(
            max(8, len(leader)), seed=args.seed + 1000
        )
        cal_handover = project_yz(preprocess(cal_raw, hz), 1, 2)
    else:
        geometry = GeometryConfig()
        raw_leader, raw_follower = generate_synthetic_handover(
            args.synthetic, seed=args.seed, geometry=geometry
        )
        leader = project_yz(preprocess(raw_leader, hz), 1, 2)
        follower = project_yz(preprocess(raw_follower, hz), 1, 2)
        cal_raw, _ = generate_synthetic_handover(
            40, seed=args.seed + 1000, geometry=geometry
        )
        cal_handover = project_yz(preprocess(cal_raw, hz), 1, 2)
        place_raw = generate_synthetic_place(
            40, seed=args.seed + 2000, geometry=geometry
        )
        place = project_yz(preprocess(place_raw, hz), 1, 2)
    if len(leader) < 2 or len(follower) < 2:
        raise InputError(
            f"need at least 2 demos per role, got {len(leader)} leader / "
            f"{len(follower)} follower"
        )
    return leader, follower, cal_handover, place


def cmd_train(args) -> int:
    leader, follower, cal_handover, cal_place = _training_sets(args)
    log.info("training on %d leader / %d follower demos", len(leader),
             len(follower))
    system, master_report, slave_report = learn_coupled_system(
        leader, follower, dynamics_K=args.k, coupling_K=args.coupling_k,
    )
    recognizer_config, calibration = calibrate_recognizer(
        system.master, cal_handover, cal_place
    )
    follower_rest = np.mean(
        [d.positions[0] for d in follower.demos], axis=0
    )
    leader_start = np.mean([d.positions[0] for d in leader.demos], axis=0)
    version = save_bundle(
        args.out,
        system,
        recognizer_to_document(recognizer_config, calibration),
        follower_rest,
        extra_meta={
            "leader_start": [float(v) for v in leader_start],
            "seed": args.seed,
            "hz": args.hz,
        },
    )
    digest = {
        "model_version": version,
        "leader": _report_digest(master_report),
        "follower": _report_digest(slave_report),
        "recognizer_accuracy": calibration.accuracy,
        "recognizer_threshold": calibration.threshold,
        "trial_scores_fully_separated": calibration.fully_separated(),
    }
    jsonio.write_document(Path(args.out) / "fit_report.json", digest)
    print(f"trained bundle {version} -> {args.out}")
    return 0


def _report_digest(report) -> dict:
    return {
        "objective": float(report.objective),
        "iterations": int(report.iterations),
        "margins": [float(m) for m in report.margins],
        "rmse_mean": float(report.per_demo_rmse.mean()),
    }


def _load_replay_rows(path):
    try:
        with open(path, "r", encoding="utf-8", newline="") as fh:
            reader = csv.reader(fh)
            rows = list(reader)
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    if not rows:
        raise FormatError(f"{path} is empty")
    header = [h.strip() for h in rows[0]]
    if header[:3] != ["t", "y", "z"]:
        raise FormatError(f"replay header must be t,y,z, got {header}")
    samples = []
    for line_no, row in enumerate(rows[1:], start=2):
        if len(row) < 3:
            raise ParseError("expected 3 fields", line_number=line_no)
        try:
            samples.append((float(row[0]), float(row[1]), float(row[2])))
        except ValueError as exc:
            raise ParseError(f"bad number: {exc}", line_number=line_no)
    return samples


def _self_driven_samples(bundle, dt: float, max_t: float, perturb=None,
                         settle_t: float = 3.0):
    """Leader-model rollout serialized as an observation stream.

    The final position is held for ``settle_t`` so the follower can
    finish its approach after the leader arrives.
    """
    start = np.asarray(
        bundle.meta.get("leader_start", [0.45, 0.1]), dtype=np.float64
    )
    states, _ = integrate(
        bundle.system.master, start, dt=dt, max_t=max_t, stop_radius=0.002,
        perturb=perturb,
    )
    samples = [
        ((i + 1) * dt, s.position[0], s.position[1])
        for i, s in enumerate(states)
    ]
    t_end, y_end, z_end = samples[-1]
    for i in range(1, int(round(settle_t / dt)) + 1):
        samples.append((t_end + i * dt, y_end, z_end))
    return samples


def cmd_simulate(args) -> int:
    bundle = load_bundle(args.models)
    config = ServiceConfig(tick_hz=args.hz)
    dt = 1.0 / args.hz
    if args.replay:
        samples = _load_replay_rows(args.replay)
    else:
        perturb = None
        if args.perturb:
            magnitude, fraction = _parse_perturb(args.perturb)
            baseline = _self_driven_samples(bundle, dt, args.max_t)
            t_mid = baseline[-1][0] * fraction
            rng = np.random.default_rng(args.seed)
            direction = rng.normal(size=2)
            delta = magnitude * direction / np.linalg.norm(direction)
            perturb = (t_mid, delta)
        samples = _self_driven_samples(bundle, dt, args.max_t,
                                       perturb=perturb)
    commands = replay_offline(bundle, samples, config)

    out = sys.stdout if args.out == "-" else open(args.out, "w",
                                                  encoding="utf-8",
                                                  newline="")
    try:
        writer = csv.writer(out)
        writer.writerow([
            "t", "master_y", "master_z", "slave_y", "slave_z",
            "target_y", "target_z", "intent",
        ])
        for (t, my, mz), cmd in zip(samples, commands):
            writer.writerow([
                f"{cmd.t:.6f}", f"{my:.9g}", f"{mz:.9g}",
                f"{cmd.y:.9g}", f"{cmd.z:.9g}",
                f"{cmd.target_y:.9g}", f"{cmd.target_z:.9g}", cmd.intent,
            ])
    finally:
        if out is not sys.stdout:
            out.close()

    final = commands[-1]
    master_final = np.array([samples[-1][1], samples[-1][2]])
    slave_final = np.array([final.y, final.z])
    converged = bool(
        np.linalg.norm(master_final) < 0.01
        and np.linalg.norm(slave_final) < 0.01
    )
    transitions = sum(
        1 for a, b in zip(commands, commands[1:])
        if a.intent == "other" and b.intent == "handover"
    )
    print(
        f"converged={str(converged).lower()} ticks={len(commands)} "
        f"intent_transitions={transitions}"
    )
    return 0


def _demo_box(demo_set, scale=2.0):
    lo, hi = demo_set.bounding_box()
    center, half = (lo + hi) / 2.0, (hi - lo) / 2.0
    return center - scale * half, center + scale * half


def _mixture_coordinate_range(mix, dim: int, n_sigma=2.5):
    lo, hi = np.inf, -np.inf
    for comp in mix.components:
        sd = float(np.sqrt(comp.covariance[dim, dim]))
        lo = min(lo, comp.mean[dim] - n_sigma * sd)
        hi = max(hi, comp.mean[dim] + n_sigma * sd)
    return lo, hi


def _export_gmr_curves(bundle, out_dir: Path) -> None:
    """Velocity-vs-position curves per coordinate plus coupling curves."""
    names = {0: "y", 1: "z"}
    for model_name, ds in (("leader", bundle.system.master),
                           ("follower", bundle.system.slave)):
        for dim, axis in names.items():
            spec = ConditioningSpec((dim,), (2 + dim,))
            lo, hi = _mixture_coordinate_range(ds.dynamics_mix, dim)
            grid = np.linspace(lo, hi, 41)
            path = out_dir / f"gmr_{model_name}_{axis}.csv"
            with open(path, "w", encoding="utf-8", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow([f"position_{axis}", f"velocity_{axis}",
                                 "velocity_var"])
                for x in grid:
                    mean, cov = gmr_condition(ds.dynamics_mix, spec, [x])
                    writer.writerow([f"{x:.9g}", f"{mean[0]:.9g}",
                                     f"{cov[0, 0]:.9g}"])
    for name, channel in zip(("proximity", "height"),
                             bundle.system.couplings):
        lo, hi = _mixture_coordinate_range(channel.mix, 0)
        if name == "proximity":
            lo = max(lo, 0.0)
        grid = np.linspace(lo, hi, 41)
        path = out_dir / f"coupling_{name}.csv"
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["psi", "slave_target", "target_var"])
            for x in grid:
                mean, cov = gmr_condition(channel.mix, channel._spec, [x])
                writer.writerow([f"{x:.9g}", f"{mean[0]:.9g}",
                                 f"{cov[0, 0]:.9g}"])


def cmd_eval(args) -> int:
    bundle = load_bundle(args.models)
    system = bundle.system
    out_dir = Path(args.out) if args.out else Path(args.models) / "eval"
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    failures: list[str] = []

    # 1. stability certificates + 100 seeded rollouts per model
    hz = float(bundle.meta.get("hz", 50.0))
    raw_l, raw_f = generate_synthetic_handover(
        24, seed=int(bundle.meta.get("seed", args.seed))
    )
    leader_demos = project_yz(preprocess(raw_l, hz), 1, 2)
    follower_demos = project_yz(preprocess(raw_f, hz), 1, 2)
    rollout_stats = {}
    for name, ds, demos in (("leader", system.master, leader_demos),
                            ("follower", system.slave, follower_demos)):
        if not verify_stability(ds).passed:
            failures.append(f"{name}: stability certificates failed")
        lo, hi = _demo_box(demos)
        starts = rng.uniform(lo, hi, size=(100, 2))
        _, converged, steps = integrate_batch(
            ds, starts, dt=1e-3, max_t=10.0, stop_radius=0.01
        )
        rollout_stats[name] = {
            "converged": int(converged.sum()),
            "max_time": float(steps.max() * 1e-3),
        }
        if not converged.all():
            failures.append(
                f"{name}: only {converged.sum()}/100 rollouts converged"
            )

    # 2. perturbation recovery: 0.10 m at each rollout's midpoint
    lo, hi = _demo_box(leader_demos)
    starts = rng.uniform(lo, hi, size=(50, 2))
    _, base_conv, base_steps = integrate_batch(
        system.master, starts, dt=1e-3, max_t=10.0, stop_radius=0.01
    )
    directions = rng.normal(size=(50, 2))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    _, pert_conv, pert_steps = integrate_batch(
        system.master, starts, dt=1e-3, max_t=13.0, stop_radius=0.01,
        perturb_step=base_steps // 2, perturb_delta=0.10 * directions,
    )
    extra = (pert_steps - base_steps) * 1e-3
    if not (base_conv.all() and pert_conv.all()):
        failures.append("perturbation: not all rollouts converged")
    if float(extra.max()) >= 3.0:
        failures.append(
            f"perturbation: max extra time {extra.max():.2f}s >= 3s"
        )

    # 3. coupling monotonicity on the proximity channel
    grid = np.array([0.4, 0.3, 0.2, 0.1, 0.05, 0.02])
    proximity_channel = system.couplings[0]
    dist = np.array([
        abs(infer_slave_target(proximity_channel, np.array([g, 0.0]))[0])
        for g in grid
    ])
    monotone = bool(np.all(dist[1:] <= dist[:-1] + 1e-3))
    if not monotone:
        failures.append(f"coupling: targets not monotone over grid: {dist}")

    # 4. joint convergence: 50 coupled starts
    lo_s, hi_s = _demo_box(follower_demos)
    masters = rng.uniform(lo, hi, size=(50, 2))
    slaves = rng.uniform(lo_s, hi_s, size=(50, 2))
    P_m, P_s, joint_conv, joint_steps = run_interaction_batch(
        system, masters, slaves, dt=1e-3, max_t=10.0, stop_radius=0.01
    )
    if not joint_conv.all():
        failures.append(
            f"joint: only {joint_conv.sum()}/50 interactions converged"
        )
    final_err = float(np.mean(np.linalg.norm(P_s, axis=1)))

    # tracking error between the slave and its inferred target over the
    # settled half of one representative interaction
    from .cds import run_interaction

    states, _ = run_interaction(
        system,
        np.asarray(bundle.meta.get("leader_start", [0.45, 0.1])),
        bundle.follower_rest,
        dt=1e-3, max_t=10.0, stop_radius=0.01,
    )
    tail = states[len(states) // 2:]
    tracking_rmse = float(np.sqrt(np.mean([
        np.sum((s.slave.position - s.inferred_target) ** 2) for s in tail
    ])))

    # 5. recognition accuracy on 200 held-out trials
    from .recognition import _trial_prediction

    ev_h, _ = generate_synthetic_handover(100, seed=args.seed + 3000)
    ev_p = generate_synthetic_place(100, seed=args.seed + 4000)
    handover_trials = project_yz(preprocess(ev_h, hz), 1, 2)
    place_trials = project_yz(preprocess(ev_p, hz), 1, 2)
    hits = sum(
        _trial_prediction(system.master, bundle.recognizer, d)
        for d in handover_trials.demos
    ) + sum(
        not _trial_prediction(system.master, bundle.recognizer, d)
        for d in place_trials.demos
    )
    accuracy = hits / 200.0
    if accuracy < 0.95:
        failures.append(f"recognition: accuracy {accuracy:.3f} < 0.95")

    metrics = {
        "convergence_rate": float(joint_conv.mean()),
        "mean_time_to_handover": float(joint_steps.mean() * 1e-3),
        "final_position_error": final_err,
        "slave_tracking_rmse": tracking_rmse,
        "recognition_accuracy": accuracy,
        "rollouts": rollout_stats,
        "perturbation_max_extra_time": float(extra.max()),
        "coupling_monotone": monotone,
        "failures": failures,
    }
    jsonio.write_document(out_dir / "metrics.json", metrics)
    _export_gmr_curves(bundle, out_dir)

    for line in failures:
        print(f"FAIL {line}", file=sys.stderr)
    print(
        f"eval: convergence_rate={metrics['convergence_rate']:.2f} "
        f"recognition_accuracy={accuracy:.3f} "
        f"{'FAIL' if failures else 'PASS'}"
    )
    return PROPERTY_ERROR if failures else 0


def cmd_serve(args) -> int:
    import asyncio

    bundle = load_bundle(args.models)
    config = ServiceConfig(tick_hz=args.tick_hz)
    listen = _parse_host_port(args.listen) if args.listen else None
    ws_listen = _parse_host_port(args.ws_listen) if args.ws_listen else None
    if listen is None and ws_listen is None:
        raise InputError("need --listen and/or --ws-listen")

    def ready(bound):
        parts = [f"{kind}={host}:{port}"
                 for kind, (host, port) in bound.items()]
        print(f"listening {' '.join(parts)} model={bundle.model_version}",
              flush=True)

    try:
        asyncio.run(serve_forever(
            bundle, listen, ws_listen, config,
            ui_dir=args.serve_ui, ready_callback=ready,
        ))
    except KeyboardInterrupt:
        pass
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="handover-cds",
        description=__doc__,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="fit models and write a bundle")
    source = train.add_mutually_exclusive_group(required=True)
    source.add_argument("--synthetic", type=int, metavar="N",
                        help="generate N synthetic demo pairs")
    source.add_argument("--csv", metavar="FILE",
                        help="demo CSV (demo_id,role,action,t,x,y,z)")
    train.add_argument("--seed", type=int, default=0)
    train.add_argument("--k", type=int, default=6,
                       help="mixture components for arm dynamics")
    train.add_argument("--coupling-k", type=int, default=3,
                       help="mixture components for coupling channels")
    train.add_argument("--hz", type=float, default=50.0)
    train.add_argument("--out", required=True, metavar="DIR")
    train.set_defaults(func=cmd_train)

    simulate = sub.add_parser("simulate", help="run one interaction")
    simulate.add_argument("--models", required=True, metavar="DIR")
    simulate.add_argument("--replay", metavar="FILE",
                          help="leader stream CSV with header t,y,z")
    simulate.add_argument("--perturb", metavar="D@P%",
                          help="displace the leader D meters at P%% "
                               "of the rollout")
    simulate.add_argument("--seed", type=int, default=0)
    simulate.add_argument("--hz", type=float, default=50.0)
    simulate.add_argument("--max-t", type=float, default=12.0)
    simulate.add_argument("--out", default="-", metavar="FILE")
    simulate.set_defaults(func=cmd_simulate)

    evaluate = sub.add_parser("eval", help="run the property battery")
    evaluate.add_argument("--models", required=True, metavar="DIR")
    evaluate.add_argument("--seed", type=int, default=7)
    evaluate.add_argument("--out", metavar="DIR")
    evaluate.set_defaults(func=cmd_eval)

    serve = sub.add_parser("serve", help="run the streaming service")
    serve.add_argument("--models", required=True, metavar="DIR")
    serve.add_argument("--listen", metavar="HOST:PORT",
                       help="TCP newline-JSON listener")
    serve.add_argument("--ws-listen", metavar="HOST:PORT",
                       help="WebSocket listener (same schema)")
    serve.add_argument("--tick-hz", type=float, default=50.0)
    serve.add_argument("--serve-ui", metavar="DIR",
                       help="serve static UI assets on the ws listener")
    serve.set_defaults(func=cmd_serve)
    return parser


def main(argv=None) -> int:
    _configure_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (InputError, ParseError, FormatError, ProtocolError,
            FileNotFoundError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except (FitError, IntegrationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        if isinstance(exc, FitError) and exc.diagnostics:
            print(f"diagnostics: {exc.diagnostics}", file=sys.stderr)
        return PROPERTY_ERROR
    except HandoverCdsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return PROPERTY_ERROR


if __name__ == "__main__":
    sys.exit(main())
