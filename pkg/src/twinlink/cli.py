"""Command-line front end: run studies, replay transcripts, inspect plans."""

from __future__ import annotations

import argparse
import socket
import sys

import numpy as np

from .kinematics import IkFailure
from .perception import PerceptionError
from .pipeline import (ALL_MODES, LayoutMode, PipelineError, PlacementError,
                       TwinRun, _plan_phases, _resolve_noise, build_reality,
                       build_truth_layout, run_experiment, run_trial,
                       wilson_interval, write_report, write_trial_records)
from .planning import InvalidEndpoint, PlanningFailure
from .protocol import GripperAction, ProtocolError
from .scenefile import SceneFileError, load_scene
from .transport import (SocketTransport, Transcript, TransportError,
                        replay_matches, serve_socket_once)

_MODE_CHOICES = [mode.value for mode in ALL_MODES] + ["all"]


def _socket_factory(handler):
    _, port = serve_socket_once(handler)
    return SocketTransport(socket.create_connection(("127.0.0.1", port)))


def _pick_modes(name: str):
    if name == "all":
        return list(ALL_MODES)
    return [LayoutMode(name)]


def _cmd_run(args) -> int:
    config = load_scene(args.scene)
    modes = _pick_modes(args.mode)
    factory = _socket_factory if args.transport == "socket" else None
    if args.transcript:
        # one extra recorded trial; the grid below reproduces it bit-for-bit
        log = Transcript()
        run_trial(config, modes[0], args.seed, noise=args.noise,
                  transcript=log, transport_factory=factory)
        log.save(args.transcript)
        print(f"transcript ({len(log)} frames) written to {args.transcript}")
    report, records = run_experiment(config, trials=args.trials,
                                     base_seed=args.seed,
                                     noise_preset=args.noise, modes=modes,
                                     scene=args.scene)
    print(f"{'mode':<16} {'trials':>6} {'successes':>9} "
          f"{'rate':>6}  95% interval")
    for mode in modes:
        stats = report.modes[mode.value]
        lo, hi = wilson_interval(stats.successes, stats.trials)
        print(f"{mode.value:<16} {stats.trials:>6} {stats.successes:>9} "
              f"{stats.rate:>6.3f}  [{lo:.3f}, {hi:.3f}]")
    write_report(report, args.out)
    print(f"report written to {args.out}")
    if args.trials_out:
        write_trial_records(records, args.trials_out)
        print(f"trial records written to {args.trials_out}")
    return 0


def _cmd_replay(args) -> int:
    transcript = Transcript.load(args.transcript)
    config = load_scene(args.scene)
    endpoint = build_reality(config, LayoutMode(args.mode), args.seed,
                             _resolve_noise(config, args.noise))
    if replay_matches(transcript, endpoint.handle):
        print(f"replay matches recorded transcript ({len(transcript)} frames)")
        return 0
    print("replay DIVERGES from recorded transcript", file=sys.stderr)
    return 2


def _phase_label(index: int, total: int, action) -> str:
    if action is GripperAction.CLOSE:
        return "grip"
    if action is GripperAction.OPEN:
        return "release"
    if index == 0:
        return "transit"
    if index == 1:
        return "descend"
    if index == total - 1:
        return "ascend"
    return "dwell"


def _cmd_plan(args) -> int:
    config = load_scene(args.scene)
    names = [spec.name for spec in config.subtasks]
    if args.subtask not in names:
        print(f"unknown subtask {args.subtask!r}; scene defines: "
              f"{', '.join(names)}", file=sys.stderr)
        return 1
    index = names.index(args.subtask)
    spec = config.subtasks[index]
    layout = build_truth_layout(config, LayoutMode(args.mode), args.seed)
    twin = TwinRun(config=config, requester=None, trial_seed=args.seed,
                   planned=config.home)
    phases = _plan_phases(twin, spec, layout, index)
    print(f"subtask {spec.name} ({spec.action}), mode {args.mode}, "
          f"seed {args.seed}")
    total_time = 0.0
    total_len = 0.0
    for i, (traj, action) in enumerate(phases):
        length = float(np.sum(np.linalg.norm(np.diff(traj.angles, axis=0),
                                             axis=1)))
        duration = float(traj.times[-1] - traj.times[0])
        total_time += duration
        total_len += length
        label = _phase_label(i, len(phases), action)
        print(f"  {label:<8} {traj.times.size:>4} samples  "
              f"{duration:>6.2f} s  {length:>6.3f} rad")
    print(f"  {'total':<8} {sum(t.times.size for t, _ in phases):>4} samples  "
          f"{total_time:>6.2f} s  {total_len:>6.3f} rad")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="twinlink",
        description="Deterministic digital-twin manipulation trials over a "
                    "message protocol.")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a seeded trial study")
    run.add_argument("--scene", required=True, help="scene file path")
    run.add_argument("--mode", required=True, choices=_MODE_CHOICES,
                     help="layout mode, or 'all' for the full grid")
    run.add_argument("--trials", required=True, type=int,
                     help="trials per mode")
    run.add_argument("--seed", required=True, type=int,
                     help="base seed; trial i uses seed+i")
    run.add_argument("--out", required=True, help="report file path")
    run.add_argument("--noise", default="default",
                     help="noise preset name from the scene file")
    run.add_argument("--trials-out", default=None,
                     help="optional per-trial record file (includes "
                          "wall-clock times, not reproducible)")
    run.add_argument("--transcript", default=None,
                     help="record one extra trial (first mode, base seed) "
                          "to this transcript file")
    run.add_argument("--transport", default="memory",
                     choices=["memory", "socket"],
                     help="in-process channel or a local stream socket")
    run.set_defaults(func=_cmd_run)

    replay = sub.add_parser("replay",
                            help="re-serve a recorded transcript and check "
                                 "it reproduces bit-identically")
    replay.add_argument("--transcript", required=True)
    replay.add_argument("--scene", required=True)
    replay.add_argument("--mode", required=True,
                        choices=[m.value for m in ALL_MODES])
    replay.add_argument("--seed", required=True, type=int)
    replay.add_argument("--noise", default="default")
    replay.set_defaults(func=_cmd_replay)

    plan = sub.add_parser("plan",
                          help="plan one subtask from the home posture and "
                               "print path statistics")
    plan.add_argument("--scene", required=True)
    plan.add_argument("--subtask", required=True)
    plan.add_argument("--mode", default=LayoutMode.FIXED.value,
                      choices=[m.value for m in ALL_MODES])
    plan.add_argument("--seed", default=0, type=int)
    plan.set_defaults(func=_cmd_plan)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (SceneFileError, PipelineError, PlacementError, PerceptionError,
            IkFailure, InvalidEndpoint, PlanningFailure, ProtocolError,
            TransportError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
