"""Command-line workflow: plan -> simulate -> distill -> sweep.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
All outputs are CSV / JSON / binary tag files; ``--figures`` additionally
renders PNG charts next to them.
"""
from __future__ import annotations

import argparse
import re
import sys
from pathlib import Path

import numpy as np

from . import correlate, distill, photonsim, ratemodel, tagio, topology
from .config import ConfigError, NetworkConfig, load_config

_TAG_NAME = re.compile(r"^user(\d+)\.qnt$")


def _build_plan(cfg: NetworkConfig) -> topology.NetworkPlan:
    return topology.plan_network(cfg.n_users, cfg.k_subnets, mu_delay_step_ps=cfg.mu_delay_step_ps)


def _load_or_build_plan(args, cfg: NetworkConfig) -> topology.NetworkPlan:
    if getattr(args, "plan", None):
        plan = topology.load_plan(args.plan)
        if plan.n_users != cfg.n_users or plan.k_subnets != cfg.k_subnets:
            raise ConfigError(
                f"plan is for {plan.n_users} users / {plan.k_subnets} subnets, "
                f"config says {cfg.n_users} / {cfg.k_subnets}"
            )
        return plan
    return _build_plan(cfg)


def cmd_plan(args) -> int:
    plan = topology.plan_network(args.users, args.subnets)
    report = topology.validate_plan(plan)
    if not report.ok:
        print(report, file=sys.stderr)
        return 1
    topology.save_plan(plan, args.out)
    print(
        f"{2 * len(plan.routings)} channels, {len(plan.link_map)} links, "
        f"{len(plan.premium_links)} premium -> {args.out}"
    )
    return 0


def cmd_simulate(args) -> int:
    cfg = load_config(args.config)
    plan = _load_or_build_plan(args, cfg)
    duration = args.duration if args.duration is not None else cfg.sim.duration_s
    seed = args.seed if args.seed is not None else cfg.sim.seed

    streams = photonsim.simulate_network(plan, cfg.source, cfg.stations, duration, seed)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for user, stream in sorted(streams.items()):
        tagio.write_stream(
            out_dir / f"user{user:02d}.qnt",
            user_id=user,
            timestamps=stream.timestamps,
            detectors=stream.detectors,
            duration_ps=stream.duration_ps,
        )
        if args.emit_merged:
            merged = photonsim.merge_tags(stream, cfg.calibration_delays()[user])
            tagio.write_stream(
                out_dir / f"user{user:02d}.merged.qnt",
                user_id=user,
                timestamps=merged.timestamps,
                detectors=None,
                duration_ps=merged.duration_ps,
            )
        print(f"user {user}: {len(stream)} tags -> {out_dir / f'user{user:02d}.qnt'}")
    return 0


def _read_tag_dir(tags_dir: Path, cfg: NetworkConfig) -> dict[int, photonsim.TagStream]:
    streams: dict[int, photonsim.TagStream] = {}
    for path in sorted(tags_dir.iterdir()):
        m = _TAG_NAME.match(path.name)
        if not m:
            continue
        header, ts, det = tagio.read_stream(path)
        if header.merged:
            raise ConfigError(f"{path}: distillation needs private (unmerged) tag files")
        user = header.user_id
        streams[user] = photonsim.TagStream(
            user_id=user, duration_ps=header.duration_ps, timestamps=ts, detectors=det,
        )
    missing = sorted(set(range(cfg.n_users)) - set(streams))
    if not streams or missing:
        raise ConfigError(
            f"tags dir {tags_dir} is missing streams for users {missing or 'all'}"
        )
    return streams


def cmd_distill(args) -> int:
    cfg = load_config(args.config)
    plan = _load_or_build_plan(args, cfg)
    tags_dir = Path(args.tags)
    if not tags_dir.is_dir():
        raise ConfigError(f"tags directory {tags_dir} does not exist")
    streams = _read_tag_dir(tags_dir, cfg)

    block_s = args.block_s or cfg.sim.block_s or cfg.sim.duration_s
    delta = next(iter(cfg.stations.values())).pam_delta_ps
    reports = distill.blockwise_report(
        streams,
        plan,
        block_s,
        cfg.security,
        tau_c_ps=cfg.sim.tau_c_ps,
        tau_candidates_ps=cfg.sim.tau_candidates_ps,
        delta_ps=delta,
        calibration=cfg.calibration_delays(),
        alpha_mode=cfg.alpha_mode,
    )
    distill.write_key_report_csv(reports, args.out)
    totals = distill.aggregate_reports(reports)
    key_total = sum(t["n_f_simple"] for t in totals.values())
    positive = sum(1 for t in totals.values() if t["n_f_simple"] > 0)
    print(
        f"{len(totals)} links, {positive} with positive finite key, "
        f"{key_total} secret bits total -> {args.out}"
    )

    if args.figures:
        from . import plotting

        fig_dir = Path(args.figures)
        fig_dir.mkdir(parents=True, exist_ok=True)
        plotting.save_key_report_figure(reports, fig_dir / "key_report.png")
        plotting.save_block_rate_figure(reports, fig_dir / "block_rates.png")
        print(f"figures -> {fig_dir}")

    if args.histograms:
        hist_dir = Path(args.histograms)
        hist_dir.mkdir(parents=True, exist_ok=True)
        _dump_histograms(streams, plan, cfg, hist_dir, args.figures is not None)
        print(f"histograms -> {hist_dir}")
    return 0


def _dump_histograms(streams, plan, cfg: NetworkConfig, out_dir: Path, render: bool) -> None:
    delays = cfg.calibration_delays()
    delta = next(iter(cfg.stations.values())).pam_delta_ps
    for u, v in plan.links():
        a = photonsim.calibrate_tags(streams[u], delays[u])
        b = photonsim.calibrate_tags(streams[v], delays[v])
        try:
            offset = correlate.calibrate_offset(a.timestamps, b.timestamps, delta_ps=delta)
        except correlate.NoPeakFound:
            continue
        hist = correlate.cross_correlation(
            a.timestamps, b.timestamps, 10, 2 * delta + 2000, center_offset_ps=offset
        )
        correlate.histogram_to_csv(hist, out_dir / f"g2_{u}-{v}.csv")
        if render:
            from . import plotting

            plotting.save_histogram_figure(
                hist, out_dir / f"g2_{u}-{v}.png", title=f"link {u}-{v}"
            )


def _parse_grid(args) -> np.ndarray:
    if args.values:
        return np.array([float(x) for x in args.values.split(",")])
    if args.log:
        return np.geomspace(args.min, args.max, args.points)
    return np.linspace(args.min, args.max, args.points)


def cmd_sweep_power(args) -> int:
    cfg = load_config(args.config)
    plan = _load_or_build_plan(args, cfg)
    scales = _parse_grid(args)
    if np.any(scales <= 0):
        raise ConfigError("pump scales must be positive")
    rows = ratemodel.sweep_pump(
        plan, cfg.source, cfg.stations, [float(s) for s in scales], cfg.sim.tau_c_ps,
        f=cfg.security.f,
    )
    ratemodel.write_sweep_csv(rows, args.out)
    totals = [r["key_rate_bps"] for r in rows if r["link"] == "total"]
    best = int(np.argmax(totals))
    print(
        f"{len(scales)} pump scales -> {args.out}; "
        f"best total {totals[best]:.1f} bit/s at scale {scales[best]:.3g}"
    )
    if args.figures:
        from . import plotting

        fig_dir = Path(args.figures)
        fig_dir.mkdir(parents=True, exist_ok=True)
        plotting.save_sweep_power_figure(rows, fig_dir / "sweep_power.png")
        print(f"figures -> {fig_dir}")
    return 0


def cmd_sweep_loss(args) -> int:
    families = []
    for token in args.families.split(","):
        n_str, _, k_str = token.partition(":")
        try:
            families.append((int(n_str), int(k_str)))
        except ValueError:
            raise ConfigError(f"bad family {token!r}; expected users:subnets") from None
    losses = _parse_grid(args)
    rows = ratemodel.sweep_scalability(
        [float(x) for x in losses],
        families,
        pair_rate_hz=args.pair_rate,
        heralding=args.heralding,
        detector_efficiency=args.efficiency,
        jitter_fwhm_ps=args.jitter,
        dark_rate_hz=args.dark,
    )
    ratemodel.write_sweep_csv(rows, args.out)
    print(f"{len(families)} topologies x {len(losses)} loss points -> {args.out}")
    if args.figures:
        from . import plotting

        fig_dir = Path(args.figures)
        fig_dir.mkdir(parents=True, exist_ok=True)
        plotting.save_sweep_loss_figure(rows, fig_dir / "sweep_loss.png")
        print(f"figures -> {fig_dir}")
    return 0


def _add_grid_args(p, default_min, default_max, default_points, log_default):
    p.add_argument("--values", help="explicit comma-separated grid (overrides min/max)")
    p.add_argument("--min", type=float, default=default_min)
    p.add_argument("--max", type=float, default=default_max)
    p.add_argument("--points", type=int, default=default_points)
    p.add_argument(
        "--log", action=argparse.BooleanOptionalAction, default=log_default,
        help="geometric instead of linear spacing",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="qkdnet",
        description="Plan, simulate and distill a multiplexed entanglement QKD network.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("plan", help="compute and validate a channel allocation")
    p.add_argument("--users", type=int, required=True)
    p.add_argument("--subnets", type=int, required=True)
    p.add_argument("--out", required=True, help="plan JSON output path")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("simulate", help="generate raw time-tag files for every user")
    p.add_argument("--config", required=True)
    p.add_argument("--plan", help="plan JSON (defaults to the config's network section)")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--duration", type=float, help="override sim.duration_s")
    p.add_argument("--seed", type=int, help="override sim.seed")
    p.add_argument("--emit-merged", action="store_true",
                   help="also write the calibrated, detector-stripped public streams")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("distill", help="run the classical pipeline and emit the key report")
    p.add_argument("--config", required=True)
    p.add_argument("--plan")
    p.add_argument("--tags", required=True, help="directory of user*.qnt files")
    p.add_argument("--block-s", type=float, help="finite-key block length (seconds)")
    p.add_argument("--out", required=True, help="key report CSV path")
    p.add_argument("--figures", help="directory for PNG charts")
    p.add_argument("--histograms", help="directory for per-link g2 CSV dumps")
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("sweep", help="closed-form parameter sweeps")
    sweep_sub = p.add_subparsers(dest="kind", required=True)

    sp = sweep_sub.add_parser("power", help="key rate vs pump scale")
    sp.add_argument("--config", required=True)
    sp.add_argument("--plan")
    sp.add_argument("--out", required=True)
    sp.add_argument("--figures")
    _add_grid_args(sp, 0.1, 20.0, 12, log_default=True)
    sp.set_defaults(func=cmd_sweep_power)

    sp = sweep_sub.add_parser("loss", help="key rate vs transmission loss per topology")
    sp.add_argument("--families", default="8:2,16:2,32:2,16:4,49:7",
                    help="comma list of users:subnets")
    sp.add_argument("--out", required=True)
    sp.add_argument("--figures")
    sp.add_argument("--pair-rate", type=float, default=1e5)
    sp.add_argument("--heralding", type=float, default=0.2)
    sp.add_argument("--efficiency", type=float, default=0.7)
    sp.add_argument("--jitter", type=float, default=100.0)
    sp.add_argument("--dark", type=float, default=0.0)
    _add_grid_args(sp, 0.0, 25.0, 11, log_default=False)
    sp.set_defaults(func=cmd_sweep_loss)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, topology.NonIntegerSubnet, photonsim.SimulationConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except tagio.TagFileError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
