import argparse
import dataclasses
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from src.core.config import MODES, RunConfig
from src.core.errors import ConfigurationError, DegenerateReflectorError, EnclosureError
from src.core.geometry import SpheroidFrame
from src.core.report import write_json

logger = logging.getLogger(__name__)

COMMANDS = ("simulate", "indicator", "enclose", "scan", "curvature", "reconstruct-ball", "principal", "verify")
PRESETS = {"s1": RunConfig.s1, "desk": RunConfig.desk}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="enclosure",
        description="Time-domain enclosure method: first reflector, normals, curvatures and balls "
        "from bistatic wave data.",
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON run configuration")
    common.add_argument("--preset", choices=sorted(PRESETS), default="s1", help="used when --config is absent")
    common.add_argument("--mode", choices=MODES)
    common.add_argument("--tau-min", type=float)
    common.add_argument("--tau-max", type=float)
    common.add_argument("--tau-count", type=int)
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int)
    common.add_argument("--no-progress", action="store_true")

    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        cmd = sub.add_parser(name, parents=[common])
        if name == "verify":
            cmd.add_argument("--quick", action="store_true", help="skip the FDTD checks")
            cmd.add_argument("--only", nargs="+", help="run only the named checks")
    return parser


def load_config(args: argparse.Namespace) -> RunConfig:
    config = RunConfig.from_json(args.config) if args.config is not None else PRESETS[args.preset]()
    if args.mode is not None:
        config.mode = args.mode
    if any(v is not None for v in (args.tau_min, args.tau_max, args.tau_count)):
        config.tau = dataclasses.replace(
            config.tau,
            **{
                k: v
                for k, v in (("tau_min", args.tau_min), ("tau_max", args.tau_max), ("count", args.tau_count))
                if v is not None
            },
        )
    if args.out is not None:
        config.out_dir = str(args.out)
    if args.seed is not None:
        config.seed = args.seed
    if args.threads is not None:
        config.threads = args.threads
    return config


def output_dir(config: RunConfig) -> Path:
    path = Path(config.out_dir) / config.name
    path.mkdir(parents=True, exist_ok=True)
    return path


def _report(config: RunConfig, source, payload: dict) -> dict:
    """Results carry the mode and the data source they came from."""
    return {"config": config.to_dict(), "source": source.describe(), **payload}


def _reflector(config: RunConfig, source, q: Optional[tuple], progress: bool) -> np.ndarray:
    """The configured point, else the single cluster of a scan."""
    from src.models.probe import scan_reflector

    if q is not None:
        return np.asarray(q, dtype=np.float64)
    scan = scan_reflector(
        source, config.scan_shift(), omega_level=config.scan.omega_level, delta_c=config.scan.delta_c,
        refine=config.scan.refine, threads=config.threads, progress=progress,
    )
    if len(scan.clusters) != 1:
        raise DegenerateReflectorError(
            f"no reflection point configured and the scan found {len(scan.clusters)} clusters; set 'q'"
        )
    return scan.clusters[0].q


def cmd_simulate(config: RunConfig, out: Path, progress: bool):
    from src.data.trace import save_trace
    from src.models.indicator import fdtd_curve
    from src.models.wavesim import SimulationConfig, simulate

    obstacle, ball, ball_prime = config.validate()
    sim = SimulationConfig(
        ball, ball_prime, obstacle, h=config.fdtd.h, T=config.fdtd.T, cfl=config.fdtd.cfl, threads=config.threads
    )
    taus = config.tau.grid()
    trace, field = simulate(sim, taus, progress=progress)
    save_trace(trace, out / "trace.encl")
    free_field = None
    if config.fdtd.reference_run:
        free_trace, free_field = simulate(sim.with_obstacle(None), taus, progress=progress)
        save_trace(free_trace, out / "trace_free.encl")
    curve = fdtd_curve(field, ball, ball_prime, reference=free_field, obstacle=obstacle)
    curve.to_csv(out / "indicator.csv")
    write_json(
        out / "laplace.json",
        {
            "simulation": sim.to_dict(),
            "tau": field.taus,
            "receiver_integral": field.integral(),
            "free_receiver_integral": None if free_field is None else free_field.integral(),
            "n_nodes": len(field.nodes),
        },
    )


def cmd_indicator(config: RunConfig, out: Path, progress: bool):
    source = config.source(progress)
    if config.mode == "geometry":
        raise ConfigurationError("geometry mode computes no indicator curve; use fdtd or semianalytic")
    source.curve().to_csv(out / "indicator.csv")


def cmd_enclose(config: RunConfig, out: Path, progress: bool):
    source = config.source(progress)
    first = source.first_reflection_distance()
    spheroid = SpheroidFrame(source.ball.center, source.ball_prime.center, first.c)
    if first.curve is not None:
        first.curve.to_csv(out / "indicator.csv")
    write_json(
        out / "enclose.json",
        _report(
            config,
            source,
            {
                "c": first.c,
                "kappa": first.kappa,
                "uncertainty": first.uncertainty,
                "spheroid": spheroid.to_dict(),
                "diagnostics": first.diagnostics,
            },
        ),
    )
    print(f"c = {first.c:.6f}  kappa = c - eta - eta' = {first.kappa:.6f} +- {first.uncertainty:.2e}")


def cmd_scan(config: RunConfig, out: Path, progress: bool):
    from src.models.probe import scan_reflector

    source = config.source(progress)
    scan = scan_reflector(
        source,
        config.scan_shift(),
        omega_level=config.scan.omega_level,
        delta_c=config.scan.delta_c,
        refine=config.scan.refine,
        threads=config.threads,
        obstacle=config.obstacle.build(),
        progress=progress,
    )
    write_json(out / "scan.json", _report(config, source, scan.to_dict()))
    print(f"{int(scan.hits.sum())} hits in {len(scan.clusters)} clusters")


def cmd_curvature(config: RunConfig, out: Path, progress: bool):
    from src.models.probe import curvature_extract

    source = config.source(progress)
    q = _reflector(config, source, config.curvature.q, progress)
    c = source.first_reflection_distance().c
    report = curvature_extract(source, q, *config.curvature.shifts, c=c)
    write_json(out / "curvature.json", _report(config, source, report.to_dict()))
    print(f"K = {report.gauss:.6f}  H-combination = {report.h_combination:.6f}")


def cmd_reconstruct_ball(config: RunConfig, out: Path, progress: bool):
    from src.models.probe import reconstruct_ball

    source = config.source(progress)
    result = reconstruct_ball(
        source,
        s=config.scan_shift(),
        shifts=config.curvature.shifts,
        omega_level=config.scan.omega_level,
        threads=config.threads,
        progress=progress,
    )
    write_json(out / "ball.json", _report(config, source, result.to_dict()))
    print(f"center = {np.round(result.center, 6).tolist()}  radius = {result.radius:.6f}")


def cmd_principal(config: RunConfig, out: Path, progress: bool):
    from src.models.probe import principal_directions

    source = config.source(progress)
    q = _reflector(config, source, config.principal.q, progress)
    result = principal_directions(
        source, q, thetas=config.principal.thetas(), shifts=config.principal.shifts,
        threads=config.threads, progress=progress,
    )
    write_json(out / "principal.json", _report(config, source, result.to_dict()))
    k1, k2 = result.curvatures
    print(f"k1 = {k1:.6f}  k2 = {k2:.6f}  H = {result.mean:.6f}")


def cmd_verify(config: RunConfig, out: Path, progress: bool, quick: bool = False, only=None) -> int:
    from src.core.verify import run_verify

    results = run_verify(out, quick=quick, seed=config.seed, only=only)
    return 0 if all(r.passed for r in results) else 1


HANDLERS = {
    "simulate": cmd_simulate,
    "indicator": cmd_indicator,
    "enclose": cmd_enclose,
    "scan": cmd_scan,
    "curvature": cmd_curvature,
    "reconstruct-ball": cmd_reconstruct_ball,
    "principal": cmd_principal,
}


def main(argv: Optional[List[str]] = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args)
        out = output_dir(config)
        progress = not args.no_progress
        if args.command == "verify":
            return cmd_verify(config, out, progress, args.quick, args.only)
        HANDLERS[args.command](config, out, progress)
    except EnclosureError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
