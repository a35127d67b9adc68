"""Command-line entry point.

Subcommands: optimize (single run), sweep (multi-start campaign), pareto
(front extraction), verify (grasp-proxy battery), export (plot-ready files).
Exit codes: 0 ok, 2 usage, 3 unreadable config, 4 schema violations and
runtime failures. Errors print one machine-parsable line on stderr:
``fingeropt: error: <kind>: <message>``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .campaign import (
    CampaignError,
    CampaignSpec,
    front_members,
    load_run,
    pareto_front,
    run_campaign,
)
from .config import (
    ConfigReadError,
    SchemaError,
    apply_overrides,
    load_config,
    resolve_parallelism,
    run_config,
    schema_help,
)
from .domain import DomainError
from .export import campaign_records, export_csv, export_front_svg, export_pgm_bundle
from .fem import FemError
from .optimizer import ACTIVE, ConfigError, StepError
from .verify import Design, binarize, save_report, verify_design

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_RUNTIME = 4


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fingeropt",
        description="Multi-load-case topology optimization for soft gripper fingers.",
        epilog="Config schema (units in brackets):\n" + schema_help(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--version", action="version", version=f"fingeropt {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, needs_config: bool) -> None:
        if needs_config:
            p.add_argument("--config", required=True, help="INI configuration file")
            p.add_argument("--override", action="append", default=[],
                           metavar="SECTION.KEY=VALUE",
                           help="config override; wins over file and environment")
            p.add_argument("--output-dir", help="campaign output directory")
        p.add_argument("--log-level", default="INFO",
                       choices=["DEBUG", "INFO", "WARNING", "ERROR"])

    p = sub.add_parser("optimize", help="run a single optimization",
                       epilog=schema_help(),
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    common(p, needs_config=True)

    p = sub.add_parser("sweep", help="run a multi-start campaign",
                       epilog=schema_help(),
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    common(p, needs_config=True)
    p.add_argument("--parallelism", type=int, default=0,
                   help="worker processes (0 = config/env/CPU)")

    p = sub.add_parser("pareto", help="print the non-dominated front of a campaign")
    p.add_argument("campaign_dir")
    p.add_argument("--json", action="store_true", help="machine-readable output")
    common(p, needs_config=False)

    p = sub.add_parser("verify", help="binarize and verify every completed run")
    p.add_argument("campaign_dir")
    p.add_argument("--json", action="store_true", help="machine-readable output")
    common(p, needs_config=False)

    p = sub.add_parser("export", help="write plot-ready files for a campaign")
    p.add_argument("campaign_dir")
    p.add_argument("--format", required=True,
                   choices=["csv", "pgm_bundle", "front_svg"])
    p.add_argument("--out", required=True, help="output file (or directory for pgm_bundle)")
    common(p, needs_config=False)

    return parser


def _load_values(args):
    values = load_config(args.config)
    apply_overrides(values, args.override)
    return values


def _output_dir(args, values) -> Path:
    if getattr(args, "output_dir", None):
        return Path(args.output_dir)
    configured = values.get("campaign", "output_dir")
    if configured:
        return Path(configured)
    raise SchemaError("no output directory: set --output-dir or campaign.output_dir")


def cmd_optimize(args) -> int:
    values = _load_values(args)
    cfg = run_config(values)
    spec = CampaignSpec(
        base_config=cfg,
        sweep_values=(cfg.sweep_value,),
        seeds_per_point=1,
        base_seed=cfg.seed,
        parallelism=1,
        output_dir=_output_dir(args, values),
    )
    manifest = run_campaign(spec)
    rec = manifest["runs"][0]
    if rec["status"] != "completed":
        print(f"fingeropt: error: runtime: run failed: {rec.get('error')}", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"run {rec['run_id']}: phi={rec['phi']:.6g} "
          f"disp={rec['mean_output_disp']:.6g} mm "
          f"SE={rec['strain_energy']:.6g} N*mm "
          f"({rec['iterations']} iters, converged={rec['converged']})")
    print(f"results in {spec.output_dir / 'runs' / rec['run_id']}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    values = _load_values(args)
    cfg = run_config(values)
    if cfg.formulation == ACTIVE:
        sweep = values.get("campaign", "input_displacements_mm")
        if not sweep:
            raise SchemaError("active sweep requires campaign.input_displacements_mm")
    else:
        sweep = values.get("campaign", "volume_fractions")
        if not sweep:
            raise SchemaError("passive sweep requires campaign.volume_fractions")
    overridden = any(o.split("=", 1)[0].strip() == "campaign.parallelism"
                     for o in args.override)
    spec = CampaignSpec(
        base_config=cfg,
        sweep_values=tuple(sweep),
        seeds_per_point=values.get("campaign", "seeds_per_point"),
        base_seed=values.get("campaign", "base_seed"),
        parallelism=resolve_parallelism(values, args.parallelism, overridden),
        output_dir=_output_dir(args, values),
    )
    manifest = run_campaign(spec)
    done = sum(1 for r in manifest["runs"] if r["status"] == "completed")
    failed = len(manifest["runs"]) - done
    print(f"campaign complete: {done} runs ok, {failed} failed, "
          f"manifest at {spec.output_dir / 'manifest'}")
    return EXIT_OK if failed == 0 else EXIT_RUNTIME


def cmd_pareto(args) -> int:
    records = campaign_records(Path(args.campaign_dir))
    if not records:
        print("warning: no completed runs found; front is empty", file=sys.stderr)
        print("empty front")
        return EXIT_OK
    points = pareto_front(records)
    front = front_members(points)
    if args.json:
        print(json.dumps([p.__dict__ for p in front], indent=2, sort_keys=True))
        return EXIT_OK
    print(f"{len(front)} front members of {len(points)} runs")
    print(f"{'run_id':24s} {'disp (mm)':>12s} {'SE (N*mm)':>12s}  front")
    for p in sorted(points, key=lambda q: (q.dominated, q.mean_output_disp)):
        marker = "" if p.dominated else "*"
        print(f"{p.run_id:24s} {p.mean_output_disp:12.4g} "
              f"{p.total_strain_energy:12.4g}  {marker}")
    return EXIT_OK


def cmd_verify(args) -> int:
    campaign_dir = Path(args.campaign_dir)
    records = campaign_records(campaign_dir)
    if not records:
        print("warning: no completed runs found; nothing to verify", file=sys.stderr)
        return EXIT_OK
    points = {p.run_id: p for p in pareto_front(records)}
    rows = []
    for rec in records:
        run_dir = campaign_dir / "runs" / rec["run_id"]
        try:
            _, cfg, mesh, rho = load_run(run_dir)
            rho_bin, info = binarize(mesh, rho)
            design = Design(
                design_id=rec["run_id"],
                mesh=mesh,
                rho=rho_bin,
                formulation=cfg.formulation,
                input_displacement=cfg.input_displacement,
                info=info,
            )
            report = verify_design(design, cfg.material)
            save_report(run_dir, report)
            rows.append((rec, report))
        except (CampaignError, FemError, DomainError) as exc:
            logger.warning("verification of %s failed: %s", rec["run_id"], exc)

    rows.sort(key=lambda item: (points[item[0]["run_id"]].dominated,
                                item[0]["mean_output_disp"]))
    if args.json:
        print(json.dumps([r.to_dict() for _, r in rows], indent=2, sort_keys=True))
        return EXIT_OK
    print(f"{'run_id':24s} {'front':5s} {'valid':5s} {'k_tip N/mm':>11s} "
          f"{'adapt':>8s} {'max vM MPa':>11s} {'V_f bin':>8s}")
    for rec, rep in rows:
        front = "no" if points[rec["run_id"]].dominated else "yes"
        print(f"{rep.design_id:24s} {front:5s} {str(rep.valid):5s} "
              f"{_fmt(rep.tip_stiffness, 11)} {_fmt(rep.adaptivity, 8)} "
              f"{_fmt(rep.max_von_mises, 11)} {rep.volume_fraction_binary:8.3f}")
    return EXIT_OK


def _fmt(v, width: int) -> str:
    if v is None:
        return " " * (width - 3) + "n/a"
    return f"{v:{width}.4g}"


def cmd_export(args) -> int:
    campaign_dir = Path(args.campaign_dir)
    out = Path(args.out)
    if args.format == "csv":
        path = export_csv(campaign_dir, out)
        print(f"wrote {path}")
    elif args.format == "pgm_bundle":
        written = export_pgm_bundle(campaign_dir, out)
        print(f"wrote {len(written)} graymaps to {out}")
    else:
        path = export_front_svg(campaign_dir, out)
        print(f"wrote {path}")
    return EXIT_OK


_COMMANDS = {
    "optimize": cmd_optimize,
    "sweep": cmd_sweep,
    "pareto": cmd_pareto,
    "verify": cmd_verify,
    "export": cmd_export,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, args.log_level),
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return _COMMANDS[args.command](args)
    except ConfigReadError as exc:
        print(f"fingeropt: error: config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SchemaError, ConfigError) as exc:
        print(f"fingeropt: error: schema: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (DomainError, FemError, StepError, CampaignError, OSError) as exc:
        print(f"fingeropt: error: runtime: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
