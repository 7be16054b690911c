#!/usr/bin/env python3
"""CLI interface for sirlab: generation, SDS baseline, ablations and meshes"""

import argparse
import dataclasses
import datetime
import logging
import math
from pathlib import Path
from typing import Any, Optional, Sequence

from sqlalchemy.exc import SQLAlchemyError
from sqlalchemy.orm import Session as SessionType
from sqlalchemy.orm import sessionmaker
from tabulate import tabulate

from .config import Config, get_config, load_run_config, run_config_str
from .diffops import ForwardKind
from .errors import SirlabError
from .models import Base
from .services import (
    AblationService,
    CatalogueService,
    GenerationService,
    MeshService,
    RunManifest,
    SdsService,
    load_sweep,
    make_output_dir,
)
from .sirloop import PRESETS, SirConfig, Space, get_preset

logger = logging.getLogger("sirlab")

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_SIRLAB = 2
EXIT_DATABASE = 3
EXIT_INTERRUPTED = 130

DEFAULT_OUT = "runs"


# =============================================================================
# Configuration from flags
# =============================================================================


def resolve_config(args: argparse.Namespace) -> SirConfig:
    """
    Base config (file, preset or default) with command-line overrides applied.

    Raises:
        ConfigError: Invalid file or override
    """
    if getattr(args, "config", None):
        config = load_run_config(args.config)
    elif getattr(args, "preset", None):
        config = get_preset(args.preset)
    else:
        config = SirConfig()

    space = Space(args.space) if getattr(args, "space", None) else None
    anneal = config.anneal
    if getattr(args, "literal_square", False):
        anneal = dataclasses.replace(anneal, literal_square=True)
    return config.replace(
        seed=getattr(args, "seed", None),
        iterations=getattr(args, "k", None),
        recon_steps=getattr(args, "i", None),
        n_views=getattr(args, "views", None),
        eta=getattr(args, "eta", None),
        cfg_scale=getattr(args, "cfg", None),
        forward_kind=ForwardKind.parse(args.forward) if getattr(args, "forward", None) else None,
        space=space,
        latent_diffusion=True if space is Space.LATENT else None,
        mc_threshold=getattr(args, "mc_threshold", None),
        representation=getattr(args, "representation", None),
        task=getattr(args, "task", None),
        resolution=getattr(args, "resolution", None),
        sds_updates=getattr(args, "updates", None),
        anneal=anneal,
    )


# =============================================================================
# Commands
# =============================================================================


def _catalogued(
    session: SessionType,
    command: str,
    seed: int,
    out_base: str,
    config_path: Optional[str],
    body,
) -> Path:
    """
    Run body(out_dir) inside a catalogued, manifested output directory.

    body returns (psnr, total_nfe). The record is closed as failed when body
    raises, and the exception propagates.
    """
    out_dir = make_output_dir(out_base, command)
    manifest = RunManifest(command, seed, str(out_dir), config_path)
    manifest.write()
    record = CatalogueService.start(session, manifest)
    logger.info(f"{command}: writing to {out_dir}")
    try:
        psnr, total_nfe = body(out_dir)
    except BaseException as e:
        manifest.status = "failed"
        manifest.finished_at = datetime.datetime.now()
        manifest.write()
        CatalogueService.finish(session, record, "failed", message=str(e) or type(e).__name__)
        raise
    manifest.status = "ok"
    manifest.finished_at = datetime.datetime.now()
    manifest.write()
    CatalogueService.finish(session, record, "ok", psnr=psnr, total_nfe=total_nfe)
    return out_dir


def cmd_gen(session: SessionType, args: argparse.Namespace) -> Path:
    config = resolve_config(args)

    def body(out_dir: Path):
        result = GenerationService.run(
            config, out_dir, png=args.png, mesh=args.mesh, texture=args.refine_texture
        )
        psnr = result.summary.get("finalPsnr")
        print(f"Generated {config.task} ({config.representation}) in {out_dir}")
        print(
            tabulate(
                [[len(result.trace.records), result.trace.total_nfe, _fmt(psnr)]],
                headers=["iterations", "total NFE", "PSNR"],
                tablefmt="grid",
            )
        )
        return psnr, result.trace.total_nfe

    return _catalogued(session, "gen", config.seed, args.out, args.config, body)


def cmd_sds(session: SessionType, args: argparse.Namespace) -> Path:
    config = resolve_config(args)

    def body(out_dir: Path):
        result = SdsService.run(config, out_dir, png=args.png)
        psnr = result.trace.final_psnr
        print(f"SDS baseline ({config.sds_targets.value}, {config.space.value}) in {out_dir}")
        print(
            tabulate(
                [[len(result.trace.timings), result.trace.total_nfe, _fmt(psnr)]],
                headers=["updates", "total NFE", "PSNR"],
                tablefmt="grid",
            )
        )
        return psnr, result.trace.total_nfe

    return _catalogued(session, "sds", config.seed, args.out, args.config, body)


def cmd_ablate(session: SessionType, args: argparse.Namespace, threads: int) -> Path:
    sweep = load_sweep(args.sweep)

    def body(out_dir: Path):
        rows = AblationService.run(sweep, out_dir, threads=threads)
        AblationService.write(rows, out_dir, xlsx=args.xlsx)
        print(f"Ablation over {sweep.axis} ({len(rows)} runs) in {out_dir}")
        print(AblationService.format_summary(rows))
        if sweep.axis == "method":
            ratios = AblationService.efficiency_ratios(rows)
            print(
                tabulate(
                    [
                        [seed, _fmt(ratio) if reached else f">= {_fmt(ratio)}"]
                        for seed, (ratio, reached) in ratios.items()
                    ],
                    headers=["seed", "SDS NFE / SIR NFE"],
                    tablefmt="grid",
                )
            )
        psnrs = [r["psnr"] for r in rows if r["psnr"] is not None]
        return (min(psnrs) if psnrs else None), sum(r["total_nfe"] for r in rows)

    seed = sweep.seeds[0]
    return _catalogued(session, "ablate", seed, args.out, args.sweep, body)


def cmd_mesh(session: SessionType, args: argparse.Namespace) -> Path:
    def body(out_dir: Path):
        out_path = Path(args.output) if args.output else out_dir / "mesh.obj"
        mesh = MeshService.run(args.scene, out_path, args.mc_threshold)
        print(f"Wrote {mesh.n_vertices} vertices, {mesh.n_triangles} triangles to {out_path}")
        return None, 0

    return _catalogued(session, "mesh", 0, args.out, args.scene, body)


def list_runs(session: SessionType, command: Optional[str], status: Optional[str], limit: int):
    runs = CatalogueService.get_all(session, command=command, status=status, limit=limit)
    if not runs:
        print("No runs catalogued.")
        return
    data = [
        [
            r.id,
            r.command,
            r.status,
            r.seed,
            r.started_at.strftime("%Y-%m-%d %H:%M:%S"),
            _fmt(r.duration_s),
            _fmt(r.psnr),
            r.total_nfe if r.total_nfe is not None else "-",
            r.output_dir,
        ]
        for r in runs
    ]
    headers = ["ID", "Command", "Status", "Seed", "Started", "Seconds", "PSNR", "NFE", "Output"]
    print(tabulate(data, headers=headers, tablefmt="grid"))


def show_config(args: argparse.Namespace) -> None:
    config = get_preset(args.preset) if args.preset else SirConfig()
    output = run_config_str(config, args.format)
    if args.output:
        Path(args.output).write_text(output)
        print(f"Generated config: {args.output}")
    else:
        print(output, end="")


def _fmt(value: Any) -> str:
    if value is None:
        return "-"
    if isinstance(value, float):
        return "inf" if math.isinf(value) else f"{value:.2f}"
    return str(value)


# =============================================================================
# Parser
# =============================================================================


def _add_run_flags(parser: argparse.ArgumentParser) -> None:
    opt = parser.add_argument
    opt("--config", help="Run config file (.json, .yaml, .yml)")
    opt("--preset", choices=sorted(PRESETS), help="Named base configuration")
    opt("--seed", type=int, help="Random seed")
    opt("--out", default=DEFAULT_OUT, help=f"Base output directory (default: {DEFAULT_OUT})")
    opt("--k", type=int, help="Outer iterations K")
    opt("--i", type=int, help="Reconstruction steps per iteration")
    opt("--views", type=int, help="Views refined per iteration")
    opt("--eta", type=float, help="DDIM stochasticity in [0, 1]")
    opt("--cfg", type=float, help="Classifier-free guidance scale")
    opt("--forward", choices=["noise", "inversion", "hybrid"], help="Forward process")
    opt("--space", choices=[s.value for s in Space], help="Reconstruction space")
    opt("--representation", choices=["flatland", "voxel"], help="Scene representation")
    opt("--task", help="Hidden shape (sphere, cross, ring, letter)")
    opt("--resolution", type=int, help="Grid side and view resolution")
    opt("--literal-square", action="store_true", help="Ascending square t2 schedule")
    opt("--png", action="store_true", help="Write PNG instead of PPM")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description="sirlab - score-based iterative reconstruction at desk scale"
    )
    parser.add_argument("--log-level", help="Logging level (default: SIRLAB_LOG_LEVEL or INFO)")
    subparsers = parser.add_subparsers(dest="command", help="Available commands")

    # gen command
    gen_parser = subparsers.add_parser("gen", help="Generate an object with SIR")
    _add_run_flags(gen_parser)
    gen_parser.add_argument("--mesh", action="store_true", help="Also export an OBJ mesh")
    gen_parser.add_argument("--mc-threshold", type=float, help="Marching-cubes density threshold")
    gen_parser.add_argument(
        "--refine-texture", action="store_true", help="Colour-only refinement after SIR"
    )

    # sds command
    sds_parser = subparsers.add_parser("sds", help="Run the SDS baseline")
    _add_run_flags(sds_parser)
    sds_parser.add_argument("--updates", type=int, help="Number of SDS updates")

    # ablate command
    ablate_parser = subparsers.add_parser("ablate", help="Run an ablation sweep")
    ablate_parser.add_argument("sweep", help="Sweep file (.json, .yaml, .yml)")
    ablate_parser.add_argument(
        "--out", default=DEFAULT_OUT, help=f"Base output directory (default: {DEFAULT_OUT})"
    )
    ablate_parser.add_argument("--xlsx", action="store_true", help="Also write ablation.xlsx")
    ablate_parser.add_argument(
        "--threads", type=int, help="Worker processes (capped by SIRLAB_THREADS)"
    )

    # mesh command
    mesh_parser = subparsers.add_parser("mesh", help="Extract an OBJ mesh from a voxel scene")
    mesh_parser.add_argument("scene", help="Serialized scene (.sirg)")
    mesh_parser.add_argument(
        "--mc-threshold", type=float, default=0.5, help="Density threshold (default: 0.5)"
    )
    mesh_parser.add_argument("--output", "-o", help="OBJ path (default: <run dir>/mesh.obj)")
    mesh_parser.add_argument(
        "--out", default=DEFAULT_OUT, help=f"Base output directory (default: {DEFAULT_OUT})"
    )

    # runs command
    runs_parser = subparsers.add_parser("runs", help="List catalogued runs")
    runs_parser.add_argument("--command", dest="filter_command", help="Filter by command")
    runs_parser.add_argument("--status", choices=["running", "ok", "failed"])
    runs_parser.add_argument("--limit", type=int, default=20, help="Maximum rows (default: 20)")

    # config command
    config_parser = subparsers.add_parser("config", help="Print a run configuration template")
    config_parser.add_argument("--preset", choices=sorted(PRESETS), help="Preset to print")
    config_parser.add_argument("--format", choices=["yaml", "json"], default="yaml")
    config_parser.add_argument("--output", "-o", help="Write to file instead of stdout")

    return parser


# =============================================================================
# Main
# =============================================================================


def main(argv: Optional[Sequence[str]] = None, config_cls: Optional[type[Config]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)

    if not args.command:
        parser.print_help()
        return EXIT_OK

    cfg = config_cls or get_config()
    cfg.setup_logging(args.log_level)

    if args.command == "config":
        try:
            show_config(args)
        except SirlabError as e:
            print(f"Error: {e}")
            return EXIT_SIRLAB
        return EXIT_OK

    session = None
    try:
        # Database setup
        engine = cfg.get_engine()
        Base.metadata.create_all(engine)
        session = sessionmaker(bind=engine)()

        if args.command == "gen":
            cmd_gen(session, args)
        elif args.command == "sds":
            cmd_sds(session, args)
        elif args.command == "ablate":
            threads = min(args.threads or cfg.THREADS, cfg.THREADS)
            cmd_ablate(session, args, max(1, threads))
        elif args.command == "mesh":
            cmd_mesh(session, args)
        elif args.command == "runs":
            list_runs(session, args.filter_command, args.status, args.limit)
        return EXIT_OK

    except SirlabError as e:
        logger.error(f"{type(e).__name__}: {e}")
        print(f"Error: {e}")
        return EXIT_SIRLAB
    except SQLAlchemyError as e:
        if session is not None:
            session.rollback()
        logger.error(f"Database error: {e}")
        print(f"Error: Database error occurred: {e}")
        return EXIT_DATABASE
    except KeyboardInterrupt:
        logger.info("Operation cancelled by user")
        print("\nOperation cancelled by user.")
        return EXIT_INTERRUPTED
    except Exception as e:
        logger.exception(f"Unexpected error: {e}")
        print(f"Error: Unexpected error occurred: {e}")
        return EXIT_UNEXPECTED
    finally:
        if session is not None:
            session.close()


if __name__ == "__main__":
    raise SystemExit(main())
