import argparse
import sys
import time
from collections.abc import Callable, Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import Literal

from pydantic import ValidationError

from meanode import __version__
from meanode.config import (
    TrainConfig,
    default_config,
    lazy_config,
    load_config,
    load_overrides,
    load_sweep,
    settings,
)
from meanode.errors import ConfigError, DivergenceError, FitError
from meanode.experiments.figures import FIGURES, FigureContext, make_figure
from meanode.experiments.studies import run_couple, run_lazy, run_phase
from meanode.experiments.sweep import run_sweep
from meanode.limit.reference import build_reference
from meanode.resnet import TrainResult, train
from meanode.shared import logger, set_log_level, write_csv, write_json
from meanode.snapshots import save_snapshot

Command = Literal["train", "reference", "sweep", "lazy", "phase", "couple", "figure"]

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DIVERGED = 2
EXIT_IO = 3


@dataclass(frozen=True)
class RunManifest:
    """What one invocation runs and where its artifacts go."""

    command: Command
    config: Path | None
    out_dir: Path
    workers: int
    fast: bool = False
    seed: int | None = None
    figure: str | None = None

    @classmethod
    def from_args(cls, args: argparse.Namespace) -> "RunManifest":
        return cls(
            command=args.command,
            config=Path(args.config) if args.config else None,
            out_dir=Path(args.out or settings.out_dir),
            workers=args.workers if args.workers is not None else settings.workers,
            fast=args.fast,
            seed=args.seed,
            figure=getattr(args, "figure", None),
        )

    def train_config(self, fallback: Callable[[], TrainConfig] | None = None) -> TrainConfig:
        """Load the flat config (or the fallback setting) with --seed applied."""
        if self.config is None:
            if fallback is None:
                raise ConfigError(f"{self.command} needs --config")
            config = fallback()
        else:
            config = load_config(self.config)
        if self.seed is not None:
            config = config.with_updates(seed=self.seed)
        return config


def parse_args(argv: Sequence[str] | None = None) -> argparse.Namespace:
    """Parse command line arguments."""
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument(
        "--config",
        "-c",
        type=str,
        default=None,
        help="JSON config (TrainConfig, SweepSpec or figure overrides)",
    )
    common.add_argument(
        "--out",
        "-o",
        type=str,
        default=None,
        help=f"Output directory (default: {settings.out_dir})",
    )
    common.add_argument(
        "--workers",
        "-w",
        type=int,
        default=None,
        help="Worker processes for sweeps (default: MEANODE_WORKERS or 1)",
    )
    common.add_argument(
        "--fast",
        action="store_true",
        help="Use the small reference network",
    )
    common.add_argument(
        "--seed",
        type=int,
        default=None,
        help="Master seed, overrides the config",
    )
    common.add_argument(
        "--log-level",
        type=str,
        default=None,
        help="Logging level (default: MEANODE_LOG_LEVEL or INFO)",
    )

    parser = argparse.ArgumentParser(
        description="ResNet training dynamics against their mean ODE limits",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Commands:
  train      Train one finite ResNet: snapshots, loss.csv, run.json
  reference  Train the large surrogate of the limit model
  sweep      Run a SweepSpec: sweep.csv and the sweep.json fit sidecar
  lazy       Finite nets at growing alpha against the tangent model
  phase      sigma_v sweep: gap to the sigma_v = 0 dynamics and laziness
  couple     Tracer-vs-network parameter error per depth
  figure     Reproduce one figure: 1, 2a, 2b, 3a, 3b, 4a, 4b, 4c

Examples:
  meanode train --config run.json --out runs/train
  meanode sweep --config depth.json --workers 8 --fast
  meanode figure 2a --fast --out runs/fig2a

Exit Codes:
  0  success
  1  invalid configuration
  2  numerical divergence
  3  I/O error

Environment Variables:
  MEANODE_WORKERS         Default for --workers (default: 1)
  MEANODE_LOG_LEVEL       Default logging level (default: INFO)
  MEANODE_OUT_DIR         Default for --out (default: runs)
  MEANODE_RECORD_RUNTIME  Add the runtime_s column to sweep CSVs
        """,
    )
    parser.add_argument(
        "--version",
        action="version",
        version=f"meanode {__version__}",
    )
    commands = parser.add_subparsers(dest="command", required=True)
    for name in ("train", "reference", "sweep", "lazy", "phase", "couple"):
        commands.add_parser(name, parents=[common])
    figure = commands.add_parser("figure", parents=[common])
    figure.add_argument("figure", choices=FIGURES, help="Figure tag")
    return parser.parse_args(argv)


def _write_losses(path: Path, result: TrainResult) -> Path:
    return write_csv(path, ("k", "loss"), enumerate(result.losses))


def cmd_train(manifest: RunManifest) -> list[Path]:
    config = manifest.train_config()
    result = train(config)
    out = manifest.out_dir
    paths = [
        save_snapshot(out / "snapshots" / f"k{k:06d}.bin", net, k, config)
        for k, net in sorted(result.snapshots.items())
    ]
    paths.append(_write_losses(out / "loss.csv", result))
    write_json(
        out / "run.json",
        {
            "config": config.model_dump(mode="json"),
            "initial_loss": float(result.losses[0]),
            "final_loss": float(result.losses[-1]),
            "snapshots": sorted(result.snapshots),
        },
    )
    paths.append(out / "run.json")
    logger.info("Final loss %.6g after K=%s", result.losses[-1], config.K)
    return paths


def cmd_reference(manifest: RunManifest) -> list[Path]:
    config = manifest.train_config()
    L_ref, M_ref = settings.reference_size(manifest.fast)
    ref = build_reference(config, L_ref=L_ref, M_ref=M_ref)
    out = manifest.out_dir
    paths = [
        save_snapshot(
            out / "reference" / f"k{k:06d}.bin", net, k, ref.config, reference=True
        )
        for k, net in sorted(ref.result.snapshots.items())
    ]
    paths.append(_write_losses(out / "reference_loss.csv", ref.result))
    return paths


def cmd_sweep(manifest: RunManifest) -> list[Path]:
    if manifest.config is None:
        raise ConfigError("sweep needs --config")
    spec = load_sweep(manifest.config)
    if manifest.seed is not None:
        spec = spec.model_validate(
            {**spec.model_dump(), "base": spec.base.with_updates(seed=manifest.seed)}
        )
    result = run_sweep(spec, workers=manifest.workers, fast=manifest.fast)
    out = manifest.out_dir
    return [
        result.write_csv(out / "sweep.csv"),
        result.write_sidecar(out / "sweep.json"),
    ]


def cmd_lazy(manifest: RunManifest) -> list[Path]:
    return run_lazy(manifest.train_config(lazy_config)).write(manifest.out_dir)


def cmd_phase(manifest: RunManifest) -> list[Path]:
    return run_phase(manifest.train_config(default_config)).write(manifest.out_dir)


def cmd_couple(manifest: RunManifest) -> list[Path]:
    result = run_couple(
        manifest.train_config(default_config),
        reference_size=settings.reference_size(manifest.fast),
    )
    return result.write(manifest.out_dir)


def cmd_figure(manifest: RunManifest) -> list[Path]:
    assert manifest.figure is not None
    ctx = FigureContext(
        overrides=load_overrides(manifest.config),
        fast=manifest.fast,
        workers=manifest.workers,
        seed=manifest.seed,
    )
    return make_figure(manifest.figure, ctx).write(manifest.out_dir)


COMMANDS = {
    "train": cmd_train,
    "reference": cmd_reference,
    "sweep": cmd_sweep,
    "lazy": cmd_lazy,
    "phase": cmd_phase,
    "couple": cmd_couple,
    "figure": cmd_figure,
}


def _describe_validation(error: ValidationError) -> str:
    return "; ".join(
        f"{'.'.join(str(part) for part in item['loc']) or '<root>'}: {item['msg']}"
        for item in error.errors()
    )


def main(argv: Sequence[str] | None = None) -> int:
    """Run one command and map failures to exit codes.

    Exit codes:
    - 0: success
    - 1: invalid configuration (including failed rate fits)
    - 2: numerical divergence
    - 3: I/O error (unreadable config, malformed snapshot, unwritable output)
    """
    args = parse_args(argv)
    set_log_level(args.log_level or settings.log_level)
    manifest = RunManifest.from_args(args)
    logger.info("meanode v%s: %s", __version__, manifest.command)
    started = time.perf_counter()
    try:
        manifest.out_dir.mkdir(parents=True, exist_ok=True)
        paths = COMMANDS[manifest.command](manifest)
    except DivergenceError as e:
        logger.error("Diverged: %s", e)
        return EXIT_DIVERGED
    except ValidationError as e:
        logger.error("Invalid config: %s", _describe_validation(e))
        return EXIT_CONFIG
    except (ConfigError, FitError) as e:
        logger.error("Invalid config: %s", e)
        return EXIT_CONFIG
    except OSError as e:
        logger.error("I/O error: %s", e)
        return EXIT_IO
    except ValueError as e:
        # Malformed JSON and non-object documents
        logger.error("Invalid config: %s", e)
        return EXIT_CONFIG
    for path in paths:
        logger.debug("Wrote %s", path)
    logger.info(
        "Done in %.2fs, %s file(s) in %s",
        time.perf_counter() - started,
        len(paths),
        manifest.out_dir,
    )
    return EXIT_OK


def run() -> None:
    sys.exit(main())


if __name__ == "__main__":
    run()
