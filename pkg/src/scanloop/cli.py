"""Typer CLI for Scanloop."""

import sys
from collections.abc import Iterator
from contextlib import contextmanager
from enum import Enum
from pathlib import Path

import click
import typer
from pydantic import ValidationError
from rich.console import Console
from rich.table import Table

from scanloop.common.exceptions import (
    DegenerateGeometryError,
    DegenerateKeypointsError,
    InsufficientStructureError,
    NoMatchesError,
    RegistrationFailedError,
    RelocalizationFailedError,
    ScanloopError,
)

app = typer.Typer(
    name="scanloop",
    help="Scanloop: LiDAR loop closing and relocalization at desk scale",
    no_args_is_help=True,
)
console = Console()

EXIT_VALIDATION = 2
EXIT_REGISTRATION = 3
EXIT_USAGE = 64

REGISTRATION_ERRORS = (
    NoMatchesError,
    RegistrationFailedError,
    RelocalizationFailedError,
    DegenerateGeometryError,
    DegenerateKeypointsError,
    InsufficientStructureError,
)


class SceneKind(str, Enum):
    urban = "urban"
    corridor = "corridor"
    loop = "loop"


SCENE_KINDS = {"urban": "urban-blocks", "corridor": "corridor", "loop": "loop-course"}


class Toggle(str, Enum):
    on = "on"
    off = "off"


class RegistrarKind(str, Enum):
    oracle = "oracle"
    network = "network"


class Solver(str, Enum):
    lgr = "lgr"
    ransac = "ransac"


@contextmanager
def _exit_codes() -> Iterator[None]:
    try:
        yield
    except REGISTRATION_ERRORS as e:
        console.print(f"[bold red]{e.code}[/bold red]: {e.message}")
        raise typer.Exit(EXIT_REGISTRATION)
    except ValidationError as e:
        console.print(f"[bold red]INVALID_CONFIG[/bold red]: {e.error_count()} error(s)\n{e}")
        raise typer.Exit(EXIT_VALIDATION)
    except ScanloopError as e:
        console.print(f"[bold red]{e.code}[/bold red]: {e.message}")
        raise typer.Exit(EXIT_VALIDATION)


def _settings(ctx: typer.Context):
    return ctx.obj["settings"]


def _network(settings, checkpoint: Path | None, seed: int):
    from scanloop.pipeline import RegistrationNetwork

    if checkpoint is not None:
        return RegistrationNetwork.load(checkpoint, settings)
    console.print("[yellow]No checkpoint given; using untrained parameters[/yellow]")
    return RegistrationNetwork(settings, seed=seed)


def _spec(scene: SceneKind, seed: int, settings, **fields):
    from scanloop.harness.scenes import SceneSpec

    return SceneSpec(
        kind=SCENE_KINDS[scene.value],
        noise_sigma=settings.harness.noise_sigma,
        seed=seed,
        **fields,
    )


def _emit(record: dict, output: Path | None) -> None:
    from scanloop.common.jsonl import append_jsonl, dumps

    if output is not None:
        append_jsonl(output, record)
    console.print_json(dumps(record))


@app.callback()
def configure(
    ctx: typer.Context,
    config: Path | None = typer.Option(None, "--config", help="YAML settings file"),
    log_level: str | None = typer.Option(None, "--log-level", help="Override log level"),
):
    """Load settings and set up JSON logging on stderr."""
    from scanloop.common.config import load_settings
    from scanloop.common.logging import setup_logging

    if config is not None and not config.exists():
        raise typer.BadParameter(f"{config} does not exist", param_hint="--config")
    with _exit_codes():
        settings = load_settings(config)
    setup_logging(log_level or settings.log_level)
    ctx.obj = {"settings": settings}


@app.command()
def register(
    ctx: typer.Context,
    clouds: list[Path] | None = typer.Argument(None, help="Two KITTI .bin scans (A then B)"),
    scene: SceneKind = typer.Option(SceneKind.urban, help="Synthetic scene generator"),
    seed: int = typer.Option(0, help="Scene and parameter seed"),
    extent: float = typer.Option(30.0, help="Half side of the simulated area in meters"),
    solver: Solver = typer.Option(Solver.lgr, help="Pose solver"),
    overlap: float = typer.Option(0.5, help="Target overlap of the synthetic pair"),
    rotation: float = typer.Option(30.0, help="Maximum yaw offset in degrees"),
    checkpoint: Path | None = typer.Option(None, help="Parameter checkpoint"),
    no_votes: bool = typer.Option(False, "--no-votes", help="Use uniform keypoints"),
    output: Path | None = typer.Option(None, help="Append the JSON record here"),
):
    """Register a synthetic scene pair (or two KITTI scans) and print metrics JSON."""
    import numpy as np

    from scanloop.harness.experiments import ExperimentConfig, evaluate_pair
    from scanloop.harness.kitti import read_kitti_bin
    from scanloop.harness.scenes import generate_scene_pair

    settings = _settings(ctx)
    use_votes = False if no_votes else None
    if clouds and len(clouds) != 2:
        raise typer.BadParameter("expected exactly two scan files", param_hint="CLOUDS")
    config = ExperimentConfig.capture(
        "register",
        settings,
        seed,
        output,
        scene=scene.value,
        extent=extent,
        solver=solver.value,
        overlap=overlap,
        rotation_deg=rotation,
        votes=not no_votes,
        checkpoint=str(checkpoint) if checkpoint else None,
        clouds=[str(c) for c in clouds] if clouds else None,
    )
    with _exit_codes():
        network = _network(settings, checkpoint, seed)
        if clouds:
            result = network.register(
                read_kitti_bin(clouds[0]), read_kitti_bin(clouds[1]), solver.value, use_votes
            )
            _emit(config.record(pair=0, **result.as_dict()), output)
            return
        pair = generate_scene_pair(
            _spec(scene, seed, settings, extent=extent),
            rotation=np.radians(rotation),
            overlap=overlap,
            eps=settings.registration.overlap_eps,
            max_range=settings.harness.scan_range,
        )
        evaluation = evaluate_pair(network, pair, solver.value, use_votes)
    _emit(
        config.record(
            pair=seed,
            overlap=pair.overlap,
            metrics=evaluation.metrics,
            match_quality=evaluation.quality,
            **evaluation.result.as_dict(),
        ),
        output,
    )


@app.command()
def retrieve(
    ctx: typer.Context,
    course: SceneKind = typer.Option(SceneKind.loop, help="Course driven for the database"),
    seed: int = typer.Option(0, help="Scene seed"),
    extent: float = typer.Option(30.0, help="Half side of the simulated area in meters"),
    describer: RegistrarKind = typer.Option(RegistrarKind.oracle, help="Descriptor source"),
    checkpoint: Path | None = typer.Option(None, help="Parameter checkpoint (network)"),
    laps: float = typer.Option(1.5, help="Laps driven; the first builds the database"),
    stride: int = typer.Option(5, help="Use every n-th scan"),
    positive_radius: float = typer.Option(5.0, help="True-candidate distance in meters"),
    database: Path | None = typer.Option(None, help="Persist the descriptor database here"),
    output: Path | None = typer.Option(None, help="Append the JSON record here"),
):
    """Build a descriptor database from one lap and query it with the revisit."""
    from scanloop.harness.experiments import ExperimentConfig, retrieval_experiment
    from scanloop.harness.registrar import OracleRegistrar
    from scanloop.harness.scenes import generate_scene, simulate_sequence

    settings = _settings(ctx)
    scan_range = settings.harness.scan_range
    config = ExperimentConfig.capture(
        "retrieve",
        settings,
        seed,
        output,
        course=course.value,
        extent=extent,
        describer=describer.value,
        laps=laps,
        stride=stride,
        positive_radius=positive_radius,
    )
    with _exit_codes():
        if describer is RegistrarKind.network:
            source = _network(settings, checkpoint, seed)
        else:
            source = OracleRegistrar(settings, max_range=scan_range, seed=seed)
        scene = generate_scene(_spec(course, seed, settings, extent=extent))
        sequence = simulate_sequence(scene, laps=laps, max_range=scan_range)
        run = retrieval_experiment(
            source,
            sequence,
            positive_radius,
            stride,
            normalize=settings.retrieval.normalize,
            database_path=database,
        )
    _emit(config.record(**run.as_dict()), output)


@app.command("slam-run")
def slam_run(
    ctx: typer.Context,
    course: SceneKind = typer.Option(SceneKind.loop, help="Simulated course"),
    seed: int = typer.Option(0, help="Scene seed"),
    extent: float = typer.Option(30.0, help="Half side of the simulated area in meters"),
    reloc: Toggle = typer.Option(Toggle.on, help="Relocalization worker"),
    loops: Toggle = typer.Option(Toggle.on, help="Loop-closing worker"),
    registrar: RegistrarKind = typer.Option(RegistrarKind.oracle, help="Pair registrar"),
    checkpoint: Path | None = typer.Option(None, help="Parameter checkpoint (network)"),
    threaded: bool = typer.Option(False, "--threaded", help="Run the three worker threads"),
    laps: float = typer.Option(1.2, help="Laps driven on closed courses"),
    speed: float = typer.Option(2.0, help="Cruise speed in m/s"),
    rate: float = typer.Option(5.0, help="Scan rate in Hz"),
    max_range: float = typer.Option(15.0, help="Simulated sensor range in meters"),
    kitti_sequence: str | None = typer.Option(
        None, help="Run on <data root>/sequences/<id> instead"
    ),
    limit: int | None = typer.Option(None, help="Use at most this many KITTI scans"),
    trajectory: Path | None = typer.Option(None, help="Write the estimate as TUM text"),
    events: Path | None = typer.Option(None, help="Write worker events as JSON lines"),
    output: Path | None = typer.Option(None, help="Append the JSON record here"),
):
    """Track, relocalize and close loops over a scan sequence."""
    from scanloop.harness.experiments import ExperimentConfig, run_slam
    from scanloop.harness.kitti import KittiSequence
    from scanloop.harness.registrar import OracleRegistrar
    from scanloop.harness.scenes import generate_scene, simulate_sequence
    from scanloop.slam.trajectory import ape, write_tum

    settings = _settings(ctx)
    if kitti_sequence is not None and registrar is RegistrarKind.oracle:
        raise typer.BadParameter(
            "KITTI scans carry no world labels; use --registrar network",
            param_hint="--registrar",
        )
    config = ExperimentConfig.capture(
        "slam",
        settings,
        seed,
        output,
        course=course.value,
        extent=extent,
        reloc=reloc.value,
        loops=loops.value,
        registrar=registrar.value,
        threaded=threaded,
        laps=laps,
        speed=speed,
        rate=rate,
        max_range=max_range,
        kitti_sequence=kitti_sequence,
    )
    with _exit_codes():
        if kitti_sequence is not None:
            kitti = KittiSequence(settings.resolved_data_root, kitti_sequence)
            scans = list(kitti.scans(limit=limit))
            reference = kitti.ground_truth()
            if reference is not None and limit is not None:
                reference = reference[:limit]
            pair_registrar = _network(settings, checkpoint, seed)
        else:
            scene = generate_scene(_spec(course, seed, settings, extent=extent))
            sequence = simulate_sequence(scene, speed, rate, laps, max_range)
            reference = sequence.ground_truth()
            if registrar is RegistrarKind.oracle:
                pair_registrar = OracleRegistrar(settings, max_range=max_range, seed=seed)
                scans = pair_registrar.observe_sequence(sequence)
            else:
                pair_registrar = _network(settings, checkpoint, seed)
                scans = sequence.clouds()
        run = run_slam(
            scans,
            pair_registrar,
            settings.slam,
            relocalization=reloc is Toggle.on,
            loop_closing=loops is Toggle.on,
            threaded=threaded,
            events_path=events,
        )
        report = ape(run.trajectory, reference) if reference else None
    if trajectory is not None:
        write_tum(trajectory, run.trajectory)
    _emit(
        config.record(
            summary=run.summary(),
            ape=report.as_dict() if report is not None else None,
            loops=[loop.as_dict() for loop in run.loops],
        ),
        output,
    )


@app.command("train-toy")
def train_toy(
    ctx: typer.Context,
    stage: int = typer.Option(1, min=1, max=2, help="1: matching losses, 2: triplet probing"),
    pairs: int = typer.Option(200, help="Synthetic pairs (stage 1)"),
    scene: SceneKind = typer.Option(SceneKind.urban, help="Scene generator (stage 1)"),
    seed: int = typer.Option(0, help="First scene seed"),
    extent: float = typer.Option(30.0, help="Half side of the simulated area in meters"),
    epochs: int | None = typer.Option(None, help="Override training.epochs"),
    overlap: float = typer.Option(0.5, help="Target pair overlap (stage 1)"),
    checkpoint: Path | None = typer.Option(None, help="Starting checkpoint (required for 2)"),
    output_dir: Path | None = typer.Option(None, help="Curves and checkpoints directory"),
):
    """Run one toy training stage on synthetic data."""
    from scanloop.harness.experiments import ExperimentConfig, training_pairs, training_triplets
    from scanloop.harness.scenes import generate_scene, simulate_sequence
    from scanloop.losses.trainer import train_toy as run_stage

    settings = _settings(ctx)
    if stage == 2 and checkpoint is None:
        raise typer.BadParameter(
            "stage 2 starts from a stage-1 checkpoint", param_hint="--checkpoint"
        )
    output_dir = output_dir or settings.harness.output_dir / f"stage{stage}"
    scan_range = settings.harness.scan_range
    config = ExperimentConfig.capture(
        "train",
        settings,
        seed,
        output_dir / "run.jsonl",
        stage=stage,
        extent=extent,
        pairs=pairs,
        scene=scene.value,
        epochs=epochs,
        checkpoint=str(checkpoint) if checkpoint else None,
    )
    with _exit_codes():
        if stage == 1:
            dataset = training_pairs(
                _spec(scene, seed, settings, extent=extent),
                pairs,
                overlap,
                max_range=scan_range,
                eps=settings.registration.overlap_eps,
            )
        else:
            sequence = simulate_sequence(
                generate_scene(_spec(SceneKind.loop, seed, settings, extent=extent)),
                laps=1.5,
                max_range=scan_range,
            )
            dataset = training_triplets(
                sequence, settings.training.positives, settings.training.negatives, seed=seed
            )
        console.print(f"[bold green]Stage {stage}[/bold green] on {len(dataset)} samples")
        run = run_stage(dataset, stage, settings, checkpoint, output_dir, epochs)
    config.emit(
        stage=run.stage,
        losses=run.losses,
        metrics=run.metrics,
        checkpoint=str(run.checkpoint) if run.checkpoint else None,
    )
    table = Table(title=f"Stage {stage}")
    table.add_column("epoch", justify="right")
    table.add_column("total", justify="right")
    for record in run.curves:
        table.add_row(str(record.epoch), f"{record.total:.6f}")
    console.print(table)
    if run.checkpoint is not None:
        console.print(f"Checkpoint: [bold]{run.checkpoint}[/bold]")


@app.command("eval")
def evaluate(
    ctx: typer.Context,
    results: Path | None = typer.Option(None, help="Registration records (JSON lines)"),
    estimate: Path | None = typer.Option(None, help="Estimated trajectory (TUM)"),
    reference: Path | None = typer.Option(None, help="Reference trajectory (TUM)"),
    output: Path | None = typer.Option(None, help="Append the JSON record here"),
):
    """Recompute metric summaries from exported artifacts."""
    from scanloop.common.jsonl import read_jsonl
    from scanloop.harness.experiments import ExperimentConfig, summarize_registration
    from scanloop.slam.trajectory import ape, read_tum

    settings = _settings(ctx)
    if results is None and (estimate is None or reference is None):
        raise typer.BadParameter("give --results or both --estimate and --reference")
    config = ExperimentConfig.capture(
        "eval",
        settings,
        output=output,
        results=str(results) if results else None,
        estimate=str(estimate) if estimate else None,
        reference=str(reference) if reference else None,
    )
    record = {}
    with _exit_codes():
        if results is not None:
            record["registration"] = summarize_registration(read_jsonl(results))
        if estimate is not None and reference is not None:
            record["ape"] = ape(read_tum(estimate), read_tum(reference)).as_dict()
    _emit(config.record(**record), output)


@app.command()
def selftest(
    only: list[str] | None = typer.Option(None, "--only", help="Run just these checks"),
):
    """Run every oracle check."""
    from scanloop.harness.selftest import run_selftest

    with _exit_codes():
        results = run_selftest(only)
    table = Table(title="Self-test")
    table.add_column("check")
    table.add_column("result")
    table.add_column("detail")
    table.add_column("seconds", justify="right")
    for r in results:
        verdict = "[green]PASS[/green]" if r.passed else "[bold red]FAIL[/bold red]"
        table.add_row(r.name, verdict, r.detail, f"{r.seconds:.2f}")
    console.print(table)
    if not all(r.passed for r in results):
        raise typer.Exit(EXIT_VALIDATION)


def main(argv: list[str] | None = None) -> int:
    """Entry point; maps usage errors to 64 and validation errors to 2."""
    args = list(sys.argv[1:] if argv is None else argv)
    try:
        code = app(args, prog_name="scanloop", standalone_mode=False)
    except click.UsageError as e:
        e.show()
        return EXIT_USAGE
    except click.Abort:
        console.print("[bold red]Aborted[/bold red]")
        return 1
    except ValidationError as e:
        console.print(f"[bold red]INVALID_CONFIG[/bold red]: {e}")
        return EXIT_VALIDATION
    return code if isinstance(code, int) else 0


if __name__ == "__main__":
    sys.exit(main())
