"""Command line: dataset generation, training, sampling, evaluation and gradient checks.

Exit codes: 0 success, 1 invalid input or configuration, 2 runtime or
numeric failure. Every command prints a JSON summary that includes the
resolved configuration it ran with.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click

from . import runs
from .config import RunConfig, parse_value
from .errors import Dit3DError, NumericError

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class GradcheckFailure(Dit3DError):
    """A finite-difference check exceeded its threshold."""


def exit_code(exc: BaseException) -> int:
    if isinstance(exc, (click.UsageError, click.BadParameter, FileNotFoundError)):
        return EXIT_INVALID
    if isinstance(exc, (NumericError, GradcheckFailure)):
        return EXIT_RUNTIME
    if isinstance(exc, Dit3DError):
        return EXIT_INVALID
    return EXIT_RUNTIME


class Dit3DGroup(click.Group):
    """Maps exceptions onto the stable exit-code contract."""

    def main(self, args=None, prog_name=None, complete_var=None, standalone_mode=True, **extra):
        try:
            return super().main(args, prog_name, complete_var, standalone_mode=False, **extra)
        except click.exceptions.Exit as e:
            sys.exit(e.exit_code)
        except click.exceptions.Abort:
            click.echo("aborted", err=True)
            sys.exit(EXIT_RUNTIME)
        except click.ClickException as e:
            e.show()
            sys.exit(EXIT_INVALID)
        except Exception as e:  # noqa: BLE001 - every failure must map to an exit code
            click.echo(f"error: {type(e).__name__}: {e}", err=True)
            sys.exit(exit_code(e))


def emit(obj) -> None:
    click.echo(json.dumps(obj, indent=2, sort_keys=True, default=str))


def _parse_sets(items) -> dict:
    out = {}
    for item in items:
        if "=" not in item:
            raise click.BadParameter(f"expected key=value, got {item!r}", param_hint="--set")
        key, value = item.split("=", 1)
        out[key.strip()] = parse_value(value)
    return out


def _manifest(path) -> str:
    p = Path(path)
    return str(p / "manifest.csv") if p.is_dir() else str(p)


@click.group(cls=Dit3DGroup)
@click.version_option(package_name="artifact")
def cli():
    """Voxel diffusion transformer for point clouds."""


@cli.command("gen-data")
@click.option("--classes", type=int, default=4, show_default=True, help="number of shape classes (max 4)")
@click.option("--per-class", type=int, default=16, show_default=True)
@click.option("--points", type=int, default=256, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--test-fraction", type=float, default=0.0, show_default=True, help="per-class held-out share")
@click.option("--out", type=click.Path(file_okay=False), required=True)
def gen_data(classes, per_class, points, seed, test_fraction, out):
    """Write synthetic clouds and a manifest."""
    emit(runs.gen_data(classes, per_class, points, seed, out, test_fraction))


@cli.command()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--out-checkpoint", type=click.Path(dir_okay=False), required=True)
@click.option("--data", type=click.Path(exists=True), default=None, help="manifest file or dataset directory")
@click.option("--finetune-from", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--efficient", is_flag=True, default=False, help="train only scale factors, biases, norms, class table")
@click.option("--profile", type=click.Choice(["desk", "full"]), default=None)
@click.option("--epochs", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--log", "log_path", type=click.Path(dir_okay=False), default=None)
@click.option("--set", "sets", multiple=True, help="override any config key, e.g. --set train.lr=1e-3")
def train(config_path, out_checkpoint, data, finetune_from, efficient, profile, epochs, seed, log_path, sets):
    """Train (or fine-tune) a model; writes checkpoint, sidecar and a JSON-lines log."""
    overrides = _parse_sets(sets)
    overrides.update({
        "profile": profile,
        "data.manifest": _manifest(data) if data else None,
        "train.finetune_from": finetune_from,
        "train.efficient": True if efficient else None,
        "train.epochs": epochs,
        "train.seed": seed,
    })
    cfg = RunConfig.load(config_path, overrides)
    summary = runs.train_run(cfg, out_checkpoint, log_path)
    summary.pop("epoch_loss", None)
    emit(summary)


def _post(server: str, route: str, body: dict) -> dict:
    import httpx

    r = httpx.post(server.rstrip("/") + route, json=body, timeout=None)
    if r.status_code == 422:
        raise click.UsageError(f"server rejected request: {r.text}")
    if r.status_code >= 400:
        raise RuntimeError(f"server error {r.status_code}: {r.text}")
    return r.json()


def _class_arg(value):
    if value is None or value == "all":
        return value
    return int(value) if value.lstrip("-").isdigit() else value


@cli.command()
@click.option("--checkpoint", type=click.Path(dir_okay=False), default=None)
@click.option("--count", type=int, default=16, show_default=True)
@click.option("--class", "class_", default=None, help="class id or name, 'all' to cycle classes; omit for unconditional")
@click.option("--steps", type=int, default=None, help="reverse steps (default: the full chain)")
@click.option("--guidance", type=float, default=0.0, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--points", type=int, default=None)
@click.option("--out", type=click.Path(file_okay=False), required=True)
@click.option("--server", default=None, help="delegate to a running service at this URL")
def sample(checkpoint, count, class_, steps, guidance, seed, points, out, server):
    """Draw point clouds from a checkpoint."""
    cls = _class_arg(class_)
    if server:
        body = {"count": count, "class_id": cls, "steps": steps, "guidance": guidance, "seed": seed, "points": points}
        res = _post(server, "/sample", body)
        report = {"config": res["config"], "seconds": res["seconds"], "digest": res["digest"], "server": server}
        report["files"] = runs.write_samples(res["clouds"], out, report)
    else:
        if checkpoint is None:
            raise click.UsageError("--checkpoint is required without --server")
        report = runs.sample_run(checkpoint, count, cls, steps, guidance, seed, out, points)
    emit(report)


@cli.command("eval")
@click.option("--generated", type=click.Path(exists=True), required=True)
@click.option("--reference", type=click.Path(exists=True), required=True)
@click.option("--metrics", "metric_spec", default="cd,emd", show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), default=None)
@click.option("--server", default=None, help="delegate metric computation to a running service")
def eval_cmd(generated, reference, metric_spec, out, server):
    """1-NNA and coverage between two cloud sets."""
    if server:
        from .data import load_cloud_dir

        distances = runs.parse_metrics(metric_spec)
        body = {"generated": [c.tolist() for c in load_cloud_dir(generated)],
                "reference": [c.tolist() for c in load_cloud_dir(reference)],
                "metrics": distances, "seed": runs._sample_seed(generated)}
        report = _post(server, "/metrics/evaluate", body)
        report["config"] = {"generated": str(generated), "reference": str(reference), "metrics": distances,
                            "server": server}
        if out:
            runs.write_json(report, out)
    else:
        report = runs.eval_run(generated, reference, metric_spec, out)
    for w in report["warnings"]:
        click.echo(f"warning: {w}", err=True)
    emit(report)


@cli.command("sweep-steps")
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--steps", "steps_spec", default="10,50,100,1000", show_default=True)
@click.option("--reference", type=click.Path(exists=True), required=True)
@click.option("--count", type=int, default=16, show_default=True)
@click.option("--class", "class_", default="all", show_default=True)
@click.option("--guidance", type=float, default=0.0, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--metrics", "metric_spec", default="cd", show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), required=True)
def sweep_steps(checkpoint, steps_spec, reference, count, class_, guidance, seed, metric_spec, out):
    """Sample at several step counts and report metrics for each."""
    try:
        steps = [int(s) for s in steps_spec.split(",") if s.strip()]
    except ValueError:
        raise click.BadParameter(f"not a comma list of integers: {steps_spec!r}", param_hint="--steps") from None
    emit(runs.sweep_steps(checkpoint, steps, reference, count, _class_arg(class_), guidance, seed, metric_spec, out))


@cli.command()
@click.option("--full-model", is_flag=True, default=False, help="also check every parameter of the tiny model")
@click.option("--seed", type=int, default=0, show_default=True)
def gradcheck(full_model, seed):
    """64-bit finite-difference checks; exit 2 when any error exceeds its threshold."""
    from .gradcheck import run_suite

    results = run_suite(full_model=full_model, seed=seed)
    for r in results:
        click.echo(f"{'ok  ' if r.passed else 'FAIL'} {r.name:<22} err={r.error:.3e} thr={r.threshold:.0e} "
                   f"{r.seconds:.2f}s")
    worst = max(results, key=lambda r: r.error / r.threshold)
    summary = {"config": {"full_model": full_model, "seed": seed, "precision": "float64"},
               "checks": len(results), "failed": [r.name for r in results if not r.passed],
               "worst": {"name": worst.name, "error": worst.error, "threshold": worst.threshold}}
    emit(summary)
    if summary["failed"]:
        raise GradcheckFailure(f"gradient check failed for {', '.join(summary['failed'])} "
                               f"(worst: {worst.name}, error {worst.error:.3e})")


@cli.command()
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", type=int, default=8000, show_default=True)
def serve(checkpoint, host, port):
    """Run the HTTP service."""
    from .service import serve as run_server

    run_server(checkpoint, host, port)


def main() -> None:
    cli()


if __name__ == "__main__":
    main()
