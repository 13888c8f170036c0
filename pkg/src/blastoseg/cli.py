"""Command-line entry point.

Subcommands: generate, train, eval, segment, sweep, serve. Every command
runs the same handler functions the HTTP service exposes; pass --server to
forward the request to a running service instead of executing in process.

Exit codes: 0 success, 64 usage error, 65 checkpoint mismatch, 2 diverged
training, 1 any other pipeline failure.

The BLASTOSEG_THREADS environment variable seeds the numeric libraries'
thread-count variables; it must be applied before numpy is first imported,
so this module defers all heavy imports into the command bodies.
"""

import json
import os
import sys

import click

from .errors import BlastosegError, CheckpointError, TrainingDiverged

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_DIVERGED = 2
EXIT_USAGE = 64
EXIT_CHECKPOINT = 65

SINGLE_MODELS = {
    "unet": "unet",
    "sd-unet": "sd_unet",
    "resunet": "resunet",
    "rd-unet": "rd_unet",
}
ENSEMBLE_MODELS = {
    "ensemble-unweighted": "unweighted",
    "ensemble-weighted": "weighted",
}
ALL_MODELS = list(SINGLE_MODELS) + list(ENSEMBLE_MODELS)


class RemoteFailure(Exception):
    """A non-2xx reply from --server, carrying the service error code."""

    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


def _apply_thread_env():
    value = os.environ.get("BLASTOSEG_THREADS")
    if value is None:
        return
    if not value.isdigit() or int(value) < 1:
        raise click.UsageError(
            f"BLASTOSEG_THREADS must be a positive integer, got {value!r}")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(var, value)


def _dispatch(ctx, op, request_name, payload):
    """Run one operation locally or against --server; returns a plain dict."""
    server = ctx.obj.get("server")
    if server:
        import httpx

        reply = httpx.post(f"{server.rstrip('/')}/{op}", json=payload, timeout=None)
        if reply.status_code >= 400:
            try:
                info = reply.json().get("error") or {}
            except ValueError:
                info = {}
            raise RemoteFailure(info.get("code", "error"),
                                info.get("message", reply.text))
        return reply.json()

    from .service import handlers, schemas

    request = getattr(schemas, request_name)(**payload)
    response = getattr(handlers, f"handle_{op}")(request)
    return response.model_dump()


def _emit(result):
    click.echo(json.dumps(result, indent=2, sort_keys=True))


def _split_model(name):
    """CLI model name -> (expect_model, scheme), either possibly None."""
    if name is None:
        return None, None
    if name in SINGLE_MODELS:
        return SINGLE_MODELS[name], None
    return None, ENSEMBLE_MODELS[name]


@click.group()
@click.option("--server", default=None, metavar="URL",
              help="Forward commands to a running blastoseg service.")
@click.pass_context
def cli(ctx, server):
    """Blastocyst segmentation toolkit."""
    ctx.ensure_object(dict)
    ctx.obj["server"] = server


@cli.command()
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--blastocysts", default=20, show_default=True, type=click.IntRange(min=1))
@click.option("--frames", default=31, show_default=True, type=click.IntRange(min=1))
@click.option("--size", "image_size", default=500, show_default=True,
              type=click.IntRange(min=32), help="Rendered image size in pixels.")
@click.option("--noise-level", default=6.0, show_default=True, type=click.FloatRange(min=0))
@click.option("--debris-count", default=3, show_default=True, type=click.IntRange(min=0))
@click.option("--seed", default=0, show_default=True, type=int)
@click.pass_context
def generate(ctx, out_dir, blastocysts, frames, image_size, noise_level,
             debris_count, seed):
    """Write a synthetic phantom dataset to --out."""
    _emit(_dispatch(ctx, "generate", "GenerateRequest", {
        "out_dir": out_dir,
        "blastocysts": blastocysts,
        "frames": frames,
        "image_size": image_size,
        "noise_level": noise_level,
        "debris_count": debris_count,
        "seed": seed,
    }))


@cli.command()
@click.option("--dataset", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--model", required=True, type=click.Choice(list(SINGLE_MODELS)))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--base-filters", default=16, show_default=True, type=click.IntRange(min=1))
@click.option("--size", default=240, show_default=True, type=click.IntRange(min=16),
              help="Working resolution the network trains at.")
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--augment/--no-augment", default=True, show_default=True)
@click.option("--config", type=click.Path(exists=True, dir_okay=False),
              help="key = value training configuration file.")
@click.option("--max-epochs", type=click.IntRange(min=1), default=None)
@click.option("--batch-size", type=click.IntRange(min=1), default=None)
@click.option("--lr", "initial_lr", type=click.FloatRange(min=0, min_open=True),
              default=None)
@click.option("--split-ratio", default=0.75, show_default=True,
              type=click.FloatRange(0, 1, min_open=True, max_open=True))
@click.option("--val-fraction", default=0.15, show_default=True,
              type=click.FloatRange(0, 1, min_open=True, max_open=True))
@click.option("--by-source", is_flag=True,
              help="Split whole blastocysts instead of single frames.")
@click.pass_context
def train(ctx, dataset, model, out_dir, base_filters, size, seed, augment,
          config, max_epochs, batch_size, initial_lr, split_ratio,
          val_fraction, by_source):
    """Train one model on a dataset directory; writes checkpoint + history."""
    config_text = None
    if config is not None:
        with open(config) as fh:
            config_text = fh.read()
    _emit(_dispatch(ctx, "train", "TrainRequest", {
        "dataset": dataset,
        "model": SINGLE_MODELS[model],
        "out_dir": out_dir,
        "base_filters": base_filters,
        "size": size,
        "seed": seed,
        "augment": augment,
        "split_ratio": split_ratio,
        "val_fraction": val_fraction,
        "by_source": by_source,
        "config_text": config_text,
        "max_epochs": max_epochs,
        "batch_size": batch_size,
        "initial_lr": initial_lr,
    }))


@cli.command(name="eval")
@click.option("--dataset", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--checkpoint", "checkpoints", required=True, multiple=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--model", default=None, type=click.Choice(ALL_MODELS),
              help="Expected architecture, or an ensemble scheme for several "
                   "checkpoints.")
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--threshold", default=0.5, show_default=True,
              type=click.FloatRange(0, 1, min_open=True, max_open=True))
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--split-ratio", default=0.75, show_default=True,
              type=click.FloatRange(0, 1, min_open=True, max_open=True))
@click.option("--all", "use_all", is_flag=True,
              help="Evaluate every pair instead of the seeded test split.")
@click.option("--overlays", default=4, show_default=True, type=click.IntRange(min=0))
@click.pass_context
def evaluate(ctx, dataset, checkpoints, model, out_dir, threshold, seed,
             split_ratio, use_all, overlays):
    """Evaluate checkpoints on the test split; writes reports and overlays."""
    expect_model, scheme = _split_model(model)
    _emit(_dispatch(ctx, "eval", "EvalRequest", {
        "dataset": dataset,
        "checkpoints": list(checkpoints),
        "out_dir": out_dir,
        "scheme": scheme,
        "expect_model": expect_model,
        "threshold": threshold,
        "seed": seed,
        "split_ratio": split_ratio,
        "use_all": use_all,
        "overlays": overlays,
    }))


@cli.command()
@click.option("--image", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--checkpoint", "checkpoints", required=True, multiple=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--model", default=None, type=click.Choice(ALL_MODELS))
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
@click.option("--threshold", default=0.5, show_default=True,
              type=click.FloatRange(0, 1, min_open=True, max_open=True))
@click.pass_context
def segment(ctx, image, checkpoints, model, out_path, threshold):
    """Segment one grayscale PNG into a mask PNG."""
    expect_model, scheme = _split_model(model)
    _emit(_dispatch(ctx, "segment", "SegmentRequest", {
        "image": image,
        "checkpoints": list(checkpoints),
        "out_path": out_path,
        "scheme": scheme,
        "expect_model": expect_model,
        "threshold": threshold,
    }))


@cli.command()
@click.option("--dataset", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--checkpoint", "checkpoints", required=True, multiple=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--model", default=None, type=click.Choice(ALL_MODELS))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--split-ratio", default=0.75, show_default=True,
              type=click.FloatRange(0, 1, min_open=True, max_open=True))
@click.option("--all", "use_all", is_flag=True)
@click.pass_context
def sweep(ctx, dataset, checkpoints, model, out_dir, seed, split_ratio, use_all):
    """Micro-Jaccard across thresholds 0.1 to 0.9; writes a 9-row table."""
    expect_model, scheme = _split_model(model)
    _emit(_dispatch(ctx, "sweep", "SweepRequest", {
        "dataset": dataset,
        "checkpoints": list(checkpoints),
        "out_dir": out_dir,
        "scheme": scheme,
        "expect_model": expect_model,
        "seed": seed,
        "split_ratio": split_ratio,
        "use_all": use_all,
    }))


@cli.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8000, show_default=True, type=int)
def serve(host, port):
    """Run the HTTP service."""
    import uvicorn

    from .service import create_app

    uvicorn.run(create_app(), host=host, port=port)


def main(argv=None):
    try:
        _apply_thread_env()
        cli.main(args=argv, standalone_mode=False, obj={})
    except click.exceptions.Exit as exc:
        return int(exc.exit_code)
    except click.UsageError as exc:
        click.echo(f"usage error: {exc.format_message()}", err=True)
        return EXIT_USAGE
    except click.ClickException as exc:
        exc.show()
        return EXIT_FAILURE
    except click.Abort:
        click.echo("aborted", err=True)
        return EXIT_FAILURE
    except RemoteFailure as exc:
        click.echo(f"error[{exc.code}]: {exc}", err=True)
        if exc.code == "checkpoint_error":
            return EXIT_CHECKPOINT
        if exc.code == "training_diverged":
            return EXIT_DIVERGED
        return EXIT_FAILURE
    except CheckpointError as exc:
        click.echo(f"error[checkpoint]: {exc}", err=True)
        return EXIT_CHECKPOINT
    except TrainingDiverged as exc:
        click.echo(f"error[diverged]: {exc}", err=True)
        return EXIT_DIVERGED
    except BlastosegError as exc:
        click.echo(f"error: {exc}", err=True)
        return EXIT_FAILURE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
