import functools
import json
import logging
import sys
import time
from pathlib import Path

import click
import numpy as np
from pydantic import ValidationError

from mpe.catalog import FeatureCatalog, group_by_frequency, ingest as ingest_rows, load_splits, save_splits
from mpe.checkpoint import Checkpoint
from mpe.errors import CatalogMismatchError, MissingPrerequisiteError, MpeError
from mpe.models import Phase, RunConfig, SynthSpec
from mpe.packfmt import PackedTable, dump as dump_table, lookup_batch
from mpe.report import pack_checkpoint, run_sweep, write_packed_outputs, write_phase_outputs, write_report
from mpe.search import SampledPrecision, average_bits, read_precision, sample_precision, write_precision
from mpe.synth import generate
from mpe.trainer import align_with_search, evaluate, load_model, run_phase


def handle_errors(command):
    """Turn library errors into a single `<kind>: <message>` line and a nonzero exit."""

    @functools.wraps(command)
    def wrapper(*args, **kwargs):
        try:
            return command(*args, **kwargs)
        except MpeError as e:
            raise click.ClickException(f"{e.kind}: {e}") from e
        except ValidationError as e:
            details = "; ".join(f"{'.'.join(str(part) for part in error['loc'])}: {error['msg']}" for error in e.errors())
            raise click.ClickException(f"config: {details}") from e
        except FileNotFoundError as e:
            raise click.ClickException(f"missing_prerequisite: {e}") from e

    return wrapper


def load_data(data_dir: str | Path):
    data_dir = Path(data_dir)
    catalog_path = data_dir / "catalog.bin"
    if not catalog_path.exists():
        raise MissingPrerequisiteError(f"no catalog in {data_dir}; run `ingest` first")
    return FeatureCatalog.load(catalog_path), load_splits(data_dir)


def load_checkpoint(path: str | Path, catalog: FeatureCatalog) -> Checkpoint:
    checkpoint = Checkpoint.load(path)
    if checkpoint.catalog_hash != catalog.digest():
        raise CatalogMismatchError(f"{path} was trained on a different catalog")
    return checkpoint


def checkpoint_precision(checkpoint: Checkpoint, precision_file: str | None, groups) -> SampledPrecision:
    """The precision to apply: an explicit file, the checkpoint's fixed bits, or its search distribution."""
    if precision_file is not None:
        return read_precision(precision_file, groups)
    if checkpoint.meta.get("group_bits") is not None:
        bits = checkpoint.meta["group_bits"]
        return SampledPrecision(bit_of_group=bits, avg_bits=average_bits(np.array(bits), groups.group_sizes))
    model = load_model(checkpoint)
    if model.gamma_state is None:
        raise MissingPrerequisiteError("checkpoint has no precision; pass --precision")
    return sample_precision(model.gamma_state, model.candidates, groups.group_sizes)


def resolve_config(config_path: str | None, **overrides) -> RunConfig:
    values = {}
    if config_path is not None:
        values = RunConfig.model_validate_json(Path(config_path).read_text()).model_dump()
    values.update({key: value for key, value in overrides.items() if value is not None})
    return RunConfig.model_validate(values)


@click.group()
@click.option("--verbose", "-v", count=True, help="Repeat for more detail (-v info, -vv debug).")
def cli(verbose: int) -> None:
    logging.basicConfig(
        level=max(logging.DEBUG, logging.WARNING - 10 * verbose),
        stream=sys.stderr,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        force=True,
    )


@cli.command()
@click.option("--spec", "spec_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--output-dir", "-o", type=click.Path(file_okay=False), default="data")
@handle_errors
def synth(spec_path: str | None, seed: int | None, output_dir: str) -> None:
    """Generate a synthetic click log and its ground-truth importance sidecar."""
    spec = SynthSpec.model_validate_json(Path(spec_path).read_text()) if spec_path else SynthSpec()
    if seed is not None:
        spec = spec.model_copy(update={"seed": seed})
    output = Path(output_dir)
    output.mkdir(parents=True, exist_ok=True)
    generate(spec).write(output / "data.tsv", output / "importance.tsv")
    (output / "synth_spec.json").write_text(spec.model_dump_json(indent=2))
    click.echo(f"Wrote {spec.num_samples} rows to {output / 'data.tsv'}")


@cli.command()
@click.argument("tsv", type=click.Path(exists=True, dir_okay=False))
@click.option("--seed", type=int, default=0)
@click.option("--dim", type=int, default=16, help="Embedding dimension recorded in the catalog.")
@click.option("--output-dir", "-o", type=click.Path(file_okay=False), default="data")
@handle_errors
def ingest(tsv: str, seed: int, dim: int, output_dir: str) -> None:
    """Build the feature catalog and the 8:1:1 splits from a TSV click log."""
    with open(tsv, encoding="utf-8") as f:
        catalog, dataset = ingest_rows(f, seed=seed, d=dim)
    output = Path(output_dir)
    output.mkdir(parents=True, exist_ok=True)
    catalog.save(output / "catalog.bin")
    save_splits(dataset, output)
    summary = {
        "catalog_hash": catalog.digest(),
        "n": catalog.n,
        "d": catalog.d,
        "fields": catalog.field_names,
        "seed": seed,
        **{f"{name}_size": len(dataset.split(name)) for name in ("train", "valid", "test")},
    }
    (output / "ingest.json").write_text(json.dumps(summary, indent=2))
    click.echo(json.dumps(summary))


@cli.command()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--phase", type=click.Choice([phase.value for phase in Phase]), default=None)
@click.option("--data-dir", type=click.Path(file_okay=False), default=None)
@click.option("--output-dir", "-o", type=click.Path(file_okay=False), default=None)
@click.option("--prior", "prior_checkpoint", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--precision", "precision_file", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--lambda", "reg_lambda", type=float, default=None)
@click.option("--epochs", type=int, default=None)
@click.option("--seed", type=int, default=None)
@handle_errors
def train(config_path, phase, data_dir, output_dir, prior_checkpoint, precision_file, reg_lambda, epochs, seed) -> None:
    """Run one training phase and write its checkpoint, metrics log and test metrics."""
    config = resolve_config(
        config_path,
        phase=phase,
        data_dir=data_dir,
        output_dir=output_dir,
        prior_checkpoint=prior_checkpoint,
        precision_file=precision_file,
        reg_lambda=reg_lambda,
        epochs=epochs,
        seed=seed,
    )
    if config.data_dir is None:
        raise MissingPrerequisiteError("no data directory; pass --data-dir or set data_dir")
    catalog, data = load_data(config.data_dir)

    prior = sampled = None
    if config.phase.needs_search_checkpoint:
        if config.prior_checkpoint is None:
            raise MissingPrerequisiteError(f"phase {config.phase} needs --prior (a search checkpoint)")
        prior = load_checkpoint(config.prior_checkpoint, catalog)
        config = align_with_search(config, prior)
    groups = group_by_frequency(catalog, config.group_size)
    if prior is not None and config.precision_file is not None:
        sampled = read_precision(config.precision_file, groups)

    result = run_phase(config.train_config(), data, catalog, prior=prior, sampled=sampled)
    summary = write_phase_outputs(result, Path(config.output_dir) / config.phase.value, config, groups, data)
    click.echo(json.dumps({"phase": config.phase.value, **summary}))


@cli.command()
@click.argument("checkpoint_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--data-dir", type=click.Path(file_okay=False), required=True)
@click.option("--output", "-o", type=click.Path(dir_okay=False), default="precision.tsv")
@handle_errors
def sample(checkpoint_path: str, data_dir: str, output: str) -> None:
    """Sample per-group bit widths from a search checkpoint."""
    catalog, _ = load_data(data_dir)
    checkpoint = load_checkpoint(checkpoint_path, catalog)
    if checkpoint.phase != Phase.SEARCH:
        raise MissingPrerequisiteError(f"{checkpoint_path} is a {checkpoint.phase} checkpoint, not search")
    groups = group_by_frequency(catalog, checkpoint.meta["config"]["group_size"])
    model = load_model(checkpoint)
    sampled = sample_precision(model.gamma_state, model.candidates, groups.group_sizes)
    write_precision(output, sampled, groups)
    click.echo(Path(output).with_suffix(".json").read_text())


@cli.command(name="pack")
@click.argument("checkpoint_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--data-dir", type=click.Path(file_okay=False), required=True)
@click.option("--precision", "precision_file", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--output-dir", "-o", type=click.Path(file_okay=False), default=None)
@handle_errors
def pack_command(checkpoint_path: str, data_dir: str, precision_file: str | None, output_dir: str | None) -> None:
    """Pack a trained table at its sampled bit widths and report the compression."""
    catalog, _ = load_data(data_dir)
    checkpoint = load_checkpoint(checkpoint_path, catalog)
    groups = group_by_frequency(catalog, checkpoint.meta["config"]["group_size"])
    sampled = checkpoint_precision(checkpoint, precision_file, groups)
    table, compression = pack_checkpoint(checkpoint, sampled, catalog, groups)
    output = Path(output_dir) if output_dir else Path(checkpoint_path).parent
    output.mkdir(parents=True, exist_ok=True)
    write_packed_outputs(table, compression, output)
    click.echo(compression.model_dump_json())


@cli.command(name="eval")
@click.option("--checkpoint", "checkpoint_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--packed", "packed_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Serve embeddings from this packed table; the MLP still comes from the checkpoint.")
@click.option("--data-dir", type=click.Path(file_okay=False), required=True)
@click.option("--split", type=click.Choice(["train", "valid", "test"]), default="test")
@handle_errors
def eval_command(checkpoint_path: str, packed_path: str | None, data_dir: str, split: str) -> None:
    """Evaluate AUC and logloss from a checkpoint or a packed table."""
    catalog, data = load_data(data_dir)
    checkpoint = load_checkpoint(checkpoint_path, catalog)
    groups = group_by_frequency(catalog, checkpoint.meta["config"]["group_size"])
    table = PackedTable.load(packed_path, catalog_hash=catalog.digest()) if packed_path else None
    metrics = evaluate(load_model(checkpoint), data.split(split), groups, table=table)
    click.echo(json.dumps({"split": split, "source": "packed" if table else "checkpoint", **metrics.to_dict(prefix=split)}))


@cli.command()
@click.argument("run_dir", type=click.Path(file_okay=False))
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--data-dir", type=click.Path(file_okay=False), default=None)
@click.option("--lambdas", type=str, default=None, help="Comma-separated sweep, e.g. 1e-6,3e-6,1e-5,3e-5,1e-4,3e-4")
@handle_errors
def report(run_dir: str, config_path: str | None, data_dir: str | None, lambdas: str | None) -> None:
    """Consolidate a run directory into report.tsv and curve.tsv, optionally sweeping lambda first."""
    run_path = Path(run_dir)
    if lambdas:
        config = resolve_config(config_path, data_dir=data_dir, output_dir=run_dir)
        if config.data_dir is None:
            raise MissingPrerequisiteError("a lambda sweep needs --data-dir or data_dir in the config")
        catalog, data = load_data(config.data_dir)
        run_path.mkdir(parents=True, exist_ok=True)
        (run_path / "config.json").write_text(config.model_dump_json(indent=2, by_alias=True))
        run_sweep(config, [float(value) for value in lambdas.split(",")], catalog, data, run_path)
    if not run_path.is_dir():
        raise MissingPrerequisiteError(f"no run directory {run_dir}")
    table = write_report(run_path)
    click.echo(table.to_csv(sep="\t", index=False), nl=False)


@cli.command()
@click.argument("packed_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--features", type=int, default=1, help="Features to show per group.")
@handle_errors
def dump(packed_path: str, features: int) -> None:
    """Print a packed table's directory and the codes of each group's first features."""
    click.echo(dump_table(PackedTable.load(packed_path), features), nl=False)


@cli.command()
@click.argument("packed_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--checkpoint", "checkpoint_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--batch-size", type=int, default=10_000)
@click.option("--repeats", type=int, default=5)
@click.option("--seed", type=int, default=0)
@handle_errors
def bench(packed_path: str, checkpoint_path: str, batch_size: int, repeats: int, seed: int) -> None:
    """Time batched packed lookups against full-precision row gathers."""
    table = PackedTable.load(packed_path)
    embeddings = load_model(Checkpoint.load(checkpoint_path)).embeddings
    ids = np.random.default_rng(seed).integers(0, table.n, size=batch_size)

    def best_of(fn) -> float:
        timings = []
        for _ in range(repeats):
            start = time.perf_counter()
            fn()
            timings.append(time.perf_counter() - start)
        return min(timings)

    result = {
        "batch_size": batch_size,
        "packed_lookup_seconds": best_of(lambda: lookup_batch(table, ids)),
        "fp32_gather_seconds": best_of(lambda: embeddings[ids].astype(np.float32)),
    }
    click.echo(json.dumps(result))


if __name__ == "__main__":
    cli()
