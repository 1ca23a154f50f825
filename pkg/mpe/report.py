"""
Run directories: writing phase artifacts, sweeping the regularization
coefficient, and consolidating everything into report tables.

A phase directory holds `checkpoint.bin`, `metrics.jsonl`, `config.json`
and `eval.json` (test-split metrics). A search directory adds
`precision.tsv`/`precision.json`; a packed retrain adds `table.mpepack` and
`compression.json`.
"""
from __future__ import annotations

import json
import logging
from pathlib import Path

import numpy as np
import pandas as pd

from mpe.catalog import Dataset, FeatureCatalog, GroupAssignment, group_by_frequency
from mpe.checkpoint import Checkpoint
from mpe.models.config import Phase, RunConfig, TrainConfig
from mpe.packfmt import CompressionReport, PackedTable, pack, report
from mpe.search import SampledPrecision, write_precision
from mpe.trainer import PhaseResult, evaluate, load_model, model_average_bits, run_phase

logger = logging.getLogger(__name__)

REPORT_COLUMNS = ["run", "phase", "lambda", "test_auc", "test_logloss", "avg_bits", "bit_source", "ratio"]


def write_phase_outputs(
    result: PhaseResult, directory: Path, config: TrainConfig, groups: GroupAssignment, data: Dataset
) -> dict:
    directory.mkdir(parents=True, exist_ok=True)
    result.checkpoint.save(directory / "checkpoint.bin")
    (directory / "metrics.jsonl").write_text("".join(row.model_dump_json() + "\n" for row in result.metrics))
    (directory / "config.json").write_text(config.model_dump_json(indent=2, by_alias=True))
    if result.sampled is not None and config.phase == Phase.SEARCH:
        write_precision(directory / "precision.tsv", result.sampled, groups)

    test_metrics = evaluate(result.model, data.split("test"), groups)
    avg_bits, bit_source = phase_bits(result, config, groups)
    summary = {
        "split": "test",
        **test_metrics.to_dict(prefix="test"),
        "avg_bits": avg_bits,
        "bit_source": bit_source,
        "search_lambda": result.checkpoint.meta.get("search_lambda"),
    }
    (directory / "eval.json").write_text(json.dumps(summary, indent=2))
    return summary


def phase_bits(result: PhaseResult, config: TrainConfig, groups: GroupAssignment) -> tuple[float | None, str]:
    """Average bits of the model that produced a phase's test metrics, and what they measure.

    A search is evaluated as the mixture it trained, so its bits are the
    expected bits of that mixture rather than its sampled precision.
    """
    match config.phase:
        case Phase.BASELINE:
            return 32.0, "full"
        case Phase.SEARCH:
            return model_average_bits(result.model, groups), "expected"
        case Phase.QAT:
            return result.checkpoint.meta.get("avg_bits"), "fixed"
        case _:
            return result.checkpoint.meta.get("avg_bits"), "sampled"


def pack_checkpoint(
    checkpoint: Checkpoint, sampled: SampledPrecision, catalog: FeatureCatalog, groups: GroupAssignment
) -> tuple[PackedTable, CompressionReport]:
    model = load_model(checkpoint)
    table = pack(model.embeddings, sampled, model.quant, groups, catalog.digest(), model.candidates)
    return table, report(table)


def write_packed_outputs(table: PackedTable, compression: CompressionReport, directory: Path) -> None:
    table.save(directory / "table.mpepack")
    (directory / "compression.json").write_text(compression.model_dump_json(indent=2))


def run_sweep(
    config: RunConfig, lambdas: list[float], catalog: FeatureCatalog, data: Dataset, run_dir: Path
) -> None:
    """Search, sample, retrain, pack and evaluate once per regularization coefficient."""
    groups = group_by_frequency(catalog, config.group_size)
    base = config.train_config()
    for reg_lambda in lambdas:
        lambda_dir = run_dir / f"lambda_{reg_lambda:g}"
        logger.info("sweep: lambda=%g -> %s", reg_lambda, lambda_dir)

        search_config = base.model_copy(update={"phase": Phase.SEARCH, "reg_lambda": reg_lambda})
        search = run_phase(search_config, data, catalog)
        write_phase_outputs(search, lambda_dir / "search", search_config, groups, data)

        retrain_config = base.model_copy(update={"phase": Phase.RETRAIN, "reg_lambda": reg_lambda})
        retrain = run_phase(retrain_config, data, catalog, prior=search.checkpoint, sampled=search.sampled)
        write_phase_outputs(retrain, lambda_dir / "retrain", retrain_config, groups, data)

        table, compression = pack_checkpoint(retrain.checkpoint, search.sampled, catalog, groups)
        write_packed_outputs(table, compression, lambda_dir / "retrain")


def consolidate(run_dir: Path) -> tuple[pd.DataFrame, pd.DataFrame]:
    """One row per evaluated phase directory, plus the ratio-vs-AUC curve."""
    rows = []
    for eval_path in sorted(run_dir.rglob("eval.json")):
        directory = eval_path.parent
        config_path = directory / "config.json"
        if not config_path.exists():
            continue
        config = json.loads(config_path.read_text())
        evaluation = json.loads(eval_path.read_text())
        compression_path = directory / "compression.json"
        compression = json.loads(compression_path.read_text()) if compression_path.exists() else None

        phase = Phase(config["phase"])
        avg_bits, bit_source = evaluation.get("avg_bits"), evaluation.get("bit_source")
        if compression is not None:
            avg_bits, ratio, bit_source = compression["avg_bits"], compression["ratio"], "packed"
        elif phase == Phase.BASELINE:
            ratio = 1.0
        else:
            ratio = avg_bits / 32.0 if avg_bits is not None else None

        reg_lambda = np.nan
        if phase == Phase.SEARCH or phase.needs_search_checkpoint:
            reg_lambda = evaluation.get("search_lambda")
            if reg_lambda is None:
                reg_lambda = config["lambda"]
        rows.append(
            {
                "run": str(directory.relative_to(run_dir)),
                "phase": phase.value,
                "lambda": reg_lambda,
                "test_auc": evaluation["test/auc"],
                "test_logloss": evaluation["test/logloss"],
                "avg_bits": avg_bits,
                "bit_source": bit_source,
                "ratio": ratio,
            }
        )

    table = pd.DataFrame(rows, columns=REPORT_COLUMNS)
    table = table.sort_values(["lambda", "phase", "run"], na_position="first").reset_index(drop=True)
    curve = (
        table[table["phase"].isin([Phase.RETRAIN.value, Phase.BASELINE.value, Phase.QAT.value]) & table["ratio"].notna()]
        .loc[:, ["run", "lambda", "ratio", "test_auc"]]
        .sort_values("ratio")
        .reset_index(drop=True)
    )
    return table, curve


def write_report(run_dir: Path) -> pd.DataFrame:
    table, curve = consolidate(run_dir)
    table.to_csv(run_dir / "report.tsv", sep="\t", index=False)
    curve.to_csv(run_dir / "curve.tsv", sep="\t", index=False)
    return table
