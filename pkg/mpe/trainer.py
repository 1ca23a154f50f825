"""
Training and evaluation of the embedding + MLP click model in every phase.

Phases:
    baseline         full-precision embeddings
    qat              every feature quantized at `qat_bits`
    search           per-group mixture over the candidate bit widths, plus the bit regularizer
    retrain          sampled bit widths; MLP, step sizes and offsets from the best search
                     state, embeddings reset to their search-phase initial values
    retrain_lth      sampled bit widths; every parameter reset to its search-phase initial value
    no_retrain_eval  sampled bit widths applied to the best search state, evaluated only
"""
from __future__ import annotations

import logging
from typing import TypeVar

import numpy as np
from pydantic import BaseModel, ConfigDict

from mpe.catalog import Dataset, FeatureCatalog, GroupAssignment, group_by_frequency
from mpe.checkpoint import Checkpoint
from mpe.errors import CatalogMismatchError, MissingPrerequisiteError, TrainingDivergedError
from mpe.metrics import EpochMetrics, EvalMetrics, auc, logloss
from mpe.models.config import Phase, TrainConfig
from mpe.network import binary_cross_entropy, init_mlp, mlp_backward, mlp_forward, sigmoid
from mpe.optim import Adam
from mpe.packfmt import PackedTable, lookup_batch
from mpe.quant import QuantizerParams, clamp_step_sizes
from mpe.search import (
    CandidateSet,
    GroupPrecisionState,
    SampledPrecision,
    average_bits,
    bit_regularizer,
    expected_bits,
    gamma_grad,
    mix_backward,
    mix_forward,
    sample_precision,
)

logger = logging.getLogger(__name__)

EVAL_BATCH_SIZE = 4096


class ModelState(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    embeddings: np.ndarray
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    quant: QuantizerParams
    candidates: CandidateSet
    gamma_state: GroupPrecisionState | None = None
    # Fixed bit width per group; None means full precision (or the search mixture).
    group_bits: np.ndarray | None = None
    rng_seed: int = 0

    @staticmethod
    def initial(catalog: FeatureCatalog, groups: GroupAssignment, config: TrainConfig) -> ModelState:
        init_seed, _ = np.random.SeedSequence(config.seed).spawn(2)
        rng = np.random.default_rng(init_seed)
        embeddings = rng.normal(0.0, config.init_std, size=(catalog.n, catalog.d))
        weights, biases = init_mlp(rng, catalog.num_fields * catalog.d, config.hidden_sizes)

        candidates = config.candidates
        quant_bits = (config.qat_bits,) if config.phase == Phase.QAT else candidates.nonzero
        model = ModelState(
            embeddings=embeddings,
            weights=weights,
            biases=biases,
            quant=QuantizerParams.initial(quant_bits, catalog.d, config.init_std),
            candidates=candidates,
            rng_seed=config.seed,
        )
        if config.phase == Phase.SEARCH:
            model.gamma_state = GroupPrecisionState.initial(groups.g, candidates.m, config.tau)
        elif config.phase == Phase.QAT:
            model.group_bits = np.full(groups.g, config.qat_bits, dtype=np.int64)
        return model

    @property
    def is_search(self) -> bool:
        return self.gamma_state is not None and self.group_bits is None

    @property
    def is_quantized(self) -> bool:
        return self.is_search or self.group_bits is not None

    def parameters(self) -> dict[str, np.ndarray]:
        params = {"embeddings": self.embeddings}
        for layer, (weight, bias) in enumerate(zip(self.weights, self.biases)):
            params[f"mlp.w{layer}"] = weight
            params[f"mlp.b{layer}"] = bias
        params["quant.step_sizes"] = self.quant.step_sizes
        params["quant.offsets"] = self.quant.offsets
        if self.gamma_state is not None:
            params["gamma"] = self.gamma_state.gamma
        return params

    def decayed_parameters(self) -> set[str]:
        return {name for name in self.parameters() if name == "embeddings" or name.startswith("mlp.")}

    def with_precision(self, sampled: SampledPrecision) -> ModelState:
        """A view of this model that quantizes every group at its sampled bit width."""
        return self.model_copy(update={"group_bits": np.asarray(sampled.bit_of_group, dtype=np.int64), "gamma_state": None})

    def to_arrays(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {f"{prefix}{name}": array.copy() for name, array in self.parameters().items()}

    @staticmethod
    def from_arrays(
        arrays: dict[str, np.ndarray], candidates: CandidateSet, quant_bits: tuple[int, ...], tau: float | None
    ) -> ModelState:
        layers = len([name for name in arrays if name.startswith("mlp.w")])
        gamma = arrays.get("gamma")
        return ModelState(
            embeddings=arrays["embeddings"].copy(),
            weights=[arrays[f"mlp.w{layer}"].copy() for layer in range(layers)],
            biases=[arrays[f"mlp.b{layer}"].copy() for layer in range(layers)],
            quant=QuantizerParams(
                bits=quant_bits,
                step_sizes=arrays["quant.step_sizes"].copy(),
                offsets=arrays["quant.offsets"].copy(),
            ),
            candidates=candidates,
            gamma_state=GroupPrecisionState(gamma=gamma.copy(), tau=tau) if gamma is not None and tau else None,
        )


class PhaseResult(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    checkpoint: Checkpoint
    metrics: list[EpochMetrics]
    step_losses: list[float]
    model: ModelState
    sampled: SampledPrecision | None = None


def _embed(model: ModelState, ids: np.ndarray, groups: GroupAssignment):
    """Embeddings fed to the MLP, with what the backward pass needs."""
    raw = model.embeddings[ids]
    if model.group_bits is not None:
        slot_bits = model.group_bits[groups.group_of[ids]]
        bits = tuple(int(b) for b in np.unique(slot_bits))
        weights = (slot_bits[..., None] == np.array(bits)).astype(np.float64)
    elif model.gamma_state is not None:
        bits = model.candidates.bits
        weights = model.gamma_state.probability_matrix()[groups.group_of[ids]]
    else:
        return raw, None
    mixed, terms = mix_forward(raw, weights, bits, model.quant)
    return mixed, (raw, weights, bits, terms)


def forward_backward(
    model: ModelState,
    ids: np.ndarray,
    labels: np.ndarray,
    groups: GroupAssignment,
    reg_lambda: float = 0.0,
    batch_index: int | None = None,
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean cross-entropy (plus the bit regularizer in search) and its gradients."""
    if ids.shape[0] == 0:
        raise ValueError("empty batch")
    batch_size = ids.shape[0]
    embedded, cache = _embed(model, ids, groups)
    logits, activations = mlp_forward(embedded.reshape(batch_size, -1), model.weights, model.biases)
    loss, d_logits = binary_cross_entropy(logits, labels)
    if not np.isfinite(loss):
        raise TrainingDivergedError(f"non-finite loss {loss} at batch {batch_index}")

    d_x, d_weights, d_biases = mlp_backward(activations, d_logits, model.weights)
    d_embedded = d_x.reshape(embedded.shape)

    grads: dict[str, np.ndarray] = {}
    if cache is None:
        d_raw = d_embedded
    else:
        raw, weights, bits, terms = cache
        d_raw, d_step_sizes, d_offsets, d_mix = mix_backward(raw, weights, bits, model.quant, terms, d_embedded)
        grads["quant.step_sizes"] = d_step_sizes
        grads["quant.offsets"] = d_offsets
        if model.is_search:
            state = model.gamma_state
            d_probs = np.zeros_like(state.gamma)
            np.add.at(d_probs, groups.group_of[ids], d_mix)
            d_gamma = gamma_grad(state.probability_matrix(), d_probs, state.tau)
            reg_loss, d_gamma_reg = bit_regularizer(state, model.candidates, groups.regularizer_sums, reg_lambda)
            loss = loss + reg_loss
            grads["gamma"] = d_gamma + d_gamma_reg

    d_table = np.zeros_like(model.embeddings)
    np.add.at(d_table, ids, d_raw)
    grads["embeddings"] = d_table
    for layer, (d_weight, d_bias) in enumerate(zip(d_weights, d_biases)):
        grads[f"mlp.w{layer}"] = d_weight
        grads[f"mlp.b{layer}"] = d_bias
    return loss, grads


def adam_step(model: ModelState, grads: dict[str, np.ndarray], optimizer: Adam) -> None:
    optimizer.step(model.parameters(), grads)
    clamp_step_sizes(model.quant)


def make_optimizer(model: ModelState, config: TrainConfig) -> Adam:
    return Adam(
        lr=config.learning_rate,
        weight_decay=config.weight_decay,
        decayed=model.decayed_parameters(),
        lr_overrides={"gamma": config.gamma_lr},
    )


def predict(
    model: ModelState, ids: np.ndarray, groups: GroupAssignment, table: PackedTable | None = None
) -> np.ndarray:
    """Click probabilities, with embeddings from the packed table when one is given."""
    scores = []
    for start in range(0, ids.shape[0], EVAL_BATCH_SIZE):
        batch = ids[start : start + EVAL_BATCH_SIZE]
        embedded = lookup_batch(table, batch) if table is not None else _embed(model, batch, groups)[0]
        logits, _ = mlp_forward(embedded.reshape(batch.shape[0], -1), model.weights, model.biases)
        scores.append(sigmoid(logits))
    return np.concatenate(scores) if scores else np.zeros(0)


def evaluate(
    model: ModelState,
    split: Dataset,
    groups: GroupAssignment,
    sampled: SampledPrecision | None = None,
    table: PackedTable | None = None,
) -> EvalMetrics:
    if len(split) == 0:
        raise ValueError("cannot evaluate an empty split")
    if sampled is not None:
        model = model.with_precision(sampled)
    scores = predict(model, split.ids, groups, table)
    return EvalMetrics(auc=auc(split.labels, scores), logloss=logloss(split.labels, scores))


def model_average_bits(model: ModelState, groups: GroupAssignment) -> float | None:
    """Fixed bits when set, otherwise the expected bits of the search mixture."""
    if model.group_bits is not None:
        return average_bits(model.group_bits, groups.group_sizes)
    if model.gamma_state is not None:
        return average_bits(expected_bits(model.gamma_state, model.candidates), groups.group_sizes)
    return None


def _checkpoint(
    model: ModelState,
    initial: ModelState,
    config: TrainConfig,
    catalog_hash: str,
    optimizer_state: dict[str, np.ndarray],
    best_epoch: int,
    sampled: SampledPrecision | None,
    search_lambda: float | None = None,
) -> Checkpoint:
    arrays = model.to_arrays()
    arrays.update(initial.to_arrays("init."))
    arrays.update({f"adam.{name}": value for name, value in optimizer_state.items()})
    meta = {
        "phase": str(config.phase),
        "catalog_hash": catalog_hash,
        "config": config.model_dump(mode="json", by_alias=True),
        "candidate_bits": list(model.candidates.bits),
        "quant_bits": list(model.quant.bits),
        "tau": model.gamma_state.tau if model.gamma_state is not None else None,
        "group_bits": model.group_bits.tolist() if model.group_bits is not None else None,
        "best_epoch": best_epoch,
        "avg_bits": sampled.avg_bits if sampled is not None else (float(config.qat_bits) if config.phase == Phase.QAT else None),
        # The coefficient of the search that chose these bit widths.
        "search_lambda": search_lambda,
    }
    return Checkpoint(meta=meta, arrays=arrays)


def load_model(checkpoint: Checkpoint, initial: bool = False) -> ModelState:
    """Rebuild the best (or, with `initial`, the starting) model stored in a checkpoint."""
    meta = checkpoint.meta
    arrays = checkpoint.with_prefix("init.") if initial else {
        name: array for name, array in checkpoint.arrays.items() if not name.startswith(("init.", "adam."))
    }
    model = ModelState.from_arrays(
        arrays,
        CandidateSet(bits=tuple(meta["candidate_bits"])),
        tuple(meta["quant_bits"]),
        meta.get("tau"),
    )
    if meta.get("group_bits") is not None:
        model.group_bits = np.asarray(meta["group_bits"], dtype=np.int64)
    return model


def _prepare_from_search(
    config: TrainConfig,
    catalog: FeatureCatalog,
    groups: GroupAssignment,
    prior: Checkpoint | None,
    sampled: SampledPrecision | None,
) -> tuple[ModelState, SampledPrecision]:
    if prior is None:
        raise MissingPrerequisiteError(f"phase {config.phase} needs a search checkpoint")
    if prior.catalog_hash != catalog.digest():
        raise CatalogMismatchError("search checkpoint was trained on a different catalog")
    if prior.phase != Phase.SEARCH:
        raise MissingPrerequisiteError(f"phase {config.phase} needs a search checkpoint, got {prior.phase}")

    best = load_model(prior)
    if best.gamma_state is None or best.gamma_state.g != groups.g:
        raise CatalogMismatchError(
            f"search checkpoint has {best.gamma_state.g if best.gamma_state else 0} groups, "
            f"group_size {groups.group_size} gives {groups.g}"
        )
    if sampled is None:
        sampled = sample_precision(best.gamma_state, best.candidates, groups.group_sizes)
    if len(sampled.bit_of_group) != groups.g:
        raise MissingPrerequisiteError(f"{len(sampled.bit_of_group)} sampled bit widths for {groups.g} groups")

    if config.phase == Phase.RETRAIN:
        model = best
        model.embeddings = prior.arrays["init.embeddings"].copy()
    elif config.phase == Phase.RETRAIN_LTH:
        model = load_model(prior, initial=True)
    else:
        model = best
    model.gamma_state = None
    return model.with_precision(sampled), sampled


C = TypeVar("C", bound=TrainConfig)


def align_with_search(config: C, prior: Checkpoint | None) -> C:
    """Adopt the group size of the search checkpoint a phase builds on."""
    if not config.phase.needs_search_checkpoint or prior is None:
        return config
    search_group_size = prior.meta.get("config", {}).get("group_size", config.group_size)
    if search_group_size != config.group_size:
        logger.warning(
            "%s: group_size %d differs from the search checkpoint's %d; using %d",
            config.phase, config.group_size, search_group_size, search_group_size,
        )
        config = config.model_copy(update={"group_size": search_group_size})
    return config


def run_phase(
    config: TrainConfig,
    data: Dataset,
    catalog: FeatureCatalog,
    prior: Checkpoint | None = None,
    sampled: SampledPrecision | None = None,
) -> PhaseResult:
    config = align_with_search(config, prior)
    groups = group_by_frequency(catalog, config.group_size)
    catalog_hash = catalog.digest()
    train, valid = data.split("train"), data.split("valid")

    search_lambda = config.reg_lambda if config.phase == Phase.SEARCH else None
    if config.phase.needs_search_checkpoint:
        model, sampled = _prepare_from_search(config, catalog, groups, prior, sampled)
        search_lambda = prior.meta.get("config", {}).get("lambda")
    else:
        model = ModelState.initial(catalog, groups, config)
    initial = model.model_copy(deep=True)

    if config.phase == Phase.NO_RETRAIN_EVAL:
        metrics = evaluate(model, valid, groups)
        row = EpochMetrics(
            phase=str(config.phase),
            epoch=0,
            train_loss=None,
            valid_auc=metrics.auc,
            valid_logloss=metrics.logloss,
            avg_expected_bits=model_average_bits(model, groups),
            best_valid_auc=metrics.auc,
        )
        checkpoint = _checkpoint(model, initial, config, catalog_hash, {"t": np.array(0)}, 0, sampled, search_lambda)
        return PhaseResult(checkpoint=checkpoint, metrics=[row], step_losses=[], model=model, sampled=sampled)

    _, batch_seed = np.random.SeedSequence(config.seed).spawn(2)
    batch_rng = np.random.default_rng(batch_seed)
    optimizer = make_optimizer(model, config)

    best_model, best_optimizer, best_epoch, best_auc = model, optimizer.state_dict(), 0, -np.inf
    rows: list[EpochMetrics] = []
    step_losses: list[float] = []
    for epoch in range(1, config.epochs + 1):
        order = batch_rng.permutation(len(train))
        epoch_losses = []
        for batch_index, start in enumerate(range(0, len(train), config.batch_size)):
            batch = order[start : start + config.batch_size]
            try:
                loss, grads = forward_backward(
                    model, train.ids[batch], train.labels[batch], groups, config.reg_lambda, batch_index
                )
            except TrainingDivergedError as e:
                raise TrainingDivergedError(f"{config.phase} epoch {epoch}: {e}") from e
            adam_step(model, grads, optimizer)
            epoch_losses.append(loss)
            logger.debug("%s epoch %d batch %d loss %.6f", config.phase, epoch, batch_index, loss)
        step_losses.extend(epoch_losses)

        metrics = evaluate(model, valid, groups)
        if metrics.auc > best_auc:
            best_model, best_optimizer, best_epoch, best_auc = model.model_copy(deep=True), optimizer.state_dict(), epoch, metrics.auc
        row = EpochMetrics(
            phase=str(config.phase),
            epoch=epoch,
            train_loss=float(np.mean(epoch_losses)) if epoch_losses else None,
            valid_auc=metrics.auc,
            valid_logloss=metrics.logloss,
            avg_expected_bits=model_average_bits(model, groups),
            best_valid_auc=best_auc,
        )
        rows.append(row)
        logger.info(
            "%s epoch %d: train loss %s, valid auc %.5f, logloss %.5f, avg bits %s",
            config.phase, epoch, row.train_loss, row.valid_auc, row.valid_logloss, row.avg_expected_bits,
        )

    if best_model.is_search:
        sampled = sample_precision(best_model.gamma_state, best_model.candidates, groups.group_sizes)
    checkpoint = _checkpoint(best_model, initial, config, catalog_hash, best_optimizer, best_epoch, sampled, search_lambda)
    return PhaseResult(checkpoint=checkpoint, metrics=rows, step_losses=step_losses, model=best_model, sampled=sampled)
