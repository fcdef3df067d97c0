"""Command pipelines behind the CLI subcommands.

Each pipeline takes a validated `RunConfig`, reads its inputs from the
configured dataset and the run directory, writes its artifacts through a
`RunStore` and returns a JSON-serializable summary for stdout.

Run-directory layout::

    <output_dir>/
      data/{train,valid,test}.txt      synthetic datasets only
      prepare.json  graph_stats.json  coverage.csv  partition_{valid,test}.csv
      model.ckpt  model.ckpt.json  training_curve.csv
      eval_<mode>.json  detection_<mode>.csv  selective_<mode>.csv  assessments_<mode>.csv
      verify.json  verify.txt  complementarity.csv
      ablation.json  ablation_*.csv
      report.csv  report.txt
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass
from typing import Callable, Literal, Optional

import numpy as np
import pandas as pd

from cagp.config import defaults
from cagp.errors import ArtifactMissingError, UndefinedMetricError
from cagp.schemas.run_config import SPLIT_NAMES, CoverageMode, RunConfig
from cagp.services.artifacts import RunStore
from cagp.services.checkpoint import load_checkpoint, save_checkpoint
from cagp.services.coverage import (
    CoverageMatrix,
    build_coverage,
    continuous_uncertainty_batch,
    write_coverage_csv,
)
from cagp.services.embed import (
    GaussianEmbeddingModel,
    tail_hits_at_k,
    train,
    train_with_history,
)
from cagp.services.graph import (
    KnowledgeGraph,
    frequency_threshold,
    graph_stats,
    load_tsv,
    write_tsv,
)
from cagp.services.metrics import (
    ScoredSamples,
    aupr,
    auroc,
    balancing_threshold,
    brier,
    ece,
    error_analysis,
    f1_at,
    paired_bootstrap,
    risk_coverage_curve,
    separation,
    to_probability,
)
from cagp.services.oodgen import (
    OodPartition,
    partition,
    random_corruptions,
    synth_theorem_kg,
    verify_a3,
)
from cagp.services.uncertainty import (
    Assessments,
    MixingWeight,
    SemanticNormalizer,
    assess,
    baseline_score_uncertainty_batch,
    fit_alpha,
    fit_normalizer,
)
from cagp.services.verify import assumption_report, complementarity_table

logger = logging.getLogger(__name__)

EvalMode = Literal["temporal_like", "random_corruption"]
EVAL_MODES: tuple[str, ...] = ("temporal_like", "random_corruption")

PREPARE_JSON = "prepare.json"
GRAPH_STATS_JSON = "graph_stats.json"
COVERAGE_CSV = "coverage.csv"
CHECKPOINT = "model.ckpt"
TRAINING_CURVE_CSV = "training_curve.csv"
DATA_DIR = "data"

PREPARE_HINT = "run `cagp prepare` first"
TRAIN_HINT = "run `cagp train` first"


# ---------------------------------------------------------------------------
# Shared plumbing
# ---------------------------------------------------------------------------

@dataclass
class RunContext:
    config: RunConfig
    store: RunStore
    kg: KnowledgeGraph
    coverage: CoverageMatrix
    tau: int


@dataclass
class EvalSet:
    triples: np.ndarray
    is_ood: np.ndarray
    partition: Optional[OodPartition] = None


def resolve_tau(config: RunConfig, kg: KnowledgeGraph) -> int:
    if config.tau is not None:
        return config.tau
    return frequency_threshold(kg, config.tau_percentile)


def _split_paths(config: RunConfig, store: RunStore) -> dict:
    if config.dataset.synthetic is not None:
        return {
            split: store.require(f"{DATA_DIR}/{split}.txt", hint=PREPARE_HINT)
            for split in SPLIT_NAMES
        }
    config.check_paths()
    return config.dataset.split_paths()


def open_run(config: RunConfig, require_prepared: bool = True) -> RunContext:
    store = RunStore(config.output_dir)
    if require_prepared:
        store.require(PREPARE_JSON, hint=PREPARE_HINT)
    kg = load_tsv(_split_paths(config, store))
    coverage = build_coverage(kg)
    return RunContext(
        config=config, store=store, kg=kg, coverage=coverage, tau=resolve_tau(config, kg)
    )


def load_model(ctx: RunContext) -> GaussianEmbeddingModel:
    return load_checkpoint(ctx.store.require(CHECKPOINT, hint=TRAIN_HINT), ctx.kg)


def _optional_model(ctx: RunContext) -> Optional[GaussianEmbeddingModel]:
    try:
        return load_model(ctx)
    except ArtifactMissingError as exc:
        logger.warning("No checkpoint, semantic rows are not applicable: %s", exc.message)
        return None


def safe_metric(
    fn: Callable[[], float], label: str, warnings: list[str]
) -> Optional[float]:
    """Evaluate a metric; an undefined metric is logged, recorded and returned as None."""
    try:
        return fn()
    except UndefinedMetricError as exc:
        message = f"{label}: {exc.message}"
        logger.warning("Undefined metric %s", message)
        warnings.append(message)
        return None


def eval_set(ctx: RunContext, split: str, mode: str, tau: Optional[int] = None) -> EvalSet:
    """Labeled triples for one split under the temporal-like or corruption protocol."""
    if mode == "temporal_like":
        part = partition(ctx.kg, ctx.coverage, split, ctx.tau if tau is None else tau)
        return EvalSet(triples=part.triples, is_ood=part.is_ood, partition=part)
    labeled = random_corruptions(
        ctx.kg,
        split,
        seed=ctx.config.seeds.corruption,
        limit=ctx.config.eval.corruption_sample_size,
    )
    return EvalSet(triples=labeled.triples, is_ood=labeled.is_ood)


def fit_weight(
    ctx: RunContext,
    model: GaussianEmbeddingModel,
    normalizer: SemanticNormalizer,
    mode: str,
    alpha_mode: Optional[str] = None,
    tau: Optional[int] = None,
) -> MixingWeight:
    """Fixed 0.5, or alpha fitted on the validation split under the same protocol."""
    fixed = MixingWeight.from_alpha(defaults.FIXED_ALPHA)
    if (alpha_mode or ctx.config.alpha_mode) == "fixed":
        return fixed
    if len(ctx.kg.splits.get("valid", ())) == 0:
        logger.warning("No validation triples; using fixed alpha=%.2f", defaults.FIXED_ALPHA)
        return fixed
    val = eval_set(ctx, "valid", mode, tau)
    if val.is_ood.all() or not val.is_ood.any():
        logger.warning(
            "Validation set lacks an ID or OOD class; using fixed alpha=%.2f",
            defaults.FIXED_ALPHA,
        )
        return fixed
    scored = assess(
        model, normalizer, ctx.coverage, fixed, val.triples, ctx.config.coverage_mode
    )
    return fit_alpha(scored.subset(~val.is_ood), scored.subset(val.is_ood))


def _auroc_safe(u, is_ood, label: str, warnings: list[str]) -> Optional[float]:
    return safe_metric(lambda: auroc(ScoredSamples(u, is_ood)), label, warnings)


# ---------------------------------------------------------------------------
# prepare
# ---------------------------------------------------------------------------

def prepare(config: RunConfig) -> dict:
    """Load (or generate) the graph, write stats, coverage and partitions."""
    store = RunStore(config.output_dir)
    synthetic_truth = None
    if config.dataset.synthetic is not None:
        synth = synth_theorem_kg(config.dataset.synthetic)
        write_tsv(synth.kg, store.path(DATA_DIR))
        synthetic_truth = {
            split: {
                "in_distribution": int(np.sum(codes == 0)),
                "novel_context": int(np.sum(codes == 1)),
                "emerging": int(np.sum(codes == 2)),
            }
            for split, codes in synth.truth.items()
        }

    ctx = open_run(config, require_prepared=False)
    kg, coverage = ctx.kg, ctx.coverage
    stats = graph_stats(kg)
    store.save_json(GRAPH_STATS_JSON, stats.to_dict())
    write_coverage_csv(coverage, store.path(COVERAGE_CSV), kg)

    partitions = {}
    for split in ("valid", "test"):
        if split not in kg.splits:
            continue
        part = partition(kg, coverage, split, ctx.tau)
        store.save_frame(f"partition_{split}.csv", part.to_frame(kg, coverage))
        partitions[split] = {"sizes": part.sizes(), "composition": part.composition()}

    summary = {
        "command": "prepare",
        "dataset": config.dataset.name,
        "entity_count": kg.entity_count,
        "relation_count": kg.relation_count,
        "split_counts": stats.split_counts,
        "tau": ctx.tau,
        "tau_percentile": config.tau_percentile if config.tau is None else None,
        "coverage": {"observed_pairs": coverage.nnz, "density": coverage.density},
        "partitions": partitions,
    }
    if synthetic_truth is not None:
        summary["synthetic_truth"] = synthetic_truth
    store.save_json(PREPARE_JSON, summary)
    return summary


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def train_model(config: RunConfig) -> dict:
    """Train on the prepared graph; write the checkpoint and the loss curve."""
    ctx = open_run(config)
    model, history = train_with_history(ctx.kg, config.train)
    path = save_checkpoint(model, ctx.store.path(CHECKPOINT), ctx.kg, config.train)
    curve = pd.DataFrame(
        [{"epoch": h.epoch, "loss": h.loss} for h in history], columns=["epoch", "loss"]
    )
    ctx.store.save_frame(TRAINING_CURVE_CSV, curve)
    return {
        "command": "train",
        "checkpoint": str(path),
        "checkpoint_sha256": hashlib.sha256(path.read_bytes()).hexdigest(),
        "epochs": config.train.epochs,
        "final_loss": history[-1].loss if history else None,
    }


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def _signals(
    config: RunConfig,
    model: GaussianEmbeddingModel,
    scored: Assessments,
    triples: np.ndarray,
) -> dict[str, np.ndarray]:
    signals = {name: scored.signal(name) for name in defaults.SIGNALS if name != "score_baseline"}
    signals["score_baseline"] = baseline_score_uncertainty_batch(
        model, triples, draws=config.eval.baseline_draws, seed=config.seeds.baseline
    )
    return signals


def evaluate(config: RunConfig, mode: EvalMode = "temporal_like") -> dict:
    """Detection, calibration, selective prediction and significance per signal."""
    ctx = open_run(config)
    model = load_model(ctx)
    kg = ctx.kg
    normalizer = fit_normalizer(model, kg)
    weight = fit_weight(ctx, model, normalizer, mode)
    test = eval_set(ctx, "test", mode)
    scored = assess(model, normalizer, ctx.coverage, weight, test.triples, config.coverage_mode)
    signals = _signals(config, model, scored, test.triples)
    warnings: list[str] = []

    detection = []
    records = []
    for name, u in signals.items():
        samples = ScoredSamples(u, test.is_ood)
        probs = ScoredSamples(
            to_probability(u, "minmax" if name == "score_baseline" else "half"), test.is_ood
        )
        row = {
            "signal": name,
            "auroc": safe_metric(lambda: auroc(samples), f"auroc/{name}", warnings),
            "aupr": safe_metric(lambda: aupr(samples), f"aupr/{name}", warnings),
            "f1": safe_metric(lambda: f1_at(samples), f"f1/{name}", warnings),
            "separation": safe_metric(lambda: separation(samples), f"separation/{name}", warnings),
            "ece": safe_metric(lambda: ece(probs, config.eval.ece_bins), f"ece/{name}", warnings),
            "brier": safe_metric(lambda: brier(probs), f"brier/{name}", warnings),
        }
        detection.append(row)
        for metric in ("auroc", "aupr", "f1", "separation", "ece", "brier"):
            records.append(
                {
                    "metric": metric,
                    "value": row[metric],
                    "split": "test",
                    "signal": name,
                    "seed": config.train.seed,
                    "mode": mode,
                }
            )

    significance = {}
    if config.eval.bootstrap_iterations > 0:
        for other, u in signals.items():
            if other == "cagp":
                continue
            significance[other] = safe_metric(
                lambda: paired_bootstrap(
                    signals["cagp"], u, test.is_ood,
                    iterations=config.eval.bootstrap_iterations,
                    seed=config.seeds.bootstrap,
                ),
                f"bootstrap/cagp_vs_{other}",
                warnings,
            )

    selective = []
    if mode == "temporal_like" and len(test.triples):
        correct = tail_hits_at_k(model, kg, test.triples, k=config.eval.hits_at_k)
        for name, u in signals.items():
            curve = risk_coverage_curve(
                ScoredSamples(u, test.is_ood, correct), config.eval.answer_rates
            )
            selective.extend({"signal": name, **row} for row in curve)

    cagp = signals["cagp"]
    errors = error_analysis(
        ScoredSamples(cagp, test.is_ood),
        test.triples,
        kg,
        balancing_threshold(cagp, test.is_ood),
    )

    store = ctx.store
    payload = {
        "command": "eval",
        "mode": mode,
        "alpha": weight.alpha,
        "alpha_mode": config.alpha_mode,
        "tau": ctx.tau,
        "id_count": int((~test.is_ood).sum()),
        "ood_count": int(test.is_ood.sum()),
        "detection": detection,
        "significance": significance,
        "selective": selective,
        "error_analysis": errors.to_dict(),
        "records": records,
        "warnings": warnings,
    }
    if test.partition is not None:
        payload["composition"] = test.partition.composition()
    store.save_json(f"eval_{mode}.json", payload)
    store.save_frame(f"detection_{mode}.csv", pd.DataFrame(detection))
    if selective:
        store.save_frame(f"selective_{mode}.csv", pd.DataFrame(selective))
    store.save_frame(
        f"assessments_{mode}.csv", scored.to_frame(kg, labels=test.is_ood.astype(np.int64))
    )

    return {
        "command": "eval",
        "mode": mode,
        "alpha": weight.alpha,
        "id_count": payload["id_count"],
        "ood_count": payload["ood_count"],
        "auroc": {row["signal"]: row["auroc"] for row in detection},
        "warnings": warnings,
    }


# ---------------------------------------------------------------------------
# verify
# ---------------------------------------------------------------------------

def verify(config: RunConfig) -> dict:
    """Assumption report and complementarity table on the test partition."""
    ctx = open_run(config)
    model = _optional_model(ctx)
    part = partition(ctx.kg, ctx.coverage, "test", ctx.tau)
    normalizer = fit_normalizer(model, ctx.kg) if model is not None else None
    report = assumption_report(ctx.kg, ctx.coverage, model, part, config.epsilons, normalizer)

    warnings: list[str] = []
    weight = (
        fit_weight(ctx, model, normalizer, "temporal_like")
        if model is not None
        else MixingWeight.from_alpha(defaults.FIXED_ALPHA)
    )
    table = None
    try:
        table = complementarity_table(model, ctx.coverage, weight, part, normalizer)
    except UndefinedMetricError as exc:
        logger.warning("Complementarity table not applicable: %s", exc.message)
        warnings.append(f"complementarity: {exc.message}")

    text = report.to_text()
    if table is not None:
        ctx.store.save_frame("complementarity.csv", table, index=True)
        text += "\nAUROC by OOD type\n" + table.to_string(na_rep="n/a", float_format="%.4f") + "\n"
    ctx.store.save_text("verify.txt", text)

    payload = {
        "command": "verify",
        "tau": ctx.tau,
        "alpha": weight.alpha,
        "partition": part.sizes(),
        "report": report.to_dict(),
        "complementarity": None if table is None else table.to_dict(orient="index"),
        "warnings": warnings,
    }
    ctx.store.save_json("verify.json", payload)
    return payload


# ---------------------------------------------------------------------------
# ablate
# ---------------------------------------------------------------------------

def _coverage_rows(ctx: RunContext, part: OodPartition, warnings: list[str]) -> list[dict]:
    rows = []
    for mode in CoverageMode:
        u = continuous_uncertainty_batch(ctx.coverage, part.triples, mode)
        samples = ScoredSamples(u, part.is_ood)
        rows.append(
            {
                "coverage_mode": mode.value,
                "auroc": safe_metric(lambda: auroc(samples), f"coverage/{mode.value}", warnings),
                "aupr": safe_metric(lambda: aupr(samples), f"coverage/{mode.value}", warnings),
                "separation": safe_metric(
                    lambda: separation(samples), f"coverage/{mode.value}", warnings
                ),
            }
        )
    return rows


def _mixing_rows(
    ctx: RunContext, model: GaussianEmbeddingModel, warnings: list[str]
) -> list[dict]:
    normalizer = fit_normalizer(model, ctx.kg)
    rows = []
    for mode in EVAL_MODES:
        test = eval_set(ctx, "test", mode)
        for alpha_mode in ("fixed", "learned"):
            weight = fit_weight(ctx, model, normalizer, mode, alpha_mode=alpha_mode)
            scored = assess(
                model, normalizer, ctx.coverage, weight, test.triples, ctx.config.coverage_mode
            )
            rows.append(
                {
                    "eval_mode": mode,
                    "alpha_mode": alpha_mode,
                    "alpha": weight.alpha,
                    "auroc": _auroc_safe(
                        scored.u_cagp, test.is_ood, f"mixing/{mode}/{alpha_mode}", warnings
                    ),
                }
            )
    return rows


def _tau_rows(
    ctx: RunContext, model: Optional[GaussianEmbeddingModel], warnings: list[str]
) -> list[dict]:
    normalizer = fit_normalizer(model, ctx.kg) if model is not None else None
    rows = []
    for percentile in ctx.config.ablation.tau_percentiles:
        tau = frequency_threshold(ctx.kg, percentile)
        part = partition(ctx.kg, ctx.coverage, "test", tau)
        u_str = continuous_uncertainty_batch(ctx.coverage, part.triples, CoverageMode.BINARY)
        row = {
            "tau_percentile": percentile,
            "tau": tau,
            **part.sizes(),
            **{k: v for k, v in part.composition().items() if k != "ood_count"},
            "structural_auroc": _auroc_safe(u_str, part.is_ood, f"tau/{percentile}", warnings),
            "cagp_auroc": None,
        }
        if model is not None:
            weight = fit_weight(ctx, model, normalizer, "temporal_like", tau=tau)
            scored = assess(
                model, normalizer, ctx.coverage, weight, part.triples, ctx.config.coverage_mode
            )
            row["cagp_auroc"] = _auroc_safe(
                scored.u_cagp, part.is_ood, f"tau/{percentile}/cagp", warnings
            )
        rows.append(row)
    return rows


def _architecture_rows(ctx: RunContext, warnings: list[str]) -> list[dict]:
    rows = []
    for scorer in ctx.config.ablation.architectures:
        model = train(ctx.kg, ctx.config.train.model_copy(update={"scorer": scorer}))
        normalizer = fit_normalizer(model, ctx.kg)
        weight = fit_weight(ctx, model, normalizer, "temporal_like")
        test = eval_set(ctx, "test", "temporal_like")
        scored = assess(
            model, normalizer, ctx.coverage, weight, test.triples, ctx.config.coverage_mode
        )
        row = {"scorer": scorer.value, "alpha": weight.alpha}
        for signal in ("semantic", "structural", "cagp"):
            row[f"{signal}_auroc"] = _auroc_safe(
                scored.signal(signal), test.is_ood, f"architecture/{scorer.value}/{signal}", warnings
            )
        rows.append(row)
    return rows


def ablate(config: RunConfig) -> dict:
    """Coverage-mode, mixing, tau-sensitivity, A3 and architecture ablations."""
    ctx = open_run(config)
    model = _optional_model(ctx)
    warnings: list[str] = []
    part = partition(ctx.kg, ctx.coverage, "test", ctx.tau)

    coverage_rows = _coverage_rows(ctx, part, warnings)
    mixing_rows = _mixing_rows(ctx, model, warnings) if model is not None else []
    tau_rows = _tau_rows(ctx, model, warnings)
    a3_rows = [
        {"epsilon": eps, "matched_fraction": value}
        for eps, value in verify_a3(ctx.kg, part.novel_context, config.epsilons).items()
    ]
    architecture_rows = _architecture_rows(ctx, warnings)

    store = ctx.store
    store.save_frame("ablation_coverage.csv", pd.DataFrame(coverage_rows))
    store.save_frame("ablation_tau.csv", pd.DataFrame(tau_rows))
    store.save_frame("ablation_a3.csv", pd.DataFrame(a3_rows))
    if mixing_rows:
        store.save_frame("ablation_mixing.csv", pd.DataFrame(mixing_rows))
    if architecture_rows:
        store.save_frame("ablation_architectures.csv", pd.DataFrame(architecture_rows))

    payload = {
        "command": "ablate",
        "tau": ctx.tau,
        "composition": part.composition(),
        "coverage": coverage_rows,
        "mixing": mixing_rows,
        "tau_sensitivity": tau_rows,
        "a3": a3_rows,
        "architectures": architecture_rows,
        "warnings": warnings,
    }
    store.save_json("ablation.json", payload)
    return payload


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

REPORT_METRICS = ("auroc", "aupr", "f1")


def report(config: RunConfig) -> dict:
    """Collect every ``eval_<mode>.json`` of the run into one signal x setting table."""
    store = RunStore(config.output_dir)
    files = store.glob("eval_*.json")
    if not files:
        raise ArtifactMissingError(
            f"No evaluation results in {store.root} (run `cagp eval` first)"
        )
    rows: dict[str, dict[str, Optional[float]]] = {}
    modes = []
    for path in files:
        payload = store.load_json(path.name)
        mode = payload["mode"]
        modes.append(mode)
        for row in payload["detection"]:
            cells = rows.setdefault(row["signal"], {})
            for metric in REPORT_METRICS:
                cells[f"{mode}_{metric}"] = row.get(metric)

    order = [s for s in defaults.SIGNALS if s in rows] + sorted(set(rows) - set(defaults.SIGNALS))
    columns = [f"{mode}_{metric}" for mode in modes for metric in REPORT_METRICS]
    frame = pd.DataFrame.from_dict(rows, orient="index", columns=columns).loc[order]
    frame.index.name = "signal"
    store.save_frame("report.csv", frame, index=True)
    store.save_text(
        "report.txt", frame.to_string(na_rep="n/a", float_format="%.4f") + "\n"
    )
    return {"command": "report", "modes": modes, "table": frame.to_dict(orient="index")}
