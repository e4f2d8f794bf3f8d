"""Multi-round orchestration of the review funnel, plus the budget-matched
random baseline and the metrics evaluator.

Rounds are strictly sequential (the feedback loop is a data dependency) and
atomic: all label writes go to the store's staging buffer and commit only
when every stage of the round has succeeded. Identical corpus, config, and
seeds yield a byte-identical metrics report regardless of worker count.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .corpus import (
    ConfigError,
    Item,
    LabelRecord,
    PROVENANCE_ORACLE,
    PROVENANCE_PROPAGATED,
    PROVENANCE_SEED,
    corpus_content_hash,
    ground_truth_of,
    items_by_id,
)
from .funnel import (
    CandidateSet,
    ORIGIN_ACTOR,
    ORIGIN_CONTENT,
    ORIGIN_FEEDBACK,
    ORIGIN_SCORE,
    dedup_cross_round,
    dedup_intra_batch,
    expand_actor,
    expand_content,
    filter_eligible,
    max_coverage_sample,
    select_by_score,
)
from .labeling import (
    KnownStore,
    Oracle,
    SimulatedOracle,
    feedback_seeds,
    oracle_label,
    propagate_labels,
)
from .simgraph import GRAPH_MODES, MODE_BLOCKED, SimilarityGraph, build_graph


class StageError(RuntimeError):
    """A pipeline stage failed; the round was rolled back."""

    def __init__(self, round_no: int, stage: str, cause: Exception):
        super().__init__(f"round {round_no} stage {stage}: {cause}")
        self.round_no = round_no
        self.stage = stage
        self.cause = cause


class MissingGroundTruthError(ValueError):
    """An evaluation step needs ground truth that the corpus does not carry."""


@dataclass(frozen=True)
class OracleParams:
    tpr: float = 0.95
    tnr: float = 0.95
    seed: int = 0
    unit_cost: float = 1.0


@dataclass(frozen=True)
class ActorParams:
    min_positives: int = 2
    min_rate: float = 0.5


@dataclass(frozen=True)
class ScoreParams:
    tau: float = 0.8
    flip_rate: float = 0.05
    seed: int = 0


@dataclass(frozen=True)
class PipelineConfig:
    """Everything a run needs; all randomness flows from the seeds here."""

    rounds: int = 5
    budget_per_round: int = 40
    theta_dup: float = 0.05
    theta_prop: float = 0.10
    theta_sim: float = 0.25
    oracle: OracleParams = field(default_factory=OracleParams)
    actor: ActorParams = field(default_factory=ActorParams)
    score: ScoreParams | None = None
    bootstrap_seeds: int = 10
    impression_weighted_sampling: bool = False
    graph_mode: str = MODE_BLOCKED
    graph_bands: int = 16
    graph_band_bits: int = 8
    graph_seed: int = 0
    workers: int = 1
    rng_seed: int = 0

    def validate(self) -> None:
        if self.rounds < 1:
            raise ConfigError("rounds must be >= 1")
        if self.budget_per_round < 0:
            raise ConfigError("budget_per_round must be >= 0")
        if not 0.0 <= self.theta_dup <= self.theta_prop <= self.theta_sim <= 2.0:
            raise ConfigError(
                "thresholds must satisfy 0 <= theta_dup <= theta_prop <= theta_sim <= 2"
            )
        if not 0.0 <= self.oracle.tpr <= 1.0:
            raise ConfigError("oracle.tpr must be in [0, 1]")
        if not 0.0 <= self.oracle.tnr <= 1.0:
            raise ConfigError("oracle.tnr must be in [0, 1]")
        if self.actor.min_positives < 1:
            raise ConfigError("actor.min_positives must be >= 1")
        if not 0.0 < self.actor.min_rate <= 1.0:
            raise ConfigError("actor.min_rate must be in (0, 1]")
        if self.score is not None:
            if not 0.0 <= self.score.tau <= 1.0:
                raise ConfigError("score.tau must be in [0, 1]")
            if not 0.0 <= self.score.flip_rate <= 1.0:
                raise ConfigError("score.flip_rate must be in [0, 1]")
        if self.bootstrap_seeds < 0:
            raise ConfigError("bootstrap_seeds must be >= 0")
        if self.graph_mode not in GRAPH_MODES:
            raise ConfigError(f"graph_mode must be one of {GRAPH_MODES}")
        if self.graph_bands < 1 or self.graph_band_bits < 1:
            raise ConfigError("graph_bands and graph_band_bits must be >= 1")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")


@dataclass
class StageStat:
    stage: str
    n_in: int
    n_out: int
    removed: dict[str, int] = field(default_factory=dict)

    def audit_entry(self, round_no: int) -> dict:
        return {
            "round": round_no,
            "stage": self.stage,
            "in": self.n_in,
            "out": self.n_out,
            "removed_reason_counts": dict(self.removed),
        }


@dataclass
class RoundMetrics:
    round: int
    oracle_reviews: int
    positives_oracle: int
    positives_propagated: int
    oracle_cost: float
    stages: list[StageStat]
    cumulative_recall: float | None = None

    def to_dict(self) -> dict:
        return {
            "round": self.round,
            "oracle_reviews": self.oracle_reviews,
            "positives_oracle": self.positives_oracle,
            "positives_propagated": self.positives_propagated,
            "oracle_cost": self.oracle_cost,
            "cumulative_recall": self.cumulative_recall,
            "stages": [s.audit_entry(self.round) for s in self.stages],
        }


@dataclass
class MetricsReport:
    """Cumulative (and optionally per-round) evaluation of a run."""

    corpus_size: int
    corpus_hash: str | None
    oracle_reviews: float
    oracle_cost: float
    review_fraction: float
    positives_seed: float
    positives_oracle: float
    positives_propagated: float
    positives_total: float
    recall: float | None
    precision: float | None
    impression_weighted_recall: float | None
    amplification: float | None
    rounds: list[RoundMetrics] = field(default_factory=list)
    baseline: dict | None = None

    def stage_totals(self) -> dict[str, dict[str, int]]:
        """Candidate in/out counts per stage, summed over rounds."""
        totals: dict[str, dict[str, int]] = {}
        for round_metrics in self.rounds:
            for stat in round_metrics.stages:
                entry = totals.setdefault(stat.stage, {"in": 0, "out": 0})
                entry["in"] += stat.n_in
                entry["out"] += stat.n_out
        return totals

    def to_dict(self) -> dict:
        doc = {
            "corpus_size": self.corpus_size,
            "corpus_hash": self.corpus_hash,
            "oracle_reviews": self.oracle_reviews,
            "oracle_cost": self.oracle_cost,
            "review_fraction": self.review_fraction,
            "positives_seed": self.positives_seed,
            "positives_oracle": self.positives_oracle,
            "positives_propagated": self.positives_propagated,
            "positives_total": self.positives_total,
            "recall": self.recall,
            "precision": self.precision,
            "impression_weighted_recall": self.impression_weighted_recall,
            "amplification": self.amplification,
            "stage_totals": self.stage_totals(),
            "rounds": [r.to_dict() for r in self.rounds],
        }
        if self.baseline is not None:
            doc["baseline"] = dict(self.baseline)
        return doc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


@dataclass
class PipelineState:
    items: list[Item]
    items_index: dict[int, Item]
    graph: SimilarityGraph
    store: KnownStore
    oracle: Oracle
    scores: dict[int, float] | None
    seeds: set[int] = field(default_factory=set)


def simulate_model_scores(
    truth: Mapping[int, bool], params: ScoreParams
) -> dict[int, float]:
    """Stand-in for a cheap pre-trained model: noisy scores from ground truth.

    The true label is flipped with probability ``flip_rate`` and the result
    beta-jittered into [0, 1], giving a controllably weak signal.
    """
    rng = np.random.default_rng(params.seed)
    scores: dict[int, float] = {}
    for item_id in sorted(truth):
        effective = truth[item_id] ^ bool(rng.random() < params.flip_rate)
        a, b = (8.0, 2.0) if effective else (2.0, 8.0)
        scores[item_id] = float(rng.beta(a, b))
    return scores


def _records_of(store_or_records) -> list[LabelRecord]:
    if hasattr(store_or_records, "records"):
        return store_or_records.records()
    return list(store_or_records)


def compute_metrics(
    store_or_records, ground_truth: Mapping[int, bool], corpus: Sequence[Item]
) -> MetricsReport:
    """Evaluate a label store against hidden ground truth."""
    for item in corpus:
        if item.item_id not in ground_truth:
            raise MissingGroundTruthError(
                f"ground truth missing for item {item.item_id}"
            )
    records = _records_of(store_or_records)
    gt_positive_ids = [i for i in ground_truth if ground_truth[i]]
    gt_positives = len(gt_positive_ids)
    impressions = {item.item_id: item.impressions for item in corpus}
    gt_positive_impressions = sum(impressions.get(i, 0) for i in gt_positive_ids)

    reviews = sum(1 for r in records if r.provenance == PROVENANCE_ORACLE)
    pos_seed = sum(
        1 for r in records if r.label and r.provenance == PROVENANCE_SEED
    )
    pos_oracle = sum(
        1 for r in records if r.label and r.provenance == PROVENANCE_ORACLE
    )
    pos_prop = sum(
        1 for r in records if r.label and r.provenance == PROVENANCE_PROPAGATED
    )
    pos_total = pos_seed + pos_oracle + pos_prop
    true_positive_ids = [
        r.item_id for r in records if r.label and ground_truth.get(r.item_id, False)
    ]
    tp = len(true_positive_ids)
    tp_impressions = sum(impressions.get(i, 0) for i in true_positive_ids)

    recall = tp / gt_positives if gt_positives else None
    precision = tp / pos_total if pos_total else None
    iw_recall = (
        tp_impressions / gt_positive_impressions if gt_positive_impressions else None
    )
    amplification = pos_total / pos_oracle if pos_oracle else None
    return MetricsReport(
        corpus_size=len(corpus),
        corpus_hash=None,
        oracle_reviews=reviews,
        oracle_cost=0.0,
        review_fraction=reviews / len(corpus) if corpus else 0.0,
        positives_seed=pos_seed,
        positives_oracle=pos_oracle,
        positives_propagated=pos_prop,
        positives_total=pos_total,
        recall=recall,
        precision=precision,
        impression_weighted_recall=iw_recall,
        amplification=amplification,
    )


def run_round(
    state: PipelineState, config: PipelineConfig, round_no: int
) -> tuple[PipelineState, RoundMetrics]:
    """Execute one funnel round atomically against the shared store."""
    store = state.store
    graph = state.graph
    stages: list[StageStat] = []
    store.begin_round()

    current_stage = "seeds"
    try:
        seeds = feedback_seeds(store, round_no - 1)
        # seeds surfaced by earlier rounds (not the round-0 bootstrap) mark
        # their expansions with the feedback origin tag
        feedback_sources = {i for i in seeds if store.get(i).round > 0}

        current_stage = "select"
        content_ids = expand_content(graph, seeds, config.theta_sim)
        feedback_ids = (
            expand_content(graph, feedback_sources, config.theta_sim) & content_ids
            if feedback_sources
            else set()
        )
        actor_ids = expand_actor(
            state.items, store, config.actor.min_positives, config.actor.min_rate
        )
        score_ids = (
            select_by_score(state.items, state.scores, config.score.tau)
            if state.scores is not None and config.score is not None
            else set()
        )
        tagged: dict[int, set[str]] = {}
        for item_id in content_ids:
            tagged.setdefault(item_id, set()).add(ORIGIN_CONTENT)
        for item_id in feedback_ids:
            tagged.setdefault(item_id, set()).add(ORIGIN_FEEDBACK)
        for item_id in actor_ids:
            tagged.setdefault(item_id, set()).add(ORIGIN_ACTOR)
        for item_id in score_ids:
            tagged.setdefault(item_id, set()).add(ORIGIN_SCORE)
        candidates = CandidateSet.from_tagged(round_no, tagged)
        stages.append(StageStat("select", 0, len(candidates.ids)))

        current_stage = "dedup_cross_round"
        kept, routed = dedup_cross_round(
            candidates.ids, store, graph, config.theta_dup, state.items_index
        )
        stages.append(
            StageStat(
                "dedup_cross_round",
                len(candidates.ids),
                len(kept),
                {"dup": len(routed)},
            )
        )

        current_stage = "filter_eligible"
        eligible = filter_eligible(kept, state.items_index, store)
        n_labeled = sum(1 for c in kept if store.get(c) is not None)
        n_inactive = sum(
            1
            for c in kept
            if store.get(c) is None and state.items_index[c].impressions == 0
        )
        stages.append(
            StageStat(
                "filter_eligible",
                len(kept),
                len(eligible),
                {"inactive": n_inactive, "labeled": n_labeled},
            )
        )

        current_stage = "dedup_intra_batch"
        unique, dup_of = dedup_intra_batch(eligible, graph, config.theta_dup)
        stages.append(
            StageStat(
                "dedup_intra_batch", len(eligible), len(unique), {"dup": len(dup_of)}
            )
        )

        current_stage = "sample"
        weights = (
            {i: float(state.items_index[i].impressions) for i in unique}
            if config.impression_weighted_sampling
            else None
        )
        plan = max_coverage_sample(
            unique, graph, config.theta_prop, config.budget_per_round, weights
        )
        stages.append(
            StageStat(
                "sample",
                len(unique),
                len(plan.representatives),
                {"unsampled": len(unique) - len(plan.representatives)},
            )
        )

        current_stage = "label"
        cost_before = state.oracle.cost_so_far
        records = oracle_label(plan, state.oracle, store, round_no, state.items_index)
        stages.append(StageStat("label", len(plan.representatives), len(records)))

        current_stage = "propagate"
        propagated = propagate_labels(
            records, graph, config.theta_prop, store, round_no, routed
        )
        stages.append(StageStat("propagate", len(records), len(propagated)))
    except Exception as exc:
        store.abort_round()
        raise StageError(round_no, current_stage, exc) from exc

    store.commit_round()
    state.seeds = feedback_seeds(store, round_no)
    metrics = RoundMetrics(
        round=round_no,
        oracle_reviews=len(records),
        positives_oracle=sum(1 for r in records if r.label),
        positives_propagated=sum(1 for r in propagated if r.label),
        oracle_cost=state.oracle.cost_so_far - cost_before,
        stages=stages,
    )
    return state, metrics


def _bootstrap_records(
    truth: Mapping[int, bool], count: int, rng_seed: int
) -> list[LabelRecord]:
    positives = sorted(i for i, v in truth.items() if v)
    take = min(count, len(positives))
    if take == 0:
        return []
    rng = np.random.default_rng(rng_seed)
    chosen = sorted(rng.choice(np.array(positives), size=take, replace=False).tolist())
    return [
        LabelRecord(item_id=i, label=True, provenance=PROVENANCE_SEED, round=0)
        for i in chosen
    ]


def run_pipeline(
    corpus: Sequence[Item],
    config: PipelineConfig,
    *,
    graph: SimilarityGraph | None = None,
    oracle: Oracle | None = None,
) -> MetricsReport:
    """Run the configured number of rounds and evaluate against ground truth.

    A prebuilt graph may be passed to amortize construction across runs; it
    must cover the corpus at a radius of at least theta_sim.
    """
    report, _ = run_pipeline_detailed(corpus, config, graph=graph, oracle=oracle)
    return report


def run_pipeline_detailed(
    corpus: Sequence[Item],
    config: PipelineConfig,
    *,
    graph: SimilarityGraph | None = None,
    oracle: Oracle | None = None,
) -> tuple[MetricsReport, PipelineState]:
    """run_pipeline, but also returning the final state (store included)."""
    config.validate()
    if not corpus:
        raise ValueError("corpus is empty")
    items = list(corpus)
    index = items_by_id(items)
    truth = ground_truth_of(items)
    truth_complete = len(truth) == len(items)
    if oracle is None:
        if not truth_complete:
            raise MissingGroundTruthError(
                "simulated oracle requires ground truth for every item"
            )
        oracle = SimulatedOracle(
            config.oracle.tpr,
            config.oracle.tnr,
            config.oracle.seed,
            truth,
            config.oracle.unit_cost,
        )
    if graph is None:
        graph = build_graph(
            items,
            config.theta_sim,
            config.graph_mode,
            bands=config.graph_bands,
            band_bits=config.graph_band_bits,
            seed=config.graph_seed,
            workers=config.workers,
        )
    else:
        if graph.theta < config.theta_sim:
            raise ValueError(
                f"provided graph radius {graph.theta} < theta_sim {config.theta_sim}"
            )
        for item in items:
            if item.item_id not in graph:
                raise ValueError(f"provided graph is missing item {item.item_id}")

    store = KnownStore({item.item_id: item.account_id for item in items})
    for record in _bootstrap_records(truth, config.bootstrap_seeds, config.rng_seed):
        store.add(record)
    scores = (
        simulate_model_scores(truth, config.score) if config.score is not None else None
    )
    state = PipelineState(
        items=items,
        items_index=index,
        graph=graph,
        store=store,
        oracle=oracle,
        scores=scores,
        seeds=feedback_seeds(store, 0),
    )

    gt_positives = sum(1 for v in truth.values() if v) if truth_complete else 0
    cumulative_tp = (
        sum(1 for r in store.records() if r.label and truth.get(r.item_id, False))
        if truth_complete
        else 0
    )
    round_metrics: list[RoundMetrics] = []
    seen_records = len(store.records())
    for round_no in range(1, config.rounds + 1):
        state, metrics = run_round(state, config, round_no)
        if truth_complete and gt_positives:
            for record in store.records()[seen_records:]:
                if record.label and truth.get(record.item_id, False):
                    cumulative_tp += 1
            metrics.cumulative_recall = cumulative_tp / gt_positives
        seen_records = len(store.records())
        round_metrics.append(metrics)

    if truth_complete:
        report = compute_metrics(store, truth, items)
    else:
        records = store.records()
        reviews = sum(1 for r in records if r.provenance == PROVENANCE_ORACLE)
        report = MetricsReport(
            corpus_size=len(items),
            corpus_hash=None,
            oracle_reviews=reviews,
            oracle_cost=0.0,
            review_fraction=reviews / len(items),
            positives_seed=sum(
                1 for r in records if r.label and r.provenance == PROVENANCE_SEED
            ),
            positives_oracle=sum(
                1 for r in records if r.label and r.provenance == PROVENANCE_ORACLE
            ),
            positives_propagated=sum(
                1 for r in records if r.label and r.provenance == PROVENANCE_PROPAGATED
            ),
            positives_total=sum(1 for r in records if r.label),
            recall=None,
            precision=None,
            impression_weighted_recall=None,
            amplification=None,
        )
    report.corpus_hash = corpus_content_hash(items)
    report.oracle_cost = oracle.cost_so_far
    report.rounds = round_metrics
    return report, state


def run_score_baseline(
    corpus: Sequence[Item],
    total_budget: int,
    oracle: Oracle,
    score_params: ScoreParams,
) -> MetricsReport:
    """Context baseline: review the top items by simulated model score.

    Items scoring above tau are ranked by descending score (ties by id) and
    the top ``total_budget`` go to the oracle; no propagation. Reported
    alongside the random baseline for comparison, never asserted against.
    """
    if total_budget < 0:
        raise ValueError("total_budget must be >= 0")
    if total_budget > len(corpus):
        raise ValueError(
            f"total_budget {total_budget} exceeds corpus size {len(corpus)}"
        )
    items = list(corpus)
    truth = ground_truth_of(items)
    if len(truth) != len(items):
        raise MissingGroundTruthError("baseline evaluation requires full ground truth")
    index = items_by_id(items)
    scores = simulate_model_scores(truth, score_params)
    ranked = sorted(
        (i for i, s in scores.items() if s > score_params.tau),
        key=lambda i: (-scores[i], i),
    )
    sample = ranked[:total_budget]
    verdicts = (
        oracle.label_batch([(i, index[i].embedding) for i in sample]) if sample else []
    )
    records = [
        LabelRecord(item_id=i, label=v, provenance=PROVENANCE_ORACLE, round=1)
        for i, v in zip(sample, verdicts)
    ]
    report = compute_metrics(records, truth, items)
    report.corpus_hash = corpus_content_hash(items)
    report.oracle_cost = len(sample) * oracle.unit_cost
    report.baseline = {
        "kind": "score_top",
        "total_budget": total_budget,
        "reviewed": len(sample),
        "tau": score_params.tau,
        "flip_rate": score_params.flip_rate,
        "seed": score_params.seed,
    }
    return report


def run_random_baseline(
    corpus: Sequence[Item],
    total_budget: int,
    oracle: Oracle,
    trials: int,
    seed: int,
) -> MetricsReport:
    """Budget-matched control: uniform random review with no propagation.

    Samples ``total_budget`` items without replacement, labels them with the
    given oracle, and averages the metrics over ``trials`` resamples.
    """
    if total_budget < 0:
        raise ValueError("total_budget must be >= 0")
    if total_budget > len(corpus):
        raise ValueError(
            f"total_budget {total_budget} exceeds corpus size {len(corpus)}"
        )
    if trials < 1:
        raise ValueError("trials must be >= 1")
    items = list(corpus)
    truth = ground_truth_of(items)
    if len(truth) != len(items):
        raise MissingGroundTruthError("baseline evaluation requires full ground truth")
    ids = sorted(truth)
    id_array = np.array(ids)
    index = items_by_id(items)

    per_trial: list[MetricsReport] = []
    for trial in range(trials):
        rng = np.random.default_rng((seed, trial))
        if total_budget:
            sample = sorted(
                rng.choice(id_array, size=total_budget, replace=False).tolist()
            )
        else:
            sample = []
        verdicts = (
            oracle.label_batch([(i, index[i].embedding) for i in sample])
            if sample
            else []
        )
        records = [
            LabelRecord(item_id=i, label=v, provenance=PROVENANCE_ORACLE, round=1)
            for i, v in zip(sample, verdicts)
        ]
        per_trial.append(compute_metrics(records, truth, items))

    def mean_of(values: Iterable[float | None]) -> float | None:
        present = [v for v in values if v is not None]
        return sum(present) / len(present) if present else None

    report = MetricsReport(
        corpus_size=len(items),
        corpus_hash=corpus_content_hash(items),
        oracle_reviews=total_budget,
        oracle_cost=total_budget * oracle.unit_cost,
        review_fraction=total_budget / len(items) if items else 0.0,
        positives_seed=0.0,
        positives_oracle=mean_of(r.positives_oracle for r in per_trial) or 0.0,
        positives_propagated=0.0,
        positives_total=mean_of(r.positives_total for r in per_trial) or 0.0,
        recall=mean_of(r.recall for r in per_trial),
        precision=mean_of(r.precision for r in per_trial),
        impression_weighted_recall=mean_of(
            r.impression_weighted_recall for r in per_trial
        ),
        amplification=mean_of(r.amplification for r in per_trial),
        baseline={
            "kind": "random",
            "total_budget": total_budget,
            "trials": trials,
            "seed": seed,
        },
    )
    return report
