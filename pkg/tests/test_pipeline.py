import dataclasses

import numpy as np
import pytest

from reviewfunnel.corpus import (
    ConfigError,
    GeneratorConfig,
    LabelRecord,
    generate_corpus,
)
from reviewfunnel.labeling import SimulatedOracle
from reviewfunnel.pipeline import (
    ActorParams,
    MissingGroundTruthError,
    OracleParams,
    PipelineConfig,
    ScoreParams,
    StageError,
    compute_metrics,
    run_pipeline,
    run_pipeline_detailed,
    run_random_baseline,
    run_round,
    run_score_baseline,
    simulate_model_scores,
)
from reviewfunnel.simgraph import build_graph

from conftest import make_items, planted_blob


def small_config(**overrides):
    defaults = dict(
        rounds=3,
        budget_per_round=5,
        bootstrap_seeds=3,
        graph_mode="exact",
        oracle=OracleParams(tpr=1.0, tnr=1.0, seed=0),
    )
    defaults.update(overrides)
    return PipelineConfig(**defaults)


@pytest.fixture(scope="module")
def small_corpus():
    items, truth = generate_corpus(
        GeneratorConfig(n_clusters=40, cluster_size_mean=8, positive_cluster_rate=0.2,
                        n_accounts=30, rng_seed=21)
    )
    return items, truth


class TestConfigValidation:
    @pytest.mark.parametrize(
        "overrides,field",
        [
            (dict(rounds=0), "rounds"),
            (dict(budget_per_round=-1), "budget_per_round"),
            (dict(theta_dup=0.2, theta_prop=0.1), "theta"),
            (dict(theta_sim=0.05), "theta"),
            (dict(oracle=OracleParams(tpr=2.0)), "tpr"),
            (dict(actor=ActorParams(min_positives=0)), "min_positives"),
            (dict(score=ScoreParams(tau=1.5)), "tau"),
            (dict(graph_mode="psychic"), "graph_mode"),
            (dict(workers=0), "workers"),
            (dict(bootstrap_seeds=-1), "bootstrap_seeds"),
        ],
    )
    def test_invalid_named(self, overrides, field):
        with pytest.raises(ConfigError, match=field):
            PipelineConfig(**overrides).validate()

    def test_defaults_valid(self):
        PipelineConfig().validate()


class TestSimulatedScores:
    def test_deterministic_and_bounded(self):
        truth = {i: bool(i % 3 == 0) for i in range(200)}
        params = ScoreParams(tau=0.5, flip_rate=0.1, seed=4)
        a = simulate_model_scores(truth, params)
        b = simulate_model_scores(truth, params)
        assert a == b
        assert all(0.0 <= s <= 1.0 for s in a.values())

    def test_scores_carry_signal(self):
        truth = {i: i < 500 for i in range(1000)}
        scores = simulate_model_scores(truth, ScoreParams(flip_rate=0.05, seed=1))
        pos = np.mean([scores[i] for i in range(500)])
        neg = np.mean([scores[i] for i in range(500, 1000)])
        assert pos > 0.6 > 0.4 > neg


class TestComputeMetrics:
    def make_corpus(self, n, positives):
        rng = np.random.default_rng(9)
        gt = [i < positives for i in range(n)]
        return make_items(rng.standard_normal((n, 4)), ground_truth=gt), {
            i: gt[i] for i in range(n)
        }

    def test_empty_store(self):
        items, truth = self.make_corpus(50, 10)
        report = compute_metrics([], truth, items)
        assert report.recall == 0.0
        assert report.precision is None
        assert report.oracle_reviews == 0

    def test_store_equals_ground_truth(self):
        items, truth = self.make_corpus(50, 10)
        records = [
            LabelRecord(item_id=i, label=True, provenance="oracle", round=1)
            for i in range(10)
        ]
        report = compute_metrics(records, truth, items)
        assert report.recall == 1.0
        assert report.precision == 1.0

    def test_partial_arithmetic(self):
        # 20 labeled positive, 10 of them truly positive, 40 true positives
        items, truth = self.make_corpus(100, 40)
        records = [
            LabelRecord(item_id=i, label=True, provenance="oracle", round=1)
            for i in list(range(10)) + list(range(50, 60))
        ]
        report = compute_metrics(records, truth, items)
        assert report.recall == 0.25
        assert report.precision == 0.5

    def test_missing_ground_truth(self):
        items, truth = self.make_corpus(10, 2)
        del truth[3]
        with pytest.raises(MissingGroundTruthError, match="3"):
            compute_metrics([], truth, items)

    def test_impression_weighting(self):
        rng = np.random.default_rng(2)
        gt = [True, True, False, False]
        items = make_items(
            rng.standard_normal((4, 3)),
            impressions=[10, 0, 5, 5],
            ground_truth=gt,
        )
        truth = {i: gt[i] for i in range(4)}
        records = [LabelRecord(item_id=1, label=True, provenance="oracle", round=1)]
        report = compute_metrics(records, truth, items)
        assert report.recall == 0.5
        assert report.impression_weighted_recall == 0.0


class TestRunRound:
    def test_no_candidates_no_cost(self, rng):
        # no seeds, no scores, no flagged actors: nothing reaches the oracle
        items = make_items(
            rng.standard_normal((10, 4)), ground_truth=[False] * 9 + [True]
        )
        config = small_config(bootstrap_seeds=0, rounds=1)
        report, state = run_pipeline_detailed(items, config)
        assert report.oracle_reviews == 0
        assert report.oracle_cost == 0.0
        assert report.recall == 0.0

    def test_hand_traced_single_cluster(self, rng):
        # one tight positive blob of 6; seed one member, review one, the
        # other four arrive by propagation
        blob = planted_blob(rng.standard_normal(12), 6, 0.002, rng)
        items = make_items(blob, ground_truth=[True] * 6)
        config = small_config(rounds=1, budget_per_round=1, bootstrap_seeds=1)
        report = run_pipeline(items, config)
        assert report.oracle_reviews == 1
        assert report.positives_oracle == 1
        assert report.positives_propagated == 4
        assert report.positives_seed == 1
        assert report.recall == 1.0
        assert report.amplification == 6.0

    def test_stage_failure_rolls_back_store(self, small_corpus):
        items, truth = small_corpus
        config = small_config(rounds=2)
        report, state = run_pipeline_detailed(items, config)
        snapshot = list(state.store.records())

        class ExplodingOracle(SimulatedOracle):
            def _judge(self, batch):
                raise RuntimeError("labeler offline")

        state.oracle = ExplodingOracle(1.0, 1.0, 0, truth)
        with pytest.raises(StageError, match="round 3 stage label"):
            run_round(state, config, 3)
        assert state.store.records() == snapshot

    def test_identical_round_metrics(self, small_corpus):
        items, _ = small_corpus
        config = small_config(rounds=2)
        a = run_pipeline(items, config)
        b = run_pipeline(items, config)
        assert [r.to_dict() for r in a.rounds] == [r.to_dict() for r in b.rounds]


class TestRunPipeline:
    def test_zero_budget_recall_is_bootstrap_recall(self, small_corpus):
        items, truth = small_corpus
        config = small_config(rounds=1, budget_per_round=0, bootstrap_seeds=5)
        report = run_pipeline(items, config)
        positives = sum(truth.values())
        assert report.review_fraction == 0.0
        assert report.recall == 5 / positives

    def test_byte_identical_reports(self, small_corpus):
        items, _ = small_corpus
        config = small_config()
        assert run_pipeline(items, config).to_json() == run_pipeline(items, config).to_json()

    def test_workers_do_not_change_report(self, small_corpus):
        items, _ = small_corpus
        config = small_config(graph_mode="blocked")
        two = dataclasses.replace(config, workers=2)
        assert run_pipeline(items, config).to_json() == run_pipeline(items, two).to_json()

    def test_budget_ceiling(self, small_corpus):
        items, _ = small_corpus
        config = small_config(rounds=4, budget_per_round=3)
        report = run_pipeline(items, config)
        assert report.oracle_reviews <= 4 * 3
        # candidates are plentiful in this corpus, so the budget is exhausted
        assert all(r.oracle_reviews == 3 for r in report.rounds)

    def test_recall_monotone_across_rounds(self, small_corpus):
        items, _ = small_corpus
        report = run_pipeline(items, small_config(rounds=4))
        recalls = [r.cumulative_recall for r in report.rounds]
        assert all(a <= b for a, b in zip(recalls, recalls[1:]))

    def test_amplification_identity(self, small_corpus):
        items, _ = small_corpus
        report = run_pipeline(items, small_config())
        assert report.positives_total == (
            report.positives_seed + report.positives_oracle + report.positives_propagated
        )
        assert report.positives_oracle == sum(r.positives_oracle for r in report.rounds)
        assert report.positives_propagated == sum(
            r.positives_propagated for r in report.rounds
        )

    def test_store_replay_prefix(self, small_corpus):
        items, _ = small_corpus
        stores = []
        for rounds in (1, 2, 3):
            _, state = run_pipeline_detailed(items, small_config(rounds=rounds))
            stores.append(state.store.records())
        assert stores[1][: len(stores[0])] == stores[0]
        assert stores[2][: len(stores[1])] == stores[1]

    def test_budget_accounting_identity(self, small_corpus):
        items, _ = small_corpus
        config = small_config(oracle=OracleParams(tpr=1.0, tnr=1.0, unit_cost=2.0))
        report, state = run_pipeline_detailed(items, config)
        oracle_records = [
            r for r in state.store.records() if r.provenance == "oracle"
        ]
        assert state.oracle.items_labeled == len(oracle_records)
        assert report.oracle_cost == 2.0 * len(oracle_records)

    def test_prebuilt_graph_matches_autobuilt(self, small_corpus):
        items, _ = small_corpus
        config = small_config()
        graph = build_graph(items, config.theta_sim, "exact")
        a = run_pipeline(items, config)
        b = run_pipeline(items, config, graph=graph)
        assert a.to_json() == b.to_json()

    def test_prebuilt_graph_too_small_radius(self, small_corpus):
        items, _ = small_corpus
        config = small_config()
        graph = build_graph(items, 0.1, "exact")
        with pytest.raises(ValueError, match="radius"):
            run_pipeline(items, config, graph=graph)

    def test_prebuilt_graph_missing_item(self, small_corpus):
        items, _ = small_corpus
        config = small_config()
        graph = build_graph(items[:-1], config.theta_sim, "exact")
        with pytest.raises(ValueError, match="missing"):
            run_pipeline(items, config, graph=graph)

    def test_missing_ground_truth_without_oracle(self, rng):
        items = make_items(rng.standard_normal((5, 3)))
        with pytest.raises(MissingGroundTruthError):
            run_pipeline(items, small_config())

    def test_injected_oracle_without_ground_truth(self, rng):
        items = make_items(rng.standard_normal((12, 4)))
        oracle = SimulatedOracle(1.0, 1.0, 0, {i: False for i in range(12)})
        config = small_config(rounds=1, bootstrap_seeds=0)
        report = run_pipeline(items, config, oracle=oracle)
        assert report.recall is None
        assert report.precision is None

    def test_score_stage_enabled(self, small_corpus):
        items, truth = small_corpus
        config = small_config(score=ScoreParams(tau=0.9, flip_rate=0.05, seed=2))
        report = run_pipeline(items, config)
        assert report.oracle_reviews > 0

    def test_empty_corpus_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            run_pipeline([], small_config())


class TestRandomBaseline:
    def make_corpus(self, n, positives, seed=0):
        rng = np.random.default_rng(seed)
        gt = [i < positives for i in range(n)]
        items = make_items(rng.standard_normal((n, 4)), ground_truth=gt)
        return items, {i: gt[i] for i in range(n)}

    def test_full_budget_perfect_oracle(self):
        items, truth = self.make_corpus(60, 12)
        oracle = SimulatedOracle(1.0, 1.0, 0, truth)
        report = run_random_baseline(items, 60, oracle, trials=2, seed=1)
        assert report.recall == 1.0
        assert report.review_fraction == 1.0

    def test_zero_budget(self):
        items, truth = self.make_corpus(30, 5)
        oracle = SimulatedOracle(1.0, 1.0, 0, truth)
        report = run_random_baseline(items, 0, oracle, trials=3, seed=1)
        assert report.recall == 0.0
        assert report.review_fraction == 0.0

    def test_hypergeometric_expectation(self):
        # 1% budget over 1% positives with a perfect oracle: expected recall
        # is budget/n = 0.01; 3-sigma band for the 40-trial mean is ~0.007
        items, truth = self.make_corpus(5000, 50, seed=3)
        oracle = SimulatedOracle(1.0, 1.0, 0, truth)
        report = run_random_baseline(items, 50, oracle, trials=40, seed=2)
        assert abs(report.recall - 0.01) <= 0.007

    def test_budget_exceeds_corpus(self):
        items, truth = self.make_corpus(10, 2)
        oracle = SimulatedOracle(1.0, 1.0, 0, truth)
        with pytest.raises(ValueError, match="exceeds"):
            run_random_baseline(items, 11, oracle, trials=1, seed=0)

    def test_deterministic(self):
        items, truth = self.make_corpus(100, 10)
        a = run_random_baseline(items, 20, SimulatedOracle(0.9, 0.9, 5, truth), 5, 7)
        b = run_random_baseline(items, 20, SimulatedOracle(0.9, 0.9, 5, truth), 5, 7)
        assert a.to_json() == b.to_json()

    def test_no_propagation(self):
        items, truth = self.make_corpus(50, 10)
        oracle = SimulatedOracle(1.0, 1.0, 0, truth)
        report = run_random_baseline(items, 25, oracle, trials=3, seed=4)
        assert report.positives_propagated == 0.0
        assert report.amplification in (1.0, None)


class TestScoreBaseline:
    def make_corpus(self, n, positives, seed=0):
        rng = np.random.default_rng(seed)
        gt = [i < positives for i in range(n)]
        items = make_items(rng.standard_normal((n, 4)), ground_truth=gt)
        return items, {i: gt[i] for i in range(n)}

    def test_full_budget_perfect_oracle(self):
        items, truth = self.make_corpus(40, 8)
        oracle = SimulatedOracle(1.0, 1.0, 0, truth)
        params = ScoreParams(tau=0.0, flip_rate=0.0, seed=1)
        report = run_score_baseline(items, 40, oracle, params)
        assert report.recall == 1.0
        assert report.baseline["kind"] == "score_top"

    def test_respects_budget_and_tau(self):
        items, truth = self.make_corpus(100, 20)
        oracle = SimulatedOracle(1.0, 1.0, 0, truth)
        params = ScoreParams(tau=0.5, flip_rate=0.0, seed=2)
        report = run_score_baseline(items, 10, oracle, params)
        assert report.oracle_reviews == 10
        assert report.positives_propagated == 0

    def test_beats_random_when_scores_carry_signal(self):
        items, truth = self.make_corpus(2000, 100, seed=5)
        params = ScoreParams(tau=0.5, flip_rate=0.05, seed=3)
        score = run_score_baseline(
            items, 50, SimulatedOracle(1.0, 1.0, 0, truth), params
        )
        random = run_random_baseline(
            items, 50, SimulatedOracle(1.0, 1.0, 0, truth), trials=5, seed=8
        )
        assert score.recall > random.recall

    def test_deterministic(self):
        items, truth = self.make_corpus(100, 10)
        params = ScoreParams(tau=0.6, flip_rate=0.1, seed=4)
        a = run_score_baseline(items, 15, SimulatedOracle(0.9, 0.9, 1, truth), params)
        b = run_score_baseline(items, 15, SimulatedOracle(0.9, 0.9, 1, truth), params)
        assert a.to_json() == b.to_json()

    def test_budget_exceeds_corpus(self):
        items, truth = self.make_corpus(10, 2)
        with pytest.raises(ValueError, match="exceeds"):
            run_score_baseline(
                items, 11, SimulatedOracle(1.0, 1.0, 0, truth), ScoreParams()
            )
