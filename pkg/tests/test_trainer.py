import numpy as np
import pytest

from banditmatch import datasets as ds
from banditmatch import dialogworld as dw
from banditmatch import trainer as tr
from banditmatch.objectives import LossWeights
from banditmatch.policy import PolicyNet, policy_spec_for
from dataclasses import replace


@pytest.fixture(scope="module")
def schema():
    return dw.default_schema()


@pytest.fixture(scope="module")
def spec(schema):
    return policy_spec_for(schema, hidden_dims=(32,))


@pytest.fixture(scope="module")
def corpus(schema):
    return ds.generate_corpus(schema, 60, seed=21)


@pytest.fixture(scope="module")
def setup(schema, spec, corpus):
    labeled, pool = ds.split_corpus(corpus, ds.SplitConfig(0.2, seed=3))
    cfg = tr.TrainConfig(seed=3, sl_epochs=60, epochs=3, hidden_dims=(32,))
    pi0 = tr.train_logging_policy(labeled, spec, cfg)
    records = ds.log_bandit_data(pi0, pool)
    return labeled, pool, cfg, pi0, records


def params_of(policy):
    return [p.data.copy() for p in policy.parameters()]


class TestConfig:
    def test_unknown_method_rejected(self):
        with pytest.raises(tr.TrainerError):
            tr.TrainConfig(method="dagger")

    def test_ablations_only_for_composite_method(self):
        with pytest.raises(tr.TrainerError):
            tr.TrainConfig(method="ips", no_cbl=True)

    def test_apply_ablation_switches(self):
        base = tr.TrainConfig()
        assert tr.apply_ablation(base, "no_fet").no_fet
        none_all = tr.apply_ablation(base, "none_all")
        assert none_all.no_fet and none_all.no_cbl and none_all.no_kl
        assert not tr.apply_ablation(base, "full").no_fet
        with pytest.raises(tr.TrainerError):
            tr.apply_ablation(base, "no_everything")

    def test_ablation_roster(self):
        assert tr.ABLATIONS == ("full", "no_mc_scale", "no_fet", "no_cbl", "no_kl", "none_all")

    def test_default_sweep_covers_ten_points(self):
        assert len(tr.DEFAULT_SWEEP_PERCENTAGES) == 10
        assert tr.DEFAULT_SWEEP_PERCENTAGES == (5, 10, 20, 30, 40, 50, 60, 70, 80, 90)


class TestLoggingPolicy:
    def test_full_label_training_reaches_high_exact_match(self, schema, corpus):
        spec_full = policy_spec_for(schema)
        cfg = tr.TrainConfig(seed=5, sl_epochs=240)
        policy = tr.train_supervised(corpus, spec_full, cfg)
        states = np.stack([ex.state for ex in corpus])
        from banditmatch import fet

        targets = fet.sets_to_mask([ex.actions for ex in corpus], spec_full.output_dim)
        assert tr.exact_match_rate(policy, states, targets) > 0.95

    def test_returned_frozen(self, setup):
        *_, pi0, _ = setup
        assert setup[3].role == "frozen"

    def test_deterministic_under_seed(self, spec, setup):
        labeled = setup[0]
        cfg = tr.TrainConfig(seed=9, sl_epochs=5, hidden_dims=(32,))
        a = tr.train_logging_policy(labeled, spec, cfg)
        b = tr.train_logging_policy(labeled, spec, cfg)
        for x, y in zip(a.parameters(), b.parameters()):
            assert np.array_equal(x.data, y.data)

    def test_empty_corpus_rejected(self, spec):
        with pytest.raises(tr.TrainerError):
            tr.train_supervised([], spec, tr.TrainConfig())


class TestFineTuning:
    def test_warm_start_matches_logging_policy_before_updates(self, setup, schema):
        *_, cfg, pi0, records = setup[1], setup[2], setup[3], setup[4]
        cfg = replace(setup[2], epochs=0)
        policy, history = tr.train_on_log(setup[3], setup[4], cfg)
        states = np.stack([r.state for r in setup[4]])
        assert np.array_equal(policy.probs(states), setup[3].probs(states))
        assert history == []

    def test_fixed_seed_reproducible(self, setup):
        cfg = replace(setup[2], epochs=2)
        a, _ = tr.train_on_log(setup[3], setup[4], cfg)
        b, _ = tr.train_on_log(setup[3], setup[4], cfg)
        for x, y in zip(a.parameters(), b.parameters()):
            assert np.array_equal(x.data, y.data)

    def test_zero_weights_reduce_to_positive_only_supervision(self, setup):
        # with every extra term switched off the step log shows only the
        # labeled loss
        cfg = replace(setup[2], epochs=1, weights=LossWeights(0.0, 0.0, 0.0),
                      no_fet=True, no_cbl=True, no_kl=True)
        _, history = tr.train_on_log(setup[3], setup[4], cfg)
        for row in history:
            assert row.total == row.loss_labeled

    def test_none_all_equals_fixmatch_on_logged_positives(self, setup):
        labeled = setup[0]
        ablated_cfg = tr.apply_ablation(replace(setup[2], epochs=2), "none_all")
        a, _ = tr.train_on_log(setup[3], setup[4], ablated_cfg)
        fixmatch_cfg = replace(
            setup[2], epochs=2, method="fixmatch",
            fixmatch_labeled_source="logged_positives",
            no_mc_scale=False, no_fet=False, no_cbl=False, no_kl=False,
        )
        b, _ = tr.train_on_log(setup[3], setup[4], fixmatch_cfg, labeled_split=labeled)
        for x, y in zip(a.parameters(), b.parameters()):
            assert np.array_equal(x.data, y.data)

    def test_fixmatch_baseline_requires_labeled_split(self, setup):
        cfg = replace(setup[2], epochs=1, method="fixmatch")
        with pytest.raises(tr.TrainerError):
            tr.train_on_log(setup[3], setup[4], cfg)

    def test_crm_training_logs_bandit_loss_only(self, setup):
        cfg = replace(setup[2], epochs=1, method="ips")
        _, history = tr.train_on_log(setup[3], setup[4], cfg)
        assert history and all(r.loss_labeled == 0.0 and r.loss_pseudo == 0.0 for r in history)

    def test_ips_with_zero_learning_rate_stays_at_logging_policy(self, setup, schema):
        cfg = replace(setup[2], epochs=2, method="ips", learning_rate=0.0)
        policy, _ = tr.train_on_log(setup[3], setup[4], cfg)
        states = np.stack([r.state for r in setup[4]])
        assert np.array_equal(policy.probs(states), setup[3].probs(states))

    def test_banditnet_add_kl_runs(self, setup):
        cfg = replace(setup[2], epochs=1, method="banditnet", add_kl=True)
        _, history = tr.train_on_log(setup[3], setup[4], cfg)
        assert any(r.loss_kl != 0.0 for r in history)

    def test_empty_log_rejected(self, setup):
        with pytest.raises(tr.TrainerError):
            tr.train_on_log(setup[3], [], setup[2])

    def test_early_stopping_restores_best_checkpoint(self, setup):
        cfg = replace(setup[2], epochs=3, early_stop=True)
        policy, _ = tr.train_on_log(setup[3], setup[4], cfg)
        assert policy.role == "trainable"  # smoke: runs and returns

    def test_training_log_csv_round_trip(self, setup, tmp_path):
        cfg = replace(setup[2], epochs=1)
        _, history = tr.train_on_log(setup[3], setup[4], cfg)
        path = tmp_path / "train_log.csv"
        tr.write_training_log(path, history)
        import csv

        with open(path) as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == len(history)
        assert float(rows[0]["total"]) == history[0].total


class TestEvaluate:
    def test_expert_skyline_perfect(self, schema):
        report = tr.evaluate_expert(schema, n_dialogs=40, n_runs=2, seed=17)
        assert report.metrics["success"] == (100.0, 0.0)
        assert report.metrics["inform_f1"][0] == 1.0

    def test_bye_only_policy_scores_zero(self, schema):
        spec_full = policy_spec_for(schema, hidden_dims=(8,))
        policy = PolicyNet(spec_full, rng=None)
        bye_index = schema.action_index(dw.AtomicAction(dw.GENERAL, dw.BYE))
        policy.net.biases[-1].data[bye_index] = 10.0
        report = tr.evaluate(policy, schema, n_dialogs=30, n_runs=1, seed=18)
        assert report.metrics["success"][0] == 0.0

    def test_same_master_seed_identical_report(self, setup, schema):
        a = tr.evaluate(setup[3], schema, n_dialogs=25, n_runs=2, seed=19)
        b = tr.evaluate(setup[3], schema, n_dialogs=25, n_runs=2, seed=19)
        assert a == b

    def test_std_is_over_runs(self, setup, schema):
        report = tr.evaluate(setup[3], schema, n_dialogs=10, n_runs=1, seed=20)
        for mean_value, std_value in report.metrics.values():
            assert std_value == 0.0

    def test_invalid_sizes_rejected(self, setup, schema):
        with pytest.raises(tr.TrainerError):
            tr.evaluate(setup[3], schema, n_dialogs=0, n_runs=1, seed=0)


class TestGrids:
    def test_ablation_grid_rows_and_shared_seeds(self, setup, schema):
        cfg = replace(setup[2], epochs=1)
        reports = tr.run_ablation_grid(
            setup[3], setup[4], schema, cfg, n_dialogs=10, n_runs=1, eval_seed=77
        )
        assert len(reports) == 6
        assert reports[0].method == "banditmatch"
        assert {r.method for r in reports[1:]} == {
            "banditmatch-no_mc_scale",
            "banditmatch-no_fet",
            "banditmatch-no_cbl",
            "banditmatch-no_kl",
            "banditmatch-none_all",
        }
        assert all(r.seed == 77 for r in reports)

    def test_sweep_structure(self, schema, corpus):
        cfg = tr.TrainConfig(seed=4, sl_epochs=10, epochs=1, hidden_dims=(16,))
        results = tr.run_sl_sweep(
            corpus, schema, cfg,
            percentages=(20, 50),
            methods=("banditmatch",),
            n_dialogs=5, n_runs=1,
        )
        assert set(results) == {"banditmatch", "logging"}
        assert [p for p, _ in results["banditmatch"]] == [20, 50]
        # per-point seeds are deterministic
        again = tr.run_sl_sweep(
            corpus, schema, cfg,
            percentages=(20, 50),
            methods=("banditmatch",),
            n_dialogs=5, n_runs=1,
        )
        assert [r.metrics for _, r in again["banditmatch"]] == [
            r.metrics for _, r in results["banditmatch"]
        ]


class TestBaselineWrapper:
    def test_sl_baseline_trains_on_corpus(self, schema, spec, corpus, setup):
        cfg = replace(setup[2], sl_epochs=5)
        policy = tr.train_baseline("sl", setup[3], None, cfg, labeled=corpus)
        assert policy.role == "trainable"

    def test_sl_requires_full_labels(self, setup):
        with pytest.raises(tr.TrainerError):
            tr.train_baseline("sl", setup[3], setup[4], setup[2], labeled=None)

    def test_crm_kind_with_kl_variant(self, setup, schema):
        cfg = replace(setup[2], epochs=1)
        policy = tr.train_baseline("ips", setup[3], setup[4], cfg, add_kl=True)
        states = np.stack([r.state for r in setup[4]])
        assert policy.probs(states).shape == (len(setup[4]), schema.num_actions)

    def test_fixmatch_kind_uses_labeled_split(self, setup):
        cfg = replace(setup[2], epochs=1)
        policy = tr.train_baseline("fixmatch", setup[3], setup[4], cfg, labeled=setup[0])
        assert policy.role == "trainable"


class TestThresholdTrace:
    def test_trace_file_written_per_step_and_class(self, setup, schema, tmp_path):
        path = tmp_path / "thresholds.csv"
        cfg = replace(setup[2], epochs=1, threshold_trace_path=str(path))
        _, history = tr.train_on_log(setup[3], setup[4], cfg)
        import csv

        with open(path) as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == len(history) * schema.num_actions
        assert 0.5 <= float(rows[0]["accept"]) <= 1.0
