import pytest

from sonopipe import experiments as ex
from sonopipe.dataset import TooFewSamples


def tiny_config(**overrides):
    base = dict(
        experiment="exp1", k_values=(2, 3), s=4, s_values=(3, 4), replicates=1,
        trials=2, arms=("none", "aug+transfer"), seed=11,
        num_sonotypes=4, samples_per=8, image_size=16, snr_db=12.0,
        freq_lo=800.0, freq_hi=6000.0,
        fan_out_count=3, quota=(6, 2, 2), aug_mode="fanout",
        conv_filters=(4, 8), dense_sizes=(16, 8), dropout_rate=0.25,
        learning_rate=1e-3, batch_size=8, max_epochs=3, patience=2,
        pretext_classes=2, pretext_per_class=6, pretext_epochs=1, jobs=1)
    base.update(overrides)
    return ex.ExperimentConfig(**base)


@pytest.fixture(scope="module")
def bench():
    config = tiny_config()
    catalog = ex.build_catalog(config)
    bank = ex.build_noise_bank(config)
    backbone = ex.build_pretext_backbone(config)
    return config, catalog, bank, backbone


class TestRunCell:
    def test_one_row_per_arm_with_metrics(self, bench):
        config, catalog, bank, backbone = bench
        rows = ex.run_cell(catalog, bank, backbone, config, k=2, s=4,
                           cell_seed=99, arms=("none", "transfer"))
        assert [r["arm"] for r in rows] == ["none", "transfer"]
        for r in rows:
            for name in ex.METRIC_NAMES:
                assert 0.0 <= r[name] <= 1.0
            assert r["seed"] == 99
            assert r["k"] == 2

    def test_rerun_from_recorded_seed_is_bit_identical(self, bench):
        config, catalog, bank, backbone = bench
        first = ex.run_cell(catalog, bank, backbone, config, k=3, s=4,
                            cell_seed=1234, arms=("aug+transfer",))[0]
        second = ex.run_cell(catalog, bank, backbone, config, k=3, s=4,
                             cell_seed=first["seed"], arms=("aug+transfer",))[0]
        assert first == second

    def test_fan_out_multiplies_splits(self, bench):
        config, catalog, bank, backbone = bench
        plain, fanned = ex.run_cell(catalog, bank, backbone, config, k=2, s=4,
                                    cell_seed=5, arms=("none", "aug"))
        # s=4 splits (2,1,1) per class; fan-out of 3 triples every split
        assert plain["n_train"] == 2 * 2
        assert fanned["n_train"] == plain["n_train"] * config.fan_out_count
        assert fanned["n_test"] == plain["n_test"] * config.fan_out_count

    def test_quota_mode_hits_quota(self, bench):
        config, catalog, bank, backbone = bench
        cfg = tiny_config(aug_mode="quota")
        row = ex.run_cell(catalog, bank, backbone, cfg, k=2, s=4,
                          cell_seed=5, arms=("aug",))[0]
        assert row["n_train"] == 2 * cfg.quota[0]
        assert row["n_val"] == 2 * cfg.quota[1]
        assert row["n_test"] == 2 * cfg.quota[2]

    def test_arms_share_the_draw(self, bench):
        config, catalog, bank, backbone = bench
        rows = ex.run_cell(catalog, bank, backbone, config, k=2, s=4,
                           cell_seed=7, arms=("none", "transfer"))
        assert rows[0]["n_train"] == rows[1]["n_train"]
        assert rows[0]["n_test"] == rows[1]["n_test"]

    def test_too_small_s_rejected(self, bench):
        config, catalog, bank, backbone = bench
        with pytest.raises(TooFewSamples):
            ex.run_cell(catalog, bank, backbone, config, k=2, s=2,
                        cell_seed=3, arms=("none",))


class TestExperiment1:
    def test_row_grid(self, bench):
        config, catalog, *_ = bench
        rows = ex.run_experiment1(config, catalog=catalog)
        assert len(rows) == len(config.k_values) * config.replicates * len(config.arms)
        ks = sorted({r["k"] for r in rows})
        assert ks == sorted(config.k_values)
        arms = {r["arm"] for r in rows}
        assert arms == set(config.arms)

    def test_deterministic_across_runs(self, bench):
        config, catalog, *_ = bench
        a = ex.run_experiment1(config, catalog=catalog)
        b = ex.run_experiment1(config, catalog=catalog)
        assert ex.strip_private(a) == ex.strip_private(b)


class TestExperiment2:
    def test_rows_and_fits(self, bench):
        config, catalog, *_ = bench
        cfg = tiny_config(experiment="exp2", arms=("transfer", "aug+transfer"),
                          replicates=2, s_values=(3, 4), aug_mode="quota")
        rows, fits = ex.run_experiment2(cfg, catalog=catalog)
        assert len(rows) == 2 * 2 * 2
        assert set(fits) == {"transfer", "aug+transfer"}
        for fit in fits.values():
            assert fit.ci_low <= fit.slope <= fit.ci_high
        aug_rows = [r for r in rows if r["arm"] == "aug+transfer"]
        k = max(cfg.k_values)
        assert all(r["n_train"] == k * cfg.quota[0] for r in aug_rows)


class TestExperiment3:
    def test_rows_have_sizes_and_fits(self, bench):
        config, catalog, *_ = bench
        cfg = tiny_config(experiment="exp3", arms=("transfer",), trials=3,
                          k_values=(2,), aug_mode="quota")
        rows, fits = ex.run_experiment3(cfg, catalog=catalog)
        assert len(rows) == 3
        for r in rows:
            assert r["mean_size"] >= r["min_size"] >= 3
        assert set(fits["transfer"]) <= {"mean_size", "min_size"}

    def test_mean_and_min_match_draw(self, bench):
        config, catalog, *_ = bench
        cfg = tiny_config(experiment="exp3", arms=("none",), trials=1, k_values=(3,))
        rows, _ = ex.run_experiment3(cfg, catalog=catalog)
        # balanced synthetic catalog: every sonotype has samples_per members
        assert rows[0]["mean_size"] == cfg.samples_per
        assert rows[0]["min_size"] == cfg.samples_per


class TestFactors:
    def test_anova_table_schema(self, bench):
        config, catalog, *_ = bench
        cfg = tiny_config(experiment="factors", arms=("transfer",), trials=2,
                          k_values=(4,), s=4)
        anova_rows, trial_rows = ex.run_factors(cfg, catalog=catalog)
        assert trial_rows
        assert anova_rows
        for row in anova_rows:
            assert set(row) == {"arm", "factor", "F", "df1", "df2", "p"}
            assert 0.0 <= row["p"] <= 1.0
            assert row["F"] >= 0.0
        factors = {r["factor"] for r in anova_rows}
        assert "taxon" in factors


class TestParallel:
    def test_jobs_do_not_change_results(self, bench):
        config, catalog, *_ = bench
        serial = ex.run_experiment1(tiny_config(jobs=1), catalog=catalog)
        parallel = ex.run_experiment1(tiny_config(jobs=2), catalog=catalog)
        assert ex.strip_private(serial) == ex.strip_private(parallel)


class TestCsvAndManifest:
    def test_rows_to_csv_drops_private_fields(self, bench):
        config, catalog, *_ = bench
        rows = ex.run_experiment1(tiny_config(arms=("none",), k_values=(2,)),
                                  catalog=catalog)
        text = ex.rows_to_csv(rows)
        header = text.splitlines()[0]
        assert "accuracy" in header
        assert "_per_class_recall" not in text
        assert len(text.strip().splitlines()) == len(rows) + 1

    def test_manifest_lists_config(self):
        cfg = tiny_config()
        text = ex.manifest_text(cfg, {"catalog_sonotypes": 4})
        assert "seed = 11" in text
        assert "catalog_sonotypes = 4" in text


class TestChanceLevel:
    def test_untrained_two_class_model_sits_at_chance(self, bench):
        # an untrained model must average 0.5 +- 0.1 accuracy over 50 draws
        import numpy as np
        from sonopipe import dataset as ds, evalstat
        from sonopipe.nnet import Model, NetworkConfig, init_params
        from sonopipe.nnet.train import evaluate_probs

        config, catalog, *_ = bench
        accs = []
        for rep in range(50):
            net_cfg = NetworkConfig(num_classes=2, input_hw=config.image_size,
                                    conv_filters=config.conv_filters,
                                    dense_sizes=config.dense_sizes)
            model = Model(config=net_cfg, params=init_params(net_cfg, seed=rep))
            draw = ds.select_balanced(catalog, k=2, s=6, rng_seed=rep)
            samples = [s for members in draw.values() for s in members]
            model.classes = np.unique([s.label for s in samples])
            probs = evaluate_probs(model, samples)
            y = np.searchsorted(model.classes, [s.label for s in samples])
            accs.append(evalstat.accuracy(
                evalstat.ScoredPredictions(y_true=y, scores=probs)))
        assert abs(float(np.mean(accs)) - 0.5) <= 0.1
