#!/usr/bin/env python3
"""
Tests for fine-tuning, routing modes, baselines, K selection and artifact persistence
"""

from dataclasses import replace
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from base_forecaster import embed_batch, forward, save_model
from conftest import TINY_SPEC
from bayesian_mixture import fit_vi
from lora_adapters import AdapterConfig, AdapterSet, init_lora
from mixft_errors import ConfigError, DataError, ShapeError
from mixft_pipeline import (FinetuneSettings, MixftArtifact, RouteCost, RoutingMode, base_method, choose_k,
                            finetune, forecast, forecast_batch, forecast_other_component, load_artifact,
                            mixft_method, mu_method, other_component_method, other_components,
                            per_dataset_baseline, route_forecast, save_artifact, score_methods, select_k,
                            shared_baseline, validation_split)
from series_data import Corpus, TimeSeries, stack_windows, window_corpus
from synthetic_regimes import synth_corpus, two_regime_spec

FIXTURES = Path(__file__).parent / "fixtures"


def _corpora(length=120):
    return [synth_corpus(two_regime_spec(segment_length=40), 2, length, seed=i, name=f"ft{i}")
            for i in range(2)]


def _contexts(spec, count=6):
    windows = window_corpus(synth_corpus(two_regime_spec(), 1, 80, seed=9, name="unseen"), spec)
    return stack_windows(windows[:count])[0]


def _distinct_modules(model, count=3):
    modules = []
    for seed in range(count):
        module = init_lora(model.config, AdapterConfig(rank=2, alpha=4.0, seed=seed))
        rng = np.random.default_rng(seed)
        for _, B in module.factors.values():
            B[...] = 0.2 * rng.standard_normal(B.shape)
        modules.append(module)
    return modules


def test_routing_mode_parse():
    assert RoutingMode.parse("Soft") is RoutingMode.SOFT
    assert RoutingMode.parse(RoutingMode.MU) is RoutingMode.MU
    with pytest.raises(ConfigError, match="valid: hard, soft, ensemble, mu"):
        RoutingMode.parse("median")


def test_settings_validation():
    with pytest.raises(ConfigError):
        FinetuneSettings(partitioner="dbscan")
    with pytest.raises(ConfigError):
        FinetuneSettings(predictive="gaussian")
    with pytest.raises(ConfigError):
        FinetuneSettings(threads=0)


def test_single_component_modes_agree_bitwise(tiny_model, tiny_settings):
    artifact = finetune(_corpora(), tiny_model, 1, tiny_settings)
    for x in _contexts(tiny_settings.window):
        reference = forecast(artifact, x, RoutingMode.HARD)
        assert reference.diagnostics.probs.tolist() == [1.0]
        assert reference.diagnostics.entropy_bits == 0.0
        for mode in ("soft", "ensemble", "mu"):
            output = forecast(artifact, x, mode)
            assert np.array_equal(output.forecast, reference.forecast), mode
            assert output.diagnostics.cost == RouteCost(1, 1)


@pytest.mark.parametrize("partitioner", ["vi", "kmeans"])
def test_single_component_equals_shared_baseline(tiny_model, tiny_settings, partitioner):
    settings = replace(tiny_settings, partitioner=partitioner)
    artifact = finetune(_corpora(), tiny_model, 1, settings)
    shared = shared_baseline(_corpora(), tiny_model, settings)
    assert artifact.adapters[0].identical(shared)
    x = _contexts(settings.window)[0]
    assert np.array_equal(forecast(artifact, x).forecast, forward(tiny_model, shared, x).forecast)


@pytest.mark.parametrize("mode", ["hard", "soft", "ensemble"])
def test_one_hot_routing_is_the_chosen_adapter(tiny_model, mode):
    modules = _distinct_modules(tiny_model)
    x = _contexts(TINY_SPEC)[0]
    y_hat, cost = route_forecast(tiny_model, modules, x, np.array([0.0, 1.0, 0.0]), mode)
    assert np.array_equal(y_hat, forward(tiny_model, modules[1], x).forecast)
    assert cost == RouteCost(1, 1)


@pytest.mark.parametrize("mode", ["hard", "soft", "ensemble", "mu"])
def test_identical_adapters_collapse(tiny_model, mode):
    module = _distinct_modules(tiny_model, 1)[0]
    x = _contexts(TINY_SPEC)[1]
    y_hat, cost = route_forecast(tiny_model, [module, module.copy()], x, np.array([0.3, 0.7]), mode)
    assert np.array_equal(y_hat, forward(tiny_model, module, x).forecast)
    assert cost == RouteCost(1, 1)


def test_ensemble_mixes_forecasts(tiny_model):
    a, b = _distinct_modules(tiny_model, 2)
    x = _contexts(TINY_SPEC)[2]
    y_hat, cost = route_forecast(tiny_model, [a, b], x, np.array([0.25, 0.75]), "ensemble")
    expected = 0.25 * forward(tiny_model, a, x).forecast + 0.75 * forward(tiny_model, b, x).forecast
    assert np.allclose(y_hat, expected, rtol=1e-12, atol=1e-12)
    assert cost == RouteCost(2, 2)


@pytest.mark.parametrize("mode,expected", [
    ("hard", RouteCost(1, 1)),
    ("soft", RouteCost(1, 3)),
    ("mu", RouteCost(1, 3)),
    ("ensemble", RouteCost(3, 3)),
])
def test_route_cost_counts_passes_and_contributing_adapters(tiny_model, mode, expected):
    modules = _distinct_modules(tiny_model, 3)
    _, cost = route_forecast(tiny_model, modules, _contexts(TINY_SPEC)[3], np.array([0.2, 0.5, 0.3]), mode)
    assert cost == expected


def test_soft_routing_skips_zero_weight_adapters_in_count(tiny_model):
    modules = _distinct_modules(tiny_model, 3)
    _, cost = route_forecast(tiny_model, modules, _contexts(TINY_SPEC)[3], np.array([0.4, 0.0, 0.6]), "soft")
    assert cost == RouteCost(1, 2)


def test_route_forecast_checks_probability_length(tiny_model):
    modules = _distinct_modules(tiny_model, 2)
    with pytest.raises(ShapeError):
        route_forecast(tiny_model, modules, np.zeros(32), np.array([1.0]), "hard")


def _vi_artifact(model, spec, K=2):
    contexts = stack_windows(window_corpus(_corpora()[0], spec))[0]
    posterior = fit_vi(embed_batch(model, contexts), K).posterior
    return MixftArtifact(model, AdapterSet(_distinct_modules(model, K)), "vi", posterior=posterior)


def test_hard_routing_evaluates_one_adapter_per_context(tiny_model, tiny_settings):
    artifact = _vi_artifact(tiny_model, tiny_settings.window)
    contexts = _contexts(tiny_settings.window)
    hard = forecast_batch(artifact, contexts, "hard")
    assert hard.cost == RouteCost(len(contexts), len(contexts))
    assert np.allclose(hard.probs.sum(axis=1), 1.0)
    for x, k, y_hat in zip(contexts, hard.chosen, hard.forecasts):
        assert np.array_equal(y_hat, forward(tiny_model, artifact.adapters[int(k)], x).forecast)

    ensemble = forecast_batch(artifact, contexts, "ensemble")
    assert len(contexts) <= ensemble.cost.forward_passes <= 2 * len(contexts)
    assert ensemble.cost.adapters_used == ensemble.cost.forward_passes


def test_other_components_pick_the_runner_up():
    probs = np.array([[0.7, 0.2, 0.1], [0.1, 0.3, 0.6], [0.5, 0.5, 0.0]])
    assert other_components([0, 2, 1], probs).tolist() == [1, 1, 0]
    with pytest.raises(ConfigError):
        other_components([0], np.ones((1, 1)))


def test_other_component_forecast_uses_an_unchosen_adapter(tiny_model, tiny_settings):
    artifact = _vi_artifact(tiny_model, tiny_settings.window)
    contexts = _contexts(tiny_settings.window)
    hard = forecast_batch(artifact, contexts, "hard")
    other = forecast_other_component(artifact, contexts)
    assert np.array_equal(other.chosen, 1 - hard.chosen)
    assert other.cost == RouteCost(len(contexts), len(contexts))
    for x, k, y_hat in zip(contexts, other.chosen, other.forecasts):
        assert np.array_equal(y_hat, forward(tiny_model, artifact.adapters[int(k)], x).forecast)
    method = other_component_method("MixFT-other", artifact)
    assert np.array_equal(method.predict(contexts), other.forecasts)


def test_artifact_consistency_checks(tiny_model):
    with pytest.raises(ConfigError):
        MixftArtifact(tiny_model, AdapterSet(_distinct_modules(tiny_model, 2)), "vi")
    with pytest.raises(ShapeError):
        MixftArtifact(tiny_model, AdapterSet(_distinct_modules(tiny_model, 2)), "kmeans",
                      centroids=np.zeros((3, 8)))


def test_kmeans_finetune_is_deterministic_across_threads(tiny_model, tiny_settings):
    settings = replace(tiny_settings, partitioner="kmeans")
    one = finetune(_corpora(), tiny_model, 2, settings)
    two = finetune(_corpora(), tiny_model, 2, replace(settings, threads=2))
    assert one.manifest["partition_sizes"] == two.manifest["partition_sizes"]
    assert sum(one.manifest["partition_sizes"]) == 4 * (120 - 36 + 1)
    for a, b in zip(one.adapters.modules, two.adapters.modules):
        assert a.identical(b)


def test_artifact_round_trip(tmp_path, tiny_model, tiny_settings):
    artifact = finetune(_corpora(), tiny_model, 2, replace(tiny_settings, partitioner="kmeans"))
    save_model(tiny_model, tmp_path / "base")
    save_artifact(artifact, tmp_path / "artifact", tmp_path / "base")
    loaded = load_artifact(tmp_path / "artifact", tmp_path / "base")

    assert loaded.num_components == 2
    assert loaded.manifest["K"] == 2
    contexts = _contexts(tiny_settings.window)
    for mode in RoutingMode:
        assert np.array_equal(forecast_batch(loaded, contexts, mode).forecasts,
                              forecast_batch(artifact, contexts, mode).forecasts)


def test_vi_artifact_round_trip(tmp_path, tiny_model, tiny_settings):
    artifact = finetune(_corpora(), tiny_model, 1, tiny_settings)
    save_model(tiny_model, tmp_path / "base")
    loaded = load_artifact(save_artifact(artifact, tmp_path / "artifact", tmp_path / "base"))
    assert loaded.partitioner == "vi"
    assert loaded.posterior.elbo_trace == artifact.posterior.elbo_trace


def test_artifact_rejects_a_different_base_model(tmp_path, tiny_model, tiny_settings):
    artifact = finetune(_corpora(), tiny_model, 1, tiny_settings)
    save_model(tiny_model, tmp_path / "base")
    save_artifact(artifact, tmp_path / "artifact", tmp_path / "base")

    other = tiny_model.copy()
    other.params["head.bias"] = other.params["head.bias"] + 1.0
    save_model(other, tmp_path / "base")
    with pytest.raises(DataError):
        load_artifact(tmp_path / "artifact", tmp_path / "base")


def test_per_dataset_baseline_keys(tiny_model, tiny_settings):
    adapters = per_dataset_baseline(_corpora(), tiny_model, tiny_settings)
    assert adapters.keys == ["ft0", "ft1"]
    assert not adapters[0].identical(adapters[1])


def test_score_methods_collects_records(tiny_model, tiny_settings):
    artifact = finetune(_corpora(), tiny_model, 1, tiny_settings)
    adapters = per_dataset_baseline(_corpora(), tiny_model, tiny_settings)
    methods = [base_method(tiny_model), mu_method("mu-Datasets", tiny_model, adapters),
               mixft_method("MixFT", artifact)]
    evaluation = [synth_corpus(two_regime_spec(), 1, 100, seed=7, name="eval0")]
    records = score_methods(methods, evaluation, tiny_settings.window, seed=0)
    records = score_methods(methods, evaluation, tiny_settings.window, seed=1, records=records)
    assert set(records) == {("eval0", "Base"), ("eval0", "mu-Datasets"), ("eval0", "MixFT")}
    base = records[("eval0", "Base")]
    assert sorted(base.per_seed) == [0, 1]
    assert base.per_seed[0].values.size == len(range(0, 100 - 36 + 1, 4))
    assert np.all(base.per_seed[0].values >= 0)


def test_choose_k_on_published_sweep():
    table = pd.read_csv(FIXTURES / "k_selection_ranks.csv")
    assert choose_k(table["K"], table["average_rank"]) == 2
    best = table.loc[table["average_rank"].idxmin()]
    assert best["K"] == 2
    assert best["average_rank"] == pytest.approx(2.17)


def test_choose_k_ties_prefer_smaller_k():
    assert choose_k([4, 2, 3], [1.5, 1.5, 2.0]) == 2
    with pytest.raises(ConfigError):
        choose_k([1, 2], [1.0])


def test_validation_split_holds_out_the_tail(tiny_settings):
    corpus = _corpora(length=400)[0]
    train, validation = validation_split(corpus, tiny_settings.window, 0.1)
    assert [s.length for s in train.series] == [360, 360]
    assert len(validation) == 2 * (40 - 36 + 1)
    assert all(w.dataset_id == "ft0" for w in validation)


def test_select_k_single_candidate_skips_training(tiny_model, tiny_settings):
    selection = select_k(_corpora(length=400), tiny_model, [3], tiny_settings)
    assert selection.chosen == 3
    assert selection.table is None


def test_select_k_needs_validation_data(tiny_model, tiny_settings):
    with pytest.raises(DataError):
        select_k(_corpora(length=120), tiny_model, [1, 2], tiny_settings)


def test_select_k_ranks_candidates(tiny_model, tiny_settings):
    settings = replace(tiny_settings, partitioner="kmeans")
    selection = select_k(_corpora(length=400), tiny_model, [1, 2], settings)
    assert selection.chosen in (1, 2)
    assert sorted(selection.average_ranks) == [1, 2]
    assert sum(selection.average_ranks.values()) == pytest.approx(3.0)


def test_select_k_leaves_out_dataset_with_undefined_mase(tiny_model, tiny_settings):
    settings = replace(tiny_settings, partitioner="kmeans")
    flat = Corpus("flat", [TimeSeries(f"flat_{i}", np.full(400, 5.0), 1) for i in range(2)])
    selection = select_k(_corpora(length=400) + [flat], tiny_model, [1, 2], settings)
    assert selection.excluded == ["flat"]
    assert selection.table.datasets == ["ft0", "ft1"]
    assert sum(selection.average_ranks.values()) == pytest.approx(3.0)
