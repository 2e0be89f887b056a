#!/usr/bin/env python3
"""
Desk-scale Acceptance Validation
Runs the two-regime experiment end to end and checks the directional results
"""

import sys
import time

import numpy as np

from base_forecaster import init_model, pretrain
from bayesian_mixture import classification_entropy
from evaluation_kit import routing_accuracy
from log_setup import configure_logging
from mixft_pipeline import (RoutingMode, adapter_method, finetune, forecast_batch, mixft_method, mu_method,
                            per_dataset_baseline, score_methods, select_k, shared_baseline, sweep_k)
from run_config import load_config
from series_data import evaluation_corpus_windows, stack_windows, window_corpus
from synthetic_regimes import desk_corpora

SEEDS = (0, 1, 2)
SWEEP_KS = (1, 2, 3, 4)
ENSEMBLE_SLACK = 0.005
ROUTING_ACCURACY = 0.95
ENTROPY_BITS = 0.05


class AcceptanceValidator:
    def __init__(self):
        self.cfg = load_config(overrides=["run.profile=desk"])
        self.spec = self.cfg.window_spec()
        self.stride = self.cfg["window.eval_stride"]
        self.corpora = None
        self.model = None
        self.passed = 0
        self.failed = 0

    def report(self, ok, message):
        if ok:
            print(f"✅ {message}")
            self.passed += 1
        else:
            print(f"❌ {message}")
            self.failed += 1

    def prepare(self):
        """Synthesize the corpora and pretrain the base model"""
        print("\n🔧 Preparing corpora and base model...")
        cfg = self.cfg
        self.corpora = desk_corpora(
            seed=0,
            series_per_dataset=cfg["synth.series_per_dataset"],
            length=cfg["synth.length"],
            segment_length=cfg["synth.segment_length"],
            pretrain_series=cfg["pretrain.num_series"],
            pretrain_length=cfg["pretrain.length"],
        )
        windows = window_corpus(self.corpora.pretrain, self.spec)
        model_cfg = cfg.model_config()
        self.model, trace = pretrain(init_model(model_cfg), windows, cfg.optimizer_config("pretrain"),
                                     np.random.default_rng(model_cfg.seed))
        print(f"   pretrain loss {trace[0]:.4f} -> {trace[-1]:.4f}")

    def check_directional_trend(self):
        """MixFT (K=2, hard) against Shared, mu-Datasets and ensemble routing"""
        print("\n📊 Checking directional trend over seeds...")
        records = {}
        artifacts = {}
        for seed in SEEDS:
            settings = self.cfg.finetune_settings(seed)
            replay = self.corpora.pretrain
            finetune_corpora = self.corpora.finetune
            artifact = finetune(finetune_corpora, self.model, 2, settings, replay)
            artifacts[seed] = artifact
            methods = [
                mixft_method("MixFT", artifact, RoutingMode.HARD),
                mixft_method("MixFT-ensemble", artifact, RoutingMode.ENSEMBLE),
                adapter_method("Shared", self.model, shared_baseline(finetune_corpora, self.model, settings, replay)),
                mu_method("mu-Datasets", self.model,
                          per_dataset_baseline(finetune_corpora, self.model, settings, replay)),
            ]
            score_methods(methods, self.corpora.evaluation, self.spec, self.stride, seed, records)

        def overall(method):
            return float(np.mean([r.mean for (_, m), r in records.items() if m == method]))

        mixft, ensemble = overall("MixFT"), overall("MixFT-ensemble")
        shared, mu = overall("Shared"), overall("mu-Datasets")
        print(f"   MixFT {mixft:.4f}  ensemble {ensemble:.4f}  Shared {shared:.4f}  mu-Datasets {mu:.4f}")
        self.report(mixft < shared, "MixFT beats Shared")
        self.report(mixft < mu, "MixFT beats mu-Datasets")
        self.report(mixft <= ensemble + ENSEMBLE_SLACK, "Hard routing beats or ties ensemble")
        return artifacts

    def check_routing(self, artifacts):
        """Routing accuracy against regime labels and classification entropy"""
        print("\n🧭 Checking routing accuracy and entropy...")
        artifact = artifacts[SEEDS[0]]
        for corpus in self.corpora.evaluation:
            windows = evaluation_corpus_windows(corpus, self.spec, self.stride)
            contexts, _ = stack_windows(windows)
            result = forecast_batch(artifact, contexts, RoutingMode.HARD)
            truth = np.array([w.regime_label for w in windows])
            accuracy = routing_accuracy(result.chosen, truth)
            entropy = float(np.mean([classification_entropy(p) for p in result.probs]))
            self.report(accuracy >= ROUTING_ACCURACY, f"{corpus.name}: routing accuracy {accuracy:.3f}")
            self.report(entropy < ENTROPY_BITS, f"{corpus.name}: mean entropy {entropy:.4f} bits")

    def check_k_sweep(self):
        """K=2 should rank best in most seeds, and select_k should agree"""
        print("\n🔁 Checking K sweep...")
        wins = 0
        for seed in SEEDS:
            settings = self.cfg.finetune_settings(seed)
            sweep = sweep_k(self.corpora.finetune, self.corpora.evaluation, self.model, SWEEP_KS,
                            settings, self.corpora.pretrain, RoutingMode.HARD, self.stride)
            best = sweep.table.best()
            print(f"   seed {seed}: best {best}")
            wins += best == "K=2"
        self.report(wins >= 2, f"K=2 best in {wins}/{len(SEEDS)} seeds")

        selection = select_k(self.corpora.finetune, self.model, SWEEP_KS, self.cfg.finetune_settings(SEEDS[0]),
                             self.corpora.pretrain, self.cfg["pipeline.validation_fraction"])
        self.report(selection.chosen == 2, f"select_k picks K={selection.chosen}")

    def run_validation(self):
        print("🧪 MixFT desk-scale acceptance")
        print("=" * 50)
        start = time.time()
        self.prepare()
        artifacts = self.check_directional_trend()
        self.check_routing(artifacts)
        self.check_k_sweep()
        elapsed = time.time() - start

        print("\n" + "=" * 50)
        print(f"📊 {self.passed} passed, {self.failed} failed in {elapsed / 60:.1f} min")
        if self.failed:
            print("⚠️ Some acceptance checks failed")
        else:
            print("🎉 All acceptance checks passed")
        return self.failed == 0


if __name__ == "__main__":
    configure_logging("WARNING")
    sys.exit(0 if AcceptanceValidator().run_validation() else 1)
