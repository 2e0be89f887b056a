#!/usr/bin/env python3

def get_paper_parity_profile():
    """
    Published hyperparameters (context 520, horizon 30, LoRA r=2, alpha=16, dropout 0.1,
    AdamW at 5e-5 with batch 256); recorded for reference, far too slow for a desk run
    """
    paper_parity_profile = """
    run.profile=paper-parity
    run.seeds=0,1,2
    run.threads=1

    window.context_length=520
    window.horizon=30
    window.stride=1
    window.eval_stride=30

    model.patch_size=8
    model.hidden_dim=64
    model.num_blocks=4
    model.seed=0

    adapter.rank=2
    adapter.alpha=16.0
    adapter.dropout=0.1
    adapter.seed=0

    optim.learning_rate=5e-05
    optim.weight_decay=0.01
    optim.batch_size=256
    optim.max_steps=5000

    pretrain.learning_rate=0.001
    pretrain.weight_decay=0.0
    pretrain.batch_size=256
    pretrain.max_steps=20000
    pretrain.num_series=256
    pretrain.length=2000

    mixture.k=2
    mixture.candidate_ks=1,2,3,4,5,10
    mixture.sweep_ks=1,2,3,4,5,10
    mixture.partitioner=vi
    mixture.predictive=student_t
    mixture.max_iters=500
    mixture.tol=1e-06
    mixture.kmeans_restarts=10

    pipeline.routing=hard
    pipeline.mixup_beta=0.2
    pipeline.average_level=factor
    pipeline.validation_fraction=0.1

    synth.series_per_dataset=16
    synth.length=6000
    synth.segment_length=1000

    paths.corpus_dir=runs/corpora
    paths.artifact_dir=runs/artifacts
    paths.report_dir=runs/report
    """
    return paper_parity_profile
