#!/usr/bin/env python3

def get_desk_profile():
    """
    Defaults for a desk-scale run: small corpora, minutes on one core
    """
    desk_profile = """
    # run
    run.profile=desk
    run.seeds=0,1,2
    run.threads=1

    # window
    window.context_length=64
    window.horizon=8
    window.stride=1
    window.eval_stride=8

    # model
    model.patch_size=8
    model.hidden_dim=16
    model.num_blocks=2
    model.seed=0

    # adapter
    adapter.rank=2
    adapter.alpha=4.0
    adapter.dropout=0.1
    adapter.seed=0

    # optim (adapter fine-tuning)
    optim.learning_rate=0.001
    optim.weight_decay=0.01
    optim.batch_size=64
    optim.max_steps=300

    # pretrain (base model)
    pretrain.learning_rate=0.003
    pretrain.weight_decay=0.0
    pretrain.batch_size=128
    pretrain.max_steps=1500
    pretrain.num_series=24
    pretrain.length=400

    # mixture
    mixture.k=2
    mixture.candidate_ks=1,2,3,4
    mixture.sweep_ks=1,2,3,4
    mixture.partitioner=vi
    mixture.predictive=student_t
    mixture.max_iters=500
    mixture.tol=1e-06
    mixture.kmeans_restarts=10

    # pipeline
    pipeline.routing=hard
    pipeline.mixup_beta=0.2
    pipeline.average_level=factor
    pipeline.validation_fraction=0.1

    # synth
    synth.series_per_dataset=4
    synth.length=800
    synth.segment_length=100

    # paths
    paths.corpus_dir=runs/corpora
    paths.artifact_dir=runs/artifacts
    paths.report_dir=runs/report
    """
    return desk_profile
