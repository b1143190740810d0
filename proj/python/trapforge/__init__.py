"""Temporal-pair mining, SSL losses with analytic gradients, and embedding metrics."""

from trapforge._core import (
    arcface,
    average_precision,
    barlow_twins,
    byol,
    dclw,
    dino,
    ema_update,
    fastsiam,
    grad_check,
    iou,
    linear_probe,
    loss_methods,
    mine_pairs,
    miou,
    multilabel_accuracy,
    negative_cosine,
    nt_xent,
    nt_xent_queue,
    pck,
    retrieval_map,
    retrieval_map_split,
    supcon,
    sweep_thresholds,
    synth_dataset,
    train_synthetic,
    triplet,
    weighted_knn,
    weighted_knn_loo,
)

__all__ = [
    "arcface",
    "average_precision",
    "barlow_twins",
    "byol",
    "dclw",
    "dino",
    "ema_update",
    "fastsiam",
    "grad_check",
    "iou",
    "linear_probe",
    "loss_methods",
    "mine_pairs",
    "miou",
    "multilabel_accuracy",
    "negative_cosine",
    "nt_xent",
    "nt_xent_queue",
    "pck",
    "retrieval_map",
    "retrieval_map_split",
    "supcon",
    "sweep_thresholds",
    "synth_dataset",
    "train_synthetic",
    "triplet",
    "weighted_knn",
    "weighted_knn_loo",
]
