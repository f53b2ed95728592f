from .data import (Dataset, MeasurementOperator, MetaTask, Model, init_model,
                   psnr)
from .generative import (FitResult, fit_latent, latent_problem, sample_posthoc,
                         train_generative)
from .inverse import (InverseResult, inverse_problem, masked_region_mse,
                      solve_inverse_unsup, train_inverse_sup)
from .adversarial import (AttackConfig, adv_train, attack_item, classify,
                          classification_loss, clean_accuracy, jiio_attack,
                          perturbation_problem, robust_accuracy)
from .meta import (MetaInnerResult, example_problem, meta_inner_solve,
                   meta_query_grad, meta_train, query_loss, task_embedding)
from .train_utils import AdamParams, EvalSolveConfig, TrainConfig

__all__ = [
    "AdamParams", "AttackConfig", "Dataset", "EvalSolveConfig", "FitResult",
    "InverseResult", "MeasurementOperator", "MetaInnerResult", "MetaTask",
    "Model", "TrainConfig", "adv_train", "attack_item", "classification_loss",
    "classify", "clean_accuracy", "example_problem", "fit_latent",
    "init_model", "inverse_problem", "jiio_attack", "latent_problem",
    "masked_region_mse", "meta_inner_solve", "meta_query_grad", "meta_train",
    "perturbation_problem", "psnr", "query_loss", "sample_posthoc",
    "solve_inverse_unsup", "task_embedding", "train_generative",
    "train_inverse_sup",
]
