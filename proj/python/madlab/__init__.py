from ._madlab import (
    MadlabError,
    Network,
    davies_bouldin,
    fgsm,
    frobenius_norm,
    load_checkpoint,
    mlp,
    run_pipeline,
)

__all__ = [
    "MadlabError",
    "Network",
    "davies_bouldin",
    "fgsm",
    "frobenius_norm",
    "load_checkpoint",
    "mlp",
    "run_pipeline",
]
