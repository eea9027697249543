"""ssmlab: desk-scale state-space sequence models with an attack, defense,
metric, and statistics stack."""

from .core import (
    ContinuousSsm,
    DiscreteSsm,
    SelectiveSsm,
    StateTrajectory,
    apply_kernel,
    conv_kernel,
    hippo_legs,
    lti_scan,
    selective_scan,
    zoh_discretize,
)
from .model import (
    ForwardResult,
    LtiLayer,
    SelectiveLayer,
    StackedModel,
    forward_model,
    load_model,
    save_model,
)
from .records import PerturbationRecord
from .training import TrainConfig, pgd, train_classifier

__version__ = "0.1.0"
