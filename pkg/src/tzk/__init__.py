"""TzK: compositional conditional generative modeling on probability flows.

A joint density over observations and any number of knowledge types
(existence bit + latent code), realized as a Glow-style flow plus per-type
heads, trained by maximizing the average of its encoder and decoder
factorizations. Built on an in-package reverse-mode tensor tape with
finite-difference oracles for verification.
"""

from . import (
    checkpoint,
    config,
    data,
    errors,
    evaluation,
    flows,
    hierarchy,
    knowledge,
    nets,
    objective,
    tensor,
    training,
)
from .errors import TzkError
from .flows import FlowModel, build_image_flow, build_vector_flow
from .knowledge import KnowledgeHead, Observation
from .objective import (
    JointPoint,
    TzkModel,
    consistency_gap,
    entropy_mi_identity_check,
    gradient_identity_check,
    log_mixture,
    log_p_dec,
    log_p_enc,
    lower_bound,
)
from .tensor import (
    Tensor,
    backward,
    finite_diff_grad,
    no_grad,
    precision,
    set_precision,
)
from .training import (
    Adam,
    TrainConfig,
    add_knowledge,
    fill_missing_codes,
    lr_schedule,
    specialize,
    train_step,
)

__version__ = "0.1.0"
