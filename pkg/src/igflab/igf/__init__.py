"""Gradient-difference inversion attack: collect, reduce, train, reconstruct."""
from .collect import GradDiffMatrix, collect_aux_gradients, load_grad_matrix, save_grad_matrix
from .inversion import (
    InversionDiverged,
    InversionModelSpec,
    InversionNet,
    ReconBatch,
    TrainedInversion,
    composite_loss,
    load_inversion,
    reconstruct,
    save_inversion,
    train_inversion,
)
from .projection import (
    DegenerateError,
    HashProjector,
    ProjectionBasis,
    default_hash_dim,
    fit_projection,
    hash_project,
    load_basis,
    project,
    save_basis,
    select_k,
)
