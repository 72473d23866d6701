"""Adversarially attacked Mean Teacher on a numpy autodiff core.

Submodules:
    tensor, ops, optim, checkpoint  differentiable arrays, primitives, SGD, serialisation
    detector                        single-stage grid detector, decoding, NMS, losses
    synthdata                       two-domain synthetic shapes benchmark and augmentations
    teacher_student                 burn-in, EMA teacher, pseudo-labels, combined objective
    aat_core                        FGSM on the teacher, label regularisation, crop bank
    metrics                         AP@0.5 evaluation
    experiment, config, cli         orchestration
"""

from aat.tensor import ContractError, NumericError, ShapeError, Tape, Tensor

__version__ = "0.1.0"

__all__ = ["ContractError", "NumericError", "ShapeError", "Tape", "Tensor", "__version__"]
