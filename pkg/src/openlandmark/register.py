"""
`Register` module
=================

Registration of image pairs from their landmarks.

Two paths share the same numerical steps:

- :py:func:`pair_objective` records encoder, TPS solve, warp and loss of a pair on a
  :py:class:`~openlandmark.core.tape.Tape` so the trainer can differentiate it,
- :py:func:`register_landmarks` / :py:func:`register_pair` evaluate a pair without a
  tape for validation, pruning, the CLI and the mean shape image.
"""

from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np

from openlandmark.construct import MindConfig, TrainConfig, LossKind
from openlandmark.core import kernel, validation
from openlandmark.core.tape import Tape, Var
from openlandmark.core import tape as tp
from openlandmark import encoder, losses


@dataclass
class PairTerms:
    """Scalar variables of one recorded pair objective."""

    loss: Var
    match: Var
    kappa: Var
    seg_match: Optional[Var] = None


def registration_terms(
    tape: Tape,
    source_points: Var,
    target_points: Var,
    source: np.ndarray,
    target: np.ndarray,
    config: TrainConfig,
    mask: Optional[np.ndarray] = None,
    source_seg: Optional[np.ndarray] = None,
    target_seg: Optional[np.ndarray] = None,
) -> PairTerms:
    """
    Records warp, matching loss and condition regulariser of a pair whose full
    landmark sets (anchors included) are already on the tape.

    The objective is ``match + lam * kappa`` (``+ beta * seg_match`` for the weak
    variant when both segmentations are given). The localized variant applies
    ``mask`` to both images before matching.
    """
    registered, block, coords = kernel.warp_on_tape(tape, source_points, target_points, source)
    kind = config.loss_kind
    if config.variant == "localized":
        if mask is None:
            raise validation.UserInputError("the localized variant needs a mask")
        match = losses.masked_match_on_tape(
            tape, kind, target, registered, mask, mask, config.ncc_patch, config.mind
        )
    else:
        match = losses.match_on_tape(tape, kind, target, registered, config.ncc_patch, config.mind)

    kappa = tp.scale(tape, tp.condition(tape, block), float(source.ndim))
    loss = tp.add(tape, match, tp.scale(tape, kappa, config.lam))

    seg_match = None
    if config.variant == "weak" and source_seg is not None and target_seg is not None:
        seg_values = kernel.sample_on_tape(tape, coords, source_seg)
        seg_registered = tp.reshape(tape, seg_values, source_seg.shape)
        seg_match = losses.match_on_tape(
            tape, config.seg_loss_kind, target_seg, seg_registered, config.ncc_patch, config.mind
        )
        loss = tp.add(tape, loss, tp.scale(tape, seg_match, config.beta))
    return PairTerms(loss=loss, match=match, kappa=kappa, seg_match=seg_match)


def pair_objective(
    tape: Tape,
    params: Dict[str, Var],
    arch,
    source: np.ndarray,
    target: np.ndarray,
    anchors: np.ndarray,
    config: TrainConfig,
    mask: Optional[np.ndarray] = None,
    source_seg: Optional[np.ndarray] = None,
    target_seg: Optional[np.ndarray] = None,
) -> PairTerms:
    """
    Records the full training objective of a (source, target) pair.

    Both images go through the same encoder parameters in one stacked forward pass,
    then the fixed ``anchors`` are appended to each landmark set.
    """
    validation.extents_must_match(source, target, "source image", "target image")
    lms = encoder.encode_on_tape(tape, params, arch, np.stack([source, target]))
    anchor_var = tape.constant(anchors)
    src = kernel.join_anchors(tape, tp.take(tape, lms, 0), anchor_var)
    tgt = kernel.join_anchors(tape, tp.take(tape, lms, 1), anchor_var)
    return registration_terms(
        tape, src, tgt, source, target, config, mask=mask, source_seg=source_seg, target_seg=target_seg
    )


@dataclass
class Registration:
    """Outcome of a tape-free pair registration."""

    registered: np.ndarray
    params: kernel.WarpParams
    system: kernel.TpsSystem

    @property
    def kappa(self) -> float:
        return kernel.condition_number(self.system)

    @property
    def residual(self) -> float:
        return kernel.system_residual(self.system, self.params)


def register_landmarks(
    source_image: np.ndarray, source_points: np.ndarray, target_points: np.ndarray
) -> Registration:
    """Warps ``source_image`` onto the target frame defined by the landmark pair.

    The system is built in coordinates normalized by the image extent.
    """
    scale = kernel.coordinate_scale(np.shape(source_image))
    system = kernel.build_system(source_points, target_points, scale=scale)
    params = kernel.solve_system(system)
    return Registration(
        registered=kernel.warp_image(source_image, params), params=params, system=system
    )


def register_pair(
    source_image: np.ndarray,
    target_image: np.ndarray,
    source_points: np.ndarray,
    target_points: np.ndarray,
    kind: LossKind = "l2",
    mask: Optional[np.ndarray] = None,
    ncc_patch: int = 5,
    mind: Optional[MindConfig] = None,
) -> float:
    """Matching loss after registering a pair with the given landmarks (mask optional)."""
    registered = register_landmarks(source_image, source_points, target_points).registered
    if mask is not None:
        return losses.masked_match(target_image, registered, mask, mask, kind, ncc_patch, mind)
    return losses.match_loss(kind, target_image, registered, ncc_patch, mind)
