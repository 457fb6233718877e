from __future__ import annotations

from typing import NamedTuple

import torch
import torch.nn.functional as F


class LossBreakdown(NamedTuple):
    total: torch.Tensor
    sr_term: torch.Tensor
    heatmap_term: torch.Tensor
    alpha: float

    def as_floats(self) -> dict:
        return {
            "total": float(self.total.detach()),
            "sr_term": float(self.sr_term.detach()),
            "heatmap_term": float(self.heatmap_term.detach()),
        }


def joint_loss(output, hr=None, heatmaps=None, alpha: float = 1.0,
               deep_supervision: bool = False) -> LossBreakdown:
    """Mean L1 on the SR image plus ``alpha`` times heatmap MSE.

    The heatmap term uses the final stage only, or the average over all
    stages when ``deep_supervision`` is set. A head missing from ``output``
    contributes zero.
    """
    if alpha < 0:
        raise ValueError(f"alpha must be >= 0, got {alpha}")
    ref = output.sr_image if output.sr_image is not None else output.stage_heatmaps[-1]
    zero = ref.new_zeros(())

    sr_term = zero
    if output.sr_image is not None:
        if hr is None or hr.shape != output.sr_image.shape:
            raise ValueError(f"SR target shape {None if hr is None else tuple(hr.shape)} "
                             f"does not match prediction {tuple(output.sr_image.shape)}")
        sr_term = F.l1_loss(output.sr_image, hr)

    hm_term = zero
    if output.stage_heatmaps is not None:
        stages = output.stage_heatmaps if deep_supervision else output.stage_heatmaps[-1:]
        for s in stages:
            if heatmaps is None or heatmaps.shape != s.shape:
                raise ValueError(f"heatmap target shape {None if heatmaps is None else tuple(heatmaps.shape)} "
                                 f"does not match prediction {tuple(s.shape)}")
        hm_term = sum(F.mse_loss(s, heatmaps) for s in stages) / len(stages)

    return LossBreakdown(sr_term + alpha * hm_term, sr_term, hm_term, alpha)
