"""Overlap, surface-distance and head-coupling metrics."""
import logging
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from scipy import ndimage
from scipy.spatial import cKDTree

from pdc_segmentation.errors import DataError, EmptyMaskError, ShapeError
from pdc_segmentation.model import CaseMetrics, CouplingReport, MetricsReport, PercentileMethod, SurfaceDistances, \
    VolumeSample
from pdc_segmentation.objectives import pairwise_cosines
from pdc_segmentation.volnet import ParameterStore, infer_mask

logger = logging.getLogger(__name__)

_PERCENTILE_METHODS = {
    PercentileMethod.LINEAR: 'linear',
    PercentileMethod.NEAREST_RANK: 'inverted_cdf',
}


def _binary_pair(pred: np.ndarray, gt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pred, gt = np.asarray(pred).astype(bool), np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ShapeError(f'prediction shape {pred.shape} does not match ground truth {gt.shape}', shape=pred.shape)
    return pred, gt


def dice_score(pred: np.ndarray, gt: np.ndarray) -> float:
    pred, gt = _binary_pair(pred, gt)
    total = int(pred.sum()) + int(gt.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(pred, gt).sum()) / total


def jaccard_score(pred: np.ndarray, gt: np.ndarray) -> float:
    pred, gt = _binary_pair(pred, gt)
    union = int(np.logical_or(pred, gt).sum())
    if union == 0:
        return 1.0
    return int(np.logical_and(pred, gt).sum()) / union


def extract_surface(mask: np.ndarray) -> np.ndarray:
    """Coordinates (n, 3) of foreground voxels with a 6-connected background or out-of-bounds neighbour."""
    mask = np.asarray(mask).astype(bool)
    if not mask.any():
        raise EmptyMaskError('cannot extract the surface of an empty mask')

    structure = ndimage.generate_binary_structure(mask.ndim, 1)
    interior = ndimage.binary_erosion(mask, structure=structure, border_value=0)
    return np.argwhere(mask & ~interior)


def surface_distances(
    pred: np.ndarray,
    gt: np.ndarray,
    spacing: Sequence[float] = (1.0, 1.0, 1.0),
    percentile: PercentileMethod = PercentileMethod.LINEAR
) -> SurfaceDistances:
    pred, gt = _binary_pair(pred, gt)
    scale = np.asarray(spacing, dtype=np.float64)
    pred_surface = extract_surface(pred) * scale
    gt_surface = extract_surface(gt) * scale

    pred_to_gt, _ = cKDTree(gt_surface).query(pred_surface)
    gt_to_pred, _ = cKDTree(pred_surface).query(gt_surface)
    pooled = np.concatenate([pred_to_gt, gt_to_pred])

    return SurfaceDistances(
        asd=float(np.mean(pooled)),
        hd95=float(np.percentile(pooled, 95, method=_PERCENTILE_METHODS[percentile])),
    )


def coupling_metrics(
    head1_params: Sequence[torch.Tensor],
    head2_params: Sequence[torch.Tensor]
) -> CouplingReport:
    with torch.no_grad():
        layer_cd = [float(c) for c in pairwise_cosines(head1_params, head2_params).tolist()]
    layer_qcd = [c * c for c in layer_cd]

    return CouplingReport(
        cd=float(np.mean(layer_cd)),
        qcd=float(np.mean(layer_qcd)),
        layer_cd=layer_cd,
        layer_qcd=layer_qcd,
    )


def evaluate_case(
    case_id: str,
    pred: np.ndarray,
    gt: np.ndarray,
    spacing: Sequence[float],
    percentile: PercentileMethod = PercentileMethod.LINEAR
) -> CaseMetrics:
    case = CaseMetrics(case_id=case_id, dice=dice_score(pred, gt), jaccard=jaccard_score(pred, gt))
    try:
        distances = surface_distances(pred, gt, spacing, percentile)
    except EmptyMaskError:
        logger.warning('case %s: empty prediction or ground truth, surface metrics skipped', case_id)
        return case.model_copy(update={'flagged': True})

    return case.model_copy(update={'asd': distances.asd, 'hd95': distances.hd95})


def evaluate(
    params: ParameterStore,
    samples: Sequence[VolumeSample],
    window: Sequence[int],
    stride: Sequence[int],
    spacing: Optional[Sequence[float]] = None,
    percentile: PercentileMethod = PercentileMethod.LINEAR
) -> MetricsReport:
    """Sliding-window inference on every test case; per-case metrics averaged arithmetically.

    `spacing` overrides the per-sample spacing. Cases with an empty mask keep their overlap
    metrics but are excluded from the ASD/95HD means and listed in `flagged_cases`.
    """
    if not samples:
        raise DataError('evaluate needs at least one test sample')

    cases = []
    for sample in samples:
        if sample.label is None:
            raise DataError(f'test sample {sample.id} has no label')
        case_spacing = tuple(spacing) if spacing is not None else sample.spacing
        pred = infer_mask(params, sample.intensity, window, stride)
        cases.append(evaluate_case(sample.id, pred, sample.label, case_spacing, percentile))

    surfaces = [c for c in cases if not c.flagged]
    coupling = coupling_metrics(*params.head_pairs())

    report = MetricsReport(
        dice=float(np.mean([c.dice for c in cases])),
        jaccard=float(np.mean([c.jaccard for c in cases])),
        asd=float(np.mean([c.asd for c in surfaces])) if surfaces else None,
        hd95=float(np.mean([c.hd95 for c in surfaces])) if surfaces else None,
        cd=coupling.cd,
        qcd=coupling.qcd,
        n_cases=len(cases),
        spacing=tuple(spacing) if spacing is not None else samples[0].spacing,
        cases=cases,
        flagged_cases=[c.case_id for c in cases if c.flagged],
    )

    logger.info(
        'evaluated %d cases: dice=%.4f jaccard=%.4f asd=%s hd95=%s cd=%.4f qcd=%.4f',
        report.n_cases, report.dice, report.jaccard, report.asd, report.hd95, report.cd, report.qcd
    )
    return report


def save_report(report: MetricsReport, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(report.model_dump_json(indent=2), encoding='utf-8')
    logger.info('saved metrics report: %s', path)
    return path
