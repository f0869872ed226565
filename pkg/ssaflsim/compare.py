"""Cross-seed comparison of run summaries"""

from __future__ import annotations

import glob
import json
import logging
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from ssaflsim.async_sim import Method
from ssaflsim.errors import ConfigError

logger = logging.getLogger(__name__)

METHOD_ORDER = [m.value for m in (Method.SSAFL, Method.SSAFL_NO_ADAPTIVE, Method.FEDAVG,
                                  Method.FEDASYN, Method.SEMIASYN)]
SD_NOTE = '# sd: population standard deviation (ddof=0)'
METRICS = ('mae', 'rmse', 'r2')


@dataclass(frozen=True)
class ComparisonRow:
    method: str
    runs: int
    mae_mean: Optional[float]
    mae_sd: Optional[float]
    rmse_mean: Optional[float]
    rmse_sd: Optional[float]
    r2_mean: Optional[float]
    r2_sd: Optional[float]
    total_uploads: float
    upload_reduction: Optional[float]


def load_summaries(pattern):
    """Read every summary JSON matching a glob pattern"""
    paths = sorted(glob.glob(pattern))
    if not paths:
        raise ConfigError('summary_glob', f"no summaries match {pattern!r}")
    summaries = []
    for path in paths:
        try:
            with open(path, 'r', encoding='utf-8') as f:
                summaries.append(json.load(f))
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError('summary_glob', f"cannot read {path}: {e}") from None
    logger.info("loaded %d summaries from %s", len(summaries), pattern)
    return summaries


def _mean_sd(values):
    values = [v for v in values if v is not None]
    if not values:
        return None, None
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std(ddof=0))


def _order_key(method):
    if method in METHOD_ORDER:
        return (METHOD_ORDER.index(method), method)
    return (len(METHOD_ORDER), method)


def compare_summaries(summaries, reference='SemiAsyn'):
    """Mean and population sd per method, with upload reduction against `reference`"""
    if len(summaries) < 2:
        raise ConfigError('summary_glob', f"need at least two summaries, got {len(summaries)}")
    by_method = {}
    for summary in summaries:
        by_method.setdefault(summary['method'], []).append(summary)

    uploads = {m: float(np.mean([s['total_uploads'] for s in group])) for m, group in by_method.items()}
    ref_uploads = uploads.get(reference)
    if ref_uploads is None:
        logger.warning("reference method %s has no summaries; reduction column left empty", reference)

    rows = []
    for method in sorted(by_method, key=_order_key):
        group = by_method[method]
        stats = {}
        for metric in METRICS:
            stats[metric] = _mean_sd(s.get(f"final_{metric}") for s in group)
        reduction = None
        if ref_uploads:
            reduction = 100.0 * (1.0 - uploads[method] / ref_uploads)
        rows.append(ComparisonRow(
            method=method,
            runs=len(group),
            mae_mean=stats['mae'][0], mae_sd=stats['mae'][1],
            rmse_mean=stats['rmse'][0], rmse_sd=stats['rmse'][1],
            r2_mean=stats['r2'][0], r2_sd=stats['r2'][1],
            total_uploads=uploads[method],
            upload_reduction=reduction,
        ))
    return rows


def comparison_header(reference):
    return ['method', 'runs', 'mae_mean', 'mae_sd', 'rmse_mean', 'rmse_sd', 'r2_mean', 'r2_sd',
            'total_uploads', f"upload_reduction_vs_{reference}"]


def comparison_records(rows: List[ComparisonRow]):
    """Rows as lists in comparison_header order"""
    return [[r.method, r.runs, r.mae_mean, r.mae_sd, r.rmse_mean, r.rmse_sd, r.r2_mean, r.r2_sd,
             r.total_uploads, r.upload_reduction] for r in rows]


def _cell(value):
    if value is None:
        return ''
    if isinstance(value, float):
        return repr(round(value, 6))
    return str(value)


def comparison_to_csv(rows, reference='SemiAsyn'):
    """CSV text with the sd convention stated on the first line"""
    lines = [SD_NOTE, ','.join(comparison_header(reference))]
    for record in comparison_records(rows):
        lines.append(','.join(_cell(v) for v in record))
    return '\n'.join(lines) + '\n'
