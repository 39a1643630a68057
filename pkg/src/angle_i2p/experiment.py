"""Dataset-level evaluation and the ablation grid shared by the CLI and tests."""

from __future__ import annotations

import io
import logging
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .estimator import AngleI2PClassifier, filter_correspondences
from .geometry import CorrespondenceSet
from .pose import MetricsReport, aggregate, evaluate
from .synth import derive_seeds

logger = logging.getLogger(__name__)

# variant name -> estimator overrides
ABLATION_VARIANTS: List[Tuple[str, dict]] = [
    ("full", {}),
    ("no-scale-alignment", {"scale_alignment": False}),
    ("distance", {"mode": "distance"}),
    ("no-cross", {"cross_attention": False}),
    ("no-reweight", {"reweight": False}),
]
ABLATION_TAUS = (0.2, 0.4, 0.5)


def evaluate_sets(sets: Sequence[CorrespondenceSet], references: Optional[Sequence[CorrespondenceSet]] = None,
                  names: Optional[Sequence[str]] = None, ransac_iterations: int = 1000,
                  reproj_threshold_px: float = 3.0, ir_threshold: float = 0.05, rr_threshold: float = 0.1,
                  seed: int = 0, minimal_solver: str = "sqpnp") -> List[MetricsReport]:
    """Per-scene metrics; scene i always draws RANSAC samples from the same derived seed.

    ``references`` supplies the (unfiltered) sets whose points define the
    registration check, so filtered and unfiltered runs are judged alike.
    """
    seeds = derive_seeds(seed, len(sets))
    reports = []
    for i, corrs in enumerate(sets):
        ref = None if references is None else references[i].points
        reports.append(evaluate(corrs, ir_threshold=ir_threshold, rr_threshold=rr_threshold,
                                ransac_iterations=ransac_iterations, reproj_threshold_px=reproj_threshold_px,
                                seed=seeds[i], reference_points=ref,
                                scene=names[i] if names is not None else str(i),
                                minimal_solver=minimal_solver))
    return reports


def filter_and_evaluate(est: AngleI2PClassifier, scenes: Sequence[CorrespondenceSet], taus: Sequence[float],
                        **eval_kwargs) -> Dict[float, dict]:
    """Score each scene once, then evaluate the filtered sets at every threshold."""
    scores = est.decision_scores(scenes)
    out = {}
    for tau in taus:
        filtered = [filter_correspondences(c, s, tau) for c, s in zip(scenes, scores)]
        summary = aggregate(evaluate_sets(filtered, references=scenes, **eval_kwargs))
        summary["retained"] = float(np.mean([len(f) / len(c) for f, c in zip(filtered, scenes)]))
        out[tau] = summary
    return out


def run_ablation(train: Sequence[CorrespondenceSet], test: Sequence[CorrespondenceSet],
                 base_params: dict, val: Optional[Sequence[CorrespondenceSet]] = None,
                 taus: Sequence[float] = ABLATION_TAUS, eval_kwargs: Optional[dict] = None,
                 log: Optional[Callable[[str], None]] = None) -> List[dict]:
    """Train every variant and evaluate it on ``test``.

    The full model is swept over all ``taus``; the other variants use the
    base threshold. The first row is the unfiltered baseline.
    """
    eval_kwargs = dict(eval_kwargs or {})
    log = log or logger.info
    rows = []
    base = aggregate(evaluate_sets(test, references=test, **eval_kwargs))
    rows.append(dict(variant="unfiltered", tau=float("nan"), retained=1.0, **base))
    log(f"unfiltered ir={base['inlier_ratio']:.4f} rr={base['registration_recall']:.4f}")
    for name, overrides in ABLATION_VARIANTS:
        params = dict(base_params, **overrides)
        est = AngleI2PClassifier(**params).fit(train, X_val=val)
        sweep = taus if name == "full" else (params.get("tau", 0.2),)
        for tau, summary in filter_and_evaluate(est, test, sweep, **eval_kwargs).items():
            rows.append(dict(variant=name, tau=float(tau), **summary))
            log(f"{name} tau={tau:g} ir={summary['inlier_ratio']:.4f} rr={summary['registration_recall']:.4f}")
    return rows


ABLATION_COLUMNS = ("variant", "tau", "inlier_ratio", "mean_rotation_error", "mean_translation_error",
                    "registration_recall", "retained", "pnp_failures")


def ablation_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    buf.write("variant,tau,ir,mre_deg,mte_m,rr,retained,pnp_failures\n")
    for r in rows:
        vals = [r[k] for k in ABLATION_COLUMNS]
        buf.write(",".join(v if isinstance(v, str) else (str(v) if isinstance(v, int) else f"{v:.17g}")
                           for v in vals) + "\n")
    return buf.getvalue()


def ablation_table(rows: Sequence[dict]) -> str:
    """Fixed-width comparison table for humans."""
    head = f"{'variant':<20}{'tau':>6}{'IR':>9}{'RR':>9}{'MRE(deg)':>11}{'MTE(m)':>10}{'kept':>8}"
    lines = [head, "-" * len(head)]
    for r in rows:
        tau = "-" if np.isnan(r["tau"]) else f"{r['tau']:.2f}"
        lines.append(f"{r['variant']:<20}{tau:>6}{r['inlier_ratio']:>9.4f}{r['registration_recall']:>9.4f}"
                     f"{r['mean_rotation_error']:>11.4f}{r['mean_translation_error']:>10.4f}{r['retained']:>8.3f}")
    return "\n".join(lines) + "\n"
