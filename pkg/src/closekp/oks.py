"""Object Keypoint Similarity, detection matching and AP/AR reports.

OKS between a detection and a ground-truth person over an index set ``I``::

    OKS = sum_{i in I, v_i > 0} exp(-d_i^2 / (2 s^2 k_i^2)) / #{i in I : v_i > 0}

``s^2`` is the person's annotated area (or its bbox area, see
:class:`OksParams`), ``k_i`` a per-keypoint falloff constant.

AP and AR are plain means of precision and recall over the OKS thresholds
(default 0.50, 0.55, ..., 0.95). The 101-point interpolated COCO AP is
available as an opt-in extra.
"""
from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .annotations import Dataset, DetectionRecord, PersonAnnotation
from .errors import ConfigError, IntegrityError, UndefinedOksError
from .layouts import KeypointLayout

COCO_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
SCALE_RULES = ("sqrt_annotated_area", "sqrt_bbox_area")

CATEGORIES = (
    "whole-upper-body", "only-head", "no-left-arm", "no-right-arm", "no-head",
    "only-legs", "only-left-arm", "only-right-arm", "only-both-arms",
    "arms-without-shoulders", "other",
)


@dataclass(frozen=True)
class OksParams:
    kappas: np.ndarray
    scale_rule: str = "sqrt_annotated_area"
    thresholds: tuple[float, ...] = COCO_THRESHOLDS

    def __post_init__(self):
        kappas = np.asarray(self.kappas, dtype=np.float64).reshape(-1)
        if kappas.size == 0 or not np.all(np.isfinite(kappas)) or np.any(kappas <= 0):
            raise ConfigError("kappas must be finite and > 0")
        kappas.setflags(write=False)
        object.__setattr__(self, "kappas", kappas)
        if self.scale_rule not in SCALE_RULES:
            raise ConfigError(f"scale_rule must be one of {SCALE_RULES}, got {self.scale_rule!r}")
        thr = tuple(float(t) for t in self.thresholds)
        if not thr or any(not (0 < t <= 1) for t in thr):
            raise ConfigError("OKS thresholds must lie in (0, 1]")
        if any(b <= a for a, b in zip(thr, thr[1:])):
            raise ConfigError("OKS thresholds must be strictly increasing")
        object.__setattr__(self, "thresholds", thr)


def _kappa_config(cfg: dict, layout: KeypointLayout) -> np.ndarray:
    kappas = cfg.get("kappas")
    if isinstance(kappas, list):
        if len(kappas) != layout.total:
            raise ConfigError(f"kappas has {len(kappas)} entries, layout needs {layout.total}")
        return np.asarray(kappas, dtype=np.float64)
    base = cfg.get("coco_body_kappas", [])
    default = cfg.get("extended_kappa")
    if default is None:
        raise ConfigError("kappa config needs 'kappas' or 'extended_kappa'")
    out = np.full(layout.total, float(default))
    # The COCO constants only apply to layouts that start with the 17 COCO body points.
    if layout.has_body_parts():
        n = min(len(base), layout.total)
        out[:n] = base[:n]
    for key, value in (cfg.get("overrides") or {}).items():
        out[int(key)] = float(value)
    return out


def load_oks_params(layout: KeypointLayout, path=None, thresholds=None,
                    scale_rule=None) -> OksParams:
    """Read kappas and scale rule from a JSON config (packaged defaults if ``path`` is None).

    The config holds either an explicit ``kappas`` list of ``layout.total``
    values, or ``coco_body_kappas`` plus a single ``extended_kappa`` used for
    every other index, optionally patched by ``overrides`` ``{index: kappa}``.
    """
    if path is None:
        text = resources.files("closekp").joinpath("data/kappas_default.json").read_text()
    else:
        text = Path(path).read_text(encoding="utf-8")
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"kappa config: {exc}") from None
    if not isinstance(cfg, dict):
        raise ConfigError("kappa config must be a JSON object")
    try:
        kappas = _kappa_config(cfg, layout)
    except (TypeError, ValueError, IndexError) as exc:
        raise ConfigError(f"kappa config: {exc}") from None
    return OksParams(
        kappas=kappas,
        scale_rule=scale_rule or cfg.get("scale_rule", "sqrt_annotated_area"),
        thresholds=thresholds if thresholds is not None
        else tuple(cfg.get("thresholds", COCO_THRESHOLDS)),
    )


def scale_squared(gt: PersonAnnotation, rule: str) -> float:
    """Squared object scale ``s^2`` of a ground-truth person."""
    if rule == "sqrt_annotated_area" and gt.area is not None and gt.area > 0:
        return float(gt.area)
    return float(gt.bbox[2] * gt.bbox[3])


def oks(det, gt: PersonAnnotation, params: OksParams, indices: Sequence[int] | None = None) -> float:
    """OKS of one detection against one ground-truth person.

    ``det`` is a ``(N, 3)`` keypoint array or a :class:`DetectionRecord`.
    Raises :class:`UndefinedOksError` when no gt keypoint in ``indices`` is labeled.
    """
    det_kps = det.keypoints if isinstance(det, DetectionRecord) else np.asarray(det, dtype=np.float64)
    idx = np.arange(gt.keypoints.shape[0]) if indices is None else np.asarray(indices, dtype=int)
    g = gt.keypoints[idx]
    vis = g[:, 2] > 0
    if not vis.any():
        raise UndefinedOksError(f"gt {gt.id!r} has no labeled keypoint in the index set")
    d = det_kps[idx][vis, :2] - g[vis, :2]
    d2 = d[:, 0] ** 2 + d[:, 1] ** 2
    k = params.kappas[idx][vis]
    s2 = scale_squared(gt, params.scale_rule)
    return float(np.exp(-d2 / (2.0 * s2 * k * k)).sum() / vis.sum())


def oks_matrix(det_kps: np.ndarray, gts: Sequence[PersonAnnotation], params: OksParams,
               indices: np.ndarray) -> np.ndarray:
    """``(D, G)`` OKS matrix; every gt must have a labeled keypoint in ``indices``."""
    if len(det_kps) == 0 or len(gts) == 0:
        return np.zeros((len(det_kps), len(gts)))
    g = np.stack([gt.keypoints[indices] for gt in gts])  # G, K, 3
    vis = g[:, :, 2] > 0
    s2 = np.array([scale_squared(gt, params.scale_rule) for gt in gts])
    k2 = params.kappas[indices] ** 2
    dx = det_kps[:, None, indices, 0] - g[None, :, :, 0]
    dy = det_kps[:, None, indices, 1] - g[None, :, :, 1]
    e = np.exp(-(dx * dx + dy * dy) / (2.0 * s2[None, :, None] * k2[None, None, :]))
    return (e * vis[None]).sum(axis=2) / vis.sum(axis=1)[None, :]


@dataclass
class MatchResult:
    pairs: list[tuple[int, int, float]] = field(default_factory=list)
    unmatched_detections: list[int] = field(default_factory=list)
    unmatched_gts: list[int] = field(default_factory=list)
    # Ground truths with no labeled keypoint in the evaluated group.
    ignored_gts: list[int] = field(default_factory=list)

    @property
    def tp(self) -> int:
        return len(self.pairs)

    @property
    def fp(self) -> int:
        return len(self.unmatched_detections)

    @property
    def fn(self) -> int:
        return len(self.unmatched_gts)


def _score_order(scores) -> list[int]:
    # Stable sort: equal scores keep file order.
    return sorted(range(len(scores)), key=lambda i: -scores[i])


def _greedy(order, mat: np.ndarray, threshold: float):
    """Return (pairs, fp_dets, matched_gt_mask) for column indices of ``mat``."""
    n_gt = mat.shape[1]
    taken = [False] * n_gt
    pairs, fps = [], []
    for d in order:
        best, best_j = -1.0, -1
        row = mat[d]
        for j in range(n_gt):
            if not taken[j] and row[j] > best:
                best, best_j = row[j], j
        if best_j >= 0 and best >= threshold:
            taken[best_j] = True
            pairs.append((d, best_j, float(best)))
        else:
            fps.append(d)
    return pairs, fps, taken


def match_image(dets: Sequence[DetectionRecord], gts: Sequence[PersonAnnotation],
                params: OksParams, threshold: float,
                indices: Sequence[int] | None = None) -> MatchResult:
    """Greedy score-ordered matching for one image.

    Each detection, highest score first, takes the still-unmatched gt with
    the highest OKS. It is a true positive when that OKS reaches
    ``threshold``; otherwise it is a false positive and the gt stays
    available. Ties: equal scores keep input order, equal OKS prefers the
    lower gt index.
    """
    if indices is None:
        total = gts[0].keypoints.shape[0] if gts else (dets[0].keypoints.shape[0] if dets else 0)
        indices = range(total)
    idx = np.asarray(list(indices), dtype=int)
    eligible = [j for j, gt in enumerate(gts) if gt.num_visible(idx) > 0]
    ignored = [j for j in range(len(gts)) if j not in set(eligible)]
    det_kps = np.stack([d.keypoints for d in dets]) if dets else np.zeros((0, 0, 3))
    mat = oks_matrix(det_kps, [gts[j] for j in eligible], params, idx)
    pairs, fps, taken = _greedy(_score_order([d.score for d in dets]), mat, threshold)
    return MatchResult(
        pairs=[(d, eligible[j], v) for d, j, v in pairs],
        unmatched_detections=sorted(fps),
        unmatched_gts=[eligible[j] for j in range(len(eligible)) if not taken[j]],
        ignored_gts=ignored,
    )


def categorize_visibility(ann: PersonAnnotation, layout: KeypointLayout) -> str:
    """Label the visible-body-part pattern of a ground-truth person.

    A part counts as present when any of its keypoints is labeled. Rules,
    first match wins:

    ==========================  ==============================================
    nothing labeled             other
    head, left arm, right arm   whole-upper-body
    head only                   only-head
    head + right arm            no-left-arm (legs ignored)
    head + left arm             no-right-arm (legs ignored)
    no head, both arms          arms-without-shoulders if no shoulder labeled,
                                else no-head if legs, else only-both-arms
    left arm only               only-left-arm
    right arm only              only-right-arm
    legs only                   only-legs
    anything else               other
    ==========================  ==============================================
    """
    parts = layout.parts
    if not all(p in parts for p in ("head", "left_arm", "right_arm", "legs", "shoulders")):
        return "other"
    vis = ann.keypoints[:, 2] > 0

    def present(name):
        return bool(vis[list(parts[name])].any())

    head, la, ra = present("head"), present("left_arm"), present("right_arm")
    legs, shoulders = present("legs"), present("shoulders")
    if not vis.any():
        return "other"
    if head:
        if la and ra:
            return "whole-upper-body"
        if not la and not ra:
            return "only-head" if not legs else "other"
        return "no-left-arm" if ra else "no-right-arm"
    if la and ra:
        if not shoulders:
            return "arms-without-shoulders"
        return "no-head" if legs else "only-both-arms"
    if legs:
        return "only-legs" if not (la or ra) else "other"
    if la:
        return "only-left-arm"
    if ra:
        return "only-right-arm"
    return "other"


@dataclass
class ThresholdResult:
    threshold: float
    tp: int
    fp: int
    fn: int

    @property
    def precision(self) -> float:
        n = self.tp + self.fp
        return self.tp / n if n else 0.0

    @property
    def recall(self) -> float:
        n = self.tp + self.fn
        return self.tp / n if n else 0.0


@dataclass
class EvalReport:
    """Precision/recall per threshold for one keypoint group (and category)."""

    group: str
    category: str
    results: list[ThresholdResult]
    n_gt: int
    n_detections: int
    interpolated: list[float] | None = None
    categories: dict[str, "EvalReport"] = field(default_factory=dict)

    @property
    def empty(self) -> bool:
        return self.n_gt == 0

    @property
    def no_detections(self) -> bool:
        return self.n_detections == 0

    @property
    def thresholds(self) -> list[float]:
        return [r.threshold for r in self.results]

    @property
    def ap(self) -> float:
        return float(np.mean([r.precision for r in self.results]))

    @property
    def ar(self) -> float:
        return float(np.mean([r.recall for r in self.results]))

    @property
    def interpolated_ap(self) -> float | None:
        return None if self.interpolated is None else float(np.mean(self.interpolated))

    def at(self, threshold: float) -> ThresholdResult:
        for r in self.results:
            if math.isclose(r.threshold, threshold):
                return r
        raise KeyError(threshold)

    def to_dict(self) -> dict:
        out = {
            "group": self.group,
            "category": self.category,
            "n_gt": self.n_gt,
            "n_detections": self.n_detections,
            "empty": self.empty,
            "no_detections": self.no_detections,
            "ap": self.ap,
            "ar": self.ar,
        }
        for t in (0.5, 0.75):
            try:
                r = self.at(t)
            except KeyError:
                continue
            key = f"{int(round(t * 100))}"
            out[f"precision@{key}"] = r.precision
            out[f"recall@{key}"] = r.recall
        if self.interpolated is not None:
            out["interpolated_ap"] = self.interpolated_ap
        out["thresholds"] = [
            {"threshold": r.threshold, "tp": r.tp, "fp": r.fp, "fn": r.fn,
             "precision": r.precision, "recall": r.recall}
            for r in self.results
        ]
        if self.categories:
            out["categories"] = {k: v.to_dict() for k, v in self.categories.items()}
        return out

    def csv_rows(self) -> list[dict]:
        rows = []
        for rep in [self, *self.categories.values()]:
            for r in rep.results:
                rows.append({
                    "group": rep.group, "category": rep.category, "threshold": r.threshold,
                    "tp": r.tp, "fp": r.fp, "fn": r.fn,
                    "precision": r.precision, "recall": r.recall,
                    "no_detections": rep.no_detections, "empty": rep.empty,
                })
        return rows


CSV_COLUMNS = ("group", "category", "threshold", "tp", "fp", "fn", "precision", "recall",
               "no_detections", "empty")


@dataclass
class _ImageOutcome:
    # per threshold: list of (score, is_tp, category) per detection, fn categories
    dets: list[list[tuple[float, bool, str]]]
    fns: list[list[str]]
    gt_categories: list[str]


def _evaluate_image(gts, dets, params, idx, layout, want_cats):
    eligible = [gt for gt in gts if gt.num_visible(idx) > 0]
    cats = [categorize_visibility(gt, layout) if want_cats else "all" for gt in eligible]
    det_kps = np.stack([d.keypoints for d in dets]) if dets else np.zeros((0, layout.total, 3))
    mat = oks_matrix(det_kps, eligible, params, idx)
    order = _score_order([d.score for d in dets])
    # FP attribution: category of the gt the detection overlaps most.
    fp_cat = ["other"] * len(dets)
    if eligible:
        for d in range(len(dets)):
            fp_cat[d] = cats[int(np.argmax(mat[d]))]
    out = _ImageOutcome([], [], cats)
    for thr in params.thresholds:
        pairs, fps, taken = _greedy(order, mat, thr)
        det_rows = [(dets[d].score, True, cats[j]) for d, j, _ in pairs]
        det_rows += [(dets[d].score, False, fp_cat[d]) for d in fps]
        out.dets.append(det_rows)
        out.fns.append([cats[j] for j in range(len(eligible)) if not taken[j]])
    return out


def _interpolated_ap(rows: list[tuple[float, bool]], n_gt: int) -> float:
    """101-point interpolated AP (COCO style) from (score, is_tp) rows."""
    if n_gt == 0 or not rows:
        return 0.0
    order = sorted(range(len(rows)), key=lambda i: -rows[i][0])
    tp = np.array([rows[i][1] for i in order], dtype=float)
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1.0 - tp)
    recall = ctp / n_gt
    precision = ctp / (ctp + cfp)
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    points = np.linspace(0.0, 1.0, 101)
    pos = np.searchsorted(recall, points, side="left")
    vals = np.where(pos < len(precision), precision[np.minimum(pos, len(precision) - 1)], 0.0)
    return float(vals.mean())


def _build_report(group, category, params, outcomes, keep, interpolated):
    results, interp = [], []
    n_gt = sum(sum(1 for c in o.gt_categories if keep(c)) for o in outcomes)
    n_det = 0
    for t, thr in enumerate(params.thresholds):
        rows = [(s, ok) for o in outcomes for s, ok, c in o.dets[t] if keep(c)]
        tp = sum(1 for _, ok in rows if ok)
        fn = sum(1 for o in outcomes for c in o.fns[t] if keep(c))
        results.append(ThresholdResult(thr, tp, len(rows) - tp, fn))
        n_det = len(rows)
        if interpolated:
            interp.append(_interpolated_ap(rows, n_gt))
    return EvalReport(group, category, results, n_gt, n_det,
                      interpolated=interp if interpolated else None)


def evaluate(dataset: Dataset, dets: Sequence[DetectionRecord], params: OksParams,
             group: str = "body", by_category: bool = False, interpolated: bool = False,
             jobs: int = 1) -> EvalReport:
    """Aggregate TP/FP/FN over all images for one keypoint group.

    Ground truths without a labeled keypoint in the group are left out of
    the recall denominator. With ``by_category`` each gt is labeled by
    :func:`categorize_visibility`; false positives are charged to the
    category of the gt with the highest OKS in their image (``other`` when
    the image has none).
    """
    layout = dataset.layout
    idx = np.asarray(layout.indices(group), dtype=int)
    if params.kappas.shape[0] != layout.total:
        raise ConfigError(f"{params.kappas.shape[0]} kappas for a {layout.total}-keypoint layout")
    by_image: dict[Any, list[DetectionRecord]] = {img.image_id: [] for img in dataset.images}
    for i, d in enumerate(dets):
        if d.image_id not in by_image:
            raise IntegrityError(f"detection {i} references unknown image {d.image_id!r}")
        if d.keypoints.shape[0] != layout.total:
            raise ConfigError(f"detection {i} does not match layout {layout.name}")
        by_image[d.image_id].append(d)
    gts_by_image = dataset.annotations_by_image()

    def run(image_id):
        return _evaluate_image(gts_by_image[image_id], by_image[image_id], params, idx,
                               layout, by_category)

    ids = [img.image_id for img in dataset.images]
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(run, ids))
    else:
        outcomes = [run(i) for i in ids]

    report = _build_report(group, "all", params, outcomes, lambda c: True, interpolated)
    if by_category:
        for cat in CATEGORIES:
            sub = _build_report(group, cat, params, outcomes, lambda c, cat=cat: c == cat,
                                interpolated)
            if sub.n_gt or sub.n_detections:
                report.categories[cat] = sub
    return report
