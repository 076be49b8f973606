"""Verification and identification metrics over trained embeddings.

Scores are similarities (higher = more alike); the default scorer is the
negative Euclidean distance between the profile-encoder and frontal-encoder
embeddings, with cosine similarity available by flag. ROC sweeps every
distinct score as a threshold (acceptance means score >= threshold), EER is
linearly interpolated between the bracketing operating points, AUC uses the
trapezoid rule, and rank-k ties break by ascending subject id.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import networks
from .config import EvalConfig
from .data import Domain, ImageSample, PairExample
from .errors import DimensionError, ProtocolError

_EMBED_CHUNK = 256


@dataclass
class ScoredPair:
    pair: PairExample
    score: float


@dataclass
class RocCurve:
    thresholds: np.ndarray  # ascending
    far: np.ndarray  # non-increasing, aligned by index
    gar: np.ndarray  # non-increasing, aligned by index


@dataclass
class EvalReport:
    eer: float
    auc: float
    gar_at_far: dict[float, float]
    rank_k: dict[int, float] = field(default_factory=dict)
    accuracy_at_eer: float = float("nan")
    accuracy_best: float = float("nan")
    per_yaw_rank1: dict[float, tuple[float, int]] | None = None
    fold_id: int | None = None
    n_genuine: int = 0
    n_impostor: int = 0


# ---------------------------------------------------------------------------
# embeddings and scoring
# ---------------------------------------------------------------------------


def embed_images(state: networks.ModelState, samples: list[ImageSample],
                 domain: Domain) -> np.ndarray:
    """Bottleneck embeddings under the domain's encoder, in sample order."""
    gen = state.gen_profile if domain is Domain.PROFILE else state.gen_frontal
    dtype = gen.arrays["enc0_w"].dtype
    view = networks.wrap_params(gen, trainable=False)
    chunks = []
    for lo in range(0, len(samples), _EMBED_CHUNK):
        block = samples[lo : lo + _EMBED_CHUNK]
        x = np.stack([np.asarray(s.pixels, dtype=dtype) for s in block])
        emb, _ = networks.encode_t(view, gen.config, ad.constant(x))
        chunks.append(emb.data)
    if not chunks:
        return np.zeros((0, gen.config.embedding_dim), dtype=dtype)
    return np.concatenate(chunks, axis=0)


def _pair_scores(z_prof: np.ndarray, z_front: np.ndarray, scorer: str) -> np.ndarray:
    if scorer == "euclidean":
        return -np.sqrt(((z_prof - z_front) ** 2).sum(axis=1))
    if scorer == "cosine":
        num = (z_prof * z_front).sum(axis=1)
        den = np.linalg.norm(z_prof, axis=1) * np.linalg.norm(z_front, axis=1)
        return num / np.maximum(den, np.finfo(z_prof.dtype).tiny)
    raise ProtocolError(f"unknown scorer {scorer!r}")


def score_pairs(state: networks.ModelState, pairs: list[PairExample],
                scorer: str = "euclidean") -> list[ScoredPair]:
    """Similarity score per pair; deterministic in (state, pairs)."""
    z_p = embed_images(state, [p.profile for p in pairs], Domain.PROFILE)
    z_f = embed_images(state, [p.frontal for p in pairs], Domain.FRONTAL)
    scores = _pair_scores(z_p.astype(np.float64), z_f.astype(np.float64), scorer)
    return [ScoredPair(pair, float(s)) for pair, s in zip(pairs, scores)]


def _split_scores(scored: list[ScoredPair]) -> tuple[np.ndarray, np.ndarray]:
    genuine = np.array([sp.score for sp in scored if sp.pair.label_y == 0], dtype=np.float64)
    impostor = np.array([sp.score for sp in scored if sp.pair.label_y == 1], dtype=np.float64)
    if genuine.size == 0 or impostor.size == 0:
        raise ProtocolError(
            f"ROC needs both classes: {genuine.size} genuine, {impostor.size} impostor"
        )
    return genuine, impostor


# ---------------------------------------------------------------------------
# ROC and scalar metrics
# ---------------------------------------------------------------------------


def roc_points(genuine: np.ndarray, impostor: np.ndarray) -> RocCurve:
    """Operating points at every distinct score plus one rejecting threshold."""
    genuine = np.asarray(genuine, dtype=np.float64)
    impostor = np.asarray(impostor, dtype=np.float64)
    if genuine.size == 0 or impostor.size == 0:
        raise ProtocolError("ROC needs at least one genuine and one impostor score")
    distinct = np.unique(np.concatenate([genuine, impostor]))
    thresholds = np.append(distinct, distinct[-1] + 1.0)
    far = np.array([(impostor >= t).mean() for t in thresholds])
    gar = np.array([(genuine >= t).mean() for t in thresholds])
    return RocCurve(thresholds, far, gar)


def roc_from_scores(scored: list[ScoredPair]) -> RocCurve:
    genuine, impostor = _split_scores(scored)
    return roc_points(genuine, impostor)


def eer(curve: RocCurve) -> float:
    """Rate where FAR meets FRR, linearly interpolated between the bracketing
    operating points."""
    if curve.thresholds.size == 0:
        raise ProtocolError("empty ROC curve")
    far, frr = curve.far, 1.0 - curve.gar
    diff = far - frr
    for i in range(len(diff)):
        if diff[i] == 0.0:
            return float(far[i])
        if i + 1 < len(diff) and diff[i] > 0 > diff[i + 1]:
            t = diff[i] / (diff[i] - diff[i + 1])
            return float(far[i] + t * (far[i + 1] - far[i]))
    # no crossing: the distributions are one-sided; take the closest point
    i = int(np.argmin(np.abs(diff)))
    return float((far[i] + frr[i]) / 2.0)


def auc(curve: RocCurve) -> float:
    """Area under (FAR, GAR) by the trapezoid rule."""
    if curve.thresholds.size == 0:
        raise ProtocolError("empty ROC curve")
    order = np.argsort(curve.far, kind="stable")
    x, y = curve.far[order], curve.gar[order]
    return float(np.trapz(y, x))


def gar_at_far(curve: RocCurve, far_target: float) -> float:
    """Highest GAR among operating points with FAR <= target (0 if none)."""
    if curve.thresholds.size == 0:
        raise ProtocolError("empty ROC curve")
    ok = curve.far <= far_target
    return float(curve.gar[ok].max()) if ok.any() else 0.0


def accuracy_metrics(genuine: np.ndarray, impostor: np.ndarray) -> tuple[float, float]:
    """(accuracy at the EER-nearest threshold, best-threshold accuracy).

    Both conventions appear in the literature without the choice being
    stated, so both are reported, labeled.
    """
    curve = roc_points(genuine, impostor)
    n_g, n_i = genuine.size, impostor.size
    correct = curve.gar * n_g + (1.0 - curve.far) * n_i
    acc = correct / (n_g + n_i)
    i_eer = int(np.argmin(np.abs(curve.far - (1.0 - curve.gar))))
    return float(acc[i_eer]), float(acc.max())


# ---------------------------------------------------------------------------
# identification
# ---------------------------------------------------------------------------


def rank_of_true_subject(scores: np.ndarray, gallery_ids: list[int], true_id: int) -> int:
    """1-based rank; ties broken by ascending subject id."""
    order = sorted(range(len(gallery_ids)), key=lambda j: (-scores[j], gallery_ids[j]))
    for pos, j in enumerate(order, start=1):
        if gallery_ids[j] == true_id:
            return pos
    raise ProtocolError(f"subject {true_id} not present in gallery")


def identification_ranks(score_matrix: np.ndarray, gallery_ids: list[int],
                         probe_ids: list[int]) -> np.ndarray:
    return np.array([
        rank_of_true_subject(score_matrix[i], gallery_ids, probe_ids[i])
        for i in range(len(probe_ids))
    ])


def identify(state: networks.ModelState, gallery: list[ImageSample],
             probes: list[ImageSample], ks: list[int],
             scorer: str = "euclidean") -> tuple[dict[int, float], np.ndarray]:
    """Closed-set identification; returns (rank_k map, CMC curve)."""
    gallery_ids = [g.subject_id for g in gallery]
    if len(set(gallery_ids)) != len(gallery_ids):
        raise ProtocolError("gallery subjects must be unique")
    missing = sorted({p.subject_id for p in probes} - set(gallery_ids))
    if missing:
        raise ProtocolError(f"probe subjects missing from gallery: {missing}")
    z_g = embed_images(state, gallery, Domain.FRONTAL).astype(np.float64)
    z_p = embed_images(state, probes, Domain.PROFILE).astype(np.float64)
    if scorer == "euclidean":
        d2 = ((z_p[:, None, :] - z_g[None, :, :]) ** 2).sum(axis=2)
        scores = -np.sqrt(d2)
    else:
        scores = np.stack([
            _pair_scores(np.repeat(z_p[i : i + 1], len(gallery), axis=0), z_g, scorer)
            for i in range(len(probes))
        ])
    ranks = identification_ranks(scores, gallery_ids, [p.subject_id for p in probes])
    cmc = np.array([(ranks <= k).mean() for k in range(1, len(gallery) + 1)])
    rank_k = {k: float((ranks <= k).mean()) for k in ks}
    return rank_k, cmc


def build_gallery(samples: list[ImageSample]) -> list[ImageSample]:
    """First frontal sample per subject, by sample id."""
    best: dict[int, ImageSample] = {}
    for s in samples:
        if s.domain is Domain.FRONTAL and (
            s.subject_id not in best or s.sample_id < best[s.subject_id].sample_id
        ):
            best[s.subject_id] = s
    return [best[k] for k in sorted(best)]


# ---------------------------------------------------------------------------
# protocols
# ---------------------------------------------------------------------------


def report_from_pairs(state: networks.ModelState, pairs: list[PairExample],
                      eval_cfg: EvalConfig, fold_id: int | None = None):
    """Verification metrics plus within-fold identification for one pair set.

    Returns (EvalReport, RocCurve).
    """
    scored = score_pairs(state, pairs, eval_cfg.scorer)
    genuine, impostor = _split_scores(scored)
    curve = roc_points(genuine, impostor)
    acc_eer, acc_best = accuracy_metrics(genuine, impostor)
    report = EvalReport(
        eer=eer(curve),
        auc=auc(curve),
        gar_at_far={t: gar_at_far(curve, t) for t in eval_cfg.far_targets},
        accuracy_at_eer=acc_eer,
        accuracy_best=acc_best,
        fold_id=fold_id,
        n_genuine=int(genuine.size),
        n_impostor=int(impostor.size),
    )
    # identification within the fold's subjects
    frontals = {p.frontal.sample_id: p.frontal for p in pairs}
    gallery = build_gallery(list(frontals.values()))
    probes_by_id = {p.profile.sample_id: p.profile for p in pairs}
    probes = [probes_by_id[k] for k in sorted(probes_by_id)]
    gallery_subjects = {g.subject_id for g in gallery}
    probes = [p for p in probes if p.subject_id in gallery_subjects]
    if probes and gallery:
        report.rank_k, _ = identify(state, gallery, probes,
                                    [k for k in eval_cfg.ranks if k <= len(gallery)],
                                    eval_cfg.scorer)
    return report, curve


def evaluate_folds(state: networks.ModelState, folds, eval_cfg: EvalConfig):
    """One report per fold plus a mean/sample-std summary per metric.

    Returns (reports, summary, curves).
    """
    reports = []
    curves = []
    for fold_id, (_, pairs) in enumerate(folds):
        rep, curve = report_from_pairs(state, pairs, eval_cfg, fold_id=fold_id)
        reports.append(rep)
        curves.append(curve)
    summary = summarize_metrics(reports)
    return reports, summary, curves


def _report_metric_rows(rep: EvalReport) -> list[tuple[str, float]]:
    rows = [("eer", rep.eer), ("auc", rep.auc),
            ("accuracy_at_eer", rep.accuracy_at_eer), ("accuracy_best", rep.accuracy_best)]
    for t in sorted(rep.gar_at_far):
        rows.append((f"gar@far={t:g}", rep.gar_at_far[t]))
    for k in sorted(rep.rank_k):
        rows.append((f"rank-{k}", rep.rank_k[k]))
    return rows


def summarize_metrics(reports: list[EvalReport]) -> dict[str, tuple[float, float]]:
    """Per-metric (mean, sample standard deviation) across folds."""
    keyed: dict[str, list[float]] = {}
    for rep in reports:
        for name, value in _report_metric_rows(rep):
            keyed.setdefault(name, []).append(value)
    out = {}
    for name, vals in keyed.items():
        arr = np.array(vals, dtype=np.float64)
        std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
        out[name] = (float(arr.mean()), std)
    return out


def evaluate_by_yaw(state: networks.ModelState, probes: list[ImageSample],
                    gallery: list[ImageSample],
                    bin_edges=(15, 30, 45, 60, 75, 90),
                    scorer: str = "euclidean") -> dict[float, tuple[float, int]]:
    """Rank-1 per |yaw| bin; a probe falls into the smallest edge >= |yaw|.

    Empty bins are absent from the result, not zero.
    """
    edges = sorted(float(e) for e in bin_edges)
    for p in probes:
        if not -90 <= p.yaw_deg <= 90:
            raise ProtocolError(f"probe {p.sample_id} yaw {p.yaw_deg} outside [-90, 90]")
        if abs(p.yaw_deg) > edges[-1]:
            raise ProtocolError(f"probe yaw {p.yaw_deg} beyond final bin edge {edges[-1]}")
    binned: dict[float, list[ImageSample]] = {}
    for p in probes:
        edge = next(e for e in edges if abs(p.yaw_deg) <= e)
        binned.setdefault(edge, []).append(p)
    out: dict[float, tuple[float, int]] = {}
    for edge in edges:
        if edge not in binned:
            continue
        rank_k, _ = identify(state, gallery, binned[edge], [1], scorer)
        out[edge] = (rank_k[1], len(binned[edge]))
    return out


# ---------------------------------------------------------------------------
# cross-domain reconstruction
# ---------------------------------------------------------------------------


def cross_reconstruct(state: networks.ModelState, image: ImageSample,
                      target_domain: Domain, zero_skips: bool = False) -> np.ndarray:
    """Encode with the source-domain generator, decode with the target
    domain's decoder. Skips transfer by shared topology unless zeroed."""
    if image.domain == target_domain:
        raise ProtocolError(
            f"cross_reconstruct needs a source domain different from {target_domain}"
        )
    src = state.gen_profile if image.domain is Domain.PROFILE else state.gen_frontal
    dst = state.gen_frontal if target_domain is Domain.FRONTAL else state.gen_profile
    dtype = src.arrays["enc0_w"].dtype
    x = ad.constant(np.asarray(image.pixels, dtype=dtype)[None])
    emb, skips = networks.encode_t(networks.wrap_params(src, False), src.config, x)
    out = networks.decode_t(networks.wrap_params(dst, False), dst.config, emb,
                            None if zero_skips else skips)
    return out.data[0]


def reconstruction_panel(pairs: list[tuple[np.ndarray, np.ndarray]],
                         per_row: int = 8) -> np.ndarray:
    """Grid with inputs in odd columns and reconstructions in even columns."""
    if not pairs:
        raise ProtocolError("nothing to render")
    h, w, c = pairs[0][0].shape
    cols = 2 * min(per_row, len(pairs))
    rows = (len(pairs) + per_row - 1) // per_row
    panel = np.ones((rows * h, cols * w, c), dtype=np.float64)
    for i, (inp, rec) in enumerate(pairs):
        r, k = divmod(i, per_row)
        panel[r * h : (r + 1) * h, (2 * k) * w : (2 * k + 1) * w] = inp
        panel[r * h : (r + 1) * h, (2 * k + 1) * w : (2 * k + 2) * w] = rec
    return np.clip(panel, 0.0, 1.0)


# ---------------------------------------------------------------------------
# CSV exports
# ---------------------------------------------------------------------------


def write_report_csv(reports: list[EvalReport], summary, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["fold", "metric", "value"])
        for rep in reports:
            fold = rep.fold_id if rep.fold_id is not None else 0
            for name, value in _report_metric_rows(rep):
                w.writerow([fold, name, f"{value:.8g}"])
        if summary:
            for name, (mean, std) in summary.items():
                w.writerow(["mean", name, f"{mean:.8g}"])
                w.writerow(["std", name, f"{std:.8g}"])


def write_roc_csv(curve: RocCurve, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold", "far", "gar"])
        for t, f, g in zip(curve.thresholds, curve.far, curve.gar):
            w.writerow([f"{t:.10g}", f"{f:.10g}", f"{g:.10g}"])


def write_yaw_csv(per_yaw: dict[float, tuple[float, int]], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_deg", "rank1", "n_probes"])
        for edge in sorted(per_yaw):
            rank1, n = per_yaw[edge]
            w.writerow([f"{edge:g}", f"{rank1:.8g}", n])
