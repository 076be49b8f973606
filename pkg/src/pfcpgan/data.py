"""Synthetic paired-domain dataset, on-disk ingestion, pair sampling, folds.

Each synthetic identity is a glyph: a fixed random arrangement of 5-9
anisotropic Gaussian blobs on the unit square. Frontal samples render the
glyph as-is; profile samples render it under a horizontal shear whose
magnitude scales with |yaw|/90 and sign follows the yaw sign. Because the
glyph is a continuous field, warped views are sampled exactly (no
interpolation), so identity structure survives any pose.

Directory layout for on-disk datasets::

    <root>/<subject_id>/{frontal,profile}/<name>[_y<deg>].png

8-bit grayscale or RGB PNG; the optional ``_y`` suffix carries the yaw in
degrees (sign optional). Exports from the synthetic generator round-trip
through this layout.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np
from PIL import Image

from .config import DatasetSpec
from .errors import ConfigError, DataError, IngestionError

log = logging.getLogger(__name__)

SHEAR_MAX = 0.9  # horizontal shear at |yaw| = 90
_BLOB_RANGE = (5, 9)
_YAW_SUFFIX = re.compile(r"_y([+-]?\d+(?:\.\d+)?)$")


class Domain(Enum):
    PROFILE = "profile"
    FRONTAL = "frontal"


@dataclass
class ImageSample:
    pixels: np.ndarray  # (H, W, C) in [0, 1]
    subject_id: int
    domain: Domain
    yaw_deg: float
    sample_id: int

    def validate(self) -> None:
        if self.pixels.min() < 0 or self.pixels.max() > 1:
            raise DataError(f"sample {self.sample_id}: pixels outside [0, 1]")
        if self.domain is Domain.FRONTAL and self.yaw_deg != 0:
            raise DataError(f"sample {self.sample_id}: frontal samples must have yaw 0")
        if not -90 <= self.yaw_deg <= 90:
            raise DataError(f"sample {self.sample_id}: yaw {self.yaw_deg} outside [-90, 90]")


@dataclass
class PairExample:
    profile: ImageSample
    frontal: ImageSample
    label_y: int  # 0 = genuine (same subject), 1 = impostor

    def validate(self) -> None:
        same = self.profile.subject_id == self.frontal.subject_id
        if self.label_y != (0 if same else 1):
            raise DataError("pair label disagrees with subject identities")


@dataclass
class FoldProtocol:
    n_folds: int = 10
    same_pairs_per_subject: int = 7
    diff_pairs_per_subject: int = 7
    subject_assignment: dict[int, int] | None = None


# ---------------------------------------------------------------------------
# synthetic generation
# ---------------------------------------------------------------------------


def _subject_glyph(seed: int, subject_id: int):
    """Blob parameters for one identity: (K, 6) rows of
    (cu, cv, sigma_u, sigma_v, angle, amplitude)."""
    ss = np.random.SeedSequence([seed & 0xFFFFFFFF, subject_id, 0])
    rng = np.random.Generator(np.random.PCG64(ss))
    k = int(rng.integers(_BLOB_RANGE[0], _BLOB_RANGE[1] + 1))
    params = np.empty((k, 6))
    params[:, 0] = rng.uniform(0.18, 0.82, k)  # centers stay inside the frame
    params[:, 1] = rng.uniform(0.18, 0.82, k)
    params[:, 2] = rng.uniform(0.035, 0.14, k)  # anisotropic widths
    params[:, 3] = rng.uniform(0.035, 0.14, k)
    params[:, 4] = rng.uniform(0.0, np.pi, k)
    params[:, 5] = rng.uniform(0.5, 1.0, k)
    return params


def _render_glyph(params: np.ndarray, h: int, w: int, c: int, yaw_deg: float) -> np.ndarray:
    vv, uu = np.meshgrid(
        (np.arange(h) + 0.5) / h, (np.arange(w) + 0.5) / w, indexing="ij"
    )
    shear = SHEAR_MAX * yaw_deg / 90.0
    us = uu + shear * (vv - 0.5)
    img = np.zeros((h, w))
    for cu, cv, su, sv, ang, amp in params:
        ca, sa = np.cos(ang), np.sin(ang)
        du, dv = us - cu, vv - cv
        ru = ca * du + sa * dv
        rv = -sa * du + ca * dv
        img += amp * np.exp(-0.5 * ((ru / su) ** 2 + (rv / sv) ** 2))
    img = np.clip(img, 0.0, 1.0)
    if c == 1:
        return img[:, :, None]
    return np.repeat(img[:, :, None], c, axis=2)


def generate_synthetic_dataset(spec: DatasetSpec, dtype=np.float32) -> list[ImageSample]:
    """Deterministic synthetic corpus: ``n_subjects * (frontal + profile)``
    samples, ordered subject-major with frontals first."""
    spec.validate()
    h, w, c = spec.image_size
    samples: list[ImageSample] = []
    sample_id = 0
    for subject in range(spec.n_subjects):
        glyph = _subject_glyph(spec.seed, subject)
        per_sample = np.random.SeedSequence(
            [spec.seed & 0xFFFFFFFF, subject, 1]
        ).spawn(spec.frontal_per_subject + spec.profile_per_subject)
        for i in range(spec.frontal_per_subject):
            rng = np.random.Generator(np.random.PCG64(per_sample[i]))
            img = _render_glyph(glyph, h, w, c, 0.0)
            if spec.noise_std > 0:
                img = np.clip(img + rng.normal(0, spec.noise_std, img.shape), 0.0, 1.0)
            samples.append(
                ImageSample(img.astype(dtype), subject, Domain.FRONTAL, 0.0, sample_id)
            )
            sample_id += 1
        for i in range(spec.profile_per_subject):
            rng = np.random.Generator(np.random.PCG64(per_sample[spec.frontal_per_subject + i]))
            yaw = float(rng.uniform(spec.yaw_range[0], spec.yaw_range[1]))
            img = _render_glyph(glyph, h, w, c, yaw)
            if spec.noise_std > 0:
                img = np.clip(img + rng.normal(0, spec.noise_std, img.shape), 0.0, 1.0)
            samples.append(
                ImageSample(img.astype(dtype), subject, Domain.PROFILE, yaw, sample_id)
            )
            sample_id += 1
    return samples


# ---------------------------------------------------------------------------
# disk I/O
# ---------------------------------------------------------------------------


def export_dataset(samples: list[ImageSample], root: str | Path) -> None:
    """Write samples in the documented directory layout (8-bit PNG)."""
    root = Path(root)
    counters: dict[tuple[int, Domain], int] = {}
    for s in sorted(samples, key=lambda s: s.sample_id):
        sub = root / f"{s.subject_id:04d}" / s.domain.value
        sub.mkdir(parents=True, exist_ok=True)
        idx = counters.get((s.subject_id, s.domain), 0)
        counters[(s.subject_id, s.domain)] = idx + 1
        stem = f"{s.domain.value[0]}{idx:03d}"
        if s.domain is Domain.PROFILE:
            stem += f"_y{s.yaw_deg:+.1f}"
        arr = np.round(np.asarray(s.pixels, dtype=np.float64) * 255.0).astype(np.uint8)
        img = Image.fromarray(arr[:, :, 0], mode="L") if arr.shape[2] == 1 else Image.fromarray(arr, mode="RGB")
        img.save(sub / f"{stem}.png")


def load_dataset(root: str | Path, dtype=np.float32) -> list[ImageSample]:
    """Ingest a dataset directory; yaw parsed from the filename suffix when
    present, else 90 for profiles and 0 for frontals."""
    root = Path(root)
    if not root.is_dir():
        raise IngestionError(f"dataset root is not a directory: {root}")
    samples: list[ImageSample] = []
    expected_hw = None
    sample_id = 0
    subject_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    for sdir in subject_dirs:
        try:
            subject = int(sdir.name)
        except ValueError as exc:
            raise IngestionError(f"subject directory is not an integer id: {sdir}") from exc
        if subject < 0:
            raise IngestionError(f"negative subject id: {sdir}")
        for domain in (Domain.FRONTAL, Domain.PROFILE):
            ddir = sdir / domain.value
            if not ddir.is_dir():
                continue
            for f in sorted(ddir.iterdir()):
                if f.suffix.lower() != ".png":
                    continue
                try:
                    img = Image.open(f)
                    img.load()
                except Exception as exc:
                    raise IngestionError(f"unreadable image: {f} ({exc})") from exc
                arr = np.asarray(img)
                if arr.ndim == 2:
                    arr = arr[:, :, None]
                if arr.ndim != 3 or arr.shape[2] not in (1, 3):
                    raise IngestionError(f"unsupported channel layout in {f}: {arr.shape}")
                if expected_hw is None:
                    expected_hw = arr.shape
                elif arr.shape != expected_hw:
                    raise IngestionError(
                        f"size mismatch in {f}: {arr.shape} vs {expected_hw}"
                    )
                m = _YAW_SUFFIX.search(f.stem)
                if m:
                    yaw = float(m.group(1))
                elif domain is Domain.PROFILE:
                    yaw = 90.0
                else:
                    yaw = 0.0
                if domain is Domain.FRONTAL:
                    yaw = 0.0
                pixels = (arr.astype(np.float64) / 255.0).astype(dtype)
                samples.append(ImageSample(pixels, subject, domain, yaw, sample_id))
                sample_id += 1
    if not samples:
        log.warning("dataset root %s contains no samples", root)
    return samples


# ---------------------------------------------------------------------------
# pair sampling and folds
# ---------------------------------------------------------------------------


def index_by_subject(samples: list[ImageSample]) -> dict[int, dict[Domain, list[ImageSample]]]:
    idx: dict[int, dict[Domain, list[ImageSample]]] = {}
    for s in samples:
        idx.setdefault(s.subject_id, {Domain.PROFILE: [], Domain.FRONTAL: []})[s.domain].append(s)
    for per in idx.values():
        for dom in per:
            per[dom].sort(key=lambda s: s.sample_id)
    return idx


def _pick(rng: np.random.Generator, seq):
    return seq[int(rng.integers(0, len(seq)))]


def sample_pair_batch(
    samples: list[ImageSample], batch_size: int, rng: np.random.Generator
) -> list[PairExample]:
    """Balanced batch: first half genuine (label 0), second half impostor
    (label 1). Genuine pairs draw uniformly within a uniformly chosen
    subject; impostor pairs draw from two distinct subjects."""
    if batch_size < 2 or batch_size % 2:
        raise ConfigError(f"batch_size must be even and >= 2, got {batch_size}")
    idx = index_by_subject(samples)
    genuine_subjects = sorted(
        s for s, per in idx.items() if per[Domain.PROFILE] and per[Domain.FRONTAL]
    )
    profile_subjects = sorted(s for s, per in idx.items() if per[Domain.PROFILE])
    frontal_subjects = sorted(s for s, per in idx.items() if per[Domain.FRONTAL])
    if not genuine_subjects:
        raise DataError("no subject has both a profile and a frontal sample")
    if len(idx) < 2 or not profile_subjects or not frontal_subjects:
        raise DataError("impostor pairs need two distinct subjects with both domains present")
    if len(profile_subjects) == 1 and frontal_subjects == profile_subjects:
        raise DataError("impostor pairs need two distinct subjects")

    pairs: list[PairExample] = []
    half = batch_size // 2
    for _ in range(half):
        subject = _pick(rng, genuine_subjects)
        prof = _pick(rng, idx[subject][Domain.PROFILE])
        front = _pick(rng, idx[subject][Domain.FRONTAL])
        pairs.append(PairExample(prof, front, 0))
    for _ in range(half):
        while True:
            sp = _pick(rng, profile_subjects)
            sf = _pick(rng, frontal_subjects)
            if sp != sf:
                break
        prof = _pick(rng, idx[sp][Domain.PROFILE])
        front = _pick(rng, idx[sf][Domain.FRONTAL])
        pairs.append(PairExample(prof, front, 1))
    return pairs


def build_folds(
    samples: list[ImageSample], protocol: FoldProtocol, rng: np.random.Generator
) -> list[tuple[set[int], list[PairExample]]]:
    """Disjoint subject folds with per-subject genuine/impostor test pairs.

    Returns one (train_subject_set, test_pairs) tuple per fold; train is the
    union of all other folds' subjects.
    """
    idx = index_by_subject(samples)
    subjects = sorted(idx)
    if len(subjects) < protocol.n_folds:
        raise ConfigError(
            f"cannot split {len(subjects)} subjects into {protocol.n_folds} folds"
        )
    if protocol.subject_assignment is not None:
        assignment = dict(protocol.subject_assignment)
        missing = set(subjects) - set(assignment)
        if missing:
            raise ConfigError(f"subject_assignment missing subjects {sorted(missing)}")
    else:
        perm = [subjects[i] for i in rng.permutation(len(subjects))]
        assignment = {s: i % protocol.n_folds for i, s in enumerate(perm)}

    fold_subjects: list[list[int]] = [[] for _ in range(protocol.n_folds)]
    for s in subjects:
        fold_subjects[assignment[s]].append(s)

    folds = []
    all_subjects = set(subjects)
    for members in fold_subjects:
        members = sorted(members)
        test_pairs: list[PairExample] = []
        for s in members:
            profs = idx[s][Domain.PROFILE]
            fronts = idx[s][Domain.FRONTAL]
            if not profs or not fronts:
                raise DataError(f"subject {s} lacks a domain; cannot build test pairs")
            n_combo = len(profs) * len(fronts)
            replace = n_combo < protocol.same_pairs_per_subject
            combos = rng.choice(n_combo, size=protocol.same_pairs_per_subject, replace=replace)
            for cidx in combos:
                test_pairs.append(PairExample(profs[cidx // len(fronts)], fronts[cidx % len(fronts)], 0))
            others = [m for m in members if m != s]
            if not others:
                if protocol.diff_pairs_per_subject:
                    log.warning("fold with single subject %s: no impostor pairs possible", s)
                continue
            for _ in range(protocol.diff_pairs_per_subject):
                other = _pick(rng, others)
                test_pairs.append(
                    PairExample(_pick(rng, profs), _pick(rng, idx[other][Domain.FRONTAL]), 1)
                )
        folds.append((all_subjects - set(members), test_pairs))
    return folds


def split_by_subjects(samples: list[ImageSample], subjects: set[int]) -> list[ImageSample]:
    return [s for s in samples if s.subject_id in subjects]
