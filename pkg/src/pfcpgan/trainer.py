"""Coupled adversarial training loop.

Per batch: one discriminator update per domain (real pass conditions and
candidates are the same image; fake candidates are the generator outputs,
held constant), then one Adam step on both generators minimizing the
preset-masked total objective. The generator forward pass is shared between
the two sub-steps: the discriminator update never touches generator
parameters, so the reused activations are bit-identical to a recompute.

Determinism: given (seed, dataset, config) and a fixed kernel backend /
BLAS thread configuration, runs are bit-reproducible; checkpoints carry the
pair-sampler RNG state so resumed runs continue exactly.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import kernels, networks
from .checkpoint import load_checkpoint, save_checkpoint
from .config import EvalConfig, GeneratorConfig, LossConfig, TrainConfig
from .data import FoldProtocol, ImageSample, PairExample, build_folds, sample_pair_batch, split_by_subjects
from .errors import ConfigError, NumericError
from .losses import (LossBreakdown, adversarial_losses, combine_total,
                     coupling_loss, generator_adversarial_loss,
                     l2_reconstruction_loss, perceptual_loss_from_features,
                     total_objective)

log = logging.getLogger(__name__)

TRAIN_LOG_NAME = "train_log.csv"
TRAIN_LOG_HEADER = ["step", "l_cpl", "l_gan_pr", "l_gan_fr", "l_l2", "l_perc",
                    "total", "d_loss_pr", "d_loss_fr", "seconds"]


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


@dataclass
class TrainLogRecord:
    step: int
    breakdown: LossBreakdown
    seconds: float
    n_genuine: int
    n_impostor: int


def adam_update(arrays: dict[str, np.ndarray], grads: dict[str, np.ndarray],
                state: AdamState, cfg: TrainConfig) -> None:
    """One Adam step, in place. Parameters without a gradient are skipped."""
    state.t += 1
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for name, arr in arrays.items():
        g = grads.get(name)
        if g is None:
            continue
        dt = arr.dtype.type
        if name not in state.m:
            state.m[name] = np.zeros_like(arr)
            state.v[name] = np.zeros_like(arr)
        m, v = state.m[name], state.v[name]
        m *= dt(b1)
        m += dt(1.0 - b1) * g
        v *= dt(b2)
        v += dt(1.0 - b2) * (g * g)
        arr -= dt(cfg.learning_rate) * (m / dt(bc1)) / (np.sqrt(v / dt(bc2)) + dt(cfg.adam_eps))


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> None:
    total = np.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
    if total > max_norm:
        factor = max_norm / total
        for g in grads.values():
            g *= g.dtype.type(factor)


def _collect_grads(view: networks.ParamView, prefix: str) -> dict[str, np.ndarray]:
    return {
        f"{prefix}/{name}": t.grad for name, t in view.items() if t.grad is not None
    }


def _stack_pixels(samples, dtype) -> np.ndarray:
    return np.stack([np.asarray(s.pixels, dtype=dtype) for s in samples])


class PerceptualCache:
    """Feature cache for real images; V(x) is constant during training."""

    def __init__(self, perc: networks.PerceptualFeatureParams):
        self.perc = perc
        self._feats: dict[int, np.ndarray] = {}

    def features_for(self, samples, pixels: np.ndarray) -> np.ndarray:
        missing = [i for i, s in enumerate(samples) if s.sample_id not in self._feats]
        if missing:
            feats = networks.perceptual_features_t(
                self.perc, ad.constant(pixels[missing])
            ).data
            for row, i in enumerate(missing):
                self._feats[samples[i].sample_id] = feats[row]
        return np.stack([self._feats[s.sample_id] for s in samples])


def train_step(state: networks.ModelState, batch: list[PairExample],
               train_cfg: TrainConfig, loss_cfg: LossConfig,
               opt_state: dict[str, AdamState],
               perc_cache: PerceptualCache | None = None) -> LossBreakdown:
    """One coupled update; mutates ``state`` and ``opt_state``."""
    labels = np.array([p.label_y for p in batch])
    n_gen = int((labels == 0).sum())
    if n_gen * 2 != len(batch):
        raise ConfigError(f"unbalanced batch: {n_gen} genuine of {len(batch)}")

    cfg = state.config
    dtype = state.gen_profile.arrays["enc0_w"].dtype
    preset = train_cfg.ablation_preset
    use_gan = preset in ("cpl_l2_gan", "full")
    use_perc = preset == "full"

    prof_samples = [p.profile for p in batch]
    front_samples = [p.frontal for p in batch]
    x_pr = ad.constant(_stack_pixels(prof_samples, dtype))
    x_fr = ad.constant(_stack_pixels(front_samples, dtype))

    # shared generator forward (the discriminator update below never touches
    # generator parameters, so no recompute is needed for the generator step)
    v_gen_pr = networks.wrap_params(state.gen_profile, trainable=True)
    v_gen_fr = networks.wrap_params(state.gen_frontal, trainable=True)
    out_pr, emb_pr, _ = networks.generate_t(v_gen_pr, cfg, x_pr)
    out_fr, emb_fr, _ = networks.generate_t(v_gen_fr, cfg, x_fr)

    zero = ad.constant(np.asarray(0.0, dtype))
    d_losses = {"profile": zero, "frontal": zero}
    if use_gan:
        n = len(batch)
        for domain, disc, x, out in (
            ("profile", state.disc_profile, x_pr, out_pr),
            ("frontal", state.disc_frontal, x_fr, out_fr),
        ):
            v_disc = networks.wrap_params(disc, trainable=True)
            # one batched pass: real candidates stacked over fake candidates
            cond = ad.constant(np.concatenate([x.data, x.data]))
            cand = ad.constant(np.concatenate([x.data, out.data]))
            logits = networks.discriminate_t(v_disc, cfg, cond, cand)
            d_loss, _ = adversarial_losses(
                ad.slice_rows(logits, 0, n), ad.slice_rows(logits, n, 2 * n), loss_cfg.gan_form
            )
            d_loss.backward()
            grads = _collect_grads(v_disc, "d")
            if train_cfg.grad_clip is not None:
                clip_gradients(grads, train_cfg.grad_clip)
            adam_update(
                {f"d/{n_}": a for n_, a in disc.arrays.items()}, grads,
                opt_state[f"disc_{domain}"], train_cfg,
            )
            d_losses[domain] = d_loss

    # generator objective against the just-updated, now-frozen discriminators
    l_cpl = coupling_loss(emb_pr, emb_fr, labels, loss_cfg.margin_m, loss_cfg.contrastive_form)
    if use_gan:
        g_terms = {}
        for domain, disc, x, out in (
            ("profile", state.disc_profile, x_pr, out_pr),
            ("frontal", state.disc_frontal, x_fr, out_fr),
        ):
            v_disc = networks.wrap_params(disc, trainable=False)
            logits_fake = networks.discriminate_t(v_disc, cfg, x, out)
            g_terms[domain] = generator_adversarial_loss(logits_fake, loss_cfg.gan_form)
        l_gan_pr, l_gan_fr = g_terms["profile"], g_terms["frontal"]
    else:
        l_gan_pr = l_gan_fr = zero

    l_l2 = ad.add(l2_reconstruction_loss(out_pr, x_pr), l2_reconstruction_loss(out_fr, x_fr))

    if use_perc:
        cache = perc_cache or PerceptualCache(state.perceptual)
        terms = []
        for samples_, x, out in ((prof_samples, x_pr, out_pr), (front_samples, x_fr, out_fr)):
            target_feats = ad.constant(cache.features_for(samples_, x.data))
            out_feats = networks.perceptual_features_t(state.perceptual, out)
            terms.append(perceptual_loss_from_features(out_feats, target_feats))
        l_perc = ad.add(terms[0], terms[1])
    else:
        l_perc = zero

    total_t = combine_total(l_cpl, l_gan_pr, l_gan_fr, l_l2, l_perc, loss_cfg)
    if not np.isfinite(total_t.data):
        raise NumericError(
            f"non-finite total objective at step {state.step}: "
            f"cpl={l_cpl.item()} gan=({l_gan_pr.item()},{l_gan_fr.item()}) "
            f"l2={l_l2.item()} perc={l_perc.item()}"
        )
    total_t.backward()

    grads = _collect_grads(v_gen_pr, "gen_profile")
    grads.update(_collect_grads(v_gen_fr, "gen_frontal"))
    if train_cfg.grad_clip is not None:
        clip_gradients(grads, train_cfg.grad_clip)
    gen_arrays = {f"gen_profile/{n}": a for n, a in state.gen_profile.arrays.items()}
    gen_arrays.update({f"gen_frontal/{n}": a for n, a in state.gen_frontal.arrays.items()})
    adam_update(gen_arrays, grads, opt_state["generators"], train_cfg)

    state.step += 1
    return total_objective(
        l_cpl.item(), l_gan_pr.item(), l_gan_fr.item(), l_l2.item(), l_perc.item(),
        loss_cfg, d_losses["profile"].item(), d_losses["frontal"].item(),
    )


def new_opt_state() -> dict[str, AdamState]:
    return {"generators": AdamState(), "disc_profile": AdamState(), "disc_frontal": AdamState()}


def _sampler_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed & 0xFFFFFFFF, 0xBA7C4])))


def train(samples: list[ImageSample], gen_cfg: GeneratorConfig, train_cfg: TrainConfig,
          loss_cfg: LossConfig, out_dir: str | Path | None = None,
          resume_from: str | Path | None = None):
    """Run ``max_steps`` coupled updates over balanced pair batches.

    Returns (final ModelState, list of TrainLogRecord, checkpoint paths).
    When ``out_dir`` is given, appends ``train_log.csv`` and writes periodic
    plus final checkpoints there.
    """
    train_cfg.validate()
    loss_cfg.validate()
    gen_cfg.validate()
    if train_cfg.backend != "auto":
        kernels.set_backend(train_cfg.backend)
    dtype = np.float32 if train_cfg.precision == 32 else np.float64

    if resume_from is not None:
        state, opt_state, ckpt_train_cfg, ckpt_loss_cfg, manifest = load_checkpoint(resume_from)
        loss_cfg = ckpt_loss_cfg
        rng = _sampler_rng(train_cfg.seed)
        rng.bit_generator.state = manifest["rng_state"]
    else:
        state = networks.init_model(gen_cfg, train_cfg.seed, dtype)
        opt_state = new_opt_state()
        rng = _sampler_rng(train_cfg.seed)

    out_dir = Path(out_dir) if out_dir is not None else None
    log_fh = writer = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = out_dir / TRAIN_LOG_NAME
        fresh = resume_from is None or not log_path.exists()
        log_fh = open(log_path, "a", newline="", encoding="utf-8")
        writer = csv.writer(log_fh)
        if fresh:
            writer.writerow(TRAIN_LOG_HEADER)

    records: list[TrainLogRecord] = []
    ckpt_paths: list[Path] = []
    cache = PerceptualCache(state.perceptual)
    try:
        while state.step < train_cfg.max_steps:
            t0 = time.perf_counter()
            batch = sample_pair_batch(samples, train_cfg.batch_size, rng)
            breakdown = train_step(state, batch, train_cfg, loss_cfg, opt_state, cache)
            seconds = time.perf_counter() - t0
            if state.step % train_cfg.log_every == 0:
                rec = TrainLogRecord(state.step, breakdown, seconds,
                                     train_cfg.batch_size // 2, train_cfg.batch_size // 2)
                records.append(rec)
                if writer is not None:
                    writer.writerow([rec.step, *(f"{v:.8g}" for v in breakdown.values()),
                                     f"{seconds:.4f}"])
                    log_fh.flush()
            if out_dir is not None and state.step % train_cfg.checkpoint_every == 0:
                p = out_dir / f"ckpt_step{state.step:07d}"
                save_checkpoint(state, opt_state, train_cfg, loss_cfg, rng, p)
                ckpt_paths.append(p)
    finally:
        if log_fh is not None:
            log_fh.close()

    if out_dir is not None:
        p = out_dir / "ckpt_final"
        save_checkpoint(state, opt_state, train_cfg, loss_cfg, rng, p)
        ckpt_paths.append(p)
    return state, records, ckpt_paths


def run_ablation_suite(samples: list[ImageSample], gen_cfg: GeneratorConfig,
                       base_cfg: TrainConfig, loss_cfg: LossConfig,
                       eval_cfg: EvalConfig, out_dir: str | Path | None = None):
    """Train the three loss presets from identical seeds and data order and
    evaluate each on one shared held-out fold.

    Returns (results, split_digest) where results maps preset ->
    (ModelState, EvalReport, RocCurve).
    """
    import hashlib

    from .evaluator import report_from_pairs

    protocol = FoldProtocol(eval_cfg.n_folds, eval_cfg.same_pairs_per_subject,
                            eval_cfg.diff_pairs_per_subject)
    fold_rng = np.random.Generator(np.random.PCG64(
        np.random.SeedSequence([eval_cfg.seed & 0xFFFFFFFF, 0xF01D])))
    folds = build_folds(samples, protocol, fold_rng)
    train_subjects, test_pairs = folds[0]
    train_samples = split_by_subjects(samples, train_subjects)

    h = hashlib.sha256()
    for p in test_pairs:
        h.update(f"{p.profile.sample_id},{p.frontal.sample_id},{p.label_y};".encode())
    split_digest = h.hexdigest()

    results = {}
    for preset in ("cpl_l2", "cpl_l2_gan", "full"):
        cfg = replace(base_cfg, ablation_preset=preset)
        run_dir = None if out_dir is None else Path(out_dir) / preset
        state, _, _ = train(train_samples, gen_cfg, cfg, loss_cfg, out_dir=run_dir)
        report, curve = report_from_pairs(state, test_pairs, eval_cfg)
        results[preset] = (state, report, curve)
        log.info("ablation preset %s: eer=%.4f auc=%.4f", preset, report.eer, report.auc)
    return results, split_digest
