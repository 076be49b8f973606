"""Command-line entry point.

Grammar::

    pfcpgan <generate|train|eval|ablate|reconstruct> [flags]

Every command takes an optional ``--config`` (INI, see config.py), a
``--seed`` override that applies to every seeded component, and
``--precision {32,64}``. Outputs land under ``--out`` (or
``$PFCPGAN_RUN_ROOT/<command>-<timestamp>`` when omitted); the fully
resolved config is echoed into the run directory so every run is
re-executable from its own artifacts.

Exit codes: 0 success, 2 config error, 3 I/O error, 4 numeric abort,
5 protocol violation.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import kernels
from .checkpoint import load_checkpoint
from .config import RunConfig, dump_config, load_config
from .data import (Domain, FoldProtocol, build_folds, export_dataset,
                   generate_synthetic_dataset, load_dataset)
from .errors import (CheckpointError, ConfigError, DataError, DimensionError,
                     IngestionError, NumericError, PfcpganError, ProtocolError)
from .evaluator import (build_gallery, cross_reconstruct, evaluate_by_yaw,
                        evaluate_folds, reconstruction_panel, write_report_csv,
                        write_roc_csv, write_yaw_csv)
from .trainer import run_ablation_suite, train

log = logging.getLogger(__name__)

EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4
EXIT_PROTOCOL = 5

_ERROR_EXITS = (
    (ConfigError, EXIT_CONFIG),
    (DataError, EXIT_CONFIG),
    (DimensionError, EXIT_CONFIG),
    (NumericError, EXIT_NUMERIC),
    (ProtocolError, EXIT_PROTOCOL),
    (IngestionError, EXIT_IO),
    (CheckpointError, EXIT_IO),
    (OSError, EXIT_IO),
)


def _exit_code(exc: Exception) -> int:
    for etype, code in _ERROR_EXITS:
        if isinstance(exc, etype):
            return code
    return 1


def _resolve_out(args, command: str) -> Path:
    if args.out:
        return Path(args.out)
    root = os.environ.get("PFCPGAN_RUN_ROOT")
    if not root:
        raise ConfigError("--out is required (or set PFCPGAN_RUN_ROOT)")
    return Path(root) / f"{command}-{int(time.time())}"


def _load_run_config(args) -> RunConfig:
    cfg = load_config(getattr(args, "config", None))
    if getattr(args, "seed", None) is not None:
        cfg.data.seed = args.seed
        cfg.train.seed = args.seed
        cfg.eval.seed = args.seed
    if getattr(args, "precision", None) is not None:
        cfg.train.precision = args.precision
    if getattr(args, "preset", None) is not None:
        cfg.train.ablation_preset = args.preset
    if getattr(args, "max_steps", None) is not None:
        cfg.train.max_steps = args.max_steps
    if getattr(args, "backend", None) is not None:
        cfg.train.backend = args.backend
    cfg.validate()
    return cfg


def _echo_config(cfg: RunConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "config_resolved.ini")


def _file_digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _save_png(array01: np.ndarray, path: Path) -> None:
    from PIL import Image

    arr = np.round(np.asarray(array01, dtype=np.float64) * 255.0).astype(np.uint8)
    if arr.ndim == 3 and arr.shape[2] == 1:
        Image.fromarray(arr[:, :, 0], mode="L").save(path)
    else:
        Image.fromarray(arr, mode="RGB").save(path)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_generate(args) -> int:
    cfg = _load_run_config(args)
    out = _resolve_out(args, "generate")
    if out.exists() and any(out.iterdir()) and not args.force:
        raise IngestionError(f"output directory {out} is not empty (use --force)")
    samples = generate_synthetic_dataset(cfg.data)
    _echo_config(cfg, out)
    export_dataset(samples, out)
    meta = {"spec": dataclasses.asdict(cfg.data), "seed": cfg.data.seed,
            "n_samples": len(samples)}
    with open(out / "dataset_meta.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)
    print(f"wrote {len(samples)} samples to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_run_config(args)
    out = _resolve_out(args, "train")
    _echo_config(cfg, out)
    samples = load_dataset(args.data)
    if not samples:
        raise DataError(f"no samples found under {args.data}")
    h, w, c = samples[0].pixels.shape
    if (h, w, c) != tuple(cfg.model.image_size):
        cfg.model.image_size = (h, w, c)
        cfg.model.validate()
        dump_config(cfg, out / "config_resolved.ini")
    state, records, ckpts = train(
        samples, cfg.model, cfg.train, cfg.loss, out_dir=out, resume_from=args.resume
    )
    print(f"trained to step {state.step}; checkpoints: {[str(p) for p in ckpts]}")
    return 0


def _load_state_for_eval(ckpt_path: str, precision: int | None):
    state, _, train_cfg, loss_cfg, manifest = load_checkpoint(ckpt_path)
    if precision is not None:
        want = np.float32 if precision == 32 else np.float64
        for _, arr in state.named_arrays():
            if arr.dtype != want:
                break
        else:
            return state, train_cfg
        for comp in (state.gen_profile, state.gen_frontal, state.disc_profile,
                     state.disc_frontal, state.perceptual):
            comp.arrays = {k: v.astype(want) for k, v in comp.arrays.items()}
    return state, train_cfg


def cmd_eval(args) -> int:
    cfg = _load_run_config(args)
    out = _resolve_out(args, "eval")
    _echo_config(cfg, out)
    state, _ = _load_state_for_eval(args.ckpt, args.precision)
    samples = load_dataset(args.data)
    if not samples:
        raise DataError(f"no samples found under {args.data}")
    ecfg = cfg.eval

    if args.protocol == "folds":
        protocol = FoldProtocol(ecfg.n_folds, ecfg.same_pairs_per_subject,
                                ecfg.diff_pairs_per_subject)
        rng = np.random.Generator(np.random.PCG64(
            np.random.SeedSequence([ecfg.seed & 0xFFFFFFFF, 0xF01D])))
        folds = build_folds(samples, protocol, rng)
        reports, summary, curves = evaluate_folds(state, folds, ecfg)
        write_report_csv(reports, summary, out / "eval_report.csv")
        write_roc_csv(curves[0], out / "roc.csv")
        for i, curve in enumerate(curves):
            write_roc_csv(curve, out / f"roc_fold{i}.csv")
        print(f"folds: mean eer={summary['eer'][0]:.4f} (std {summary['eer'][1]:.4f})")
    elif args.protocol == "identify":
        gallery = build_gallery(samples)
        probes = [s for s in samples if s.domain is Domain.PROFILE]
        from .evaluator import EvalReport, identify, write_report_csv as _w

        rank_k, cmc = identify(state, gallery, probes,
                               [k for k in ecfg.ranks if k <= len(gallery)], ecfg.scorer)
        with open(out / "eval_report.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["fold", "metric", "value"])
            for k in sorted(rank_k):
                w.writerow([0, f"rank-{k}", f"{rank_k[k]:.8g}"])
        with open(out / "cmc.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["k", "rate"])
            for i, r in enumerate(cmc, start=1):
                w.writerow([i, f"{r:.8g}"])
        print(f"identify: {', '.join(f'rank-{k}={v:.4f}' for k, v in sorted(rank_k.items()))}")
    elif args.protocol == "yaw":
        gallery = build_gallery(samples)
        probes = [s for s in samples if s.domain is Domain.PROFILE]
        if not probes:
            raise ProtocolError("yaw protocol needs profile probes")
        per_yaw = evaluate_by_yaw(state, probes, gallery, ecfg.yaw_bin_edges, ecfg.scorer)
        write_yaw_csv(per_yaw, out / "yaw_rank1.csv")
        print("yaw bins:", {f"±{int(k)}°": f"{v[0]:.3f}(n={v[1]})" for k, v in sorted(per_yaw.items())})
    else:
        raise ConfigError(f"unknown protocol {args.protocol!r}")
    if args.plot:
        _maybe_plot_roc(out)
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_run_config(args)
    out = _resolve_out(args, "ablate")
    _echo_config(cfg, out)
    samples = load_dataset(args.data)
    if not samples:
        raise DataError(f"no samples found under {args.data}")
    results, split_digest = run_ablation_suite(
        samples, cfg.model, cfg.train, cfg.loss, cfg.eval, out_dir=out
    )
    with open(out / "ablation.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["preset", "eer", "auc", "gar@0.01"])
        for preset in ("cpl_l2", "cpl_l2_gan", "full"):
            _, report, curve = results[preset]
            gar01 = report.gar_at_far.get(0.01, 0.0)
            w.writerow([preset, f"{report.eer:.8g}", f"{report.auc:.8g}", f"{gar01:.8g}"])
            write_roc_csv(curve, out / f"roc_{preset}.csv")
    (out / "split_digest.txt").write_text(split_digest + "\n", encoding="utf-8")
    print(f"ablation done; split digest {split_digest[:16]}…")
    return 0


def cmd_reconstruct(args) -> int:
    cfg = _load_run_config(args)
    out = _resolve_out(args, "reconstruct")
    _echo_config(cfg, out)
    state, _ = _load_state_for_eval(args.ckpt, args.precision)
    samples = load_dataset(args.data)
    src_domain = Domain.PROFILE if args.direction == "p2f" else Domain.FRONTAL
    dst_domain = Domain.FRONTAL if args.direction == "p2f" else Domain.PROFILE
    sources = [s for s in samples if s.domain is src_domain]
    if not sources:
        raise ProtocolError(f"no {src_domain.value} images under {args.data}")
    sources = sources[: args.count] if args.count else sources
    references = {}
    for s in samples:
        if s.domain is dst_domain and (
            s.subject_id not in references or s.sample_id < references[s.subject_id].sample_id
        ):
            references[s.subject_id] = s

    pairs = []
    rows = []
    for s in sources:
        rec = cross_reconstruct(state, s, dst_domain, zero_skips=args.zero_skips)
        pairs.append((np.asarray(s.pixels, dtype=np.float64), rec))
        ref = references.get(s.subject_id)
        mse = float(((rec - np.asarray(ref.pixels, dtype=rec.dtype)) ** 2).mean()) if ref else float("nan")
        rows.append((s.sample_id, s.subject_id, mse))
    _save_png(reconstruction_panel(pairs), out / f"panel_{args.direction}.png")
    with open(out / "recon_mse.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "subject_id", "mse"])
        for r in rows:
            w.writerow([r[0], r[1], f"{r[2]:.8g}"])
    print(f"reconstructed {len(pairs)} images -> {out}")
    return 0


def _maybe_plot_roc(out: Path) -> None:
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        log.warning("matplotlib unavailable; skipping --plot")
        return
    for roc in sorted(out.glob("roc*.csv")):
        rows = list(csv.DictReader(open(roc, encoding="utf-8")))
        far = [float(r["far"]) for r in rows]
        gar = [float(r["gar"]) for r in rows]
        plt.plot(far, gar, label=roc.stem)
    plt.xlabel("FAR")
    plt.ylabel("GAR")
    plt.legend(fontsize=6)
    plt.savefig(out / "roc.png", dpi=120)
    plt.close()


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pfcpgan", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, needs_data=False, needs_ckpt=False):
        sp.add_argument("--config", default=None, help="INI run config")
        sp.add_argument("--out", default=None, help="output directory")
        sp.add_argument("--seed", type=int, default=None, help="override every config seed")
        sp.add_argument("--precision", type=int, choices=(32, 64), default=None)
        sp.add_argument("--backend", choices=("auto", "numba", "numpy"), default=None,
                        help="kernel backend override")
        if needs_data:
            sp.add_argument("--data", required=True, help="dataset directory")
        if needs_ckpt:
            sp.add_argument("--ckpt", required=True, help="checkpoint directory")

    sp = sub.add_parser("generate", help="write a synthetic dataset")
    common(sp)
    sp.add_argument("--force", action="store_true", help="allow a non-empty --out")
    sp.set_defaults(fn=cmd_generate)

    sp = sub.add_parser("train", help="train the coupled model")
    common(sp, needs_data=True)
    sp.add_argument("--resume", default=None, help="checkpoint directory to resume from")
    sp.add_argument("--max-steps", dest="max_steps", type=int, default=None)
    sp.add_argument("--preset", choices=("cpl_l2", "cpl_l2_gan", "full"), default=None)
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint")
    common(sp, needs_data=True, needs_ckpt=True)
    sp.add_argument("--protocol", choices=("folds", "identify", "yaw"), required=True)
    sp.add_argument("--plot", action="store_true", help="render simple plots from the CSVs")
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("ablate", help="train and compare the three loss presets")
    common(sp, needs_data=True)
    sp.set_defaults(fn=cmd_ablate)

    sp = sub.add_parser("reconstruct", help="cross-domain reconstruction panels")
    common(sp, needs_data=True, needs_ckpt=True)
    sp.add_argument("--direction", choices=("p2f", "f2p"), required=True)
    sp.add_argument("--count", type=int, default=8, help="number of inputs (0 = all)")
    sp.add_argument("--zero-skips", action="store_true",
                    help="decode from the bottleneck only")
    sp.set_defaults(fn=cmd_reconstruct)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("PFCPGAN_LOGLEVEL", "INFO"),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "backend", None):
        kernels.set_backend(args.backend)
    try:
        return args.fn(args)
    except PfcpganError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _exit_code(exc)
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
