"""``san`` command line: synth, import-csv, train, evaluate, gradcheck.

Exit codes: 0 success, 1 gradient check failure or internal state error,
2 configuration/usage error, 3 data error, 4 numeric error,
5 missing prerequisite checkpoint.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

from . import __version__
from .config import RunConfig, load_config
from .dataset import (SynthConfig, load_feature_csv, load_feature_file, make_split,
                      sample_training_pairs, synth_generate, write_feature_file)
from .errors import ConfigError, DataError, ModeError, PrerequisiteError, SanError
from .gradcheck import run_gradchecks
from .retrieval import Pipeline, embedding_dump, evaluate, variant_name
from .training import (load_checkpoint, save_checkpoint, train_stage1, train_stage2,
                       train_stage3)

log = logging.getLogger("san")

CKPT_NAMES = {1: "stage1.ckpt", 2: "stage2.ckpt", "2-nommd": "stage2_nommd.ckpt",
              3: "stage3.ckpt"}

ABLATION_MATRIX = (
    ("g1", dict(use_stage2=False, use_mmd=False, use_siamese=False)),
    ("g1g2", dict(use_stage2=True, use_mmd=False, use_siamese=False)),
    ("g1g2mmd", dict(use_stage2=True, use_mmd=True, use_siamese=False)),
    ("full", dict(use_stage2=True, use_mmd=True, use_siamese=True)),
)


def _positive_int(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _non_negative_int(text):
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {value}")
    return value


def _write_text(path: Path, text: str):
    try:
        path.write_text(text, encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc.strerror}") from None


def _load_run(args) -> RunConfig:
    cfg = load_config(args.config)
    if getattr(args, "out_dir", None):
        cfg.out_dir = Path(args.out_dir)
    if not cfg.features.is_file():
        raise DataError(f"feature file {cfg.features} does not exist")
    return cfg


def _prepare(cfg: RunConfig):
    store = load_feature_file(cfg.features)
    split = make_split(store, cfg.split_spec(store))
    return store, split


def _ckpt(cfg: RunConfig, key):
    path = cfg.out_dir / CKPT_NAMES[key]
    if not path.is_file():
        raise PrerequisiteError(f"missing prerequisite checkpoint {path}")
    return load_checkpoint(path)


def cmd_synth(args):
    rank = None if args.latent_rank == 0 else args.latent_rank
    cfg = SynthConfig(args.classes, args.sketches_per_class, args.images_per_class, args.dim,
                      args.domain_gap_noise, args.image_noise, args.seed, latent_rank=rank)
    store = synth_generate(cfg)
    try:
        write_feature_file(store, args.output)
    except OSError as exc:
        raise DataError(f"cannot write {args.output}: {exc.strerror}") from None
    n_sk = int((store.domains == 0).sum())
    print(f"wrote {args.output}: {len(store)} records ({n_sk} sketches, "
          f"{len(store) - n_sk} images), {cfg.classes} classes, dim {cfg.feature_dim}")
    return 0


def cmd_import_csv(args):
    store = load_feature_csv(args.input)
    try:
        write_feature_file(store, args.output)
    except OSError as exc:
        raise DataError(f"cannot write {args.output}: {exc.strerror}") from None
    print(f"wrote {args.output}: {len(store)} records, dim {store.feature_dim}")
    return 0


def _train_one(cfg: RunConfig, stage, store, split, pairs, epochs=None, no_mmd=False):
    stage_cfg = cfg.stages[stage]
    if epochs is not None:
        stage_cfg = stage_cfg.replace(epochs=epochs)
    t0 = time.perf_counter()
    if stage == 1:
        ckpt, train_log = train_stage1(stage_cfg, pairs, store)
        key = 1
    elif stage == 2:
        stage1 = _ckpt(cfg, 1)
        if no_mmd:
            stage_cfg = stage_cfg.replace(weights=stage_cfg.weights.__class__(
                stage_cfg.weights.alpha, stage_cfg.weights.beta, 0.0, stage_cfg.weights.margin))
        ckpt, train_log = train_stage2(stage_cfg, pairs, store, stage1, use_mmd=not no_mmd)
        key = "2-nommd" if no_mmd else 2
    else:
        stage1 = _ckpt(cfg, 1)
        stage2 = _ckpt(cfg, 2)
        ckpt, train_log = train_stage3(stage_cfg, store, split, stage1, stage2)
        key = 3
    path = cfg.out_dir / CKPT_NAMES[key]
    save_checkpoint(ckpt, path)
    _write_text(path.with_name(path.stem + "_log.tsv"), train_log.to_tsv())
    print(f"stage {stage}{' (no MMD)' if no_mmd else ''}: {ckpt.epochs_completed} epochs "
          f"in {time.perf_counter() - t0:.1f}s -> {path}")


def cmd_train(args):
    cfg = _load_run(args)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    store, split = _prepare(cfg)
    summary = split.summary()
    print("split: " + ", ".join(f"{k}={v}" for k, v in summary.items()))
    pairs = None
    if args.stage in ("1", "2", "all"):
        pairs = sample_training_pairs(store, split, cfg.pairs_per_class, cfg.pair_seed)
    if args.stage == "all":
        _train_one(cfg, 1, store, split, pairs, args.epochs)
        _train_one(cfg, 2, store, split, pairs, args.epochs)
        if not args.skip_ablation:
            _train_one(cfg, 2, store, split, pairs, args.epochs, no_mmd=True)
        _train_one(cfg, 3, store, split, pairs, args.epochs)
    else:
        if args.no_mmd and args.stage != "2":
            raise ConfigError("--no-mmd only applies to stage 2")
        _train_one(cfg, int(args.stage), store, split, pairs, args.epochs, args.no_mmd)
    return 0


def _pipeline(cfg: RunConfig, use_stage2, use_mmd, use_siamese) -> Pipeline:
    if use_mmd and not use_stage2:
        raise ConfigError("the MMD variant requires the refinement stage")
    if use_siamese and not (use_stage2 and use_mmd):
        raise ConfigError("the Siamese projection requires the MMD-trained refinement stage")
    stage1 = _ckpt(cfg, 1)
    stage2 = _ckpt(cfg, 2 if use_mmd else "2-nommd") if use_stage2 else None
    stage3 = _ckpt(cfg, 3) if use_siamese else None
    return Pipeline(stage1, stage2, stage3, variant_name(use_stage2, use_mmd, use_siamese))


def _report(cfg, pipeline, split, store, mode, suffix, dump):
    report = evaluate(pipeline, split, store, cfg.k, cfg.n_z, cfg.eval_seed, mode=mode,
                      config_digest=cfg.digest(), min_denominator=cfg.ap_min_denominator)
    stem = f"metrics_{mode}" + (f"_{suffix}" if suffix else "")
    _write_text(cfg.out_dir / f"{stem}.tsv", report.to_tsv())
    _write_text(cfg.out_dir / f"{stem}.txt", report.to_text())
    if dump:
        name = f"embeddings_{mode}" + (f"_{suffix}" if suffix else "") + ".tsv"
        _write_text(cfg.out_dir / name, embedding_dump(pipeline, split, store, cfg.n_z,
                                                       cfg.eval_seed))
    print(f"{report.variant:16s} precision@{cfg.k}={report.mean_precision:.4f} "
          f"map@{cfg.k}={report.mean_ap:.4f} queries={report.query_count} -> {stem}.tsv")
    return report


def cmd_evaluate(args):
    cfg = _load_run(args)
    if args.k is not None:
        cfg.k = args.k
    if args.n_z is not None:
        cfg.n_z = args.n_z
    mode = args.mode or cfg.split_mode
    if mode != cfg.split_mode:
        raise ModeError(f"--mode {mode} but the configured split is {cfg.split_mode}")
    store, split = _prepare(cfg)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    if args.ablation_matrix:
        for suffix, flags in ABLATION_MATRIX:
            _report(cfg, _pipeline(cfg, **flags), split, store, mode, suffix, args.dump_embeddings)
        return 0
    use_stage2 = cfg.use_stage2 and not args.no_stage2
    use_mmd = cfg.use_mmd and not args.no_mmd and use_stage2
    use_siamese = cfg.use_siamese and not args.no_siamese and use_mmd
    if args.no_stage2 or args.no_mmd or args.no_siamese:
        suffix = {(False, False, False): "g1", (True, False, False): "g1g2",
                  (True, True, False): "g1g2mmd"}.get((use_stage2, use_mmd, use_siamese), "")
    else:
        suffix = ""
    _report(cfg, _pipeline(cfg, use_stage2, use_mmd, use_siamese), split, store, mode, suffix,
            args.dump_embeddings)
    return 0


def cmd_gradcheck(args):
    t0 = time.perf_counter()
    results = run_gradchecks(eps=args.eps, seed=args.seed)
    print(f"eps={args.eps:g} tolerance={results[0].tolerance:g}")
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:28s} max_rel_error={r.max_rel_error:.3e}"
              f"  ({r.seconds:.2f}s)")
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed "
          f"in {time.perf_counter() - t0:.1f}s")
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="san", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic cross-domain SANF feature file")
    p.add_argument("--classes", type=_positive_int, default=20)
    p.add_argument("--sketches-per-class", type=_positive_int, default=25)
    p.add_argument("--images-per-class", type=_positive_int, default=50)
    p.add_argument("--dim", type=_positive_int, default=32)
    p.add_argument("--domain-gap-noise", type=float, default=SynthConfig.domain_gap_noise)
    p.add_argument("--image-noise", type=float, default=SynthConfig.image_noise)
    p.add_argument("--latent-rank", type=_non_negative_int, default=SynthConfig.latent_rank,
                   help="dimension of the subspace holding the class means (0: full)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("import-csv", help="convert id,label,domain,v0.. CSV to SANF")
    p.add_argument("input")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_import_csv)

    p = sub.add_parser("train", help="train one stage (or all) from a run config")
    p.add_argument("--config", required=True)
    p.add_argument("--stage", choices=["1", "2", "3", "all"], required=True)
    p.add_argument("--epochs", type=_non_negative_int, help="override the stage epoch budget")
    p.add_argument("--no-mmd", action="store_true",
                   help="stage 2 without the MMD term, saved as stage2_nommd.ckpt")
    p.add_argument("--skip-ablation", action="store_true",
                   help="with --stage all, do not train the no-MMD stage-2 variant")
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="Precision@K and mAP@K on the test split")
    p.add_argument("--config", required=True)
    p.add_argument("--mode", choices=["zsl", "gzsl"])
    p.add_argument("--k", type=_positive_int)
    p.add_argument("--n-z", type=_positive_int)
    p.add_argument("--no-stage2", action="store_true")
    p.add_argument("--no-mmd", action="store_true")
    p.add_argument("--no-siamese", action="store_true")
    p.add_argument("--ablation-matrix", action="store_true",
                   help="evaluate G1, G1+G2, G1+G2+MMD and G1+G2+MMD+P")
    p.add_argument("--dump-embeddings", action="store_true")
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gradcheck", help="finite-difference check of every loss composite")
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except SanError as exc:
        print(f"san {args.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
