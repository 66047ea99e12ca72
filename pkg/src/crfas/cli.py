"""Command-line entry point: synth, split, train, eval, gradcheck, lemmacheck.

Exit codes: 0 success, 1 runtime failure (one-line reason on stderr),
2 usage errors. Flags override config-file fields. Every command echoes
its effective configuration into its output directory.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import data as dat
from . import losses, trainer
from .augment import compose_views
from .diffcore import Tensor, grad_check
from .model import ModelConfig, build_model


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="crfas", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("synth", help="generate the synthetic live/spoof dataset")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--subjects", type=int, default=10)
    p.add_argument("--sessions", type=int, default=3)
    p.add_argument("--attacks", default="print,replay")
    p.add_argument("--per-cell", type=int, default=1)
    p.add_argument("--side", type=int, default=24)
    p.add_argument("--datasets", default="synth0")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise", type=float, default=0.02)
    p.add_argument("--overlay", type=float, default=0.08)

    p = sub.add_parser("split", help="partition a manifest with one of the 5 protocols")
    p.add_argument("--manifest", required=True, type=Path)
    p.add_argument("--protocol", required=True, type=int)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--labeled-pct", type=float, help="protocols 1 and 4")
    p.add_argument("--extra-mode", choices=["none", "live_only_p", "live_spoof_p"], help="protocol 2")
    p.add_argument("--extra-pct", type=float, help="protocol 2")
    p.add_argument("--unlabeled-dataset", help="protocol 3")
    p.add_argument("--test-dataset", help="protocols 3 and 4")
    p.add_argument("--unlabeled-attack", help="protocol 5")
    p.add_argument("--test-attack", help="protocol 5")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train", help="train on a split directory")
    p.add_argument("--split-dir", required=True, type=Path, help="directory written by the split command")
    p.add_argument("--data-root", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--config", type=Path, help="JSON train config; flags below override its fields")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--supervised-only", action="store_true", help="ignore the unlabeled list")
    p.add_argument("--dump-views", action="store_true", help="write the first batch's two views as images")

    p = sub.add_parser("eval", help="score a test manifest from a checkpoint")
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--test", required=True, type=Path)
    p.add_argument("--data-root", required=True, type=Path)
    p.add_argument("--dev", type=Path)
    p.add_argument("--threshold", type=float)
    p.add_argument("--out", required=True, type=Path)

    p = sub.add_parser("gradcheck", help="finite differences vs reverse-mode on the full loss")
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--coords", type=int, default=24, help="random coordinates checked per parameter")

    p = sub.add_parser("lemmacheck", help="verify the dense-similarity product decomposition")
    p.add_argument("--trials", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    return parser


def _cmd_synth(args) -> int:
    cfg = dat.SynthConfig(
        subjects=args.subjects,
        sessions=args.sessions,
        attacks=tuple(a for a in args.attacks.split(",") if a),
        per_cell=args.per_cell,
        side=args.side,
        datasets=tuple(d for d in args.datasets.split(",") if d),
        seed=args.seed,
        noise_std=args.noise,
        overlay_amp=args.overlay,
    )
    records = dat.generate_synthetic(cfg, args.out)
    (args.out / "synth_config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    print(f"wrote {len(records)} images under {args.out}")
    return 0


def _cmd_split(args) -> int:
    records = dat.read_manifest(args.manifest)
    params = {}
    if args.labeled_pct is not None:
        params["label_fraction"] = args.labeled_pct / 100.0
    if args.extra_mode is not None:
        params["extra_mode"] = args.extra_mode
    if args.extra_pct is not None:
        params["extra_fraction"] = args.extra_pct / 100.0
    if args.unlabeled_dataset is not None:
        params["unlabeled_dataset"] = args.unlabeled_dataset
    if args.test_dataset is not None:
        params["test_dataset"] = args.test_dataset
    if args.unlabeled_attack is not None:
        params["unlabeled_attack"] = args.unlabeled_attack
    if args.test_attack is not None:
        params["test_attack"] = args.test_attack
    spec = dat.SplitSpec(protocol=args.protocol, params=params, seed=args.seed)
    result = dat.split(records, spec)
    provenance = {"protocol": args.protocol, "params": json.dumps(params, sort_keys=True), "seed": args.seed}
    paths = dat.write_split(result, args.out, provenance)
    (args.out / "split_config.json").write_text(
        json.dumps({"protocol": args.protocol, "params": params, "seed": args.seed}, indent=2, sort_keys=True) + "\n"
    )
    for key, records_ in result.lists().items():
        print(f"{key}: {len(records_)} records -> {paths[key]}")
    return 0


def _cmd_train(args) -> int:
    if args.config is not None:
        config = trainer.TrainConfig.from_dict(json.loads(args.config.read_text()))
    else:
        config = trainer.TrainConfig()
    for flag, attr in (("epochs", "epochs"), ("batch_size", "batch_size"), ("seed", "seed"), ("alpha", "alpha")):
        value = getattr(args, flag)
        if value is not None:
            setattr(config, attr, value)
    split_result = dat.SplitResult(
        labeled_train=dat.read_manifest(args.split_dir / "labeled.train.txt"),
        unlabeled_train=dat.read_manifest(args.split_dir / "unlabeled.train.txt"),
        dev=dat.read_manifest(args.split_dir / "dev.txt"),
        test=dat.read_manifest(args.split_dir / "test.txt"),
    )
    if args.supervised_only:
        split_result.unlabeled_train = []
    if args.dump_views:
        args.out.mkdir(parents=True, exist_ok=True)
        first_batch = split_result.labeled_train[: config.batch_size]
        for index, record in enumerate(first_batch):
            img = dat.load_image(record, args.data_root, config.dtype).data[0]
            v1, v2 = compose_views(img, config.augment, config.seed, index)
            for tag, view in (("view1", v1), ("view2", v2)):
                pixels = np.clip(np.round(view.transpose(1, 2, 0) * 255), 0, 255).astype(np.uint8)
                dat.write_image(args.out / f"debug_{tag}_{index:03d}.fimg", pixels)
    model = build_model(config.model, config.seed, config.dtype)
    final = trainer.fit(model, split_result, config, args.out, args.data_root)
    print(f"final checkpoint: {final}")
    return 0


def _cmd_eval(args) -> int:
    test_records = dat.read_manifest(args.test)
    dev_records = dat.read_manifest(args.dev) if args.dev is not None else None
    summary = trainer.evaluate(
        args.checkpoint, test_records, args.data_root,
        dev_records=dev_records, threshold=args.threshold, out_dir=args.out,
    )
    (args.out / "eval_config.json").write_text(
        json.dumps(
            {
                "checkpoint": str(args.checkpoint),
                "test": str(args.test),
                "dev": str(args.dev) if args.dev is not None else None,
                "threshold": args.threshold,
            },
            indent=2, sort_keys=True,
        ) + "\n"
    )
    for key, value in summary.items():
        print(f"{key}={value:.6g}")
    return 0


def _cmd_gradcheck(args) -> int:
    # small f64 model and batch keep the finite-difference sweep quick
    config = ModelConfig(input_size=16, backbone_channels=(4, 6, 6), feature_side=2, embed_dim=6)
    model = build_model(config, args.seed, "f64")
    rng = np.random.default_rng(args.seed)
    x1 = Tensor(rng.random((2, 3, 16, 16)))
    x2 = Tensor(rng.random((2, 3, 16, 16)))
    labels = np.array([0, 1])
    mask = np.array([True, True])

    def loss_fn():
        views = model.forward_views(x1, x2, "train")
        _, total = losses.loss_overall(views, labels, mask, alpha=0.1)
        return total

    report = grad_check(loss_fn, dict(model.named_params()), h=args.h, tol=args.tol,
                        max_coords_per_param=args.coords, seed=args.seed)
    for line in report.format_lines():
        print(line)
    return 0 if report.passed else 1


def _cmd_lemmacheck(args) -> int:
    rng = np.random.default_rng(args.seed)
    sides = [1, 4, 16, 64]
    dims = [2, 8, 64]
    worst = 0.0
    for trial in range(args.trials):
        s2 = sides[trial % len(sides)]
        d = dims[(trial // len(sides)) % len(dims)]
        h = rng.normal(size=(s2, d))
        f = rng.normal(size=(s2, d))
        terms = losses.lemma_terms(h, f)
        worst = max(worst, abs(terms.lhs - terms.rhs) / max(1.0, abs(terms.lhs)))
    verdict = "PASS" if worst < 1e-6 else "FAIL"
    print(f"{verdict}: {args.trials} trials, max relative deviation {worst:.3e}")
    return 0 if worst < 1e-6 else 1


_COMMANDS = {
    "synth": _cmd_synth,
    "split": _cmd_split,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "gradcheck": _cmd_gradcheck,
    "lemmacheck": _cmd_lemmacheck,
}


def run(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.verb](args)
    except Exception as e:  # noqa: BLE001 - single top-level reporting point
        print(f"error: {e}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())
