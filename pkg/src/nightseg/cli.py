"""Command-line surface: dataset generation, training, evaluation, inference
panels, the threshold sweep, and overlap-based pair retrieval."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import __version__


def _cmd_datagen(args) -> int:
    from .datagen import generate_dataset

    manifests = generate_dataset(
        args.out, n_train=args.n_train, n_val=args.n_val, seed=args.seed,
        size=args.size, pose_shift_max=args.pose_shift_max,
    )
    for split, man in manifests.items():
        print(f"{split}: {len(man.entries)} samples")
    return 0


def _cmd_train(args) -> int:
    from dataclasses import replace

    from .core import ClassTaxonomy
    from .nets import load_checkpoint
    from .trainer import TrainConfig, generate_offline_pseudo, run

    cfg = TrainConfig.from_json(Path(args.config).read_text())
    if args.stage and args.stage != cfg.stage:
        cfg = replace(cfg, stage=args.stage)

    if cfg.stage == "selftrain" and not Path(cfg.pseudo_dir).exists():
        print(f"pseudo-label store {cfg.pseudo_dir} missing; generating from warm-up checkpoint")
        taxonomy = ClassTaxonomy.load(Path(args.data) / "taxonomy.json")
        bundle, _ = load_checkpoint(cfg.warmup_checkpoint, arch=cfg.arch)
        generate_offline_pseudo(bundle, args.data, cfg, taxonomy, cfg.pseudo_dir,
                                checkpoint_path=cfg.warmup_checkpoint)

    result = run(cfg, args.data, args.out, resume=args.resume,
                 deterministic=args.deterministic)
    print(f"finished {result.steps} steps; checkpoint: {result.final_checkpoint}")
    return 0


def _cmd_eval(args) -> int:
    from .evalcli import evaluate_checkpoint

    result = evaluate_checkpoint(args.ckpt, args.data, args.split)
    text = json.dumps(result, indent=2)
    if args.out:
        Path(args.out).write_text(text)
    print(text)
    return 0


def _cmd_infer(args) -> int:
    import torch

    from .core import ClassTaxonomy, LabelMap, ProbMap, argmax_labels, load_image
    from .evalcli import render_panel
    from .nets import classify_batch, load_checkpoint

    bundle, _ = load_checkpoint(args.ckpt)
    bundle.eval()
    taxonomy = (ClassTaxonomy.load(args.taxonomy) if args.taxonomy
                else _default_tax())
    img = load_image(args.image, "night")
    with torch.no_grad():
        p = classify_batch(bundle.enc(img.data.unsqueeze(0)), bundle)[0]
    pred = argmax_labels(ProbMap(p))
    render_panel(img, pred, taxonomy=taxonomy, out_path=args.panel)
    print(f"wrote {args.panel}")
    return 0


def _default_tax():
    from .core import default_taxonomy

    return default_taxonomy()


def _cmd_sweep_tau(args) -> int:
    from .evalcli import sweep_tau
    from .trainer import TrainConfig

    cfg = TrainConfig.from_json(Path(args.config).read_text())
    taus = tuple(float(t) for t in args.taus.split(","))
    rows = sweep_tau(cfg, args.data, args.out, taus=taus)
    for r in rows:
        print(f"tau={r['tau']:.2f}  miou={r['miou']:.4f}  "
              f"static={r['n_static']}  dna={r['n_dna']}")
    return 0


def _cmd_retrieve(args) -> int:
    from .evalcli import retrieve_pairs

    hits = retrieve_pairs(args.ckpt, args.data, split=args.split, lor_min=args.lor_min)
    text = json.dumps(hits, indent=2)
    if args.out:
        Path(args.out).write_text(text)
    print(f"{len(hits)} pairs with overlap ratio >= {args.lor_min}")
    if not args.out:
        print(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nightseg",
                                description="day-to-night segmentation adaptation toolkit")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    d = sub.add_parser("datagen", help="generate a synthetic day/night corpus")
    d.add_argument("--out", required=True)
    d.add_argument("--n-train", type=int, default=200)
    d.add_argument("--n-val", type=int, default=50)
    d.add_argument("--size", type=int, default=128)
    d.add_argument("--pose-shift-max", type=float, default=12.0)
    d.add_argument("--seed", type=int, default=17)
    d.set_defaults(func=_cmd_datagen)

    t = sub.add_parser("train", help="run the warm-up or self-training stage")
    t.add_argument("--stage", choices=("warmup", "selftrain"), default=None,
                   help="override the stage in the config file")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--resume", default=None)
    t.add_argument("--deterministic", action="store_true")
    t.set_defaults(func=_cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="val")
    e.add_argument("--out", default=None)
    e.set_defaults(func=_cmd_eval)

    i = sub.add_parser("infer", help="segment one image and write a panel")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--image", required=True)
    i.add_argument("--panel", required=True)
    i.add_argument("--taxonomy", default=None)
    i.set_defaults(func=_cmd_infer)

    s = sub.add_parser("sweep-tau", help="self-train once per overlap threshold")
    s.add_argument("--config", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--taus", default="0,0.25,0.5,0.75,1.0")
    s.set_defaults(func=_cmd_sweep_tau)

    r = sub.add_parser("retrieve", help="emit day/night pairs passing the overlap filter")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--split", default="train")
    r.add_argument("--lor-min", type=float, default=0.5)
    r.add_argument("--out", default=None)
    r.set_defaults(func=_cmd_retrieve)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
