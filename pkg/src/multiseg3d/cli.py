"""Command-line entry point.

Subcommands: gen-scenes, train, finetune, eval, ablate-prompts, grad-check,
selftest. Exit codes: 0 success, 1 contract/numeric error, 2 usage error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .checkpoint import load_checkpoint, model_from_checkpoint, save_checkpoint
from .config import TrainConfig, load_config, save_config
from .errors import MultisegError
from .harness import (ablate_prompts, ablation_to_csv, evaluate_model,
                      finetune_trick, selftest, train)
from .scene import load_scene, save_scene
from .scenegen import SceneRecipe, generate_scene


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="multiseg3d",
                                     description="Unified multi-task 3D scene segmentation")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint=False, scenes=False):
        p.add_argument("--config", type=Path, default=None, help="key=value config file")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--out", type=Path, default=Path("out"), help="output directory")
        if scenes:
            p.add_argument("--scenes", type=Path, required=True, help="scene directory")
        if checkpoint:
            p.add_argument("--checkpoint", type=Path, required=True)

    common(sub.add_parser("gen-scenes", help="generate train/val/ov scene sets"))
    common(sub.add_parser("train", help="train and write the best checkpoint"),
           scenes=True)
    common(sub.add_parser("finetune", help="two-stage fine-tuning trick"),
           checkpoint=True, scenes=True)
    common(sub.add_parser("eval", help="evaluate a checkpoint"),
           checkpoint=True, scenes=True)
    ablate = sub.add_parser("ablate-prompts", help="click-placement sweep")
    common(ablate, checkpoint=True, scenes=True)
    ablate.add_argument("--r-d", type=float, nargs="*",
                        default=[0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0])
    common(sub.add_parser("grad-check", help="finite-difference gradient suite"))
    common(sub.add_parser("selftest", help="run the invariant battery"))
    return parser


def _load_cfg(args) -> TrainConfig:
    cfg = load_config(args.config) if args.config else TrainConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg.validate()


def _load_scene_dir(path: Path, prefix: str) -> list:
    files = sorted(path.glob(f"{prefix}_*.scene.json"))
    return [load_scene(f) for f in files]


def _default_recipe(cfg: TrainConfig, novel: bool) -> SceneRecipe:
    counts = {"chair": 2, "table": 1, "sofa": 1}
    if novel:
        counts["lamp"] = 1
        counts["cabinet"] = 1
    return SceneRecipe(counts=counts, total_points=cfg.points_per_scene,
                       superpoint_target=cfg.superpoint_target,
                       extra_classes=("lamp", "cabinet"))


def cmd_gen_scenes(args) -> int:
    cfg = _load_cfg(args)
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    base = _default_recipe(cfg, novel=False)
    ov = _default_recipe(cfg, novel=True)
    for kind, count, recipe, seed0 in (("train", cfg.n_train_scenes, base, 0),
                                       ("val", cfg.n_val_scenes, base, 10_000),
                                       ("ov", max(2, cfg.n_val_scenes // 2), ov, 20_000)):
        for i in range(count):
            scene = generate_scene(cfg.seed + seed0 + i, recipe)
            save_scene(scene, out / f"{kind}_{i:04d}.scene.json")
    save_config(cfg, out / "config.txt")
    print(f"wrote scenes to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    train_scenes = _load_scene_dir(args.scenes, "train")
    val_scenes = _load_scene_dir(args.scenes, "val") or train_scenes
    result = train(cfg, train_scenes, val_scenes)
    args.out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.checkpoint, args.out / "checkpoint.json")
    report = evaluate_model(model_from_checkpoint(result.checkpoint), val_scenes)
    (args.out / "metrics.txt").write_text(report.to_text(), encoding="utf-8")
    print(f"best Overall {result.checkpoint.best_overall:.2f} "
          f"(epoch {result.checkpoint.epoch}); wrote {args.out}/checkpoint.json")
    return 0


def cmd_finetune(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    if args.config is not None:
        ck.config = load_config(args.config)
    if args.seed is not None:
        ck.config.seed = args.seed
    train_scenes = _load_scene_dir(args.scenes, "train")
    val_scenes = _load_scene_dir(args.scenes, "val") or train_scenes
    result = finetune_trick(ck, train_scenes, val_scenes)
    args.out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.checkpoint, args.out / "checkpoint.json")
    print(f"finetuned Overall {result.checkpoint.best_overall:.2f}; "
          f"wrote {args.out}/checkpoint.json")
    return 0


def cmd_eval(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    model = model_from_checkpoint(ck)
    scenes = _load_scene_dir(args.scenes, "val") or _load_scene_dir(args.scenes, "train")
    ov_scenes = _load_scene_dir(args.scenes, "ov") or None
    report = evaluate_model(model, scenes, ov_scenes=ov_scenes)
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "metrics.txt").write_text(report.to_text(), encoding="utf-8")
    print(report.to_text(), end="")
    return 0


def cmd_ablate(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    model = model_from_checkpoint(ck)
    scenes = (_load_scene_dir(args.scenes, "train")
              or _load_scene_dir(args.scenes, "val"))
    rows = ablate_prompts(model, scenes, args.r_d)
    csv = ablation_to_csv(rows)
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "ablation.csv").write_text(csv, encoding="utf-8")
    print(csv, end="")
    return 0


def cmd_grad_check(args) -> int:
    from . import autodiff as ad
    from .rng import make_rng

    failures = 0
    for op_name, build in _grad_check_cases():
        for trial in range(20):
            rng = make_rng(5150, op_name, trial)
            params, fn = build(rng)
            loss = fn()
            analytic = ad.grads_of(loss, params)
            ok = True
            for p, g in zip(params, analytic):
                flat = p.data.ravel()
                gf = g.ravel()
                for j in range(flat.size):
                    orig = flat[j]
                    flat[j] = orig + 1e-5
                    fp = fn().item()
                    flat[j] = orig - 1e-5
                    fm = fn().item()
                    flat[j] = orig
                    num = (fp - fm) / 2e-5
                    if abs(num - gf[j]) > 1e-4 * max(abs(num), abs(gf[j]), 1e-3):
                        ok = False
            if not ok:
                failures += 1
                print(f"FAIL {op_name} trial {trial}", file=sys.stderr)
    print("grad-check:", "ok" if failures == 0 else f"{failures} failures")
    return 0 if failures == 0 else 1


def _grad_check_cases():
    from . import autodiff as ad

    def softmax_case(rng):
        x = ad.parameter(rng.normal(size=(3, 4)))
        w = ad.Tensor(rng.normal(size=(3, 4)))
        return [x], lambda: ad.tsum(ad.mul(ad.softmax_rows(x), w))

    def attention_case(rng):
        q = ad.parameter(rng.normal(size=(4, 8)))
        k = ad.parameter(rng.normal(size=(5, 8)))
        return [q, k], lambda: ad.tmean(ad.matmul(ad.softmax_rows(
            ad.mul(ad.matmul(q, ad.transpose(k)), 0.35)), k))

    def bce_dice_case(rng):
        x = ad.parameter(rng.normal(size=(2, 6)))
        t = (rng.uniform(size=(2, 6)) > 0.5).astype(float)
        t[:, 0] = 1.0
        return [x], lambda: ad.add(ad.tmean(ad.bce_logits(x, t)),
                                   ad.tmean(ad.dice_rows(ad.sigmoid(x), t)))

    return [("softmax", softmax_case), ("attention", attention_case),
            ("bce+dice", bce_dice_case)]


def cmd_selftest(args) -> int:
    rows = selftest()
    ok = True
    for name, passed, detail in rows:
        print(f"{'PASS' if passed else 'FAIL'}  {name}" + (f"  ({detail})" if detail else ""))
        ok = ok and passed
    return 0 if ok else 1


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "gen-scenes": cmd_gen_scenes,
        "train": cmd_train,
        "finetune": cmd_finetune,
        "eval": cmd_eval,
        "ablate-prompts": cmd_ablate,
        "grad-check": cmd_grad_check,
        "selftest": cmd_selftest,
    }
    try:
        return handlers[args.command](args)
    except MultisegError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
