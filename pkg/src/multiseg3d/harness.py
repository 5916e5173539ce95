"""Training loop, evaluation protocol, prompt ablation and the two-stage
fine-tuning trick. Everything is a pure function of (config, seed, scenes):
fixed seeds give bit-identical checkpoints and reports.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import np_sigmoid
from .checkpoint import Checkpoint, checkpoint_from_model, model_from_checkpoint
from .config import TrainConfig
from .decoder import sample_query_count, sample_query_indices, superpoint_to_point
from .errors import AmbiguityError, ContractError, NumericError
from .losses import (PromptTargets, base_loss, clamp_log_tau, contrastive_loss,
                     distill_class_loss, distill_mask_loss, ranking_loss,
                     similarity_matrix, top_k_region, total_loss)
from .matching import (Targets, admissible_pseudo_masks, assignment_cost,
                       hungarian_padded, split_and_rematch)
from .metrics import (InstanceGT, InstancePrediction, MetricsReport, ap_summary,
                      interactive_metrics, matched_instance_miou, panoptic_quality,
                      referring_metrics, semantic_miou)
from .model import Model, forward_scene, init_model, scene_knn
from .optim import AdamWState, adamw_step
from .prompts import embed_class_names
from .rng import make_rng, stable_hash64
from .scene import PromptSet, Scene, VocabularySplit
from .scenegen import generate_pseudo_masks, make_text_expression, sample_vision_prompt
from .tasks import gt_panoptic_segments, panoptic_segments_from_map, run_all_tasks
from .validation import check_scenes


# ---------------------------------------------------------------------------
# per-scene static preparation


@dataclass
class SceneBundle:
    """Cached per-scene statics: k-NN map, pseudo masks, targets, expressions."""

    scene: Scene
    index: int
    knn: np.ndarray
    targets_full: Targets               # over all M superpoint columns
    pseudo_sp: np.ndarray               # (n_pseudo, M) pooled pseudo masks
    admissible: list[int]
    describable: list[tuple[int, tuple[str, ...]]]
    instance_sp: dict[int, np.ndarray]  # instance -> (M,) pooled gt mask


def full_targets(scene: Scene, base_class_ids: list[int] | None = None) -> Targets:
    """Ground-truth segments over all M columns; novel-class instances are
    filtered out (the label-leakage rule: held-out classes never supervise)."""
    masks, classes, inst_ids = [], [], []
    for inst in scene.thing_instances():
        cls = scene.instance_class(inst)
        if base_class_ids is not None and cls not in base_class_ids:
            continue
        masks.append(scene.pool_point_mask(scene.instance_point_mask(inst)))
        classes.append(cls)
        inst_ids.append(inst)
    for cls, is_stuff in enumerate(scene.stuff_flags):
        if is_stuff:
            pm = scene.stuff_point_mask(cls)
            if pm.any():
                masks.append(scene.pool_point_mask(pm))
                classes.append(cls)
                inst_ids.append(-1)
    return Targets(masks=np.array(masks) if masks else np.zeros((0, scene.n_superpoints)),
                   classes=np.array(classes, dtype=int),
                   instance_ids=np.array(inst_ids, dtype=int))


def restrict_targets(targets: Targets, idx: np.ndarray) -> Targets:
    sub = targets.masks[:, idx]
    keep = sub.sum(axis=1) > 0
    return Targets(masks=sub[keep], classes=targets.classes[keep],
                   instance_ids=targets.instance_ids[keep])


def localize_targets(targets: Targets, model: Model) -> Targets:
    """Map scene-table class ids onto the model's class-head columns.

    Every training target class must be in the base split (novel classes
    never appear in training scenes by protocol).
    """
    local = {g: l for l, g in enumerate(model.base_class_ids)}
    try:
        classes = np.array([local[int(c)] for c in targets.classes], dtype=int)
    except KeyError as exc:
        raise ContractError(f"training target carries novel class {exc}") from None
    return Targets(masks=targets.masks, classes=classes,
                   instance_ids=targets.instance_ids)


def expression_seed(root_seed: int, scene_index: int) -> int:
    """Stable across steps so eval sees the expressions training memorized."""
    return stable_hash64("expr", root_seed, scene_index)


def prepare_scene(scene: Scene, config: TrainConfig, root_seed: int,
                  scene_index: int,
                  base_class_ids: list[int] | None = None) -> SceneBundle:
    """Training statics for one scene. Instances of novel (non-base) classes
    supervise nothing here; they stay reachable only through the
    unsupervised pseudo masks."""
    base_instances = [i for i in scene.thing_instances()
                      if base_class_ids is None
                      or scene.instance_class(i) in base_class_ids]
    pseudo = generate_pseudo_masks(scene, seed=root_seed)
    pseudo_sp = np.array([scene.pool_point_mask(m) for m in pseudo.masks]) \
        if len(pseudo) else np.zeros((0, scene.n_superpoints))
    gt_point_masks = [scene.instance_point_mask(i) for i in base_instances]
    admissible = admissible_pseudo_masks(pseudo.masks, np.array(gt_point_masks)) \
        if len(pseudo) and gt_point_masks else list(range(len(pseudo)))
    describable = []
    for inst in base_instances:
        try:
            tokens = make_text_expression(scene, inst,
                                          seed=expression_seed(root_seed, scene_index))
        except AmbiguityError:
            continue
        describable.append((inst, tokens))
    instance_sp = {inst: scene.pool_point_mask(scene.instance_point_mask(inst))
                   for inst in base_instances}
    return SceneBundle(scene=scene, index=scene_index, knn=scene_knn(scene),
                       targets_full=full_targets(scene, base_class_ids),
                       pseudo_sp=pseudo_sp, admissible=admissible,
                       describable=describable, instance_sp=instance_sp)


# ---------------------------------------------------------------------------
# the batch objective


@dataclass
class BatchParts:
    """Inter-task loss values of one batch, for toggling and inspection."""

    base: ad.Tensor
    v_to_g: ad.Tensor | None = None
    v_to_r: ad.Tensor | None = None
    contrastive: ad.Tensor | None = None
    rank: ad.Tensor | None = None


def _scene_training_pass(model: Model, bundle: SceneBundle, seed: int,
                         config: TrainConfig):
    """Forward + matching + base loss for one scene; returns the pieces the
    batch-level inter-task losses need."""
    scene = bundle.scene
    m_total = scene.n_superpoints
    m = sample_query_count(m_total, seed, training=True,
                           low_fraction=config.m_low_fraction, cap=config.query_cap)
    idx = sample_query_indices(m_total, m, seed)
    targets = localize_targets(restrict_targets(bundle.targets_full, idx), model)

    visible = set(int(i) for i in targets.instance_ids if i >= 0)
    cands = [(inst, tokens) for inst, tokens in bundle.describable if inst in visible]
    rng = make_rng(seed, "prompt-pick")
    k = min(config.prompts_per_scene, len(cands))
    chosen = [cands[i] for i in rng.permutation(len(cands))[:k]] if k else []
    prompt_set = PromptSet(
        clicks=[(sample_vision_prompt(scene, inst, "random", seed=seed), inst)
                for inst, _ in chosen],
        expressions=[(tokens, inst) for inst, tokens in chosen],
        pairing=[(i, i) for i in range(len(chosen))],
    )
    prompt_set.validate(scene)
    clicks = [point for point, _ in prompt_set.clicks]
    expressions = [tokens for tokens, _ in prompt_set.expressions]

    fr = forward_scene(model, scene, training=True, seed=seed, clicks=clicks,
                       expressions=expressions, knn=bundle.knn, indices=idx)
    preds = fr.preds

    mask_probs = np_sigmoid(preds.mask_logits.data[:m])
    cls_probs = preds.cls_pred.data[:m]
    pairs = hungarian_padded(assignment_cost(mask_probs, cls_probs, targets)) \
        if len(targets) else []
    pseudo_cols = bundle.pseudo_sp[:, idx] if len(bundle.pseudo_sp) \
        else np.zeros((0, m))
    match = split_and_rematch(pairs, mask_probs, pseudo_cols, bundle.admissible)

    prompt_targets = None
    if chosen:
        p_masks = np.array([bundle.instance_sp[inst][idx] for inst, _ in chosen])
        p_classes = np.array([model.base_class_ids.index(scene.instance_class(inst))
                              for inst, _ in chosen])
        prompt_targets = PromptTargets(vision_masks=p_masks, vision_classes=p_classes,
                                       text_masks=p_masks, text_classes=p_classes)

    base = base_loss(match, preds, targets, model.no_object_index,
                     prompt_targets=prompt_targets, pseudo_masks_sp=pseudo_cols)

    # alignment of teacher prompts with their unified positives
    pair_material = None
    if chosen:
        row_of_target = {j: i for i, j in match.pairs}
        student_rows = []
        for inst, _ in chosen:
            t_idx = int(np.flatnonzero(targets.instance_ids == inst)[0])
            if t_idx not in row_of_target:
                raise ContractError(
                    f"prompted instance {inst} has no matched unified query")
            student_rows.append(row_of_target[t_idx])
        v_rows = np.array([preds.vision_row(i) for i in range(len(chosen))])
        t_rows = np.array([preds.text_row(i) for i in range(len(chosen))])
        pair_material = {
            "teacher_masks": preds.mask_logits.data[v_rows].copy(),
            "student_masks": ad.gather_rows(preds.mask_logits, np.array(student_rows)),
            "teacher_cls": preds.cls_logits.data[v_rows].copy(),
            "student_cls": ad.gather_rows(preds.cls_logits, t_rows),
            "f_v": ad.gather_rows(preds.f_out, v_rows),
            "f_t": ad.gather_rows(preds.f_out, t_rows),
        }
    return base, pair_material


def batch_objective(model: Model, bundles: list[SceneBundle], seeds: list[int],
                    config: TrainConfig) -> tuple[ad.Tensor, BatchParts]:
    """Total training loss of one scene batch, plus its inter-task parts."""
    bases, materials = [], []
    for bundle, seed in zip(bundles, seeds):
        base, material = _scene_training_pass(model, bundle, seed, config)
        bases.append(base)
        if material is not None:
            materials.append(material)

    if len(bases) == 1:
        base_mean = bases[0]
    else:
        base_mean = ad.tmean(ad.concat([ad.reshape(b, (1,)) for b in bases], axis=0))
    parts = BatchParts(base=base_mean)

    if materials:
        vg_terms = [distill_mask_loss(m["student_masks"], m["teacher_masks"],
                                      top_k_region(m["teacher_masks"],
                                                   config.top_k_percent))
                    for m in materials]
        vg = vg_terms[0]
        for t in vg_terms[1:]:
            vg = ad.add(vg, t)
        parts.v_to_g = ad.mul(vg, 1.0 / len(vg_terms))

        # vision-text pairs pooled across the batch, capped at pair_cap
        f_v = ad.concat([m["f_v"] for m in materials], axis=0) \
            if len(materials) > 1 else materials[0]["f_v"]
        f_t = ad.concat([m["f_t"] for m in materials], axis=0) \
            if len(materials) > 1 else materials[0]["f_t"]
        cls_v = np.concatenate([m["teacher_cls"] for m in materials])
        cls_t = ad.concat([m["student_cls"] for m in materials], axis=0) \
            if len(materials) > 1 else materials[0]["student_cls"]
        b = min(f_v.shape[0], config.pair_cap)
        if b < f_v.shape[0]:
            keep = np.arange(b)
            f_v, f_t = ad.gather_rows(f_v, keep), ad.gather_rows(f_t, keep)
            cls_v, cls_t = cls_v[:b], ad.gather_rows(cls_t, keep)
        parts.v_to_r = distill_class_loss(cls_t, cls_v)
        sim = similarity_matrix(f_v, f_t, model.log_tau)
        parts.contrastive = contrastive_loss(sim)
        parts.rank = ranking_loss(sim)

    enabled = []
    if config.use_distill:
        enabled += [p for p in (parts.v_to_g, parts.v_to_r) if p is not None]
    if config.use_contrastive and parts.contrastive is not None:
        enabled.append(parts.contrastive)
    if config.use_rank and parts.rank is not None:
        enabled.append(parts.rank)
    return total_loss(parts.base, enabled, config.inter_weight), parts


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    loss_history: list[float] = field(default_factory=list)
    eval_history: list[tuple[int, float]] = field(default_factory=list)


def observed_classes(scenes: list[Scene]) -> list[int]:
    seen = set()
    for s in scenes:
        seen.update(int(c) for c in np.unique(s.semantic_id))
    return sorted(seen)


def _fit_loop(model: Model, opt: AdamWState, bundles: list[SceneBundle],
              val_scenes: list[Scene], config: TrainConfig, epochs: int,
              seed_tag: str, result: TrainResult) -> Checkpoint:
    names = sorted(model.named_params())
    params = [model.named_params()[n] for n in names]
    n_scenes = len(bundles)
    steps_per_epoch = math.ceil(n_scenes / config.batch_size)
    best: Checkpoint | None = None
    for epoch in range(epochs):
        order = make_rng(config.seed, seed_tag, "order", epoch).permutation(n_scenes)
        for b in range(steps_per_epoch):
            chunk = [bundles[i] for i in order[b * config.batch_size:
                                               (b + 1) * config.batch_size]]
            seeds = [stable_hash64(seed_tag, config.seed, epoch, b, c.index)
                     for c in chunk]
            try:
                total, _parts = batch_objective(model, chunk, seeds, config)
                value = total.item()
                if not np.isfinite(value):
                    raise NumericError("non-finite loss")
                grads = ad.grads_of(total, params)
                adamw_step(opt, params, grads, names)
            except NumericError as exc:
                raise NumericError(
                    f"aborted at epoch {epoch} step {b} (scenes "
                    f"{[c.index for c in chunk]}): {exc}") from exc
            clamp_log_tau(model.log_tau)
            result.loss_history.append(value)
        if (epoch + 1) % config.eval_period == 0 or epoch == epochs - 1:
            report = evaluate_model(model, val_scenes)
            result.eval_history.append((epoch, report.overall))
            if best is None or report.overall > best.best_overall:
                best = checkpoint_from_model(model, opt, names, epoch, report.overall)
    if best is None:
        best = checkpoint_from_model(model, opt, names, epochs - 1, 0.0)
    return best


def train(config: TrainConfig, train_scenes: list[Scene], val_scenes: list[Scene],
          base_class_ids: list[int] | None = None) -> TrainResult:
    """Full training run; returns the best-Overall checkpoint.

    Trainable (base) classes default to the classes observed in the training
    scenes; vocabulary-only classes stay novel for open-vocabulary evaluation.
    """
    config.validate()
    check_scenes(train_scenes)
    check_scenes(val_scenes)
    if base_class_ids is None:
        base_class_ids = observed_classes(train_scenes)
    n_classes = len(train_scenes[0].class_names)
    split = VocabularySplit(base=list(base_class_ids),
                            novel=[c for c in range(n_classes)
                                   if c not in base_class_ids])
    split.validate(n_classes)
    model = init_model(config, train_scenes[0].class_names,
                       train_scenes[0].stuff_flags, split.base)
    bundles = [prepare_scene(s, config, config.seed, i, base_class_ids=split.base)
               for i, s in enumerate(train_scenes)]
    steps_per_epoch = math.ceil(len(bundles) / config.batch_size)
    opt = AdamWState(lr0=config.lr0, weight_decay=config.weight_decay,
                     total_steps=config.epochs * steps_per_epoch)
    result = TrainResult(checkpoint=None)
    result.checkpoint = _fit_loop(model, opt, bundles, val_scenes, config,
                                  config.epochs, "train", result)
    if config.use_finetune_trick:
        result.checkpoint = finetune_trick(result.checkpoint, train_scenes,
                                           val_scenes).checkpoint
    return result


def finetune_trick(ck: Checkpoint, train_scenes: list[Scene],
                   val_scenes: list[Scene], epochs: int | None = None) -> TrainResult:
    """Continue from the best model at 1e-3 x (lr, weight decay), constant lr."""
    config = ck.config
    epochs = config.finetune_epochs if epochs is None else epochs
    result = TrainResult(checkpoint=ck)
    if epochs == 0:
        return result
    model = model_from_checkpoint(ck)
    bundles = [prepare_scene(s, config, config.seed, i,
                             base_class_ids=ck.base_class_ids)
               for i, s in enumerate(train_scenes)]
    steps_per_epoch = math.ceil(len(bundles) / config.batch_size)
    opt = AdamWState(lr0=config.lr0 * config.finetune_scale,
                     weight_decay=config.weight_decay * config.finetune_scale,
                     total_steps=epochs * steps_per_epoch, constant_lr=True)
    result.checkpoint = _fit_loop(model, opt, bundles, val_scenes, config,
                                  epochs, "finetune", result)
    return result


# ---------------------------------------------------------------------------
# evaluation


def _eval_scene_prompts(model: Model, scene: Scene, scene_index: int,
                        protocol: str, r_d: float | None, expression_root: int):
    clicks, click_instances = [], []
    for inst in scene.thing_instances():
        clicks.append(sample_vision_prompt(scene, inst, protocol, r_d=r_d, seed=0))
        click_instances.append(inst)
    expressions, expr_instances = [], []
    for inst in scene.thing_instances():
        try:
            tokens = make_text_expression(scene, inst,
                                          seed=expression_seed(expression_root,
                                                               scene_index))
        except AmbiguityError:
            continue
        expressions.append(tokens)
        expr_instances.append(inst)
    return clicks, click_instances, expressions, expr_instances


def evaluate_model(model: Model, scenes: list[Scene], protocol: str = "center",
                   r_d: float | None = None, ov_scenes: list[Scene] | None = None,
                   expression_root: int | None = None,
                   aux: dict | None = None) -> MetricsReport:
    """One forward per scene with m = M; all six pipelines; metrics reduced.

    `aux`, when given, receives side measurements (instance-task mask mIoU).
    """
    if expression_root is None:
        expression_root = model.config.seed
    base_ids = np.asarray(model.base_class_ids)

    pred_pan, gt_pan = [], []
    sem_pred, sem_gt = [], []
    inst_preds, inst_gts = [], []
    inter_entries, ref_pairs = [], []
    inst_miou_num, inst_miou_den = 0.0, 0

    for s, scene in enumerate(scenes):
        clicks, click_instances, expressions, expr_instances = _eval_scene_prompts(
            model, scene, s, protocol, r_d, expression_root)
        fr = forward_scene(model, scene, training=False, seed=0, clicks=clicks,
                           expressions=expressions)
        preds = fr.preds
        outputs = run_all_tasks(preds, scene, model.no_object_index)

        semantic_global = base_ids[outputs.semantic]
        sem_pred.append(semantic_global)
        sem_gt.append(scene.semantic_id)

        instances_global = [(mask, int(base_ids[cls]), score)
                            for mask, cls, score in outputs.instances]
        for mask, cls, score in instances_global:
            inst_preds.append(InstancePrediction(scene=s, class_id=cls, score=score,
                                                 mask=mask))
        for inst in scene.thing_instances():
            inst_gts.append(InstanceGT(scene=s, class_id=scene.instance_class(inst),
                                       mask=scene.instance_point_mask(inst)))

        pan_cls_global = np.where(outputs.panoptic_class >= 0,
                                  base_ids[np.maximum(outputs.panoptic_class, 0)], -1)
        pred_pan.append(panoptic_segments_from_map(outputs.panoptic_segment,
                                                   pan_cls_global))
        gt_pan.append(gt_panoptic_segments(scene))

        for i, inst in enumerate(click_instances):
            logits = superpoint_to_point(preds.mask_logits.data[preds.vision_row(i)],
                                         scene.superpoint_id, preds.sampled,
                                         scene.n_superpoints)
            probs = np_sigmoid(logits)
            mask = outputs.interactive[i]
            score = float(probs[mask].mean()) if mask.any() else 0.0
            inter_entries.append((mask, score, scene.instance_point_mask(inst), s))

        for i, inst in enumerate(expr_instances):
            ref_pairs.append((outputs.referring[i], scene.instance_point_mask(inst)))

        gt_masks = [scene.instance_point_mask(i) for i in scene.thing_instances()]
        if gt_masks:
            pred_masks = [mask for mask, _, _ in instances_global]
            inst_miou_num += matched_instance_miou(pred_masks, gt_masks) * len(gt_masks)
            inst_miou_den += len(gt_masks)

    report = MetricsReport()
    report.pq = panoptic_quality(pred_pan, gt_pan)
    report.sem_miou = semantic_miou(sem_pred, sem_gt)
    report.inst_map, report.inst_ap50, report.inst_ap25 = ap_summary(inst_preds, inst_gts)
    report.inter_ap, report.inter_ap50, report.inter_ap25, report.inter_miou = \
        interactive_metrics(inter_entries)
    report.ref_miou, report.ref_acc25, report.ref_acc50 = referring_metrics(ref_pairs)
    report.ov_ap = evaluate_open_vocabulary(model, ov_scenes) if ov_scenes else 0.0
    if aux is not None:
        aux["instance_mask_miou"] = (inst_miou_num / inst_miou_den) if inst_miou_den else 0.0
    return report.finalize()


def evaluate_open_vocabulary(model: Model, scenes: list[Scene]) -> float:
    """mAP on the novel split: open vocabulary = full class table."""
    from .tasks import infer_openvocab

    if scenes[0].class_names != model.class_names:
        raise ContractError("open-vocabulary scenes use a different class table "
                            "than the model was trained with")
    class_names = scenes[0].class_names
    open_vocab = embed_class_names(class_names, model.config.d_out, embedder_seed=0)
    novel = np.array([c for c in range(len(class_names))
                      if c not in model.base_class_ids], dtype=int)
    preds, gts = [], []
    for s, scene in enumerate(scenes):
        fr = forward_scene(model, scene, training=False, seed=0)
        for mask, cls, score in infer_openvocab(fr.preds, scene, open_vocab,
                                                novel_class_ids=novel):
            preds.append(InstancePrediction(scene=s, class_id=cls, score=score, mask=mask))
        for inst in scene.thing_instances():
            cls = scene.instance_class(inst)
            if cls in novel:
                gts.append(InstanceGT(scene=s, class_id=cls,
                                      mask=scene.instance_point_mask(inst)))
    if not gts:
        return 0.0
    m_ap, _, _ = ap_summary(preds, gts)
    return m_ap


def evaluate_checkpoint(ck: Checkpoint, scenes: list[Scene], protocol: str = "center",
                        r_d: float | None = None,
                        ov_scenes: list[Scene] | None = None) -> MetricsReport:
    return evaluate_model(model_from_checkpoint(ck), scenes, protocol=protocol,
                          r_d=r_d, ov_scenes=ov_scenes)


# ---------------------------------------------------------------------------
# prompt-placement ablation


def ablate_prompts(model: Model, scenes: list[Scene],
                   r_d_values: list[float]) -> list[tuple[str, float, float, float, float]]:
    """Interactive quality per click strategy: center, each r_d, random.

    Returns rows of (strategy, mIoU, AP, AP50, AP25).
    """
    strategies = [("center", "center", None)]
    strategies += [(f"r_d={v:g}", "quantile", float(v)) for v in r_d_values]
    strategies += [("random", "random", None)]
    rows = []
    for label, protocol, r_d in strategies:
        entries = []
        for s, scene in enumerate(scenes):
            instances = scene.thing_instances()
            clicks = [sample_vision_prompt(scene, inst, protocol, r_d=r_d, seed=0)
                      for inst in instances]
            fr = forward_scene(model, scene, training=False, seed=0, clicks=clicks)
            preds = fr.preds
            for i, inst in enumerate(instances):
                logits = superpoint_to_point(
                    preds.mask_logits.data[preds.vision_row(i)],
                    scene.superpoint_id, preds.sampled, scene.n_superpoints)
                probs = np_sigmoid(logits)
                mask = probs > 0.5
                score = float(probs[mask].mean()) if mask.any() else 0.0
                entries.append((mask, score, scene.instance_point_mask(inst), s))
        ap, ap50, ap25, miou = interactive_metrics(entries)
        rows.append((label, miou, ap, ap50, ap25))
    return rows


def ablation_to_csv(rows) -> str:
    lines = ["strategy,miou,ap,ap50,ap25"]
    for label, miou, ap, ap50, ap25 in rows:
        lines.append(f"{label},{miou:.6f},{ap:.6f},{ap50:.6f},{ap25:.6f}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# selftest


def selftest() -> list[tuple[str, bool, str]]:
    """Fast invariant battery; returns (name, passed, detail) rows."""
    from .config import REFERENCE_DEFAULTS
    from .losses import SimilarityMatrix
    from .matching import hungarian
    from .optim import polynomial_lr
    from .scene import scene_from_text, scene_to_text
    from .scenegen import SceneRecipe, generate_scene
    import itertools

    checks = []

    def check(name, fn):
        try:
            fn()
            checks.append((name, True, ""))
        except Exception as exc:  # noqa: BLE001 - reported, not swallowed
            checks.append((name, False, f"{type(exc).__name__}: {exc}"))

    def config_defaults():
        cfg = TrainConfig()
        for key, want in REFERENCE_DEFAULTS.items():
            got = getattr(cfg, key)
            if got != want:
                raise AssertionError(f"{key}: {got} != {want}")

    check("config defaults match the reference recipe", config_defaults)

    check("softmax symmetry on [0, 0]",
          lambda: np.testing.assert_array_equal(
              ad.softmax_rows(ad.Tensor([0.0, 0.0])).data, [0.5, 0.5]))
    check("sigmoid(0) = 0.5",
          lambda: np.testing.assert_equal(ad.sigmoid(ad.Tensor([0.0])).data[0], 0.5))

    def hungarian_oracle():
        for trial in range(60):
            rng = make_rng(77, trial)
            n = int(rng.integers(2, 6))
            cost = rng.uniform(0, 5, size=(n, n))
            got = sum(cost[i, j] for i, j in hungarian(cost))
            want = min(sum(cost[p[j], j] for j in range(n))
                       for p in itertools.permutations(range(n)))
            if not np.isclose(got, want, atol=1e-9):
                raise AssertionError(f"trial {trial}: {got} != {want}")

    check("hungarian equals exhaustive minimum", hungarian_oracle)

    def leakage():
        scene = generate_scene(3, SceneRecipe(counts={"chair": 1, "table": 1},
                                              total_points=700, superpoint_target=32))
        cfg = TrainConfig(points_per_scene=700, superpoint_target=32)
        model = init_model(cfg, scene.class_names, scene.stuff_flags)
        a = forward_scene(model, scene, training=False, seed=0, clicks=[5])
        b = forward_scene(model, scene, training=False, seed=0, clicks=[600])
        m = a.preds.m
        if not np.array_equal(a.preds.f_out.data[:m], b.preds.f_out.data[:m]):
            raise AssertionError("unified F_out depends on prompts")
        if not np.array_equal(a.preds.mask_logits.data[:m], b.preds.mask_logits.data[:m]):
            raise AssertionError("unified masks depend on prompts")

    check("prompt leakage invariance (bit-exact)", leakage)

    def closed_forms():
        one = contrastive_loss(SimilarityMatrix(s=ad.Tensor([[0.4]]),
                                                log_tau=ad.Tensor(0.0)))
        if abs(one.item()) > 1e-12:
            raise AssertionError("L_con(B=1) != 0")
        rank = ranking_loss(SimilarityMatrix(s=ad.Tensor([[0.2, 0.7], [0.1, 0.9]]),
                                             log_tau=ad.Tensor(0.0)))
        if abs(rank.item() - 0.25) > 1e-9:
            raise AssertionError("ranking counterexample != 0.25")

    check("closed-form loss values", closed_forms)

    def roundtrip():
        scene = generate_scene(1, SceneRecipe(counts={"chair": 1}, total_points=600,
                                              superpoint_target=24))
        back = scene_from_text(scene_to_text(scene))
        if not np.array_equal(back.points, scene.points):
            raise AssertionError("scene round trip not lossless")

    check("scene file round trip", roundtrip)

    def schedule():
        if polynomial_lr(0, 1e-4, 100) != 1e-4:
            raise AssertionError("lr(0) != lr0")
        if polynomial_lr(100, 1e-4, 100) != 0.0:
            raise AssertionError("lr(T) != 0")
        if abs(TrainConfig().lr0 * TrainConfig().finetune_scale - 1e-7) > 1e-20:
            raise AssertionError("finetune lr != 1e-7")

    check("schedule endpoints and finetune arithmetic", schedule)
    return checks
