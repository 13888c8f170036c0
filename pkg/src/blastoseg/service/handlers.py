"""Pipeline operations behind the service endpoints and CLI subcommands.

Every handler is a pure function from a request model to a response model
plus files under the request's output directory. Failures raise the package
error types; transports (HTTP, CLI) translate them to status codes.
"""

import os

import numpy as np
from PIL import Image

from ..checkpoint import load_model, save_checkpoint
from ..data.augment import augment
from ..data.dataset import carve_validation, load_dataset, save_dataset, split_dataset
from ..data.phantom import generate_dataset
from ..data.pipeline import normalize, prepare_pairs, resize
from ..errors import ConfigurationError
from ..evaluation import (
    binarize,
    evaluate_testset,
    render_overlay,
    save_overlay_png,
    threshold_sweep,
    write_report_csv,
)
from ..models import (
    EnsembleSpec,
    ensemble_predict,
    predict,
    build_model,
    unweighted_ensemble,
    weighted_ensemble,
)
from ..training import TrainConfig, train
from . import schemas


def _require_exists(path, what):
    if not os.path.exists(path):
        raise ConfigurationError(f"{what} {path} does not exist")


def handle_generate(req: schemas.GenerateRequest) -> schemas.GenerateResponse:
    os.makedirs(req.out_dir, exist_ok=True)
    pairs, specs = generate_dataset(
        req.blastocysts, req.frames, req.image_size,
        noise_level=req.noise_level, debris_count=req.debris_count, seed=req.seed)
    manifest = save_dataset(
        pairs, req.out_dir,
        generator_info={"kind": "phantom", "specs": [s.to_dict() for s in specs]},
        seed=req.seed)
    return schemas.GenerateResponse(
        out_dir=req.out_dir,
        manifest_path=manifest,
        n_pairs=len(pairs),
        n_blastocysts=req.blastocysts,
        frames=req.frames,
        image_size=req.image_size,
        seed=req.seed,
    )


def handle_train(req: schemas.TrainRequest) -> schemas.TrainResponse:
    """Split, carve validation, run the recipe, store artifacts.

    The request seed drives the split, the carve, weight init, and the
    training loop; a seed inside ``config_text`` is overridden so one value
    governs the whole run.
    """
    _require_exists(req.dataset, "dataset")
    pairs = load_dataset(req.dataset)
    split = split_dataset(pairs, req.split_ratio, req.seed, by_source=req.by_source)
    pool = prepare_pairs(split.train, req.size)
    train_pairs, val_pairs = carve_validation(pool, req.val_fraction, req.seed)

    config = (TrainConfig.from_text(req.config_text)
              if req.config_text else TrainConfig())
    config = config.replace(max_epochs=req.max_epochs, batch_size=req.batch_size,
                            initial_lr=req.initial_lr, seed=req.seed)

    model = build_model(req.model, req.base_filters, req.size, seed=req.seed,
                        dropout_rate=config.dropout_rate)
    model, history = train(model, train_pairs, val_pairs, config,
                           augment_fn=augment if req.augment else None)

    os.makedirs(req.out_dir, exist_ok=True)
    checkpoint_path = os.path.join(req.out_dir, f"{req.model}.ckpt")
    save_checkpoint(checkpoint_path, model, extra={
        "val_jaccard": history.best_val_jaccard,
        "val_loss": history.best_val_loss,
        "best_epoch": history.best_epoch,
        "epochs": len(history.records),
        "stop_reason": history.stop_reason,
        "working_size": req.size,
        "seed": req.seed,
    })
    history_path = os.path.join(req.out_dir, "history.csv")
    history.write_csv(history_path)
    config_path = os.path.join(req.out_dir, "config.txt")
    with open(config_path, "w") as fh:
        fh.write(config.to_text())

    return schemas.TrainResponse(
        checkpoint_path=checkpoint_path,
        history_path=history_path,
        config_path=config_path,
        model=req.model,
        epochs=len(history.records),
        stop_reason=history.stop_reason,
        best_epoch=history.best_epoch,
        best_val_loss=history.best_val_loss,
        best_val_jaccard=history.best_val_jaccard,
        n_train=len(train_pairs),
        n_val=len(val_pairs),
        n_test=len(split.test),
    )


def _load_target(checkpoints, scheme, expect_model):
    """Load checkpoints into a single model or an ensemble.

    Returns (target, label, members) where members is a list of
    (checkpoint path, model, meta) and label is the public model name.
    """
    models, metas = [], []
    for path in checkpoints:
        _require_exists(path, "checkpoint")
        model, meta = load_model(path, expect_model=expect_model)
        models.append(model)
        metas.append(meta)
    if len({m.input_shape for m in models}) > 1:
        raise ConfigurationError(
            "checkpoints disagree on working resolution: "
            + ", ".join(f"{p}={m.input_shape}" for p, m in zip(checkpoints, models)))
    members = list(zip(checkpoints, models, metas))
    if scheme is None:
        if len(models) > 1:
            raise ConfigurationError(
                f"{len(models)} checkpoints given without an ensemble scheme")
        return models[0], models[0].name, members
    if scheme == "unweighted":
        return unweighted_ensemble(models), "ensemble-unweighted", members
    scores = []
    for path, meta in zip(checkpoints, metas):
        score = (meta.get("extra") or {}).get("val_jaccard")
        if score is None:
            raise ConfigurationError(
                f"{path}: no val_jaccard in checkpoint metadata; weighted "
                "ensembling needs training-time validation scores")
        scores.append(float(score))
    return weighted_ensemble(models, scores), "ensemble-weighted", members


def _select_pairs(dataset, use_all, split_ratio, seed):
    _require_exists(dataset, "dataset")
    pairs = load_dataset(dataset)
    if use_all:
        return pairs
    return split_dataset(pairs, split_ratio, seed).test


def _probability_map(target, batch):
    if isinstance(target, EnsembleSpec):
        return ensemble_predict(target, batch)
    return predict(target, batch)


def _native_mask(prob, threshold, native_shape):
    hard = np.where(binarize(prob, threshold), 255, 0).astype(np.uint8)
    if hard.shape == native_shape:
        return hard
    return resize(hard, native_shape[0], "mask")


def handle_eval(req: schemas.EvalRequest) -> schemas.EvalResponse:
    test_pairs = _select_pairs(req.dataset, req.use_all, req.split_ratio, req.seed)
    target, label, members = _load_target(req.checkpoints, req.scheme,
                                          req.expect_model)
    os.makedirs(req.out_dir, exist_ok=True)

    report, probs = evaluate_testset(target, test_pairs, req.threshold,
                                     return_probs=True)
    report_path = os.path.join(req.out_dir, "report.csv")
    write_report_csv(report, report_path)

    overlay_paths = []
    for pair, prob, result in list(zip(test_pairs, probs, report.per_image))[:req.overlays]:
        native = _native_mask(prob, req.threshold, pair.mask.shape)
        overlay = render_overlay(pair.image, pair.mask, native,
                                 jaccard=result.report.jaccard)
        path = os.path.join(req.out_dir,
                            f"overlay_{pair.source_id}_{pair.frame_index:03d}.png")
        save_overlay_png(path, overlay)
        overlay_paths.append(path)

    member_summaries = []
    if req.scheme is not None:
        total = sum(target.weights)
        for i, (path, model, _meta) in enumerate(members):
            member_report = evaluate_testset(model, test_pairs, req.threshold)
            member_path = os.path.join(req.out_dir, f"member_{i:02d}_{model.name}.csv")
            write_report_csv(member_report, member_path)
            member_summaries.append(schemas.MemberSummary(
                checkpoint=path,
                model=model.name,
                report_path=member_path,
                weight=target.weights[i] / total,
                micro_jaccard=member_report.micro.jaccard,
                micro_dice=member_report.micro.dice,
            ))

    return schemas.EvalResponse(
        report_path=report_path,
        target=label,
        threshold=req.threshold,
        n_images=len(test_pairs),
        micro=report.micro.as_dict(),
        macro=report.macro.as_dict(),
        categories=report.categories,
        uncategorized=report.uncategorized,
        overlay_paths=overlay_paths,
        members=member_summaries,
    )


def handle_segment(req: schemas.SegmentRequest) -> schemas.SegmentResponse:
    _require_exists(req.image, "image")
    arr = np.asarray(Image.open(req.image).convert("L"))
    if arr.shape[0] != arr.shape[1]:
        raise ConfigurationError(
            f"segmentation expects a square image, got {arr.shape[0]}x{arr.shape[1]}")
    target, _label, members = _load_target(req.checkpoints, req.scheme,
                                           req.expect_model)
    working = members[0][1].input_shape[0]
    x = normalize(resize(arr, working, "image"))[None, None]
    prob = _probability_map(target, x)[0, 0]
    native = _native_mask(prob, req.threshold, arr.shape)
    parent = os.path.dirname(req.out_path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    Image.fromarray(native, mode="L").save(req.out_path)
    return schemas.SegmentResponse(
        mask_path=req.out_path,
        threshold=req.threshold,
        working_size=working,
        image_size=list(arr.shape),
        positive_fraction=float(np.mean(native > 0)),
    )


def handle_sweep(req: schemas.SweepRequest) -> schemas.SweepResponse:
    pairs = _select_pairs(req.dataset, req.use_all, req.split_ratio, req.seed)
    target, _label, _members = _load_target(req.checkpoints, req.scheme,
                                            req.expect_model)
    sweep = threshold_sweep(target, pairs)
    os.makedirs(req.out_dir, exist_ok=True)
    table_path = os.path.join(req.out_dir, "sweep.csv")
    lines = ["threshold,micro_jaccard"]
    for threshold, jaccard in sweep.rows:
        value = "undefined" if jaccard is None else repr(jaccard)
        lines.append(f"{threshold!r},{value}")
    lines.append(f"# best_threshold,{sweep.best_threshold!r}")
    lines.append(f"# spread_04_06,{sweep.jaccard_04_06_spread!r}")
    lines.append(f"# insensitive_04_06,{str(sweep.insensitive_04_06).lower()}")
    with open(table_path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return schemas.SweepResponse(
        table_path=table_path,
        rows=[schemas.SweepRow(threshold=t, micro_jaccard=j) for t, j in sweep.rows],
        best_threshold=sweep.best_threshold,
        insensitive_04_06=sweep.insensitive_04_06,
        jaccard_04_06_spread=sweep.jaccard_04_06_spread,
    )
