"""Command-line front end.

Subcommands cover the whole pipeline: synth-gen, train-rew, fit-weibull,
score, filter, self-train, evaluate. Every command is deterministic given
(config, seed); the effective configuration is echoed next to each command's
output. Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical
failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autoencoder as ae_mod
from . import evaluation as eval_mod
from . import pipeline as pipe_mod
from . import scoring as score_mod
from . import synth as synth_mod
from . import weibull as wb_mod
from .boxes import Box, ScoredBox
from .features import (
    FeatureIOError,
    Level,
    read_feature_map,
    write_feature_map,
)
from .rng import derive_seed

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class DataError(Exception):
    pass


@dataclass(frozen=True)
class RunConfig:
    """All hyperparameters with their reference defaults."""

    seed: int = 0
    gamma: float = 4.0
    top_percent: float = 30.0
    iterations: int = 1
    positive_iou: float = 0.3
    nms_iou: float = 0.3
    min_area: float = 2000.0
    aspect_min: float = 0.25
    aspect_max: float = 4.0
    max_known_iou: float = 0.3
    latent_dims: dict = field(
        default_factory=lambda: {"P3": 32, "P4": 16, "P5": 8, "P6": 4}
    )
    learning_rate: float = 0.01
    epochs: int = 12
    batch_cells: int = 16
    max_samples: int = 100000
    min_fit_samples: int = 100
    scorer_learning_rate: float = 0.2
    scorer_epochs: int = 400
    grid_scales_per_level: int = 3
    grid_step_cells: int = 2
    scenario: dict = field(default_factory=lambda: synth_mod.ScenarioConfig().to_dict())

    def filter_config(self) -> pipe_mod.FilterConfig:
        return pipe_mod.FilterConfig(
            nms_iou=self.nms_iou,
            min_area=self.min_area,
            aspect_min=self.aspect_min,
            aspect_max=self.aspect_max,
            max_known_iou=self.max_known_iou,
        )

    def train_config(self) -> ae_mod.TrainConfig:
        return ae_mod.TrainConfig(
            learning_rate=self.learning_rate,
            epochs=self.epochs,
            batch_cells=self.batch_cells,
            seed=self.seed,
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def load_run_config(path: str | None, seed_override: int | None) -> RunConfig:
    base = RunConfig()
    values = base.to_dict()
    if path is not None:
        try:
            overrides = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as err:
            raise DataError(f"cannot read config {path}: {err}")
        if not isinstance(overrides, dict):
            raise DataError(f"config {path} must hold a JSON object")
        unknown = set(overrides) - set(values)
        if unknown:
            raise DataError(f"unknown config keys: {', '.join(sorted(unknown))}")
        for key, val in overrides.items():
            if key == "scenario":
                merged = dict(values["scenario"])
                merged.update(val)
                values["scenario"] = merged
            else:
                values[key] = val
    if seed_override is not None:
        values["seed"] = seed_override
    return RunConfig(**values)


def _echo_config(cfg: RunConfig, out_dir: Path, stem: str = "effective_config") -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / f"{stem}.json").write_text(
        json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n"
    )


def _read_feature_maps(directory: Path) -> dict[Level, "object"]:
    maps = {}
    for level in Level:
        path = directory / f"features_{level.value}.rfm"
        if not path.exists():
            raise DataError(f"missing feature map for level {level.value}: {path}")
        maps[level] = read_feature_map(path)
    return maps


def _read_known_boxes(path: Path) -> list[tuple[Box, str]]:
    try:
        doc = json.loads(path.read_text())
        categories = {c["id"]: c["name"] for c in doc["categories"]}
        out = []
        for ann in doc["annotations"]:
            x, y, w, h = ann["bbox"]
            out.append((Box(x=x, y=y, w=w, h=h), categories[ann["category_id"]]))
        return out
    except (OSError, KeyError, TypeError, ValueError, json.JSONDecodeError) as err:
        raise DataError(f"cannot read annotations {path}: {err}")


def _read_proposals(path: Path) -> list[dict]:
    records = []
    try:
        with open(path) as fh:
            for line_no, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    doc = json.loads(line)
                    x, y, w, h = doc["box"]
                    doc["_box"] = Box(x=x, y=y, w=w, h=h)
                except (json.JSONDecodeError, KeyError, TypeError, ValueError) as err:
                    raise DataError(f"{path}:{line_no}: malformed proposal ({err})")
                records.append(doc)
    except OSError as err:
        raise DataError(f"cannot read proposals {path}: {err}")
    return records


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    raise TypeError(f"not JSON serializable: {type(obj)}")


def _write_jsonl(records: list[dict], path: Path) -> None:
    with open(path, "w") as fh:
        for rec in records:
            rec = {k: v for k, v in rec.items() if not k.startswith("_")}
            fh.write(json.dumps(rec, default=_json_default) + "\n")


# Commands -------------------------------------------------------------------


def cmd_synth_gen(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    scenario_cfg = synth_mod.ScenarioConfig.from_dict(cfg.scenario)
    scenario = synth_mod.generate_scenario(cfg.seed, scenario_cfg)
    for level, fmap in scenario.feature_maps.items():
        write_feature_map(fmap, out / f"features_{level.value}.rfm")

    classes = list(scenario_cfg.class_names)
    cat_ids = {name: i + 1 for i, name in enumerate(classes)}
    known_anns = [
        {
            "id": i + 1,
            "image_id": 0,
            "category_id": cat_ids[lb.label],
            "bbox": [lb.box.x, lb.box.y, lb.box.w, lb.box.h],
            "area": lb.box.w * lb.box.h,
        }
        for i, lb in enumerate(scenario.known_boxes)
    ]
    images = [
        {"id": 0, "width": scenario.image_size, "height": scenario.image_size}
    ]
    annotations = {
        "images": images,
        "categories": [{"id": v, "name": k} for k, v in cat_ids.items()],
        "annotations": known_anns,
    }
    (out / "annotations.json").write_text(json.dumps(annotations, indent=2) + "\n")

    novel_id = len(classes) + 1
    truth_anns = list(known_anns) + [
        {
            "id": len(known_anns) + i + 1,
            "image_id": 0,
            "category_id": novel_id,
            "bbox": [b.x, b.y, b.w, b.h],
            "area": b.w * b.h,
        }
        for i, b in enumerate(scenario.unknown_boxes)
    ]
    truth = {
        "images": images,
        "categories": annotations["categories"] + [{"id": novel_id, "name": "novel"}],
        "annotations": truth_anns,
    }
    (out / "truth.json").write_text(json.dumps(truth, indent=2) + "\n")

    half = (len(classes) + 1) // 2
    split = {
        "tasks": [
            {"id": 1, "classes": classes[:half]},
            {"id": 2, "classes": classes[half:]},
        ]
    }
    (out / "split.json").write_text(json.dumps(split, indent=2) + "\n")

    proposals = synth_mod.generate_raw_proposals(scenario, scenario_cfg, cfg.seed)
    records = [
        {"image_id": 0, "box": [sb.box.x, sb.box.y, sb.box.w, sb.box.h], "score": sb.score}
        for sb in proposals
    ]
    _write_jsonl(records, out / "proposals.jsonl")
    _echo_config(cfg, out)
    print(f"wrote scenario with {len(scenario.known_boxes)} known / "
          f"{len(scenario.unknown_boxes)} unknown objects to {out}")
    return EXIT_OK


def _train_autoencoders(cfg: RunConfig, feature_maps) -> dict:
    autoencoders = {}
    for level, fmap in feature_maps.items():
        latent = cfg.latent_dims[level.value]
        ae = ae_mod.init_autoencoder(level, fmap.channels, latent, seed=cfg.seed)
        train_cfg = dataclasses.replace(
            cfg.train_config(), seed=derive_seed(cfg.seed, "train", level.value)
        )
        autoencoders[level] = ae_mod.train(ae, [fmap], train_cfg)
    return autoencoders


def _fit_model(cfg: RunConfig, autoencoders, feature_maps, known, pseudo) -> score_mod.RewModel:
    error_maps = {
        level: ae_mod.error_map(autoencoders[level], fmap)
        for level, fmap in feature_maps.items()
    }
    pairs = wb_mod.fit_pair(
        error_maps,
        known,
        pseudo,
        wb_mod.WeibullFitConfig(
            max_samples=cfg.max_samples,
            min_samples=cfg.min_fit_samples,
            seed=derive_seed(cfg.seed, "weibull"),
        ),
    )
    return score_mod.RewModel(autoencoders=autoencoders, pairs=pairs, gamma=cfg.gamma)


def cmd_train_rew(args, cfg: RunConfig) -> int:
    feature_maps = _read_feature_maps(Path(args.features))
    known = [box for box, _ in _read_known_boxes(Path(args.annotations))]
    pseudo = (
        [rec["_box"] for rec in _read_proposals(Path(args.proposals))]
        if args.proposals
        else []
    )
    autoencoders = _train_autoencoders(cfg, feature_maps)
    model = _fit_model(cfg, autoencoders, feature_maps, known, pseudo)
    out = Path(args.out)
    score_mod.save_model(model, out)
    _echo_config(cfg, out)
    print(f"trained reconstruction model for {len(feature_maps)} levels into {out}")
    return EXIT_OK


def cmd_fit_weibull(args, cfg: RunConfig) -> int:
    feature_maps = _read_feature_maps(Path(args.features))
    model = score_mod.load_model(Path(args.model))
    known = [box for box, _ in _read_known_boxes(Path(args.annotations))]
    pseudo = (
        [rec["_box"] for rec in _read_proposals(Path(args.proposals))]
        if args.proposals
        else []
    )
    refit = _fit_model(cfg, dict(model.autoencoders), feature_maps, known, pseudo)
    out = Path(args.out)
    score_mod.save_model(refit, out)
    _echo_config(cfg, out)
    print(f"refit density pairs for {len(feature_maps)} levels into {out}")
    return EXIT_OK


def cmd_score(args, cfg: RunConfig) -> int:
    model = score_mod.load_model(Path(args.model))
    feature_maps = _read_feature_maps(Path(args.features))
    error_maps = score_mod.compute_error_maps(model, feature_maps)
    records = _read_proposals(Path(args.proposals))
    labeled = score_mod.label_proposals(
        model, error_maps, [rec["_box"] for rec in records]
    )
    for rec, prop in zip(records, labeled):
        rec["level"] = prop.level.value
        rec["pooled_error"] = prop.pooled_error
        rec["soft_label"] = prop.soft_label
        if prop.flag is not None:
            rec["flag"] = prop.flag
    out = Path(args.out)
    _write_jsonl(records, out)
    _echo_config(cfg, out.parent, stem=out.name + ".config")
    print(f"scored {len(records)} proposals into {out}")
    return EXIT_OK


def cmd_filter(args, cfg: RunConfig) -> int:
    records = _read_proposals(Path(args.proposals))
    for rec in records:
        if "soft_label" not in rec:
            raise DataError("filter input must be scored proposals (soft_label missing)")
    known = [box for box, _ in _read_known_boxes(Path(args.annotations))]
    scored = [ScoredBox(box=rec["_box"], score=rec["soft_label"]) for rec in records]
    by_identity = {id(sb): rec for sb, rec in zip(scored, records)}
    survivors = pipe_mod.filter_proposals(scored, known, cfg.filter_config())
    kept = []
    for sb in survivors:
        rec = dict(by_identity[id(sb)])
        rec["provenance"] = "generator"
        kept.append(rec)
    out = Path(args.out)
    _write_jsonl(kept, out)
    _echo_config(cfg, out.parent, stem=out.name + ".config")
    print(f"kept {len(kept)} of {len(records)} proposals into {out}")
    return EXIT_OK


def cmd_self_train(args, cfg: RunConfig) -> int:
    model = score_mod.load_model(Path(args.model))
    feature_maps = _read_feature_maps(Path(args.features))
    error_maps = score_mod.compute_error_maps(model, feature_maps)
    known_labeled = _read_known_boxes(Path(args.annotations))
    known = [box for box, _ in known_labeled]
    labels = pipe_mod.read_pseudo_labels(Path(args.labels))

    fmap = next(iter(feature_maps.values()))
    image_size = fmap.width * fmap.stride
    candidates = pipe_mod.generate_candidate_grid(
        image_size,
        scales_per_level=cfg.grid_scales_per_level,
        step_cells=cfg.grid_step_cells,
    )
    if args.proposals:
        candidates = candidates + [
            rec["_box"] for rec in _read_proposals(Path(args.proposals))
        ]
    candidates = pipe_mod.exclude_known_fragments(candidates, known)

    data = pipe_mod.SelfTrainData(
        known_boxes=known,
        candidates=candidates,
        error_maps=error_maps,
        image_size=image_size,
        filter_config=cfg.filter_config(),
        train_config=ae_mod.TrainConfig(
            learning_rate=cfg.scorer_learning_rate,
            epochs=cfg.scorer_epochs,
            seed=derive_seed(cfg.seed, "scorer"),
        ),
    )
    scorer = pipe_mod.init_scorer(4, seed=cfg.seed)
    st_cfg = pipe_mod.SelfTrainConfig(
        top_percent=cfg.top_percent,
        iterations=cfg.iterations,
        positive_iou=cfg.positive_iou,
    )
    labels, scorer = pipe_mod.self_train(labels, scorer, model, data, st_cfg)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pipe_mod.write_pseudo_labels(labels, out / "labels.jsonl")
    scorer_doc = {
        "cls_w": scorer.cls_w.tolist(),
        "cls_b": scorer.cls_b,
        "loc_w": scorer.loc_w.tolist(),
        "loc_b": scorer.loc_b,
    }
    (out / "scorer.json").write_text(json.dumps(scorer_doc, indent=2) + "\n")

    detections = [
        {
            "image_id": 0,
            "category_name": label,
            "bbox": [box.x, box.y, box.w, box.h],
            "score": 1.0,
        }
        for box, label in known_labeled
    ]
    # unknown detections rank by soft label times predicted localization
    # quality, so saturated soft labels do not tie fragments with whole
    # objects
    for image_id in sorted(labels.by_image):
        entries = labels.by_image[image_id]
        if not entries:
            continue
        boxes = [pl.proposal.box for pl in entries]
        feats = pipe_mod.candidate_features(error_maps, boxes, image_size)
        quality = scorer.predict_quality(feats)
        for pl, q in zip(entries, quality):
            p = pl.proposal
            detections.append(
                {
                    "image_id": image_id,
                    "category_name": "unknown",
                    "bbox": [p.box.x, p.box.y, p.box.w, p.box.h],
                    "score": p.soft_label * float(q),
                }
            )
    (out / "detections.json").write_text(
        json.dumps(detections, indent=2, default=_json_default) + "\n"
    )
    _echo_config(cfg, out)
    print(f"self-training produced {labels.total()} pseudo labels into {out}")
    return EXIT_OK


def cmd_evaluate(args, cfg: RunConfig) -> int:
    try:
        split = eval_mod.load_task_split(Path(args.split), args.task)
        gts = eval_mod.load_coco_ground_truth(Path(args.ground_truth), split)
        categories = eval_mod.coco_categories(Path(args.ground_truth))
        dets = eval_mod.load_coco_detections(Path(args.detections), categories)
        report = eval_mod.evaluate_task(dets, gts, split)
    except (OSError, json.JSONDecodeError, eval_mod.EvaluationError) as err:
        raise DataError(str(err))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    _echo_config(cfg, out.parent, stem=out.name + ".config")
    print(f"u_recall={report['u_recall']:.4f} map_both={report['map_both']:.4f} "
          f"a_ose={report['a_ose']} -> {out}")
    return EXIT_OK


# Argument wiring ------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="openworld",
        description="Unknown-object recognition pipeline over feature-map files.",
    )
    parser.add_argument("--config", help="JSON config file merged over defaults")
    parser.add_argument("--seed", type=int, help="override the config seed")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-gen", help="generate a synthetic scenario")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth_gen)

    p = sub.add_parser("train-rew", help="train autoencoders and fit density pairs")
    p.add_argument("--features", required=True)
    p.add_argument("--annotations", required=True)
    p.add_argument("--proposals", help="raw proposals excluded from background sampling")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_rew)

    p = sub.add_parser("fit-weibull", help="refit density pairs for a trained model")
    p.add_argument("--features", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--annotations", required=True)
    p.add_argument("--proposals")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit_weibull)

    p = sub.add_parser("score", help="soft-label proposals with a trained model")
    p.add_argument("--model", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--proposals", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("filter", help="apply pseudo-label quality rules")
    p.add_argument("--proposals", required=True, help="scored proposals (JSONL)")
    p.add_argument("--annotations", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_filter)

    p = sub.add_parser("self-train", help="extend pseudo labels by self-training")
    p.add_argument("--model", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--annotations", required=True)
    p.add_argument("--labels", required=True, help="filtered pseudo labels (JSONL)")
    p.add_argument("--proposals", help="scored proposals added to the candidate pool")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_self_train)

    p = sub.add_parser("evaluate", help="compute open-world detection metrics")
    p.add_argument("--detections", required=True)
    p.add_argument("--ground-truth", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--task", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    try:
        cfg = load_run_config(args.config, args.seed)
        return args.func(args, cfg)
    except (DataError, FeatureIOError, pipe_mod.PipelineError, synth_mod.GenerationError,
            FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_DATA
    except (wb_mod.WeibullError, ae_mod.TrainingDivergedError) as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
