"""``hsissl`` command line: scene generation, EASLP inspection, training,
ablations, parameter sweeps and checkpoint evaluation.

Every command writes into an existing ``--out`` directory and leaves a
``run.json`` there holding the fully resolved config; passing that file back
as ``--config`` reproduces the run bit for bit.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ABLATIONS, SWEEPS, ExperimentConfig, load_config, parse_override
from .easlp import propagate, pseudo_label_accuracy
from .errors import ConfigError, HsiError
from .hsicore import (LabelMap, PatchSampler, normalize_cube, read_cube, read_labels, write_cube,
                      write_labels)
from .model import forward, load_checkpoint, patch_features, save_checkpoint
from .trainer import (confusion_matrix, load_scene, metrics_from_confusion, prepare_scene, repeat_rng,
                      run_experiment, split_train_test, train_label_map, write_history_dump, write_log)


class CliError(Exception):
    pass


def _dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _out_dir(path: str) -> Path:
    out = Path(path)
    if not out.is_dir():
        raise CliError(f"output directory {out} does not exist")
    return out


def _resolve_config(args, extra: dict | None = None) -> ExperimentConfig:
    overrides = dict(parse_override(s) for s in (args.set or []))
    overrides.update(extra or {})
    if args.config:
        return load_config(args.config, overrides)
    return ExperimentConfig().with_overrides(overrides)


def _write_run(out: Path, command: str, cfg: ExperimentConfig, **extra) -> None:
    _dump_json({"command": command, "version": __version__, "config": cfg.to_dict(), **extra},
               out / "run.json")


def _train_overrides(args) -> dict:
    o = {}
    if getattr(args, "seed", None) is not None:
        o["seed"] = args.seed
    if getattr(args, "epochs", None) is not None:
        o["epochs"] = args.epochs
    if getattr(args, "repeats", None) is not None:
        o["repeats"] = args.repeats
    return o


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------


def cmd_gen_scene(args) -> None:
    out = _out_dir(args.out)
    extra = {"scene.seed": args.seed} if args.seed is not None else {}
    cfg = _resolve_config(args, extra)
    cube, truth = load_scene(cfg)
    train_idx, _ = split_train_test(truth, cfg.labels_per_class, repeat_rng(cfg, 0).child(1))
    write_cube(cube, out / "scene.hsi")
    write_labels(truth, out / "truth.lab")
    write_labels(train_label_map(truth, train_idx), out / "train.lab")
    _write_run(out, "gen-scene", cfg)


def cmd_easlp(args) -> None:
    out = _out_dir(args.out)
    cfg = _resolve_config(args)
    if args.cube:
        if not args.labels:
            raise CliError("--cube needs --labels")
        cube = normalize_cube(read_cube(args.cube))
        labels = read_labels(args.labels)
        truth = read_labels(args.truth) if args.truth else None
    else:
        cube, truth = load_scene(cfg)
        train_idx, _ = split_train_test(truth, cfg.labels_per_class, repeat_rng(cfg, 0).child(1))
        labels = train_label_map(truth, train_idx)
    res = propagate(cube, labels, cfg.easlp.eps, cfg.easlp.compactness, cfg.easlp.slic_iters)
    st = res.state
    write_labels(LabelMap(st.pixel_pseudo_labels.astype(np.uint16)), out / "pseudo.lab")
    if args.dump_easlp_stages:
        write_labels(LabelMap(st.stage1_pixel_labels.astype(np.uint16)), out / "stage1.lab")
        write_labels(LabelMap(st.pixel_pseudo_labels.astype(np.uint16)), out / "stage2.lab")
        prov = st.provenance[res.segmentation.assignment].astype(np.uint16)
        write_labels(LabelMap(prov), out / "provenance.lab")
        write_labels(LabelMap(res.segmentation.assignment.astype(np.uint16)), out / "segmentation.lab")
    report = {
        "num_regions": int(res.segmentation.num_regions),
        "provenance_counts": {p: int(np.sum(st.provenance == i))
                              for i, p in enumerate(("majority", "similarity", "corrected"))},
    }
    if truth is not None:
        if truth.labels.shape != labels.labels.shape:
            raise CliError("ground truth and label map dimensions differ")
        report["stage1_accuracy"] = pseudo_label_accuracy(st.stage1_pixel_labels, truth, labels)
        report["stage2_accuracy"] = pseudo_label_accuracy(st.pixel_pseudo_labels, truth, labels)
    _dump_json(report, out / "easlp.json")
    _write_run(out, "easlp", cfg)


def _train_into(out: Path, cfg: ExperimentConfig, dump_dhp: bool, scene=None) -> dict:
    scene = scene or prepare_scene(cfg)
    result = run_experiment(cfg, scene, trace_fusion=dump_dhp)
    for r, run in enumerate(result.repeats):
        write_log(out / f"log_{r:02d}.csv", run.log)
        if dump_dhp:
            write_history_dump(out / f"dhp_{r:02d}.csv", run)
    save_checkpoint(out / "checkpoint", result.repeats[0].state.params, scene.feature_spec,
                    cfg.epochs, cfg.seed)
    metrics = result.report.to_dict()
    metrics["per_repeat_oa"] = [run.report.oa for run in result.repeats]
    metrics["easlp_accuracy"] = [run.easlp_accuracy for run in result.repeats]
    _dump_json(metrics, out / "metrics.json")
    return metrics


def cmd_train(args) -> None:
    out = _out_dir(args.out)
    extra = _train_overrides(args)
    if args.ablate:
        extra.update(ABLATIONS[args.ablate])
    cfg = _resolve_config(args, extra)
    _write_run(out, "train", cfg)
    _train_into(out, cfg, args.dump_dhp)


def cmd_ablate(args) -> None:
    out = _out_dir(args.out)
    base = _resolve_config(args, _train_overrides(args))
    names = args.variants.split(",") if args.variants else list(ABLATIONS)
    unknown = [n for n in names if n not in ABLATIONS]
    if unknown:
        raise CliError(f"unknown ablation(s) {unknown}; choose from {sorted(ABLATIONS)}")
    _write_run(out, "ablate", base, variants=names)
    scene = prepare_scene(base)
    summary = {}
    for name in names:
        sub = out / name
        sub.mkdir(exist_ok=True)
        cfg = base.with_overrides(ABLATIONS[name])
        _write_run(sub, "train", cfg)
        m = _train_into(sub, cfg, args.dump_dhp, scene)
        summary[name] = {"oa": m["oa"], "oa_std": m["oa_std"], "aa": m["aa"], "kappa": m["kappa"],
                         "per_repeat_oa": m["per_repeat_oa"]}
    if "full" in summary:
        full = np.array(summary["full"]["per_repeat_oa"])
        for name, m in summary.items():
            if name != "full":
                m["full_wins"] = int(np.sum(full >= np.array(m["per_repeat_oa"])))
    _dump_json(summary, out / "ablation.json")


def cmd_sweep(args) -> None:
    out = _out_dir(args.out)
    name, values = args.sweep
    if name not in SWEEPS:
        raise CliError(f"unknown sweep {name!r}; choose from {sorted(SWEEPS)}")
    base = _resolve_config(args, _train_overrides(args))
    key = SWEEPS[name]
    grid = [parse_override(f"{key}={v}")[1] for v in values.split(",")]
    _write_run(out, "sweep", base, sweep={"name": name, "key": key, "values": grid})
    scene = None
    rows = []
    for v in grid:
        cfg = base.with_overrides({key: v})
        sub = out / f"{name}={v}"
        sub.mkdir(exist_ok=True)
        _write_run(sub, "train", cfg)
        # dhp and label-count sweeps leave the prepared scene (and its cached
        # segmentation) valid; anything else rebuilds it
        scene = scene if key.split(".")[0] in ("dhp", "labels_per_class") else None
        scene = scene or prepare_scene(cfg)
        m = _train_into(sub, cfg, args.dump_dhp, scene)
        rows.append({"value": v, "oa": m["oa"], "oa_std": m["oa_std"], "aa": m["aa"], "kappa": m["kappa"]})
    _dump_json({"name": name, "key": key, "results": rows}, out / "sweep.json")


def cmd_eval(args) -> None:
    out = _out_dir(args.out)
    params, spec, manifest = load_checkpoint(args.checkpoint)
    cube = normalize_cube(read_cube(args.cube))
    truth = read_labels(args.labels)
    if (truth.height, truth.width) != (cube.height, cube.width):
        raise CliError("label map and cube dimensions differ")
    sampler = PatchSampler(cube, spec.patch_size)
    idx = np.flatnonzero(truth.labels.ravel() > 0)
    w = cube.width
    preds = []
    for chunk in np.array_split(idx, max(1, len(idx) // 2048)):
        feats = patch_features(sampler.patches(chunk // w, chunk % w), spec)
        preds.append(np.argmax(forward(params, feats)[1], axis=1) + 1)
    y = truth.labels.ravel()[idx].astype(np.int64)
    k = max(params.num_classes, int(y.max()) if y.size else 1)
    report = metrics_from_confusion(confusion_matrix(y, np.concatenate(preds), k))
    _dump_json(report.to_dict(), out / "metrics.json")
    _dump_json({"command": "eval", "version": __version__, "checkpoint": str(args.checkpoint),
                "cube": str(args.cube), "labels": str(args.labels), "manifest": manifest},
               out / "run.json")


# --------------------------------------------------------------------------
# Parser
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hsissl", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="YAML config (or a run.json from an earlier run)")
        sp.add_argument("--out", required=True, help="existing output directory")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="dotted config override, e.g. dhp.alpha_max=0.3 (repeatable)")

    def training(sp):
        sp.add_argument("--seed", type=int)
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--repeats", type=int)
        sp.add_argument("--dump-dhp", action="store_true", help="write per-epoch L(t), alpha and fused entropy per sample")

    g = sub.add_parser("gen-scene", help="write a synthetic scene and a training label map")
    common(g)
    g.add_argument("--seed", type=int, help="scene seed")
    g.set_defaults(func=cmd_gen_scene)

    e = sub.add_parser("easlp", help="run label propagation and report per-stage accuracy")
    common(e)
    e.add_argument("--cube")
    e.add_argument("--labels", help="training label map")
    e.add_argument("--truth", help="ground truth for accuracy reporting")
    e.add_argument("--dump-easlp-stages", action="store_true")
    e.set_defaults(func=cmd_easlp)

    t = sub.add_parser("train", help="train and evaluate")
    common(t)
    training(t)
    t.add_argument("--ablate", choices=[k for k in ABLATIONS if k != "full"])
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("ablate", help="train the full model and its ablations on paired seeds")
    common(a)
    training(a)
    a.add_argument("--variants", help=f"comma list from {','.join(ABLATIONS)} (default: all)")
    a.set_defaults(func=cmd_ablate)

    s = sub.add_parser("sweep", help="train once per value of one hyperparameter")
    common(s)
    training(s)
    s.add_argument("--sweep", nargs=2, required=True, metavar=("NAME", "VALUES"),
                   help=f"NAME in {{{','.join(SWEEPS)}}}, VALUES comma separated")
    s.set_defaults(func=cmd_sweep)

    v = sub.add_parser("eval", help="evaluate a checkpoint on a labeled cube")
    v.add_argument("--out", required=True)
    v.add_argument("--checkpoint", required=True)
    v.add_argument("--cube", required=True)
    v.add_argument("--labels", required=True)
    v.set_defaults(func=cmd_eval)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except (CliError, ConfigError, HsiError, OSError) as exc:
        print(f"hsissl {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
