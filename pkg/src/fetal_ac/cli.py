"""Command-line entry point: ``fetal-ac <command> ...``.

Every command writes its primary artifacts deterministically and a
``*.record.json`` reproducibility record (config, seeds, versions, time).
"""
from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
from datetime import datetime, timezone
from importlib import metadata
from pathlib import Path

import numpy as np
import scipy

from . import acceptance as acc
from .classifier import (
    UNIFORM,
    build_classifier,
    load_classifier,
    patch_accuracy,
    render_map_rgb,
    render_overlay,
    save_classifier,
    semantic_map,
    train_classifier,
)
from .config import RunConfig
from .ellipse import Ellipse, measure_ac
from .errors import ConfigError, FetalACError
from .imageio import read_keyvalue, read_pgm, write_pgm, write_ppm
from .metrics import ConfusionMatrix2, accuracy, evaluate_ac
from .patches import fan_range
from .phantom import generate_dataset, write_dataset
from .pipeline import load_image, load_manifest, patch_dataset, segment_and_measure

log = logging.getLogger("fetal_ac")

EXIT_PIPELINE = 3


def _versions() -> dict:
    try:
        pkg = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        pkg = "unknown"
    return {"python": platform.python_version(), "numpy": np.__version__, "scipy": scipy.__version__, "fetal_ac": pkg}


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.generic):
        obj = obj.item()
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    if isinstance(obj, Path):
        return str(obj)
    return obj


def _dump(obj) -> str:
    return json.dumps(_plain(obj), indent=2, sort_keys=True) + "\n"


def write_json(path, obj) -> None:
    Path(path).write_text(_dump(obj))


def write_record(artifact, args: argparse.Namespace, cfg: RunConfig, extra: dict | None = None) -> Path:
    """Side record next to ``artifact``; the only file that carries a timestamp."""
    artifact = Path(artifact)
    path = artifact / "record.json" if artifact.is_dir() else artifact.with_name(artifact.name + ".record.json")
    rec = {
        "command": args.command,
        "argv": list(getattr(args, "argv", [])),
        "config": cfg.to_dict(),
        "seeds": {"seed": cfg.seed, "hough_seed": cfg.hough_seed},
        "versions": _versions(),
        "created": datetime.now(timezone.utc).isoformat(timespec="seconds"),
    }
    rec.update(extra or {})
    write_json(path, rec)
    return path


# --- commands ----------------------------------------------------------------


def cmd_gen_data(args, cfg: RunConfig) -> int:
    items = generate_dataset(cfg.n_true, cfg.n_false, cfg.seed, train_fraction=cfg.train_fraction)
    header = {"seed": cfg.seed, "n_true": cfg.n_true, "n_false": cfg.n_false}
    manifest = write_dataset(items, args.out, header)
    write_record(Path(args.out), args, cfg, {"manifest": str(manifest)})
    print(manifest)
    return 0


def cmd_train_classifier(args, cfg: RunConfig) -> int:
    samples = load_manifest(args.data)
    ccfg = cfg.classifier()
    data = patch_dataset(samples, cfg.sampling(1.0, cfg.seed))
    if len(data.train) == 0:
        raise ConfigError("manifest has no training images with label maps")
    first = next(s.image for s in samples if s.split == "train")
    fan = fan_range(first.shape, first.probe_origin) if cfg.dir_init == UNIFORM else None
    net = build_classifier(cfg.seed, cfg.dir_init, ccfg, fan)

    def progress(it, loss, a):
        log.info("iter %d loss %.4f test acc %.4f", it, loss, a)

    curve = train_classifier(net, data, cfg.training(), progress)
    save_classifier(args.out, net)
    if args.curve:
        curve.write_csv(args.curve)
    held_out = patch_accuracy(net, data.test) if len(data.test) else float("nan")
    summary = {"train_patches": len(data.train), "test_patches": len(data.test), "held_out_accuracy": held_out}
    write_record(args.out, args, cfg, {"summary": summary})
    print(_dump(summary), end="")
    return 0


def cmd_segment(args, cfg: RunConfig) -> int:
    net = load_classifier(args.weights)
    image = load_image(args.image, args.sidecar or Path(args.image).with_suffix(".txt"))
    smap = semantic_map(image, net, cfg.segment_batch)
    write_pgm(args.out, smap.labels)
    if args.color:
        write_ppm(args.color, render_map_rgb(smap.labels))
    if args.overlay:
        write_ppm(args.overlay, render_overlay(image.pixels, smap.labels))
    write_record(args.out, args, cfg)
    return 0


def _measurement_record(labels, spacing: float, cfg: RunConfig) -> dict:
    m = measure_ac(labels, spacing, config=cfg.measure())
    return m.to_dict()


def _spacing(args) -> float:
    if args.spacing is not None:
        return float(args.spacing)
    if args.sidecar:
        return float(read_keyvalue(args.sidecar).get("pixel_spacing_mm", 1.0))
    return 1.0


def cmd_measure(args, cfg: RunConfig) -> int:
    labels = read_pgm(args.map)
    rec = _measurement_record(labels, _spacing(args), cfg)
    if args.out:
        write_json(args.out, rec)
        write_record(args.out, args, cfg)
    print(_dump(rec), end="")
    return 0


def cmd_accept(args, cfg: RunConfig) -> int:
    net, stored = acc.load_acceptance(args.weights)
    threshold = cfg.threshold if cfg.threshold >= 0 else stored
    if args.threshold is not None:
        threshold = args.threshold
    labels = read_pgm(args.map)
    if args.measurement:
        rec = json.loads(Path(args.measurement).read_text())
    else:
        try:
            rec = _measurement_record(labels, _spacing(args), cfg)
        except FetalACError as exc:
            rec = {"error": getattr(exc, "code", type(exc).__name__)}
    if "ellipse" in rec:
        e = Ellipse(**{k: rec["ellipse"][k] for k in ("cx", "cy", "a", "b", "theta")})
        decision = acc.check_plane(net, threshold, labels, e)
    else:
        decision = acc.AcceptanceDecision(0.0, float(threshold), False, "no-ellipse")
    rec["acceptance"] = decision.to_dict()
    if args.out:
        write_json(args.out, rec)
        write_record(args.out, args, cfg)
    print(_dump(rec), end="")
    return 0


def acceptance_inputs(samples, cfg: RunConfig, classifier=None):
    """Crops, truth flags and splits; maps come from labels or from a classifier."""
    acfg = cfg.acceptance()
    xs, ys, splits, ok = [], [], [], []
    for s in samples:
        labels = semantic_map(s.image, classifier, cfg.segment_batch).labels if classifier else s.labels
        x = acc.plane_input(labels, acfg.input_size, acfg.margin, cfg.measure())
        ok.append(x is not None)
        xs.append(x if x is not None else np.zeros((acfg.input_size,) * 2 + (3,), np.float32))
        ys.append(s.is_true_plane)
        splits.append(s.split)
    return np.stack(xs), np.array(ys, bool), np.array(splits, object), np.array(ok, bool)


def cmd_train_acceptance(args, cfg: RunConfig) -> int:
    samples = load_manifest(args.data)
    clf = load_classifier(args.classifier) if args.classifier else None
    x, y, split, ok = acceptance_inputs(samples, cfg, clf)
    tr, te = ok & (split == "train"), ok & (split == "test")
    res = acc.train_acceptance(x[tr], y[tr], x[te], y[te], cfg.acceptance(), cfg.acceptance_training())
    acc.save_acceptance(args.out, res.net, res.threshold)
    test = split == "test"
    pred = np.zeros(len(y), bool)
    pred[te] = res.test_scores >= res.threshold
    cm = ConfusionMatrix2.from_predictions(y[test], pred[test])
    summary = {
        "threshold": res.threshold,
        "net_test_accuracy": res.test_accuracy,
        "pipeline_test_accuracy": accuracy(cm),
        "confusion": cm.__dict__,
        "unfitted_planes": int((~ok).sum()),
    }
    write_record(args.out, args, cfg, {"summary": summary})
    print(_dump(summary), end="")
    return 0


def _read_confusions(path) -> list[tuple[str, ConfusionMatrix2]]:
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        name, *toks = line.split()
        kv = dict(t.split("=", 1) for t in toks if "=" in t)
        try:
            out.append((name, ConfusionMatrix2(int(kv["tp"]), int(kv["tn"]), int(kv["fp"]), int(kv["fn"]))))
        except (KeyError, ValueError):
            raise ConfigError(f"{path}:{lineno}: expected 'name tp=.. tn=.. fp=.. fn=..'") from None
    return out


def cmd_evaluate(args, cfg: RunConfig) -> int:
    if not args.confusion and not args.data:
        raise ConfigError("evaluate needs --data or --confusion")
    if args.confusion:
        for name, cm in _read_confusions(args.confusion):
            print(f"{name} accuracy={accuracy(cm):.3f} (tp={cm.n_tp} tn={cm.n_tn} fp={cm.n_fp} fn={cm.n_fn})")
    if not args.data:
        return 0
    if not args.classifier or not args.out:
        raise ConfigError("evaluate --data needs --classifier and --out")
    samples = [s for s in load_manifest(args.data) if args.split == "all" or s.split == args.split]
    net = load_classifier(args.classifier)
    acc_net = acc.load_acceptance(args.acceptance) if args.acceptance else None
    truths, measured, ids, shapes, errors, decisions = [], [], [], [], {}, []
    for s in samples:
        smap, m, err = segment_and_measure(s.image, net, cfg.measure(), cfg.segment_batch)
        if acc_net is not None:
            a_net, thr = acc_net
            d = (acc.check_plane(a_net, thr, smap.labels, m.ellipse) if m is not None
                 else acc.AcceptanceDecision(0.0, thr, False, "no-ellipse"))
            decisions.append((s.is_true_plane, d.accepted))
        if not s.is_true_plane:
            continue
        ids.append(s.id)
        shapes.append(s.image.shape)
        truths.append(s.truth())
        measured.append(m.ellipse if m is not None else None)
        if err:
            errors[s.id] = err
    ev = evaluate_ac(truths, measured, shapes, ids)
    out = Path(args.out)
    ev.write_csv(out.with_suffix(".csv"))
    summary = ev.summary()
    summary["errors"] = errors
    if decisions:
        t, p = zip(*decisions)
        cm = ConfusionMatrix2.from_predictions(t, p)
        summary["acceptance_confusion"] = cm.__dict__
        summary["acceptance_accuracy"] = accuracy(cm)
    write_json(out.with_suffix(".summary.json"), summary)
    write_record(out.with_suffix(".summary.json"), args, cfg)
    print(_dump(summary), end="")
    return 0


def cmd_report(args, cfg: RunConfig) -> int:
    root = Path(args.run)
    lines = [f"run: {root.resolve().name}"]
    for p in sorted(root.rglob("*.summary.json")):
        s = json.loads(p.read_text())
        lines.append(f"[{p.relative_to(root)}]")
        if s.get("dice_mean") is None and "dice_mean" in s:
            lines.append(f"  images {s['n']}  failures {s['failures']} (no successful measurement)")
        elif "dice_mean" in s:
            lines.append(f"  images {s['n']}  failures {s['failures']} ({100 * s['failure_rate']:.1f}%)")
            lines.append(f"  dice {100 * s['dice_mean']:.2f} +/- {100 * s['dice_std']:.2f} %")
            lines.append(f"  top {int(100 * s['top_fraction'])}% dice {100 * s['top_dice_mean']:.2f} "
                         f"+/- {100 * s['top_dice_std']:.2f} %")
        if "acceptance_accuracy" in s:
            lines.append(f"  acceptance accuracy {s['acceptance_accuracy']:.3f}")
    for p in sorted(root.rglob("*.record.json")):
        s = json.loads(p.read_text()).get("summary")
        if s:
            lines.append(f"[{p.relative_to(root)}]")
            lines += [f"  {k} {v}" for k, v in sorted(s.items()) if not isinstance(v, dict)]
    for p in sorted(root.rglob("*curve*.csv")):
        rows = p.read_text().splitlines()[1:]
        if rows:
            it, loss, a = rows[-1].split(",")
            lines.append(f"[{p.relative_to(root)}] final iteration {it} loss {loss} test accuracy {a}")
    text = "\n".join(lines) + "\n"
    out = Path(args.out) if args.out else root / "report.txt"
    out.write_text(text)
    print(text, end="")
    return 0


# --- parser ------------------------------------------------------------------


def _kv(text: str) -> tuple[str, str]:
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected KEY=VALUE, got {text!r}")
    k, v = text.split("=", 1)
    return k.strip(), v.strip()


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value run configuration file")
    common.add_argument("--set", dest="overrides", type=_kv, action="append", default=[], metavar="KEY=VALUE",
                        help="override one configuration key (repeatable)")
    common.add_argument("--seed", type=int, help="shorthand for --set seed=N")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="fetal-ac", description="Fetal abdominal circumference pipeline.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-data", parents=[common], help="write a synthetic phantom dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--n-true", type=int)
    s.add_argument("--n-false", type=int)
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("train-classifier", parents=[common], help="train the patch classifier")
    s.add_argument("--data", required=True, help="manifest.txt")
    s.add_argument("--out", required=True, help="weight file")
    s.add_argument("--curve", help="learning-curve CSV")
    s.add_argument("--iterations", type=int)
    s.set_defaults(func=cmd_train_classifier)

    s = sub.add_parser("segment", parents=[common], help="semantic map of one image")
    s.add_argument("--weights", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--sidecar")
    s.add_argument("--out", required=True, help="label-code PGM")
    s.add_argument("--color", help="palette PPM")
    s.add_argument("--overlay", help="image with coloured labels, PPM")
    s.set_defaults(func=cmd_segment)

    s = sub.add_parser("measure", parents=[common], help="fit the abdomen ellipse and report AC")
    s.add_argument("--map", required=True, help="semantic or label map PGM")
    s.add_argument("--sidecar")
    s.add_argument("--spacing", type=float, help="pixel spacing in mm")
    s.add_argument("--out", help="measurement JSON")
    s.set_defaults(func=cmd_measure)

    s = sub.add_parser("accept", parents=[common], help="plane acceptance decision")
    s.add_argument("--map", required=True)
    s.add_argument("--weights", required=True, help="acceptance weight file")
    s.add_argument("--measurement", help="measurement JSON to extend")
    s.add_argument("--threshold", type=float)
    s.add_argument("--sidecar")
    s.add_argument("--spacing", type=float)
    s.add_argument("--out")
    s.set_defaults(func=cmd_accept)

    s = sub.add_parser("train-acceptance", parents=[common], help="train the plane acceptance net")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--classifier", help="segment images with this classifier instead of using label maps")
    s.set_defaults(func=cmd_train_acceptance)

    s = sub.add_parser("evaluate", parents=[common], help="Dice and accuracy evaluation")
    s.add_argument("--data")
    s.add_argument("--classifier")
    s.add_argument("--acceptance")
    s.add_argument("--split", default="test", choices=("train", "test", "all"))
    s.add_argument("--out", help="output prefix for .csv and .summary.json")
    s.add_argument("--confusion", help="file of 'name tp=.. tn=.. fp=.. fn=..' lines")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("report", parents=[common], help="summarise a run directory")
    s.add_argument("run")
    s.add_argument("--out")
    s.set_defaults(func=cmd_report)
    return p


def _config(args) -> RunConfig:
    over = dict(args.overrides)
    if args.seed is not None:
        over["seed"] = str(args.seed)
    for flag, key in (("n_true", "n_true"), ("n_false", "n_false"), ("iterations", "iterations")):
        if getattr(args, flag, None) is not None:
            over[key] = str(getattr(args, flag))
    return RunConfig.load(args.config, over)


def main(argv=None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    args = parser.parse_args(argv)
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = _config(args)
    except ConfigError as exc:
        parser.error(str(exc))
    for name in ("out", "curve", "color", "overlay"):
        target = getattr(args, name, None)
        if target and args.command not in ("gen-data", "report"):
            Path(target).parent.mkdir(parents=True, exist_ok=True)
    try:
        return args.func(args, cfg)
    except FetalACError as exc:
        code = getattr(exc, "code", type(exc).__name__)
        print(f"error: {code}: {exc}", file=sys.stderr)
        return EXIT_PIPELINE


if __name__ == "__main__":
    sys.exit(main())
