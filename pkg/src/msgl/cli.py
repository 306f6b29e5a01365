"""Command line: ``msgl synth | mask | train | eval``.

Every command writes ``manifest.json`` into its output directory with the
sha256 of each input and output file. Relative ``--out`` paths are placed
under ``$MSGL_OUTPUT_ROOT`` when that variable is set.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .data_io import Partition, Scaler, load_dataset, make_partition, mask_labels, standardize, write_labels
from .errors import MSGLError
from .evaluation import metric_report, replicate_summary, welch_t_test
from .model import load_checkpoint
from .pipeline import MODES, TrainConfig, fine_prediction, predict, replicate_grid
from .synth import BasinSpec, write_basin

log = logging.getLogger("msgl")

OUTPUT_ROOT_ENV = "MSGL_OUTPUT_ROOT"


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _out_dir(arg) -> Path:
    p = Path(arg)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not p.is_absolute():
        p = Path(root) / p
    p.mkdir(parents=True, exist_ok=True)
    return p


def _args(args) -> dict:
    return {k: v for k, v in vars(args).items() if k != "func"}


def write_manifest(out: Path, command: str, args: dict, inputs=(), seeds=None):
    outputs = {}
    for f in sorted(out.rglob("*")):
        if f.is_file() and f.name != "manifest.json":
            outputs[f.relative_to(out).as_posix()] = sha256(f)
    manifest = {
        "command": command,
        "args": args,
        "inputs": {str(p): sha256(p) for p in inputs if Path(p).is_file()},
        "seeds": seeds,
        "output_dir": out.name,
        "outputs": outputs,
        "version": __version__,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def _data_files(data: Path):
    return [data / n for n in ("nodes.csv", "edges.csv", "drivers.csv", "labels.csv",
                               "cross_scale.csv", "partition.json")]


def _partition(data: Path, ds) -> Partition:
    pfile = data / "partition.json"
    return Partition.load(pfile) if pfile.exists() else make_partition(ds.T)


# -- commands -----------------------------------------------------------------------


def cmd_synth(args) -> int:
    spec = {}
    if args.spec:
        spec = json.loads(Path(args.spec).read_text())
    if args.seed is not None:
        spec["seed"] = args.seed
    spec = BasinSpec.from_dict(spec)
    out = _out_dir(args.out)
    ds = write_basin(spec, out)
    make_partition(ds.T).save(out / "partition.json", ds.dates)
    write_manifest(out, "synth", {"spec": spec.__dict__}, [args.spec] if args.spec else [],
                   {"basin": spec.seed})
    print(f"wrote basin with {ds.coarse.n} coarse / {ds.fine.n} fine reaches, {ds.T} days to {out}")
    return 0


def cmd_mask(args) -> int:
    if not 0.0 < args.fraction <= 1.0:
        raise MSGLError(f"--fraction must be in (0, 1], got {args.fraction}")
    data = Path(args.data)
    ds = load_dataset(data)
    part = _partition(data, ds)
    new_mask = mask_labels(ds.mask_f, args.fraction, args.seed, part.slice(args.range))
    before, after = int(ds.mask_f[part.slice(args.range)].sum()), int(new_mask[part.slice(args.range)].sum())
    if not np.array_equal(new_mask, ds.mask_f):
        _rewrite_fine_labels(data / "labels.csv", ds, new_mask)
    write_manifest(data, "mask", _args(args), [], {"mask": args.seed})
    print(f"{args.range}: kept {after} of {before} fine labels")
    return 0


def _rewrite_fine_labels(path: Path, ds, new_mask):
    keep = {(str(ds.dates[t]), ds.fine.node_ids[j]) for t, j in np.argwhere(new_mask)}
    fine = set(ds.fine.node_ids)
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    body = [r for r in body if r[1] not in fine or (r[0], r[1]) in keep]
    tmp = path.with_suffix(".tmp")
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(body)
    tmp.replace(path)


def _load_config(args) -> TrainConfig:
    d = json.loads(Path(args.config).read_text()) if args.config else {}
    if args.mode:
        d["mode"] = args.mode
    if args.opt:
        d["optimizer"] = args.opt
    if args.fraction is not None:
        d["fine_fraction"] = args.fraction
    if args.epochs is not None:
        d["epochs"] = args.epochs
    return TrainConfig.from_dict(d)


def cmd_train(args) -> int:
    data = Path(args.data)
    cfg = _load_config(args)
    ds = load_dataset(data)
    part = _partition(data, ds)
    ds, scaler = standardize(ds, part)
    out = _out_dir(args.out)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    part.save(out / "partition.json", ds.dates)
    seeds = [(m, k) for m in cfg.model_seeds for k in cfg.mask_seeds]
    for rep in replicate_grid(ds, part, cfg, cfg.mode, seeds):
        rdir = out / rep.tag
        rdir.mkdir(exist_ok=True)
        meta = {"train_config": cfg.to_dict(), "mode": cfg.mode, "model_seed": rep.model_seed,
                "mask_seed": rep.mask_seed, "scaler": scaler.to_dict(),
                "partition": part.to_dict()}
        rep.model.save(rdir / "checkpoint.npz", meta)
        rep.history.save(rdir / "history.json")
        write_labels(rdir / "predictions.csv", ds.dates, ds.fine.node_ids, rep.fine_pred,
                     np.ones(rep.fine_pred.shape, bool))
        print(f"{rep.tag}: best epoch {rep.history.best_epoch}, val RMSE {rep.history.best_val:.4f}")
    write_manifest(out, "train", {"mode": cfg.mode, "config": cfg.to_dict()},
                   _data_files(data) + ([Path(args.config)] if args.config else []),
                   {"model": list(cfg.model_seeds), "mask": list(cfg.mask_seeds)})
    return 0


def _read_series(path: Path, dates, node_ids) -> tuple[np.ndarray, np.ndarray]:
    T, N = len(dates), len(node_ids)
    tpos = {str(d): i for i, d in enumerate(dates)}
    npos = {k: j for j, k in enumerate(node_ids)}
    Y = np.full((T, N), np.nan)
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            t, j = tpos.get(row["date"]), npos.get(row["node_id"])
            if t is not None and j is not None:
                Y[t, j] = float(row["water_temp_c"])
    return Y, ~np.isnan(Y)


def _replicate_dirs(root: Path):
    found = sorted({p.parent for p in root.rglob("checkpoint.npz")}
                   | {p.parent for p in root.rglob("predictions.csv")})
    return found


def _replicate_prediction(rdir: Path, ds_raw, dates, fine_ids):
    ck = rdir / "checkpoint.npz"
    if ck.exists():
        model, meta = load_checkpoint(ck)
        ds = replace(ds_raw, scaler=Scaler.from_dict(meta["scaler"]))
        window = meta.get("train_config", {}).get("window", 200)
        preds = predict(model, ds, meta.get("mode", "msgl"), window)
        return fine_prediction(preds, ds.cross), meta
    pred, mask = _read_series(rdir / "predictions.csv", dates, fine_ids)
    if not mask.all():
        raise MSGLError(f"{rdir}/predictions.csv does not cover every (date, fine node)")
    return pred, {}


def _evaluate_method(root: Path, ds, part, truth, tmask, partition: str):
    reports = []
    sl = part.slice(partition)
    dirs = _replicate_dirs(root)
    if not dirs:
        raise MSGLError(f"no checkpoints or predictions found under {root}")
    for rdir in dirs:
        pred, meta = _replicate_prediction(rdir, ds, ds.dates, ds.fine.node_ids)
        rep = metric_report(pred[sl], truth[sl], tmask[sl], ds.fine.node_ids, partition,
                            model_seed=meta.get("model_seed"), mask_seed=meta.get("mask_seed"),
                            method=meta.get("mode"))
        reports.append((rdir.relative_to(root).as_posix() or ".", rep))
    return reports


def cmd_eval(args) -> int:
    data = Path(args.data)
    ds = load_dataset(data)
    part = _partition(data, ds)
    if args.truth:
        truth, tmask = _read_series(Path(args.truth), ds.dates, ds.fine.node_ids)
    else:
        truth, tmask = ds.Y_f, ds.mask_f
    methods = {Path(args.checkpoints).name or "method": Path(args.checkpoints)}
    for extra in args.compare or []:
        methods[Path(extra).name] = Path(extra)
    if len(methods) != 1 + len(args.compare or []):
        raise MSGLError("method directories must have distinct names")
    out = Path(args.out)
    if out.suffix:
        out_dir, stem = _out_dir(out.parent), out.stem
    else:
        out_dir, stem = _out_dir(out), "report"
    result = {"partition": args.partition, "data": str(data), "methods": {}}
    rmse = {}
    for name, root in methods.items():
        reps = _evaluate_method(root, ds, part, truth, tmask, args.partition)
        vals = [r.overall_rmse for _, r in reps]
        mean, std = replicate_summary(vals)
        rmse[name] = vals
        result["methods"][name] = {"replicates": {k: r.to_dict() for k, r in reps},
                                   "mean_rmse": mean, "std_rmse": std}
    if len(methods) > 1:
        comp = {}
        names = list(methods)
        for i, a in enumerate(names):
            for b in names[i + 1:]:
                if len(rmse[a]) >= 2 and len(rmse[b]) >= 2:
                    t, df, p = welch_t_test(rmse[a], rmse[b])
                    comp[f"{a} vs {b}"] = {"t": _num(t), "df": _num(df), "p": p}
        result["welch"] = comp
    (out_dir / f"{stem}.json").write_text(json.dumps(result, indent=2, sort_keys=True))
    with open(out_dir / f"{stem}.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", data.name or str(data)])
        for name in methods:
            m = result["methods"][name]
            std = "" if m["std_rmse"] is None else f"{m['std_rmse']:.3f}"
            w.writerow([name, f"{m['mean_rmse']:.3f}" + (f" ± {std}" if std else "")])
    write_manifest(out_dir, "eval", _args(args),
                   _data_files(data) + ([Path(args.truth)] if args.truth else []))
    for name in methods:
        m = result["methods"][name]
        print(f"{name}: RMSE {m['mean_rmse']:.4f} (n={len(rmse[name])})")
    return 0


def _num(x):
    return None if x is None or (isinstance(x, float) and not np.isfinite(x)) else x


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="msgl", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic two-scale basin")
    p.add_argument("--spec", help="JSON file with BasinSpec fields")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("mask", help="thin fine-scale labels in one partition range")
    p.add_argument("--data", required=True)
    p.add_argument("--fraction", type=float, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--range", choices=("train", "val"), default="train")
    p.set_defaults(func=cmd_mask)

    p = sub.add_parser("train", help="train a model for every seed pair")
    p.add_argument("--data", required=True)
    p.add_argument("--config", help="JSON file with TrainConfig fields")
    p.add_argument("--mode", choices=sorted(MODES) + ["async"])
    p.add_argument("--opt", choices=("mso", "plain"))
    p.add_argument("--fraction", type=float, help="fine label fraction kept (overrides config)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="RMSE on intact labels, optional Welch comparison")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoints", required=True)
    p.add_argument("--partition", choices=("train", "val", "test"), default="test")
    p.add_argument("--truth", help="dense label file (e.g. truth.csv) instead of labels.csv")
    p.add_argument("--compare", nargs="*", help="other method directories")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (MSGLError, ValueError, OSError) as e:
        print(f"msgl {args.command}: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
