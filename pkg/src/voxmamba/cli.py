"""Command-line entry point.

Exit codes: 0 success, 2 configuration/validation, 3 training divergence,
4 I/O or corrupt file, 5 shape/compatibility, 6 pipeline precondition.
"""
from __future__ import annotations

import argparse
import glob
import json
import logging
import os
import re
import shutil
import sys
from typing import List, Optional, Sequence

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .metrics import evaluate_pair, summarize, wilcoxon_signed_rank, write_reports_csv, UndefinedMetric
from .network import Model, ModelConfig, count_parameters
from .paths import dump_paths_csv, enumerate_paths, verify_paths
from .pipeline import (AxisOps, PipelineError, SegmentConfig, segment_hippocampus, segment_volume)
from .training import (AdamW, DivergenceError, SyntheticSpec, TrainConfig, gen_synthetic, train)
from .volumes import (ClassTable, CompatibilityError, LabelMap, VolumeFormatError, read_labelmap,
                      read_volume, write_volume)

logger = logging.getLogger("voxmamba")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO, EXIT_SHAPE, EXIT_PRECONDITION = 0, 2, 3, 4, 5, 6


class ConfigError(ValueError):
    pass


# -- helpers ----------------------------------------------------------------------

def _dims(text: str):
    try:
        dims = tuple(int(t) for t in text.split(","))
    except ValueError:
        raise ConfigError(f"bad dims {text!r}; expected D,H,W") from None
    if len(dims) != 3 or min(dims) < 1:
        raise ConfigError(f"bad dims {text!r}; expected three positive integers")
    return dims


def apply_overrides(cfg: dict, overrides: Sequence[str]) -> dict:
    """``a.b=value`` sets cfg["a"]["b"]; values parse as JSON, else stay strings."""
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"override {item!r} is not key=value")
        try:
            value = json.loads(raw)
        except ValueError:
            value = raw
        node = cfg
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} descends into a non-object")
        node[parts[-1]] = value
    return cfg


def _read_json(path: str):
    with open(path) as fh:
        try:
            return json.load(fh)
        except ValueError as err:
            raise ConfigError(f"{path}: invalid JSON ({err})") from None


def load_class_table(path: str) -> ClassTable:
    """Accepts a bare class table or a data manifest that embeds one."""
    doc = _read_json(path)
    if isinstance(doc, dict):
        doc = doc.get("class_table")
    if not isinstance(doc, list):
        raise ConfigError(f"{path}: no class table found")
    return ClassTable.from_json(doc)


def _model_config(doc: dict, n_classes: Optional[int]) -> ModelConfig:
    preset = doc.get("preset", "desk")
    if preset not in ("desk", "full"):
        raise ConfigError(f"model preset must be 'desk' or 'full', got {preset!r}")
    fields = {k: v for k, v in doc.items() if k != "preset"}
    if n_classes is not None:
        if fields.get("n_classes", n_classes) != n_classes:
            raise ConfigError(f"model.n_classes={fields['n_classes']} but the data has {n_classes} classes")
        fields["n_classes"] = n_classes
    try:
        return (ModelConfig.desk_scale if preset == "desk" else ModelConfig.full_scale)(**fields)
    except TypeError as err:
        raise ConfigError(f"bad model config: {err}") from None


def _checkpoint_table(header: dict) -> Optional[ClassTable]:
    table = header.get("extra", {}).get("class_table")
    return ClassTable.from_json(table) if table else None


# -- subcommands ------------------------------------------------------------------

def cmd_gen_synth(args) -> int:
    spec = SyntheticSpec(size=args.size, n_classes=args.classes, count=args.count, noise_sigma=args.noise)
    try:
        spec.validate()
    except ValueError as err:
        raise ConfigError(str(err)) from None
    os.makedirs(args.out, exist_ok=True)
    samples = gen_synthetic(spec, args.seed)
    scans = []
    for i, (vol, lab) in enumerate(samples):
        v_name, l_name = f"scan_{i:03d}.vol", f"scan_{i:03d}_labels.vol"
        write_volume(os.path.join(args.out, v_name), vol)
        write_volume(os.path.join(args.out, l_name), lab)
        scans.append({"id": i, "volume": v_name, "labels": l_name})
    manifest = {"class_table": samples[0][1].class_table.to_json(), "scans": scans, "seed": args.seed,
                "spec": {"size": spec.size, "n_classes": spec.n_classes, "count": spec.count,
                         "noise_sigma": spec.noise_sigma}}
    with open(os.path.join(args.out, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    print(f"wrote {len(scans)} volume/label pairs to {args.out}")
    return EXIT_OK


def load_dataset(data_dir: str):
    manifest = _read_json(os.path.join(data_dir, "manifest.json"))
    table = ClassTable.from_json(manifest["class_table"])
    out = []
    for scan in manifest["scans"]:
        vol = read_volume(os.path.join(data_dir, scan["volume"]))
        lab = read_labelmap(os.path.join(data_dir, scan["labels"]), table)
        if vol.dims != lab.dims:
            raise CompatibilityError(f"scan {scan['id']}: volume {vol.dims} vs labels {lab.dims}")
        out.append((vol, lab))
    if not out:
        raise ConfigError("manifest lists no scans")
    return out, table


def _latest_checkpoint(out_dir: str) -> Optional[str]:
    found = sorted(glob.glob(os.path.join(out_dir, "epoch_*.ckpt")))
    return found[-1] if found else None


def _resume_train_config(tc: TrainConfig, given: dict, stored: Optional[dict]) -> TrainConfig:
    """Training settings for a resumed run: the checkpoint's, with ``epochs`` extendable.

    Any other setting given on the command line must match the stored one.
    """
    if stored is None:
        return tc
    saved = TrainConfig.from_dict(stored)
    clash = sorted(k for k in given if k != "epochs" and getattr(tc, k) != getattr(saved, k))
    if clash:
        raise ConfigError(f"--resume settings differ from the checkpoint's: {', '.join(clash)}")
    if "epochs" in given:
        saved.epochs = tc.epochs
    return saved


def cmd_train(args) -> int:
    cfg = _read_json(args.config) if args.config else {}
    cfg = apply_overrides(cfg, args.set or [])
    unknown = set(cfg) - {"model", "train"}
    if unknown:
        raise ConfigError(f"unknown config sections {sorted(unknown)}")
    dataset, table = load_dataset(args.data)
    mcfg = _model_config(dict(cfg.get("model", {})), len(table))
    tdoc = dict(cfg.get("train", {}))
    if args.seed is not None:
        tdoc["seed"] = args.seed
    try:
        tc = TrainConfig.from_dict(tdoc)
    except TypeError as err:
        raise ConfigError(f"bad train config: {err}") from None
    os.makedirs(args.out, exist_ok=True)
    log_path = os.path.join(args.out, "train_log.jsonl")

    model = Model(mcfg, seed=tc.seed)
    opt = AdamW(model.parameters(), tc.weight_decay)
    start_epoch = start_step = 0
    latest = _latest_checkpoint(args.out) if args.resume else None
    if latest:
        model, header, extra = load_checkpoint(latest, with_extra=True)
        tc = _resume_train_config(tc, tdoc, header["extra"].get("train_config"))
        opt = AdamW(model.parameters(), tc.weight_decay)
        opt.load_state_tensors(extra)
        start_epoch = header["extra"]["epoch"] + 1
        start_step = header["extra"]["step"]
        logger.info("resuming from %s (epoch %d, step %d)", latest, start_epoch, start_step)
    # keep exactly one log line per optimizer step already taken
    kept = []
    if start_step and os.path.exists(log_path):
        with open(log_path) as fh:
            kept = [ln for ln in fh if ln.strip() and json.loads(ln)["step"] < start_step]
    with open(log_path, "w") as fh:
        fh.writelines(kept)

    def on_epoch_end(epoch, step, optimizer):
        path = os.path.join(args.out, f"epoch_{epoch:03d}.ckpt")
        save_checkpoint(model, path, optimizer.state_tensors(),
                        {"epoch": epoch, "step": step, "class_table": table.to_json(),
                         "train_config": {k: v for k, v in vars(tc).items()}})
        shutil.copyfile(path, os.path.join(args.out, "model.ckpt"))
        print(f"epoch {epoch} done, step {step}, checkpoint {path}", file=sys.stderr)

    train(model, dataset, tc, optimizer=opt, start_epoch=start_epoch, start_step=start_step,
          log_path=log_path, on_epoch_end=on_epoch_end)
    return EXIT_OK


def cmd_segment(args) -> int:
    in_ext = os.path.splitext(args.input)[1].lower()
    out_ext = os.path.splitext(args.output)[1].lower()
    if in_ext != out_ext:
        raise ConfigError(f"output format {out_ext!r} must match input format {in_ext!r}")
    if args.stride < 1 or args.threads < 1:
        raise ConfigError("stride and threads must be positive")
    model, header, _ = load_checkpoint(args.model, with_extra=True)
    table = load_class_table(args.classes) if args.classes else _checkpoint_table(header)
    if table is None:
        table = ClassTable.generic(model.cfg.n_classes)
    vol = read_volume(args.input)
    scfg = SegmentConfig(table, stride=args.stride,
                         target_dims=_dims(args.target_dims) if args.target_dims else None,
                         axis_ops=AxisOps.parse(args.axis_ops) if args.axis_ops else AxisOps(),
                         threads=args.threads)
    seg = segment_volume(model, vol, scfg)
    write_volume(args.output, seg)
    print(f"segmented {args.input}: {seg.meta['n_patches']} patches, {seg.meta['seconds']:.2f}s", file=sys.stderr)
    if args.hippocampus:
        hmodel, hheader, _ = load_checkpoint(args.hippocampus, with_extra=True)
        htable = _checkpoint_table(hheader) or ClassTable.generic(hmodel.cfg.n_classes)
        hseg = segment_hippocampus(hmodel, vol, seg, htable)
        hpath = args.hippocampus_output or re.sub(r"(\.\w+)$", r"_hippocampus\1", args.output)
        write_volume(hpath, hseg)
        print(f"hippocampus map written to {hpath}", file=sys.stderr)
    return EXIT_OK


def _evaluate_set(preds: List[str], truths: List[str], table: ClassTable, include_background: bool):
    if len(preds) != len(truths):
        raise ConfigError("--pred and --truth need the same number of files")
    reports = []
    for p, t in zip(preds, truths):
        reports.append((os.path.basename(p), evaluate_pair(read_labelmap(p, table), read_labelmap(t, table),
                                                           include_background=include_background)))
    return reports


def cmd_evaluate(args) -> int:
    table = load_class_table(args.classes)
    reports = _evaluate_set(args.pred, args.truth, table, args.include_background)
    write_reports_csv(args.out_csv, reports)
    summary = {"subjects": {name: r.to_json() for name, r in reports},
               "summary": summarize([r for _, r in reports])}
    if args.paired_summary:
        rows = [_table_row(args.dataset, args.model_name, summary["summary"])]
        if args.pred_b:
            reports_b = _evaluate_set(args.pred_b, args.truth, table, args.include_background)
            sb = summarize([r for _, r in reports_b])
            rows.append(_table_row(args.dataset, args.model_name_b, sb))
            summary["summary_b"] = sb
            summary["wilcoxon"] = {}
            for key in ("dsc", "vs", "assd"):
                a = [r.means[key] for _, r in reports]
                b = [r.means[key] for _, r in reports_b]
                if None in a or None in b:
                    summary["wilcoxon"][key] = None
                    continue
                try:
                    w = wilcoxon_signed_rank(a, b)
                    summary["wilcoxon"][key] = {"W": w.W, "p": w.p_two_sided, "n": w.n_effective,
                                                "method": w.method}
                except UndefinedMetric as err:
                    summary["wilcoxon"][key] = {"undefined": str(err)}
        summary["table"] = rows
        print("dataset,model,DSC,VS,ASSD")
        for r in rows:
            print(",".join(str(r[k]) for k in ("dataset", "model", "DSC", "VS", "ASSD")))
    out_json = args.out_json or os.path.splitext(args.out_csv)[0] + ".json"
    with open(out_json, "w") as fh:
        json.dump(summary, fh, indent=1, sort_keys=True)
    return EXIT_OK


def _fmt(stat) -> str:
    if stat["mean"] is None:
        return ""
    return f"{stat['mean']:.5f}±{stat['std']:.3f}"


def _table_row(dataset, model, s) -> dict:
    return {"dataset": dataset, "model": model, "DSC": _fmt(s["dsc"]), "VS": _fmt(s["vs"]), "ASSD": _fmt(s["assd"])}


def cmd_paths(args) -> int:
    dims = _dims(args.dims)
    if args.verify:
        for line in verify_paths(dims).lines():
            print(line)
    else:
        print(f"paths: {len(enumerate_paths(dims))}")
    if args.dump:
        rows = dump_paths_csv(dims, args.dump)
        print(f"dumped {rows} rows to {args.dump}")
    return EXIT_OK


def cmd_info(args) -> int:
    if args.model:
        model, header, _ = load_checkpoint(args.model, with_extra=True)
        cfg = model.cfg
    else:
        doc = _read_json(args.config) if args.config else {}
        doc = apply_overrides(doc, args.set or [])
        cfg = _model_config(dict(doc.get("model", doc)), None)
        model = Model(cfg, seed=args.seed or 0)
    n = count_parameters(model)
    print(f"config: {json.dumps(cfg.to_dict(), sort_keys=True)}")
    print(f"parameters: {n}")
    print(f"bottleneck_kind: {cfg.bottleneck_kind}")
    print("orientations: " + ",".join(str(o) for o in model.orientation_indices()))
    if args.compare:
        other_kind = "tri_oriented" if cfg.bottleneck_kind == "vss3d" else "vss3d"
        del model
        other = count_parameters(Model(ModelConfig.from_dict({**cfg.to_dict(), "bottleneck_kind": other_kind})))
        vss, tri = (n, other) if cfg.bottleneck_kind == "vss3d" else (other, n)
        print(f"parameters_{other_kind}: {other}")
        print(f"vss3d_vs_tri_oriented_reduction: {1 - vss / tri:.4f}")
    return EXIT_OK


# -- parser -----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="voxmamba", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-synth", help="write synthetic volume/label pairs")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, default=4)
    g.add_argument("--size", type=int, default=48)
    g.add_argument("--classes", type=int, default=6)
    g.add_argument("--noise", type=float, default=0.05)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gen_synth)

    t = sub.add_parser("train", help="train a model on a generated or prepared data directory")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--resume", action="store_true")
    t.add_argument("--seed", type=int)
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted config override")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("segment", help="segment a volume")
    s.add_argument("--model", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--output", required=True)
    s.add_argument("--stride", type=int, default=16)
    s.add_argument("--threads", type=int, default=1)
    s.add_argument("--classes", help="class table JSON (default: the one stored in the checkpoint)")
    s.add_argument("--target-dims")
    s.add_argument("--axis-ops", help='e.g. "2,-0,1": input axis per output axis, "-" flips')
    s.add_argument("--hippocampus", metavar="CKPT")
    s.add_argument("--hippocampus-output")
    s.set_defaults(func=cmd_segment)

    e = sub.add_parser("evaluate", help="per-class DSC / VS / ASSD")
    e.add_argument("--pred", nargs="+", required=True)
    e.add_argument("--truth", nargs="+", required=True)
    e.add_argument("--classes", required=True)
    e.add_argument("--out-csv", required=True)
    e.add_argument("--out-json")
    e.add_argument("--paired-summary", action="store_true")
    e.add_argument("--pred-b", nargs="+")
    e.add_argument("--dataset", default="dataset")
    e.add_argument("--model-name", default="model_a")
    e.add_argument("--model-name-b", default="model_b")
    e.add_argument("--include-background", action="store_true")
    e.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("paths", help="inspect the 48 traversal paths")
    p.add_argument("--dims", required=True)
    p.add_argument("--verify", action="store_true")
    p.add_argument("--dump")
    p.set_defaults(func=cmd_paths)

    i = sub.add_parser("info", help="describe a checkpoint or model config")
    i.add_argument("--model")
    i.add_argument("--config")
    i.add_argument("--set", action="append", metavar="KEY=VALUE")
    i.add_argument("--seed", type=int)
    i.add_argument("--compare", action="store_true", help="also count the other bottleneck kind")
    i.set_defaults(func=cmd_info)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse usage errors
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CheckpointError, VolumeFormatError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_IO
    except CompatibilityError as err:
        print(f"error: incompatible inputs: {err}", file=sys.stderr)
        return EXIT_SHAPE
    except PipelineError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_PRECONDITION
    except FloatingPointError as err:  # includes DivergenceError
        print(f"error: training diverged: {err}", file=sys.stderr)
        return EXIT_DIVERGED
    except OSError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, KeyError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
