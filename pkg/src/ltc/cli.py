"""Command-line entry point: ``ltc <command> [--config FILE] [key=value ...]``.

Configuration is flat ``key=value`` text (``#`` comments allowed), merged with
``key=value`` arguments given after the command.  Each command accepts only
the keys listed in ``KEYS``; anything else is a usage error.  The thread
count comes from ``--threads`` or ``threads=``, and ``LTC_THREADS`` in the
environment overrides both.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, fields, replace
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .data import (
    AugmentationConfig,
    DataError,
    Manifest,
    augment,
    compute_rgb_mean,
    load_split,
    read_mean,
    write_mean,
)
from .eval import (
    ScoreTable,
    TableError,
    clip_accuracy,
    extent_analysis,
    late_fusion,
    per_class_accuracy,
    score_videos,
    video_accuracy,
)
from .gradcheck import TOLERANCE, run_gradcheck
from .inspection import (
    export_filter_fields,
    fields_to_json,
    fields_to_svg,
    layer_top_activations,
    mean_purity,
    purity_grid,
    purity_grid_export,
)
from .network import FormatError, NetworkSpec, build, load, save
from .optim import NumericalError, TrainSchedule, preset, train
from .synth import SynthConfig, synth_generate

log = logging.getLogger("ltc")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

_COMMON = {"seed", "threads", "out"}
_NET = {"frames", "width", "height", "num_classes", "dropout", "conv_channels", "fc_sizes"}
_SCHED = {"preset", "scale", "lr", "iterations", "milestones", "batch_size", "weight_decay", "momentum"}
_AUG = {"random_clip", "multiscale", "flip"}
KEYS = {
    "gen-synth": _COMMON | {f.name for f in fields(SynthConfig)},
    "train": _COMMON | _NET | _SCHED | _AUG | {"dataset", "modality", "rgb_mean", "log_every"},
    "eval": _COMMON | {"dataset", "checkpoint", "split", "stride", "rgb_mean"},
    "fuse": _COMMON | {"tables", "weights", "dataset"},
    "analyze-extents": _COMMON | {"tables", "dataset"},
    "inspect-filters": _COMMON | {"checkpoint"},
    "top-activations": _COMMON | {"dataset", "checkpoint", "layers", "k", "filters", "one_per_group", "stride", "split", "rgb_mean"},
    "gradcheck": _COMMON | {"seeds"},
}


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# Configuration


def parse_kv(lines, source):
    cfg = {}
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{source}:{lineno}: expected key=value, got {raw!r}")
        k, v = line.split("=", 1)
        cfg[k.strip()] = v.strip()
    return cfg


def _bool(v):
    if str(v).lower() in ("1", "true", "yes", "on"):
        return True
    if str(v).lower() in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"expected a boolean, got {v!r}")


def _ints(v):
    return tuple(int(x) for x in str(v).split(",") if x.strip())


class RunConfig(dict):
    """Validated flat key/value configuration for one command."""

    def __init__(self, command, values):
        unknown = set(values) - KEYS[command]
        if unknown:
            raise UsageError(f"unknown config key(s) for {command}: {', '.join(sorted(unknown))}")
        super().__init__(values)
        self.command = command

    def get_int(self, key, default=None):
        return int(self[key]) if key in self else default

    def get_float(self, key, default=None):
        return float(self[key]) if key in self else default

    def get_bool(self, key, default=False):
        return _bool(self[key]) if key in self else default

    def path(self, key, must_exist=True):
        if key not in self:
            raise UsageError(f"missing required key {key!r}")
        p = Path(self[key])
        if must_exist and not p.exists():
            raise DataError(f"{key}: {p} does not exist")
        return p


def _out_dir(cfg, force, guard):
    out = Path(cfg.get("out", "."))
    if guard and (out / guard).exists() and not force:
        raise UsageError(f"{out / guard} exists; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_meta(out, cfg, extra=None):
    meta = {"command": cfg.command, "version": __version__, "config": dict(cfg),
            "threads": getattr(cfg, "threads", None)}
    meta.update(extra or {})
    (out / "run.json").write_text(json.dumps(meta, indent=1, sort_keys=True, default=str) + "\n")


def _manifest(cfg, modality=None):
    root = cfg.path("dataset")
    if modality and (root / f"manifest_{modality}.tsv").exists():
        return Manifest.load(root, manifest=f"manifest_{modality}.tsv")
    return Manifest.load(root)


def _rgb_mean(cfg, manifest, modality, compute=False):
    if modality != "rgb" or not cfg.get_bool("rgb_mean"):
        return None
    sidecar = manifest.root / "rgb_mean.txt"
    if compute and not sidecar.exists():
        write_mean(compute_rgb_mean(manifest.read(r) for r in manifest.split("train")), sidecar)
    if not sidecar.exists():
        raise DataError(f"{sidecar} missing; train with rgb_mean=true first")
    return read_mean(sidecar)


# ---------------------------------------------------------------------------
# Commands


def cmd_gen_synth(cfg, force):
    kw = {}
    for f in fields(SynthConfig):
        if f.name in cfg:
            kw[f.name] = type(f.default)(cfg[f.name])
    synth = SynthConfig(**kw)
    out = _out_dir(cfg, force, "manifest_flow.tsv")
    seed = cfg.get_int("seed", 0)
    synth_generate(synth, seed, out)
    _write_meta(out, cfg, {"seed": seed, "synth": asdict(synth)})
    print(f"wrote {synth.num_classes * synth.clips_per_class} clips to {out}")


def _schedule(cfg, frames):
    name = cfg.get("preset") or ("ucf101-16f" if frames <= 16 else "ucf101-60f" if frames <= 60 else "ucf101-100f")
    sched = preset(name, scale=cfg.get_float("scale", 1))
    over = {}
    if "lr" in cfg:
        over["initial_lr"] = cfg.get_float("lr")
    if "iterations" in cfg:
        over["total_iterations"] = cfg.get_int("iterations")
        if "milestones" not in cfg:
            over["milestones"] = ()
    if "milestones" in cfg:
        over["milestones"] = _ints(cfg["milestones"])
    for key, attr, conv in (("batch_size", "batch_size", int), ("weight_decay", "weight_decay", float),
                            ("momentum", "momentum", float), ("dropout", "dropout", float)):
        if key in cfg:
            over[attr] = conv(cfg[key])
    return TrainSchedule(**{**asdict(sched), **over})


def cmd_train(cfg, force):
    modality = cfg.get("modality", "flow")
    manifest = _manifest(cfg, modality)
    out = _out_dir(cfg, force, "model.ltcn")
    data = load_split(manifest, "train", rgb_mean=_rgb_mean(cfg, manifest, modality, compute=True))
    first = data[0][1]
    frames = cfg.get_int("frames", 16)
    sched = _schedule(cfg, frames)
    spec_kw = {}
    if "conv_channels" in cfg:
        spec_kw["conv_channels"] = _ints(cfg["conv_channels"])
    if "fc_sizes" in cfg:
        spec_kw["fc_sizes"] = _ints(cfg["fc_sizes"])
    spec = NetworkSpec(
        modality,
        cfg.get_int("width", first.width),
        cfg.get_int("height", first.height),
        frames,
        cfg.get_int("num_classes", len(manifest.classes)),
        dropout=sched.dropout,
        **spec_kw,
    )
    if first.modality != modality:
        raise DataError(f"dataset holds {first.modality} volumes, config asks for {modality}")
    aug = AugmentationConfig(
        spec.width, spec.height, spec.frames,
        random_clip=cfg.get_bool("random_clip", True),
        multiscale=cfg.get_bool("multiscale", True),
        flip=cfg.get_bool("flip", True),
    )
    seed = cfg.get_int("seed", 0)
    net = build(spec, seed)
    log_path = out / "train.log"
    with open(log_path, "w") as fh:
        fh.write("# iteration\tlr\twd\tloss\tbatch_accuracy\n")
        result = train(net, [(v, label) for _, v, label in data], sched, aug, seed,
                       log_every=cfg.get_int("log_every", 10),
                       on_log=lambda r: fh.write(r.line() + "\n"))
    save(net, out / "model.ltcn")
    final_acc = _train_accuracy(net, data, aug)
    _write_meta(out, cfg, {"seed": seed, "spec": asdict(spec), "schedule": asdict(sched),
                           "augmentation": asdict(aug), "final_loss": result.log[-1].loss,
                           "final_train_accuracy": final_acc})
    print(f"trained {sched.total_iterations} iterations; final loss {result.log[-1].loss:.4f}, "
          f"train accuracy {final_acc:.3f}")


def _train_accuracy(net, data, aug):
    """Accuracy on the centre clip of every training video, dropout off."""
    centre = replace(aug, random_clip=False, multiscale=False, flip=False)
    hits = 0
    for _, vol, label in data:
        clip = augment(vol, centre, None)
        hits += int(np.argmax(net.forward(clip.data[None])[0])) == label
    return hits / len(data)


def _checkpoint_id(path):
    # content-addressed, so identical checkpoints give byte-identical tables
    return f"{path.name} sha256:{hashlib.sha256(path.read_bytes()).hexdigest()[:16]}"


def cmd_eval(cfg, force):
    net = load(cfg.path("checkpoint"))
    modality = net.spec.modality
    manifest = _manifest(cfg, modality)
    split = cfg.get("split", "test")
    if not manifest.split(split):
        raise DataError(f"split {split!r} is empty")
    data = load_split(manifest, split, rgb_mean=_rgb_mean(cfg, manifest, modality))
    if data[0][1].modality != modality:
        raise DataError(f"checkpoint is {modality} but dataset volumes are {data[0][1].modality}")
    out = _out_dir(cfg, force, "scores.tsv")
    table, per_clip = score_videos(net, [(r.id, v) for r, v, _ in data], manifest.classes,
                                   stride=cfg.get_int("stride", 4), provenance=_checkpoint_id(cfg.path("checkpoint")))
    table.save(out / "scores.tsv")
    labels = manifest.labels()
    clip_rows = np.concatenate([per_clip[r.id] for r, _, _ in data])
    clip_labels = np.concatenate([[label] * len(per_clip[r.id]) for r, _, label in data])
    report = {
        "videos": len(data),
        "clips": int(len(clip_rows)),
        "clip_accuracy": clip_accuracy(clip_rows, clip_labels),
        "video_accuracy": video_accuracy(ScoreTable.load(out / "scores.tsv"), labels),
    }
    (out / "report.json").write_text(json.dumps(report, indent=1) + "\n")
    _write_meta(out, cfg)
    print(f"clip accuracy {report['clip_accuracy']:.4f}  video accuracy {report['video_accuracy']:.4f}")


def _table_paths(cfg, positional):
    paths = list(positional)
    if "tables" in cfg:
        paths += [p for p in cfg["tables"].split(",") if p]
    if not paths:
        raise UsageError("no score tables given")
    return paths


def cmd_fuse(cfg, force, positional):
    paths = _table_paths(cfg, positional)
    tables = []
    for p in paths:
        if not Path(p).exists():
            raise DataError(f"{p} does not exist")
        t = ScoreTable.load(p)
        t.provenance = t.provenance or str(p)
        tables.append(t)
    for p, t in zip(paths[1:], tables[1:]):
        if t.classes != tables[0].classes:
            raise TableError(f"class headers differ between {paths[0]} and {p}")
    weights = [float(w) for w in cfg["weights"].split(",")] if "weights" in cfg else None
    out = _out_dir(cfg, force, "fused.tsv")
    fused = late_fusion(tables, weights, provenance="fusion of " + ", ".join(map(str, paths)))
    fused.save(out / "fused.tsv")
    report = {"inputs": [str(p) for p in paths], "weights": weights}
    if "dataset" in cfg:
        labels = Manifest.load(cfg.path("dataset"), manifest=_any_manifest(cfg.path("dataset"))).labels()
        report["video_accuracy"] = {str(p): video_accuracy(t, labels) for p, t in zip(paths, tables)}
        report["fused_video_accuracy"] = video_accuracy(fused, labels)
        print(f"fused video accuracy {report['fused_video_accuracy']:.4f}")
    (out / "fusion.json").write_text(json.dumps(report, indent=1) + "\n")
    _write_meta(out, cfg)


def _any_manifest(root):
    for name in ("manifest.tsv", "manifest_flow.tsv", "manifest_rgb.tsv"):
        if (Path(root) / name).exists():
            return name
    raise DataError(f"no manifest in {root}")


def cmd_analyze_extents(cfg, force, positional):
    tagged = []
    for item in _table_paths(cfg, positional):
        if "=" not in item:
            raise UsageError(f"tables must be tagged as EXTENT=PATH, got {item!r}")
        t, p = item.split("=", 1)
        if not Path(p).exists():
            raise DataError(f"{p} does not exist")
        tagged.append((int(t), ScoreTable.load(p)))
    if len(tagged) < 2:
        raise UsageError("need score tables for at least two extents")
    tagged.sort(key=lambda x: x[0])
    classes = tagged[0][1].classes
    for t, table in tagged:
        if table.classes != classes:
            raise TableError(f"class list of the {t}-frame table differs")
    labels = Manifest.load(cfg.path("dataset"), manifest=_any_manifest(cfg.path("dataset"))).labels()
    acc = [per_class_accuracy(table, labels) for _, table in tagged]
    p = [[a[c] for a in acc] for c in classes]
    analysis = extent_analysis(p, [t for t, _ in tagged], classes)
    out = _out_dir(cfg, force, "extents.json")
    (out / "extents.json").write_text(json.dumps(analysis.to_dict(), indent=1) + "\n")
    lines = ["class\t" + "\t".join(f"{t}f" for t in analysis.extents)]
    lines += [f"{c}\t" + "\t".join(f"{v:.4f}" for v in row) for c, row in zip(classes, analysis.p)]
    lines.append("|M(t)|\t" + "\t".join(str(len(analysis.best[t])) for t in analysis.extents))
    lines.append("d(t)\t" + "\t".join("-" if analysis.gain[t] is None else f"{analysis.gain[t]:.4f}"
                                       for t in analysis.extents))
    text = "\n".join(lines) + "\n"
    (out / "extents.txt").write_text(text)
    _write_meta(out, cfg)
    print(text, end="")


def cmd_inspect_filters(cfg, force):
    net = load(cfg.path("checkpoint"))
    out = _out_dir(cfg, force, "filters.json")
    fields_ = export_filter_fields(net)
    fields_to_json(fields_, out / "filters.json")
    fields_to_svg(fields_, out / "filters.svg")
    _write_meta(out, cfg)
    print(f"exported {len(fields_)} conv1 filters")


def cmd_top_activations(cfg, force):
    net = load(cfg.path("checkpoint"))
    manifest = _manifest(cfg, net.spec.modality)
    data = load_split(manifest, cfg.get("split", "test"), rgb_mean=_rgb_mean(cfg, manifest, net.spec.modality))
    videos = [(r, v) for r, v, _ in data]
    k = cfg.get_int("k", 7)
    n_filters = cfg.get_int("filters", 30)
    out = _out_dir(cfg, force, "top_activations.json")
    records, grids, purity = {}, {}, {}
    for layer in cfg.get("layers", "conv3,conv4,conv5").split(","):
        per_filter = layer_top_activations(net, layer, videos, k, cfg.get_bool("one_per_group", True),
                                           cfg.get_int("stride", 4))
        records[layer] = {str(f): [r.to_dict() for r in recs] for f, recs in per_filter.items()}
        grids[layer] = purity_grid(per_filter, n_filters, k)
        purity[layer] = mean_purity(per_filter)
    (out / "top_activations.json").write_text(json.dumps(records, indent=1) + "\n")
    purity_grid_export(grids, manifest.classes, out / "purity_grid.json", out / "purity_grid.svg")
    _write_meta(out, cfg, {"mean_purity": purity})
    for layer, p in purity.items():
        print(f"{layer}\tmean purity {p:.3f}")


def cmd_gradcheck(cfg, force, conv_backward=None):
    report = run_gradcheck(seeds=cfg.get_int("seeds", 10), conv_backward=conv_backward)
    ok = True
    for name, err in report.items():
        status = "PASS" if err < TOLERANCE else "FAIL"
        ok &= err < TOLERANCE
        print(f"{name}\t{err:.3e}\t{status}")
    return EXIT_OK if ok else EXIT_NUMERIC


COMMANDS = {
    "gen-synth": cmd_gen_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "fuse": cmd_fuse,
    "analyze-extents": cmd_analyze_extents,
    "inspect-filters": cmd_inspect_filters,
    "top-activations": cmd_top_activations,
    "gradcheck": cmd_gradcheck,
}


def build_parser():
    p = argparse.ArgumentParser(prog="ltc", description="Long-term temporal convolution networks")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("args", nargs="*", help="key=value overrides, or score tables for fuse/analyze-extents")
    p.add_argument("--config", help="flat key=value configuration file")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--out")
    p.add_argument("--force", action="store_true", help="overwrite existing outputs")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None):
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if ns.verbose else logging.WARNING, format="%(message)s")
    try:
        values = {}
        if ns.config:
            if not Path(ns.config).exists():
                raise UsageError(f"config file {ns.config} not found")
            values.update(parse_kv(Path(ns.config).read_text().splitlines(), ns.config))
        positional = []
        for a in ns.args:
            key = a.split("=", 1)[0]
            if "=" in a and key in KEYS[ns.command]:
                values[key] = a.split("=", 1)[1]
            elif ns.command in ("fuse", "analyze-extents"):
                positional.append(a)
            else:
                raise UsageError(f"unexpected argument {a!r} (unknown key?)")
        for flag in ("seed", "threads", "out"):
            if getattr(ns, flag) is not None:
                values[flag] = str(getattr(ns, flag))
        cfg = RunConfig(ns.command, values)
        threads = int(os.environ.get("LTC_THREADS") or cfg.get("threads") or os.cpu_count() or 1)
        cfg.threads = threads
        with threadpool_limits(limits=threads):
            fn = COMMANDS[ns.command]
            if ns.command in ("fuse", "analyze-extents"):
                rc = fn(cfg, ns.force, positional)
            else:
                rc = fn(cfg, ns.force)
        return rc or EXIT_OK
    except (UsageError, KeyError) as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FormatError, TableError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
