"""Command-line driver: ``switchcnn <command> [--config FILE] [flags]``.

Every option can also come from a JSON config file whose keys are the option
names with dashes turned into underscores, e.g. ``{"lr": 3e-5, "T_p": 15}``.
Command-line flags override the file; unknown keys are rejected.  Logs and
summaries are tab-separated ``key=value`` records.
"""

from __future__ import annotations

import argparse
import contextlib
import dataclasses
import json
import os
import shutil
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import dataset_io, evaluation, formats, ground_truth, neural, training
from .ground_truth import KernelConfig
from .patch_grid import GridSpec, assemble_density, split_scene
from .training import STAGES, ModelConfig, TrainConfig, TrainLog


class CLIError(Exception):
    pass


# --- flag plumbing -----------------------------------------------------------

def _none_or(conv):
    def parse(v):
        if v is None or (isinstance(v, str) and v.lower() in ("none", "null", "")):
            return None
        return conv(v)
    return parse


def _bool(v):
    if isinstance(v, bool):
        return v
    s = str(v).lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _list_of(conv):
    def parse(v):
        items = v.split(",") if isinstance(v, str) else list(v)
        return tuple(conv(x.strip() if isinstance(x, str) else x) for x in items if x != "")
    return parse


def _int(v):
    if isinstance(v, float) and not v.is_integer():
        raise ValueError(f"not an integer: {v!r}")
    return int(v)


# (group, dataclass, flag prefix, fields left out because they are derived)
_GROUPS = (
    ("train", TrainConfig, "", ()),
    ("kernel", KernelConfig, "kernel-", ()),
    ("grid", GridSpec, "grid-", ()),
    ("model", ModelConfig, "", ("switch",)),
    ("switch", neural.SwitchConfig, "switch-", ("num_classes", "seed")),
)

_CONVERTERS = {
    ("train", "grad_clip"): _none_or(float),
    ("train", "finetune_lr"): _none_or(float),
    ("model", "init_std"): _none_or(float),
    ("model", "regressors"): _list_of(str),
}


def _converter(group, f, default):
    if (group, f.name) in _CONVERTERS:
        return _CONVERTERS[(group, f.name)]
    if isinstance(default, bool):
        return _bool
    if isinstance(default, int):
        return _int
    if isinstance(default, float):
        return float
    return str


def _flag_name(prefix, name):
    # field names keep their case, so T_p becomes --T-p
    return "--" + (prefix + name).replace("_", "-")


def _add_group(parser, spec, converters):
    group, cls, prefix, skip = spec
    defaults = cls()
    g = parser.add_argument_group(group)
    for f in dataclasses.fields(cls):
        if f.name in skip:
            continue
        default = getattr(defaults, f.name)
        flag = _flag_name(prefix, f.name)
        dest = flag[2:].replace("-", "_")
        conv = _converter(group, f, default)
        converters[dest] = (conv, default, (group, f.name))
        g.add_argument(flag, dest=dest, type=conv, default=argparse.SUPPRESS,
                       metavar=type(default).__name__.upper() if default is not None else "VALUE",
                       help=f"default {default!r}")


def _option(parser, converters, flag, conv, default, help_, **kw):
    dest = flag[2:].replace("-", "_")
    converters[dest] = (conv, default, None)
    parser.add_argument(flag, dest=dest, type=conv, default=argparse.SUPPRESS, help=help_, **kw)


def _switch(parser, converters, flag, help_):
    dest = flag[2:].replace("-", "_")
    converters[dest] = (_bool, False, None)
    parser.add_argument(flag, dest=dest, action="store_const", const=True,
                        default=argparse.SUPPRESS, help=help_)


REQUIRED = object()


def _dataset_options(p, conv):
    _option(p, conv, "--manifest", str, REQUIRED, "dataset manifest (JSON)")
    _option(p, conv, "--fractions", _list_of(float), (0.7, 0.15, 0.15),
            "train,val,test scene fractions")
    _option(p, conv, "--split-seed", _int, 0, "seed of the scene split")


def build_parser() -> tuple[argparse.ArgumentParser, dict]:
    parser = argparse.ArgumentParser(prog="switchcnn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    table: dict[str, dict] = {}

    def command(name, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", default=None, help="JSON file supplying any of these options")
        table[name] = {}
        return p, table[name]

    p, c = command("synth", "write a seeded synthetic three-regime dataset")
    _option(p, c, "--out", str, REQUIRED, "output directory")
    for flag, conv, default in (("--num-scenes", _int, 90), ("--height", _int, 120),
                                ("--width", _int, 120), ("--seed", _int, 0),
                                ("--background", float, 0.35)):
        _option(p, c, flag, conv, default, f"default {default!r}")
    _option(p, c, "--regimes", _none_or(str), None,
            "JSON file with a list of regime objects replacing the built-in regimes")
    _add_group(p, _GROUPS[2], c)

    p, c = command("generate-gt", "render ground-truth density maps for a manifest")
    _option(p, c, "--manifest", str, REQUIRED, "dataset manifest (JSON)")
    _option(p, c, "--out", str, REQUIRED, "output directory, one map pair per scene")
    _add_group(p, _GROUPS[1], c)

    p, c = command("train", "run training stages and checkpoint each one")
    _dataset_options(p, c)
    _option(p, c, "--out", str, REQUIRED, "run directory (checkpoints and train.log)")
    _option(p, c, "--stage", str, "full", "one of pretrain, differential, switch, coupled, full",
            choices=(*STAGES, "full"))
    _option(p, c, "--resume", _none_or(str), None, "stage checkpoint to continue from")
    for spec in _GROUPS:
        _add_group(p, spec, c)

    p, c = command("evaluate", "score a checkpoint on a dataset split")
    _dataset_options(p, c)
    _option(p, c, "--checkpoint", str, REQUIRED, "stage checkpoint or run directory")
    _option(p, c, "--split", str, "test", "which split to score", choices=("train", "val", "test", "all"))
    _option(p, c, "--out", _none_or(str), None, "report file")
    _switch(p, c, "--oracle-routing", "route every patch to its best regressor")
    _add_group(p, _GROUPS[1], c)
    _add_group(p, _GROUPS[2], c)

    p, c = command("infer", "predict the density map and count of one image")
    _option(p, c, "--checkpoint", str, REQUIRED, "stage checkpoint or run directory")
    _option(p, c, "--image", str, REQUIRED, "grayscale PNG")
    _option(p, c, "--out", str, REQUIRED, "output density-map stem")
    _add_group(p, _GROUPS[2], c)

    p, c = command("ablate", "train and score one ablation variant")
    _dataset_options(p, c)
    _option(p, c, "--out", str, REQUIRED, "output directory (report.txt and train.log)")
    _option(p, c, "--subset", _none_or(_list_of(str)), None, "regressor subset, e.g. R1,R3")
    _option(p, c, "--cluster", _none_or(str), None, "attribute-clustering baseline",
            choices=("count", "interhead", None))
    _switch(p, c, "--no-coupled-training", "train the switch stand-alone instead of coupled")
    for spec in _GROUPS:
        _add_group(p, spec, c)

    p, c = command("plot", "per-regressor histogram of patch mean inter-head distance")
    _dataset_options(p, c)
    _option(p, c, "--checkpoint", str, REQUIRED, "stage checkpoint or run directory")
    _option(p, c, "--split", str, "test", "which split to use", choices=("train", "val", "test", "all"))
    _option(p, c, "--out", str, REQUIRED, "image file; a .txt table is written next to it")
    _option(p, c, "--bins", _int, 20, "number of bins")
    _option(p, c, "--k", _int, 10, "neighbours for the inter-head distance")
    _add_group(p, _GROUPS[1], c)
    _add_group(p, _GROUPS[2], c)
    return parser, table


def resolve(argv=None) -> tuple[str, dict]:
    """Parse ``argv`` into the command name and a complete option dict."""
    parser, table = build_parser()
    ns = vars(parser.parse_args(argv))
    command = ns.pop("command")
    config_path = ns.pop("config", None)
    conv = table[command]
    values = {k: d for k, (_, d, _) in conv.items()}
    if config_path is not None:
        try:
            doc = json.loads(Path(config_path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise CLIError(f"cannot read config {config_path}: {e}") from e
        if not isinstance(doc, dict):
            raise CLIError(f"config {config_path} must hold a JSON object")
        unknown = sorted(set(doc) - set(conv))
        if unknown:
            raise CLIError(f"unknown config keys for {command}: {', '.join(unknown)}")
        for k, v in doc.items():
            try:
                values[k] = conv[k][0](v)
            except (TypeError, ValueError) as e:
                raise CLIError(f"config key {k}: {e}") from e
    values.update(ns)
    missing = [k for k, v in values.items() if v is REQUIRED]
    if missing:
        raise CLIError("missing required options: " + ", ".join("--" + m.replace("_", "-")
                                                                 for m in missing))
    return command, values


def _build(values, conv, group, cls, **extra):
    kw = {f: values[d] for d, (_, _, owner) in conv.items()
          if owner is not None and owner[0] == group for f in [owner[1]]}
    try:
        return cls(**kw, **extra)
    except (TypeError, ValueError) as e:
        raise CLIError(f"invalid {group} options: {e}") from e


def configs(command: str, values: dict) -> dict:
    """Instantiate (and so validate) every config dataclass a command uses."""
    _, table = build_parser()
    conv = table[command]
    groups = {owner[0] for _, _, owner in conv.values() if owner is not None}
    out = {}
    if "kernel" in groups:
        out["kernel"] = _build(values, conv, "kernel", KernelConfig)
    if "grid" in groups:
        out["grid"] = _build(values, conv, "grid", GridSpec)
    if "train" in groups:
        out["train"] = _build(values, conv, "train", TrainConfig)
    if "model" in groups:
        sw = _build(values, conv, "switch", neural.SwitchConfig)
        out["model"] = _build(values, conv, "model", ModelConfig, switch=sw)
        unknown = set(out["model"].regressors) - set(neural.DEFAULT_SPECS)
        if unknown or not out["model"].regressors:
            raise CLIError(f"invalid regressors {out['model'].regressors}")
    return out


# --- output helpers ----------------------------------------------------------

@contextlib.contextmanager
def atomic_dir(path):
    """Yield a scratch directory that replaces ``path`` only if the block succeeds."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{path.name}.", dir=path.parent))
    try:
        yield tmp
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    if path.exists():
        shutil.rmtree(path) if path.is_dir() else path.unlink()
    os.replace(tmp, path)


def atomic_write(path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(tmp)
        raise
    return path


def record(**fields) -> str:
    return "\t".join(f"{k}={training._fmt(v)}" for k, v in fields.items())


def emit(**fields):
    print(record(**fields), flush=True)


# --- shared steps ------------------------------------------------------------

def _load_scenes(values):
    try:
        return dataset_io.load_dataset(values["manifest"])
    except FileNotFoundError as e:
        raise CLIError(f"manifest not found: {values['manifest']}") from e


def _splits(values):
    scenes = _load_scenes(values)
    try:
        return dict(zip(("train", "val", "test"),
                        dataset_io.split_dataset(scenes, values["fractions"], values["split_seed"])),
                    all=scenes)
    except ValueError as e:
        raise CLIError(str(e)) from e


def _samples(scenes, grid, kernel, what):
    if not scenes:
        raise CLIError(f"the {what} split is empty")
    return training.make_patch_samples(scenes, grid, kernel)


def find_checkpoint(path) -> Path:
    """A stage checkpoint itself, or the latest stage inside a run directory."""
    path = Path(path)
    if (path / "state.json").exists():
        return path
    for stage in reversed(STAGES):
        if (path / stage / "state.json").exists():
            return path / stage
    raise CLIError(f"no checkpoint found at {path}")


def _load_model(path) -> training.SwitchCNN:
    return training.load_stage(find_checkpoint(path))


# --- commands ----------------------------------------------------------------

def cmd_synth(values):
    cfgs = configs("synth", values)
    regimes = dataset_io.THREE_REGIMES
    if values["regimes"] is not None:
        try:
            doc = json.loads(Path(values["regimes"]).read_text())
            regimes = tuple(dataset_io.Regime(**{k: tuple(v) if isinstance(v, list) else v
                                                 for k, v in r.items()}) for r in doc)
        except (OSError, json.JSONDecodeError, TypeError) as e:
            raise CLIError(f"bad regimes file {values['regimes']}: {e}") from e
    try:
        cfg = dataset_io.SynthConfig(num_scenes=values["num_scenes"], height=values["height"],
                                     width=values["width"], regimes=regimes, grid=cfgs["grid"],
                                     seed=values["seed"], background=values["background"])
    except ValueError as e:
        raise CLIError(str(e)) from e
    scenes = dataset_io.generate_synthetic(cfg)
    with atomic_dir(values["out"]) as tmp:
        dataset_io.save_dataset(scenes, tmp)
    emit(command="synth", scenes=len(scenes), heads=sum(s.count for s in scenes),
         manifest=str(Path(values["out"]) / "manifest.json"))


def cmd_generate_gt(values):
    kernel = configs("generate-gt", values)["kernel"]
    scenes = _load_scenes(values)
    mass = count = 0.0
    with atomic_dir(values["out"]) as tmp:
        for s in scenes:
            dm = ground_truth.density_map(s.points, kernel)
            formats.save_density_map(tmp / s.id, dm)
            m = float(np.sum(dm, dtype=np.float64))
            mass += m
            count += s.count
            emit(scene=s.id, count=s.count, mass=m, max=float(dm.max()) if dm.size else 0.0)
    emit(command="generate-gt", scenes=len(scenes), total_count=count, total_mass=mass,
         mode=kernel.mode)


def _train_start(values, out: Path):
    """Resolve (start model, stage already done, stage to stop after)."""
    stage = values["stage"]
    stop = None if stage == "full" else stage
    if values["resume"] is not None:
        ckpt = find_checkpoint(values["resume"])
        done = json.loads((ckpt / "state.json").read_text())["stage"]
        return training.load_stage(ckpt), done, stop
    if stage in ("pretrain", "full"):
        return None, None, stop
    # a stage needs the checkpoint of the stage before it; coupled also accepts
    # a differential checkpoint and then runs the switch stage first
    prev = STAGES[STAGES.index(stage) - 1]
    options = [prev] + (["differential"] if stage == "coupled" else [])
    for p in options:
        if (out / p / "state.json").exists():
            return training.load_stage(out / p), p, stop
    raise CLIError(f"stage {stage} needs the {' or '.join(options)} checkpoint, not found under {out}")


def cmd_train(values):
    cfgs = configs("train", values)
    out = Path(values["out"])
    start, done, stop = _train_start(values, out)
    if done is not None and stop is not None and STAGES.index(done) >= STAGES.index(stop):
        raise CLIError(f"checkpoint is already past stage {stop} (at {done})")
    splits = _splits(values)
    train = _samples(splits["train"], cfgs["grid"], cfgs["kernel"], "train")
    val = _samples(splits["val"], cfgs["grid"], cfgs["kernel"], "val")
    out.mkdir(parents=True, exist_ok=True)
    log = TrainLog(out / (f"train_{values['stage']}.log"))
    model = training.run_pipeline(train, val, cfgs["train"], cfgs["model"], out_dir=out, log=log,
                                  start=start, start_after=done, stop_after=stop)
    final = find_checkpoint(out) if stop is None else out / stop
    emit(command="train", stage=values["stage"], resumed_after=done or "none",
         checkpoint=str(final), regressors=",".join(r.name for r in model.regressors))


def _report_lines(rep: evaluation.EvalReport, **extra):
    emit(**extra, **rep.metrics())


def cmd_evaluate(values):
    cfgs = configs("evaluate", values)
    model = _load_model(values["checkpoint"])
    scenes = _splits(values)[values["split"]]
    samples = _samples(scenes, cfgs["grid"], cfgs["kernel"], values["split"])
    router = training.OracleRouter(model.regressors) if values["oracle_routing"] else model.router
    rep = evaluation.evaluate_samples(model.regressors, router, samples, cfgs["grid"])
    if values["out"] is not None:
        atomic_write(values["out"], rep.to_text())
    fields = {"command": "evaluate", "split": values["split"],
              "routing": "oracle" if values["oracle_routing"] else "switch"}
    _report_lines(rep, **fields)
    if values["oracle_routing"]:
        emit(ideal_switch_mae=rep.mae)


def cmd_infer(values):
    grid = configs("infer", values)["grid"]
    model = _load_model(values["checkpoint"])
    try:
        image = dataset_io._read_png(Path(values["image"])).astype(np.float64) / 255.0
    except (OSError, ValueError) as e:
        raise CLIError(f"cannot read image {values['image']}: {e}") from e
    h, w = image.shape
    scene = dataset_io.Scene(image, ground_truth.PointSet(np.zeros((0, 2)), h, w), "infer")
    try:
        cells = split_scene(scene, grid)
    except ValueError as e:
        raise CLIError(str(e)) from e
    maps, routes = {}, []
    for rec in cells:
        pixels = rec.pixels.astype(np.float32)
        sample = training.PatchSample(pixels, np.zeros((1, 1), np.float32), 0.0, rec.points,
                                      scene.id, rec.grid_index)
        j = model.router.route_one(sample)
        routes.append(j)
        maps[rec.grid_index] = neural.forward_density(model.regressors[j], pixels)
    dm = assemble_density(maps, grid, (h, w))
    stem = formats._stem(values["out"])
    partial = stem.with_name(f".{stem.name}-partial")
    try:
        formats.save_density_map(partial, dm)
        for ext in (".f32", ".json"):
            os.replace(partial.with_name(partial.name + ext), stem.with_name(stem.name + ext))
    finally:
        for ext in (".f32", ".json"):
            with contextlib.suppress(FileNotFoundError):
                os.unlink(partial.with_name(partial.name + ext))
    emit(command="infer", image=values["image"], count=float(np.sum(dm, dtype=np.float64)),
         routes="".join(map(str, routes)), out=str(stem))


def cmd_ablate(values):
    cfgs = configs("ablate", values)
    modes = [values["subset"] is not None, values["cluster"] is not None,
             values["no_coupled_training"]]
    if sum(modes) > 1:
        raise CLIError("choose at most one of --subset, --cluster, --no-coupled-training")
    splits = _splits(values)
    grid, kernel = cfgs["grid"], cfgs["kernel"]
    train, val, test = (_samples(splits[k], grid, kernel, k) for k in ("train", "val", "test"))
    with atomic_dir(values["out"]) as tmp:
        log = TrainLog(tmp / "train.log")
        if values["cluster"] is not None:
            variant = f"cluster_{values['cluster']}"
            rep, _ = evaluation.cluster_baseline_experiment(values["cluster"], train, val, test,
                                                            cfgs["train"], cfgs["model"], grid, log)
        else:
            subset = values["subset"] or cfgs["model"].regressors
            coupled = not values["no_coupled_training"]
            variant = ("standalone" if not coupled else "subset_" + "".join(subset))
            try:
                rep, _ = evaluation.regressor_subset_experiment(subset, train, val, test,
                                                                cfgs["train"], cfgs["model"], grid,
                                                                log, coupled=coupled)
            except ValueError as e:
                raise CLIError(str(e)) from e
        rep.write(tmp / "report.txt")
    _report_lines(rep, command="ablate", variant=variant)


def cmd_plot(values):
    cfgs = configs("plot", values)
    model = _load_model(values["checkpoint"])
    scenes = _splits(values)[values["split"]]
    samples = _samples(scenes, cfgs["grid"], cfgs["kernel"], values["split"])
    routes = training.route_all(model.router, samples)
    hist = evaluation.multichotomy_histogram(samples, routes, k=values["k"], bins=values["bins"],
                                             names=[r.name for r in model.regressors])
    out = Path(values["out"])
    table = out.with_suffix(".txt")
    atomic_write(table, hist.to_text())
    fd, tmp = tempfile.mkstemp(prefix=f".{out.stem}.", suffix=out.suffix or ".png", dir=out.parent)
    os.close(fd)
    try:
        evaluation.plot_histogram(hist, tmp)
        os.replace(tmp, out)
    except BaseException:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(tmp)
        raise
    emit(command="plot", image=str(out), table=str(table),
         **{f"mean_{n}": float(m) for n, m in zip(hist.names, hist.means)})


COMMANDS = {"synth": cmd_synth, "generate-gt": cmd_generate_gt, "train": cmd_train,
            "evaluate": cmd_evaluate, "infer": cmd_infer, "ablate": cmd_ablate, "plot": cmd_plot}


def main(argv=None) -> int:
    try:
        command, values = resolve(argv)
        COMMANDS[command](values)
    except SystemExit as e:
        return int(e.code or 0) if isinstance(e.code, int) else 2
    except (CLIError, dataset_io.ManifestError, FileNotFoundError, ValueError, KeyError) as e:
        print(f"switchcnn: error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
