"""Command line front door.

Every command takes ``--config file.json`` plus flags (flags win) and writes
the resolved configuration as ``config.json`` next to its outputs. One seed
drives all random streams. Timing goes to standard error only, so output
directories are byte-identical across reruns.
"""
from __future__ import annotations

import os

# BLAS thread count must be fixed before numpy loads; one thread by default keeps reductions reproducible
_threads = os.environ.get("SEUNET_THREADS", "1")
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, _threads)

import argparse  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
import sys  # noqa: E402
import time  # noqa: E402
from dataclasses import asdict, fields  # noqa: E402
from pathlib import Path  # noqa: E402

import numpy as np  # noqa: E402

from . import data as data_mod  # noqa: E402
from .evaluation import (  # noqa: E402
    ScaleSweepReport,
    default_scales,
    equivariance_csv,
    equivariance_report,
    jitter_effect,
    predict_any_extent,
    prop1_csv,
    scale_sweep,
    sweep_svg,
    EXACT_TOL,
)
from .models import ModelConfig, build_seunet, build_unet, load_weights, read_header  # noqa: E402
from .rng import make_rng  # noqa: E402
from .training import TrainConfig, train  # noqa: E402

log = logging.getLogger("seunet")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------- config plumbing


def _load_config(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise UsageError(f"config file not found: {p}")
    try:
        cfg = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"{p}: invalid JSON ({exc})") from None
    if not isinstance(cfg, dict):
        raise UsageError(f"{p}: top level must be an object")
    return cfg


def _merge(base: dict, flags: dict) -> dict:
    out = dict(base)
    out.update({k: v for k, v in flags.items() if v is not None})
    return out


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _snapshot(out: Path, command: str, resolved: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.json", {"command": command, **resolved})


def _model_config(opts: dict) -> ModelConfig:
    names = {f.name for f in fields(ModelConfig)}
    picked = {k: v for k, v in opts.items() if k in names}
    try:
        return ModelConfig(**picked).validate()
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None


def _train_config(opts: dict) -> TrainConfig:
    names = {f.name for f in fields(TrainConfig)}
    try:
        return TrainConfig(**{k: v for k, v in opts.items() if k in names}).validate()
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None


def _build(cfg: ModelConfig, seed: int, label: str = "init"):
    rng = make_rng(seed, label, cfg.kind)
    return build_seunet(cfg, rng) if cfg.kind == "seunet" else build_unet(cfg, rng)


def _progress(tag: str):
    def cb(epoch, rep):
        print(f"[{tag}] epoch {epoch} loss {rep.loss[-1]:.4f} val_loss {rep.val_loss[-1]:.4f} "
              f"val_miou {rep.val_miou[-1]:.4f} lr {rep.lr[-1]:.2e} ({rep.wall_clock[-1]:.1f}s)",
              file=sys.stderr, flush=True)

    return cb


# ---------------------------------------------------------------- commands


def cmd_gen_data(a) -> int:
    opts = _merge(_load_config(a.config).get("data", {}), dict(n=a.n, extent=a.extent, seed=a.seed,
                  base_radius=a.base_radius, scale_factor=a.scale_factor, num_classes=a.num_classes))
    opts = _merge(dict(n=64, extent=96, seed=0, base_radius=10.0, scale_factor=1.0, num_classes=3), opts)
    out = Path(a.out)
    try:
        ds = data_mod.generate_shapes_dataset(opts["n"], opts["extent"], opts["base_radius"], opts["scale_factor"],
                                              opts["num_classes"], opts["seed"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    data_mod.save_dataset(ds, out)
    _snapshot(out, "gen-data", opts)
    return 0


def _read_data(path) -> data_mod.Dataset:
    try:
        return data_mod.load_dataset(path)
    except (FileNotFoundError, ValueError) as exc:
        raise UsageError(str(exc)) from None


def cmd_train(a) -> int:
    cfgfile = _load_config(a.config)
    model_opts = _merge(cfgfile.get("model", {}), dict(
        kind=a.model, height=a.height, filters=a.filters, num_scales=a.scales, gamma=a.gamma,
        scale_depth=a.scale_depth, dropout=a.dropout, pooling=a.pooling))
    train_opts = _merge(cfgfile.get("train", {}), dict(
        epochs=a.epochs, batch_size=a.batch_size, jitter=a.jitter, seed=a.seed, lr=a.lr, schedule=a.schedule,
        weight_decay=a.weight_decay))
    mcfg = _model_config(model_opts)
    tcfg = _train_config(train_opts)
    data_dir = a.data or cfgfile.get("data_dir")
    if data_dir is None:
        raise UsageError("--data is required")
    ds = _read_data(data_dir)
    val_dir = a.val_data or cfgfile.get("val_dir")
    if val_dir:
        tr, va = ds, _read_data(val_dir)
    else:
        n_val = max(1, len(ds) // 8)
        tr, va = data_mod.split_dataset(ds, len(ds) - n_val)
    if len(tr) == 0:
        raise UsageError("training set is empty after the validation split")
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    model = _build(mcfg, tcfg.seed)
    model.meta = {"seed": tcfg.seed}
    t0 = time.perf_counter()
    rep = train(model, tr, va, tcfg, out / "weights.seunet", progress=_progress(mcfg.kind))
    (out / "report.csv").write_text(rep.to_csv())
    _snapshot(out, "train", {"model": asdict(model.config), "train": asdict(tcfg), "data_dir": str(data_dir),
                             "val_dir": str(val_dir) if val_dir else None})
    print(f"trained {mcfg.kind} in {time.perf_counter() - t0:.1f}s, best epoch {rep.best_epoch}", file=sys.stderr)
    return 0


def _load_model(path):
    try:
        return load_weights(path)
    except FileNotFoundError:
        raise UsageError(f"weight file not found: {path}") from None
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def cmd_predict(a) -> int:
    model = _load_model(a.weights)
    src = Path(a.image)
    if not src.exists():
        raise UsageError(f"image not found: {src}")
    try:
        img = data_mod.read_pnm(src)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    img = img[..., None] if img.ndim == 2 else img
    if img.shape[-1] != model.config.in_channels:
        raise UsageError(f"image has {img.shape[-1]} channels, model expects {model.config.in_channels}")
    labels = predict_any_extent(model, (img.astype(np.float32) / 255.0)[None])[0]
    out = Path(a.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    data_mod.write_pnm(out, labels.astype(np.uint8))
    return 0


def _sweep_models(paths, names, ds, out: Path, scales=None):
    x, y = ds.arrays()
    reports = []
    for path, name in zip(paths, names):
        model = _load_model(path)
        t0 = time.perf_counter()
        rep = scale_sweep(model, x, y, model.config.num_classes, scales, name=name)
        print(f"swept {name} in {time.perf_counter() - t0:.1f}s", file=sys.stderr)
        (out / f"sweep_{name}.csv").write_text(rep.to_csv())
        reports.append(rep)
    return reports


def cmd_sweep(a) -> int:
    cfgfile = _load_config(a.config)
    weights = a.weights or cfgfile.get("weights")
    if not weights:
        raise UsageError("at least one --weights file is required")
    names = a.names or cfgfile.get("names") or [Path(w).parent.name or f"model{i}" for i, w in enumerate(weights)]
    if len(names) != len(weights):
        raise UsageError("--names must match --weights one-to-one")
    if len(set(names)) != len(names):
        raise UsageError("model names must be distinct")
    data_dir = a.data or cfgfile.get("data_dir")
    if data_dir is None:
        raise UsageError("--data is required")
    ds = _read_data(data_dir)
    if len(ds) == 0:
        raise UsageError("test set is empty")
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    scales = a.scales or cfgfile.get("scales") or default_scales()
    reports = _sweep_models(weights, names, ds, out, scales)
    (out / "sweep_miou.svg").write_text(sweep_svg(reports, "miou"))
    (out / "sweep_consistency.svg").write_text(sweep_svg(reports, "consistency"))
    jitter = a.jitter_compare or cfgfile.get("jitter_compare")
    resolved = {"weights": [str(w) for w in weights], "names": names, "data_dir": str(data_dir),
                "scales": scales, "jitter_compare": jitter}
    if jitter:
        by_name = {r.model: r for r in reports}
        if any(n not in by_name for n in jitter):
            raise UsageError(f"--jitter-compare names must be among {names}")
        eff = jitter_effect(by_name[jitter[0]], by_name[jitter[1]])
        _write_json(out / "jitter.json", eff)
        log.warning("jitter comparison: scale-1 mIoU %.4f (plain) vs %.4f (jittered), drop %.4f -> phenomenon %s",
                    eff["miou_plain_s1"], eff["miou_jitter_s1"], eff["drop"], eff["phenomenon"])
    _snapshot(out, "sweep", resolved)
    return 0


def cmd_equivariance(a) -> int:
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    rows, props = equivariance_report(a.precision, a.seed, a.trials)
    (out / "equivariance.csv").write_text(equivariance_csv(rows))
    (out / "proposition1.csv").write_text(prop1_csv(props))
    expected_exact = {"scale_cross_correlation", "strided_subsample2", "scale_batch_norm", "relu", "identity"}
    failures = [r for r in rows if r.op in expected_exact and not r.exact]
    failures += [p for p in props if not p.passed]
    _snapshot(out, "equivariance", {"precision": a.precision, "seed": a.seed, "trials": a.trials,
                                    "exact_tolerance": EXACT_TOL[a.precision]})
    if failures:
        print(f"equivariance certification failed for {len(failures)} checks", file=sys.stderr)
        return 1
    return 0


# ---------------------------------------------------------------- the desk-scale protocol


DEFAULT_PROTOCOL = {
    "seeds": [0, 1, 2],
    "data": {"train_n": 256, "val_n": 32, "test_n": 64, "extent": 96, "base_radius": 10.0},
    "model": {"height": 3, "filters": 8, "num_scales": 4, "gamma": 2, "scale_depth": 1},
    "train": {"epochs": 200, "batch_size": 8, "lr": 1e-3, "schedule": "plateau"},
    "variants": [
        {"name": "seunet_p0", "kind": "seunet", "dropout": 0.0},
        {"name": "seunet_p25", "kind": "seunet", "dropout": 0.25},
        {"name": "unet", "kind": "unet"},
    ],
    "jitter": {"name": "unet_jitter", "kind": "unet", "r": 4.0, "epoch_factor": 4, "seeds": [0]},
}


def _protocol(cfgfile: dict) -> dict:
    proto = json.loads(json.dumps(DEFAULT_PROTOCOL))
    for key, val in cfgfile.items():
        if isinstance(val, dict) and isinstance(proto.get(key), dict):
            proto[key].update(val)
        else:
            proto[key] = val
    return proto


def _protocol_data(proto, seed, root: Path):
    d = proto["data"]
    sets = {}
    for split, n in (("train", d["train_n"]), ("val", d["val_n"]), ("test", d["test_n"])):
        path = root / "data" / split
        if not (path / "manifest.json").exists():
            ds = data_mod.generate_shapes_dataset(n, d["extent"], d["base_radius"], 1.0, 3,
                                                  int(make_rng(seed, "data", split).integers(0, 2**62)))
            data_mod.save_dataset(ds, path)
        sets[split] = data_mod.load_dataset(path)
    return sets


def _run_variant(proto, variant, seed, sets, root: Path, epochs, jitter=1.0):
    vdir = root / variant["name"]
    wpath = vdir / "weights.seunet"
    if not (wpath.exists() and (vdir / "report.csv").exists()):
        vdir.mkdir(parents=True, exist_ok=True)
        mcfg = _model_config({**proto["model"], **{k: v for k, v in variant.items() if k not in ("name", "r",
                                                  "epoch_factor", "seeds")}})
        tcfg = _train_config({**proto["train"], "epochs": epochs, "seed": seed, "jitter": jitter})
        model = _build(mcfg, seed)
        model.meta = {"seed": seed, "variant": variant["name"]}
        t0 = time.perf_counter()
        rep = train(model, sets["train"], sets["val"], tcfg, wpath, progress=_progress(f"{variant['name']}/s{seed}"))
        (vdir / "report.csv").write_text(rep.to_csv())
        _write_json(vdir / "timing.json", {"train_seconds": time.perf_counter() - t0, "epochs": epochs})
        _snapshot(vdir, "train", {"model": asdict(model.config), "train": asdict(tcfg)})
    spath = vdir / "sweep.csv"
    if not spath.exists():
        x, y = sets["test"].arrays()
        t0 = time.perf_counter()
        rep = scale_sweep(load_weights(wpath), x, y, 3, name=variant["name"])
        spath.write_text(rep.to_csv())
        print(f"swept {variant['name']}/s{seed} in {time.perf_counter() - t0:.1f}s", file=sys.stderr)
    return ScaleSweepReport.from_csv(spath.read_text(), variant["name"])


def _mean_report(reports, name):
    return ScaleSweepReport(name, list(reports[0].scales),
                            list(np.mean([r.miou for r in reports], axis=0)),
                            list(np.mean([r.consistency for r in reports], axis=0)),
                            list(reports[0].n))


def assess_protocol(means: dict, jitter: dict | None, baseline="unet", seunets=("seunet_p0", "seunet_p25")):
    """Ordinal checks of the unseen-scale experiment on seed-averaged sweeps."""
    import math

    base = means[baseline]
    out = {"s1_miou": {n: means[n].at(1.0)[0] for n in means}}
    out["a_s1_iou_ge_0.85"] = all(means[n].at(1.0)[0] >= 0.85 for n in (baseline, *seunets) if n in means)
    b_ok, c_ok, detail = True, True, {}
    for n in seunets:
        if n not in means:
            continue
        rep = means[n]
        for s, miou, cons, bm, bc in zip(rep.scales, rep.miou, rep.consistency, base.miou, base.consistency):
            l2 = abs(math.log2(s))
            if l2 >= 1 - 1e-9:
                need = 0.05 if l2 >= 2 - 1e-9 else 0.0
                if miou < bm + need:
                    b_ok = False
            if abs(l2) > 1e-9 and cons < bc:
                c_ok = False
            detail[f"{n}@{s:.4f}"] = {"miou": miou, "base_miou": bm, "consistency": cons, "base_consistency": bc}
    out["b_seunet_iou_beats_unet"] = b_ok
    out["c_seunet_consistency_beats_unet"] = c_ok
    out["per_scale"] = detail
    out["criterion6_pass_ignoring_runtime"] = bool(out["a_s1_iou_ge_0.85"] and b_ok and c_ok)
    if jitter is not None:
        out["jitter"] = jitter
    return out


def cmd_experiment(a) -> int:
    proto = _protocol(_load_config(a.config))
    if a.seeds:
        proto["seeds"] = a.seeds
    if a.epochs is not None:
        proto["train"]["epochs"] = a.epochs
        proto["jitter"]["epochs"] = a.epochs * proto["jitter"].get("epoch_factor", 4)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    _snapshot(out, "experiment", proto)
    t_start = time.perf_counter()
    per_variant = {v["name"]: [] for v in proto["variants"]}
    jit = proto.get("jitter")
    jit_reports, plain_for_jit = [], []
    epochs = proto["train"]["epochs"]
    for seed in proto["seeds"]:
        root = out / f"seed{seed}"
        sets = _protocol_data(proto, seed, root)
        for v in proto["variants"]:
            per_variant[v["name"]].append(_run_variant(proto, v, seed, sets, root, epochs))
        if jit and seed in jit.get("seeds", []):
            j_epochs = jit.get("epochs", epochs * jit.get("epoch_factor", 4))
            jit_reports.append(_run_variant(proto, jit, seed, sets, root, j_epochs, jitter=jit["r"]))
            plain_for_jit.append(per_variant[jit.get("baseline", "unet")][-1])
    means = {n: _mean_report(r, n) for n, r in per_variant.items() if r}
    for rep in means.values():
        (out / f"sweep_mean_{rep.model}.csv").write_text(rep.to_csv())
    reports = list(means.values())
    jitter_eff = None
    if jit_reports:
        jmean = _mean_report(jit_reports, jit["name"])
        pmean = _mean_report(plain_for_jit, jit.get("baseline", "unet"))
        (out / f"sweep_mean_{jmean.model}.csv").write_text(jmean.to_csv())
        reports.append(jmean)
        jitter_eff = jitter_effect(pmean, jmean)
        _write_json(out / "jitter.json", jitter_eff)
        log.warning("jitter comparison: scale-1 mIoU %.4f (plain) vs %.4f (jittered) -> phenomenon %s",
                    jitter_eff["miou_plain_s1"], jitter_eff["miou_jitter_s1"], jitter_eff["phenomenon"])
    (out / "sweep_miou.svg").write_text(sweep_svg(reports, "miou"))
    (out / "sweep_consistency.svg").write_text(sweep_svg(reports, "consistency"))
    _write_json(out / "summary.json", assess_protocol(means, jitter_eff))
    # timing lives apart from the deterministic summary
    train_secs = sum(json.loads(p.read_text())["train_seconds"] for p in out.glob("seed*/*/timing.json"))
    _write_json(out / "timing.json", {"this_invocation_seconds": time.perf_counter() - t_start,
                                      "total_train_seconds": train_secs})
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="seunet", description="Scale-equivariant U-Net experiments")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    g = sub.add_parser("gen-data", help="generate the synthetic shapes dataset")
    g.add_argument("--config")
    g.add_argument("--n", type=int)
    g.add_argument("--extent", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--base-radius", type=float)
    g.add_argument("--scale-factor", type=float)
    g.add_argument("--num-classes", type=int)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="build and train a model")
    t.add_argument("--config")
    t.add_argument("--data")
    t.add_argument("--val-data")
    t.add_argument("--model", choices=["seunet", "unet"])
    t.add_argument("--height", type=int)
    t.add_argument("--filters", type=int)
    t.add_argument("--scales", type=int)
    t.add_argument("--gamma", type=int)
    t.add_argument("--scale-depth", type=int)
    t.add_argument("--dropout", type=float)
    t.add_argument("--pooling", choices=["stride", "maxscale", "quadscale"])
    t.add_argument("--jitter", type=float)
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--schedule", choices=["plateau", "exponential"])
    t.add_argument("--weight-decay", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    pr = sub.add_parser("predict", help="label one PGM/PPM image")
    pr.add_argument("--weights", required=True)
    pr.add_argument("--image", required=True)
    pr.add_argument("--out", required=True)
    pr.set_defaults(func=cmd_predict)

    s = sub.add_parser("sweep", help="unseen-scale sweep of trained models")
    s.add_argument("--config")
    s.add_argument("--weights", action="append")
    s.add_argument("--names", nargs="+")
    s.add_argument("--data")
    s.add_argument("--scales", type=float, nargs="+")
    s.add_argument("--jitter-compare", nargs=2, metavar=("PLAIN", "JITTERED"))
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sweep)

    e = sub.add_parser("equivariance", help="equivariance report and upsampling certification")
    e.add_argument("--precision", choices=["f64", "f32"], default="f64")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--trials", type=int, default=3)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_equivariance)

    x = sub.add_parser("experiment", help="run the desk-scale unseen-scale protocol (resumable)")
    x.add_argument("--config")
    x.add_argument("--seeds", type=int, nargs="+")
    x.add_argument("--epochs", type=int)
    x.add_argument("--out", required=True)
    x.set_defaults(func=cmd_experiment)
    return p


def run(argv=None) -> int:
    parser = build_parser()
    try:
        a = parser.parse_args(argv)
    except UsageError as exc:
        print(f"seunet: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return a.func(a)
    except UsageError as exc:
        print(f"seunet {a.command}: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
