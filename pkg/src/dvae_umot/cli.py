"""Command-line entry point: ``dvae-umot <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
Every run writes a RunManifest (``manifest.json`` inside a directory
``--out``, or ``<out>.manifest.json`` next to a file ``--out``); nothing is
written outside ``--out``.  ``replay MANIFEST --out DIR`` re-runs a recorded
command and checks the artifacts hash-identically.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__, bench, dataio, metrics, pretrain, srnn, synth
from . import autodiff as ad
from .dataio import DataError
from .tracker import TrackerConfig, track

log = logging.getLogger("dvae_umot")


class UsageError(Exception):
    pass


class NumericError(Exception):
    pass


EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage().strip()}")


# ------------------------------------------------------------- helpers

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _hash_tree(root: Path, exclude=()) -> dict:
    root = Path(root)
    if root.is_file():
        return {root.name: sha256_file(root)}
    out = {}
    for p in sorted(root.rglob("*")):
        rel = p.relative_to(root).as_posix()
        if p.is_file() and rel not in exclude:
            out[rel] = sha256_file(p)
    return out


def _hash_inputs(paths) -> dict:
    out = {}
    for p in paths:
        if p is None:
            continue
        p = Path(p)
        if p.is_dir():
            for rel, h in _hash_tree(p).items():
                out[str((p / rel).resolve())] = h
        elif p.is_file():
            out[str(p.resolve())] = sha256_file(p)
    return out


def _out_dir(path) -> Path:
    p = Path(path)
    if p.exists() and not p.is_dir():
        raise UsageError(f"--out {p} exists and is not a directory")
    p.mkdir(parents=True, exist_ok=True)
    return p


def _out_file(path) -> Path:
    p = Path(path)
    if p.is_dir():
        raise UsageError(f"--out {p} is a directory; expected a file path")
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


def _manifest_path(out: Path, is_dir: bool) -> Path:
    return out / "manifest.json" if is_dir else out.with_name(out.name + ".manifest.json")


def _load_params(path):
    p = Path(path) if path else srnn.default_checkpoint_path()
    if not p.is_file():
        raise DataError(f"{p}: checkpoint not found (run `dvae-umot pretrain` or pass --ckpt)")
    try:
        return srnn.load_checkpoint(p), p
    except ValueError as e:
        raise DataError(str(e)) from None


# ------------------------------------------------------------- options

def _common(p):
    p.add_argument("--config", help="key = value file; command-line flags override it")
    p.add_argument("--json-errors", action="store_true", default=None,
                   help="print errors as JSON on stderr")
    p.add_argument("--jobs", type=int, default=None, help="parallel worker processes (benchmark)")
    p.add_argument("-v", "--verbose", action="store_true", default=None)


def _flag(p, name, **kw):
    p.add_argument(name, default=None, **kw)


def _tracker_opts(p):
    _flag(p, "--iters", type=int, dest="I")
    _flag(p, "--r-phi", type=float, dest="r_phi")
    _flag(p, "--init-window", type=int, dest="J")
    _flag(p, "--init-iters", type=int, dest="I0")
    p.add_argument("--fine-tune", action="store_const", const=True, default=None, dest="fine_tune")
    _flag(p, "--fine-tune-lr", type=float, dest="fine_tune_lr")
    p.add_argument("--m-step-phi", action="store_const", const=True, default=None, dest="m_step_phi")
    p.add_argument("--underflow-uniform", action="store_const", const=True, default=None,
                   dest="underflow_uniform", help="uniform η when every log β < -700 (spec fallback)")
    _flag(p, "--decoder-input", choices=("sample", "mean"), dest="decoder_input",
          help="what the decoder-side LSTM reads during E-S: fused means (default) or samples (paper §V-B)")
    _flag(p, "--seed", type=int)


TRACKER_KEYS = ("I", "r_phi", "J", "I0", "fine_tune", "fine_tune_lr", "m_step_phi", "underflow_uniform",
                "decoder_input", "seed")

DEFAULTS = {
    "synth-data": {"train": 12105, "val": 3052, "length": 60, "seed": 0},
    "pretrain": {"lr": 1e-3, "batch": 256, "patience": 50, "max_epochs": 2000, "seed": 0},
    "track": {"dynamics": "dvae", "img_width": None, "img_height": None, "n_objects": None},
    "evaluate": {"img_width": 1000.0, "img_height": 1000.0, "iou": 0.5},
    "build-benchmark": {"length": 60, "tracks": 3, "seed": 0, "img_width": 1920.0, "img_height": 1080.0},
    "synth-benchmark": {"scenarios": list(dataio.SuiteConfig().scenarios), "scenes": 4, "length": 60,
                        "noise": 0.02, "seed": 0},
    "benchmark": {"scenarios": list(dataio.SuiteConfig().scenarios), "scenes": 4, "length": 60,
                  "noise": 0.02, "suite_seed": 0, "r_phi_sweep": None, "curves": True},
    "report": {},
}


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="dvae-umot", description="DVAE-UMOT unsupervised multi-object tracking")
    ap.add_argument("--version", action="store_true", help="print version information and exit")
    ap.add_argument("--json-errors", action="store_true", dest="json_errors_global")
    sub = ap.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("synth-data", help="generate a synthetic trajectory dataset")
    _flag(p, "--out", required=True)
    _flag(p, "--train", type=int)
    _flag(p, "--val", type=int)
    _flag(p, "--length", type=int)
    _flag(p, "--seed", type=int)
    _common(p)

    p = sub.add_parser("pretrain", help="pre-train the SRNN on a synthetic dataset")
    _flag(p, "--data", required=True)
    _flag(p, "--out", required=True, help="checkpoint path")
    _flag(p, "--lr", type=float)
    _flag(p, "--batch", type=int)
    _flag(p, "--patience", type=int)
    _flag(p, "--max-epochs", type=int, dest="max_epochs")
    _flag(p, "--seed", type=int)
    _common(p)

    p = sub.add_parser("track", help="track the objects of one detection file")
    _flag(p, "--ckpt")
    _flag(p, "--detections", required=True)
    _flag(p, "--out", required=True)
    _flag(p, "--dynamics", choices=("dvae", "linear"))
    _flag(p, "--img-width", type=float, dest="img_width")
    _flag(p, "--img-height", type=float, dest="img_height")
    _flag(p, "--n-objects", type=int, dest="n_objects")
    _tracker_opts(p)
    _common(p)

    p = sub.add_parser("evaluate", help="CLEAR-MOT / IDF1 evaluation")
    _flag(p, "--gt", required=True, help="gt.txt or a directory of scene_* folders")
    _flag(p, "--results", required=True, help="results file or a directory mirroring --gt")
    _flag(p, "--out", required=True, help="report JSON path")
    _flag(p, "--img-width", type=float, dest="img_width")
    _flag(p, "--img-height", type=float, dest="img_height")
    _flag(p, "--iou", type=float)
    _common(p)

    p = sub.add_parser("build-benchmark", help="MOT17-3T-style scenes from gt/det files")
    _flag(p, "--gt", required=True)
    _flag(p, "--detections", required=True)
    _flag(p, "--out", required=True)
    _flag(p, "--length", type=int)
    _flag(p, "--tracks", type=int)
    _flag(p, "--seed", type=int)
    _flag(p, "--img-width", type=float, dest="img_width")
    _flag(p, "--img-height", type=float, dest="img_height")
    _common(p)

    p = sub.add_parser("synth-benchmark", help="synthetic 3-object benchmark scenes")
    _flag(p, "--out", required=True)
    _flag(p, "--scenarios", type=_csv_list)
    _flag(p, "--scenes", type=int, help="scenes per scenario")
    _flag(p, "--length", type=int)
    _flag(p, "--noise", type=float)
    _flag(p, "--seed", type=int)
    _common(p)

    p = sub.add_parser("benchmark", help="DVAE-UMOT vs VKF on a benchmark suite")
    _flag(p, "--out", required=True)
    _flag(p, "--ckpt")
    _flag(p, "--scenes-dir", dest="scenes_dir", help="use existing scene_* folders instead of generating")
    _flag(p, "--scenarios", type=_csv_list)
    _flag(p, "--scenes", type=int)
    _flag(p, "--length", type=int)
    _flag(p, "--noise", type=float)
    _flag(p, "--suite-seed", type=int, dest="suite_seed")
    _flag(p, "--r-phi-sweep", type=_csv_floats, dest="r_phi_sweep")
    p.add_argument("--no-curves", action="store_const", const=False, default=None, dest="curves")
    _tracker_opts(p)
    _common(p)

    p = sub.add_parser("report", help="re-render CSV/SVG from a benchmark report.json")
    _flag(p, "--input", required=True, help="benchmark report.json")
    _flag(p, "--out", required=True)
    _common(p)

    p = sub.add_parser("replay", help="re-run a RunManifest and verify its artifacts")
    p.add_argument("manifest")
    _flag(p, "--out", required=True)
    _common(p)
    return ap


def _csv_list(s):
    return [x.strip() for x in s.split(",") if x.strip()]


def _csv_floats(s):
    try:
        return [float(x) for x in _csv_list(s)]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {s!r}") from None


ALIASES = {"iters": "I", "init_window": "J", "init_iters": "I0", "r_phi_ratio": "r_phi"}
PATH_KEYS = ("data", "ckpt", "detections", "gt", "results", "scenes_dir", "input")

_META_KEYS = {"command", "config", "json_errors", "jobs", "verbose", "version", "json_errors_global", "out"}


def resolve(args) -> dict:
    """Effective options: defaults < config file < explicit flags."""
    cmd = args.command
    eff = dict(DEFAULTS.get(cmd, {}))
    if cmd in ("track", "benchmark"):
        d = TrackerConfig().to_dict()
        eff.update({k: d[k] for k in TRACKER_KEYS})
    if args.config:
        for k, v in dataio.parse_config(args.config).items():
            eff[ALIASES.get(k, k)] = v
    for k, v in vars(args).items():
        if k in _META_KEYS or v is None:
            continue
        eff[k] = v
    for k in PATH_KEYS:
        if eff.get(k) is not None:
            eff[k] = str(Path(eff[k]).resolve())
    return eff


# ------------------------------------------------------------ commands

def cmd_synth_data(opts, out):
    out = _out_dir(out)
    keys = {f for f in synth.TrajectoryConfig.__dataclass_fields__}
    tc = {k: v for k, v in opts.items() if k in keys}
    tc["T"] = int(opts["length"])
    tc["seed"] = int(opts["seed"])
    try:
        cfg = synth.TrajectoryConfig.from_mapping(tc)
    except (TypeError, ValueError) as e:
        raise UsageError(str(e)) from None
    stats = synth.gen_dataset(cfg, int(opts["train"]), int(opts["val"]), out)
    return {"inputs": [], "is_dir": True, "summary": {"mean_speed": stats["average_speed"]["mean"]},
            "seeds": {"data": cfg.seed}}


def cmd_pretrain(opts, out):
    out = _out_file(out)
    data = Path(opts["data"])
    for name in ("train.txt", "val.txt"):
        if not (data / name).is_file():
            raise DataError(f"{data / name}: file not found")
    try:
        tr = synth.read_sequences(data / "train.txt")
        va = synth.read_sequences(data / "val.txt")
    except ValueError as e:
        raise DataError(str(e)) from None
    try:
        cfg = pretrain.TrainConfig(lr=float(opts["lr"]), batch_size=int(opts["batch"]),
                                   patience=int(opts["patience"]), max_epochs=int(opts["max_epochs"]),
                                   seed=int(opts["seed"]))
    except ValueError as e:
        raise UsageError(str(e)) from None
    log_path = out.with_name(out.name + ".log.csv")
    try:
        res = pretrain.train(tr, va, cfg, out_checkpoint=out, log_path=log_path,
                             progress=lambda r: log.info("epoch %d train %.4f val %.4f",
                                                         r["epoch"], r["train_loss"], r["val_loss"]))
    except ValueError as e:
        raise DataError(str(e)) from None
    summary = {"best_epoch": res.best_epoch, "best_val": res.best_val, "epochs_run": res.epochs_run,
               "stopped_early": res.stopped_early, "diverged": res.diverged,
               "val_rmse_model": pretrain.one_step_rmse(res.params, va),
               "val_rmse_constant_position": pretrain.constant_position_rmse(va),
               "val_rmse_model_burn_in_1": pretrain.one_step_rmse(res.params, va, burn_in=1),
               "val_rmse_constant_position_burn_in_1": pretrain.constant_position_rmse(va, burn_in=1)}
    info = {"inputs": [data / "train.txt", data / "val.txt"], "is_dir": False, "summary": summary,
            "seeds": {"train": cfg.seed, "val_noise": cfg.val_noise_seed},
            "outputs": [out], "nondeterministic_outputs": [log_path]}
    if res.diverged:
        info["numeric_failure"] = "training diverged (non-finite loss); best checkpoint retained"
    return info


def _tracker_cfg(opts, **over) -> TrackerConfig:
    d = {k: opts[k] for k in TRACKER_KEYS}
    d.update(over)
    try:
        return TrackerConfig(**d)
    except (TypeError, ValueError) as e:
        raise UsageError(str(e)) from None


def cmd_track(opts, out):
    out = _out_dir(out)
    det = Path(opts["detections"])
    W, H = opts.get("img_width"), opts.get("img_height")
    meta_p = det.parent / "meta.json"
    if (W is None or H is None) and meta_p.is_file():
        meta = json.loads(meta_p.read_text())
        W = W or meta.get("img_width")
        H = H or meta.get("img_height")
    W = float(W or 1920.0)
    H = float(H or 1080.0)
    cfg = _tracker_cfg(opts, dynamics=opts["dynamics"], n_objects=opts.get("n_objects"))
    scene_cfg = dataio.SceneConfig(W, H, 1, None)
    scene = dataio.load_scene(det, scene_cfg)
    params, ck = (None, None)
    if cfg.dynamics == "dvae":
        params, ck = _load_params(opts.get("ckpt"))
    try:
        res = track(scene, params, cfg)
    except ValueError as e:
        raise DataError(str(e)) from None
    first = scene.meta.get("first_frame", 1)
    rows = metrics.rows_from_estimates(res.m, first_frame=first)
    dataio.write_mot(out / "results.txt", rows, W, H)
    diag = {"entropy": res.diagnostics["entropy"], "movement": res.diagnostics["movement"],
            "underflow_events": res.diagnostics["underflow_events"],
            "config": cfg.to_dict(), "n_objects": int(res.m.shape[1]), "T": scene.T,
            "img_width": W, "img_height": H,
            "assignments": [a.tolist() for a in res.assignments]}
    dataio.write_json(out / "diagnostics.json", diag)
    return {"inputs": [det, ck], "is_dir": True, "seeds": {"tracker": cfg.seed},
            "summary": {"final_entropy": diag["entropy"][-1], "n_objects": diag["n_objects"]}}


def _eval_pair(gt_path, res_path, W, H, thr):
    gt = dataio.read_tracks(gt_path, W, H, gt_filter=True)
    if gt.shape[0] == 0:
        raise DataError(f"{gt_path}: empty ground truth (MOTA undefined)")
    hyp = dataio.read_tracks(res_path, W, H)
    return metrics.evaluate(gt, hyp, thr)


def cmd_evaluate(opts, out):
    out = _out_file(out)
    gt, res = Path(opts["gt"]), Path(opts["results"])
    W, H, thr = float(opts["img_width"]), float(opts["img_height"]), float(opts["iou"])
    if not gt.exists():
        raise DataError(f"{gt}: file not found")
    if not res.exists():
        raise DataError(f"{res}: file not found")
    seqs = []
    if gt.is_dir():
        for d in dataio.scene_dirs(gt):
            rp = res / d.name / "results.txt"
            if not rp.is_file():
                rp = res / d.name / "results_dvae.txt"
            if not rp.is_file():
                raise DataError(f"{res / d.name / 'results.txt'}: file not found")
            seqs.append((d.name, _eval_pair(d / "gt.txt", rp, W, H, thr)))
        if not seqs:
            raise DataError(f"{gt}: no scene_* folders")
    else:
        seqs.append((gt.name, _eval_pair(gt, res, W, H, thr)))
    overall = metrics.combine([r for _, r in seqs])
    report = {"overall": overall.to_dict(), "iou_threshold": thr,
              "sequences": {name: r.to_dict() for name, r in seqs},
              "schema": "dvae-umot/metric-report/1"}
    dataio.write_json(out, report)
    return {"inputs": [gt, res], "is_dir": False, "outputs": [out],
            "summary": {"mota": overall.mota, "idf1": overall.idf1}}


def cmd_build_benchmark(opts, out):
    out = _out_dir(out)
    try:
        cfg = dataio.SceneConfig(float(opts["img_width"]), float(opts["img_height"]),
                                 track_count=int(opts["tracks"]), seed=int(opts["seed"]))
    except ValueError as e:
        raise UsageError(str(e)) from None
    scenes, stats = dataio.build_benchmark(opts["gt"], opts["detections"], cfg, int(opts["length"]),
                                           out_dir=out)
    dataio.write_json(out / "build_stats.json", stats)
    return {"inputs": [opts["gt"], opts["detections"]], "is_dir": True, "summary": stats,
            "seeds": {"selection": cfg.seed}}


def _suite_cfg(opts, seed_key="seed"):
    keys = set(dataio.SuiteConfig.__dataclass_fields__)
    d = {k: v for k, v in opts.items() if k in keys and k not in ("seed", "T")}
    d.update(scenarios=tuple(opts["scenarios"]) if isinstance(opts["scenarios"], (list, tuple))
             else opts["scenarios"],
             scenes_per_scenario=int(opts["scenes"]), T=int(opts["length"]),
             noise=float(opts["noise"]), seed=int(opts[seed_key]))
    try:
        return dataio.SuiteConfig.from_mapping(d)
    except (TypeError, ValueError) as e:
        raise UsageError(str(e)) from None


def cmd_synth_benchmark(opts, out):
    out = _out_dir(out)
    cfg = _suite_cfg(opts)
    scenes = dataio.synth_benchmark(cfg, out_dir=out)
    return {"inputs": [], "is_dir": True, "summary": {"scenes": len(scenes)}, "seeds": {"suite": cfg.seed}}


def cmd_benchmark(opts, out, jobs=1):
    out = _out_dir(out)
    inputs = []
    if opts.get("scenes_dir"):
        scenes = [dataio.read_scene(d) for d in dataio.scene_dirs(opts["scenes_dir"])]
        inputs.append(opts["scenes_dir"])
        suite = None
    else:
        suite = _suite_cfg(opts, "suite_seed")
        scenes = dataio.synth_benchmark(suite)
    if not scenes:
        raise DataError("benchmark suite is empty: 0 scenes")
    params, ck = _load_params(opts.get("ckpt"))
    inputs.append(ck)
    cfg = _tracker_cfg(opts)
    curves = bool(opts.get("curves", True))
    try:
        res = bench.run_suite(scenes, params, cfg, jobs=jobs, curves=curves)
    except ValueError as e:
        raise DataError(str(e)) from None
    # per-scene tracking outputs
    for row in res["per_scene"]:
        d = out / "scenes" / f"scene_{row['index']:04d}"
        d.mkdir(parents=True, exist_ok=True)
        dataio.write_mot(d / f"results_{row['method']}.txt", metrics.rows_from_estimates(row["m"]),
                         dataio.SYNTH_IMAGE_SIZE, dataio.SYNTH_IMAGE_SIZE)
    for i, sc in enumerate(scenes):
        dataio.write_scene(out / "scenes" / f"scene_{i:04d}", sc)
    report = bench.strip_arrays(res)
    report["config"] = {"tracker": cfg.to_dict(), "suite": suite.to_dict() if suite else None}
    if opts.get("r_phi_sweep"):
        report["r_phi_sweep"] = bench.r_phi_sweep(scenes, params, cfg, opts["r_phi_sweep"], jobs=jobs)
    dataio.write_json(out / "report.json", report)
    render_report(report, out, scenes=scenes, per_scene=res["per_scene"])
    return {"inputs": inputs, "is_dir": True, "seeds": {"tracker": cfg.seed,
                                                         "suite": suite.seed if suite else None},
            "summary": {m: report["table"]["all"][m]["mota"] for m in report["methods"]}}


def render_report(report: dict, out: Path, scenes=None, per_scene=None):
    """CSV table and SVG plots for a benchmark report."""
    rows = []
    for g, d in report["table"].items():
        for m, met in d.items():
            rows.append({"scenario": g, "method": m, **met})
    dataio.write_csv(out / "report.csv", rows, ["scenario", "method", *bench.TABLE_METRICS])
    dataio.plot_bars(out / "mota_by_scenario.svg",
                     {g: {m: v["mota"] for m, v in d.items()} for g, d in report["table"].items()},
                     "MOTA", "MOTA per scenario")
    if report.get("mota_vs_iteration"):
        series = {m: (list(range(1, len(c) + 1)), c) for m, c in report["mota_vs_iteration"].items()}
        dataio.plot_curves(out / "mota_vs_iteration.svg", series, "iteration", "MOTA",
                           "MOTA vs EM iteration")
    if report.get("r_phi_sweep"):
        sw = report["r_phi_sweep"]
        dataio.plot_curves(out / "r_phi_sweep.svg", {"dvae": (sw["r_phi"], sw["mota"])}, "r_phi", "MOTA",
                           "MOTA vs r_phi")
    if scenes is not None and per_scene is not None:
        seen = set()
        for i, sc in enumerate(scenes):
            scen = sc.meta.get("scenario", "scenes")
            if scen in seen:
                continue
            seen.add(scen)
            est = {r["method"]: r["m"] for r in per_scene if r["index"] == i}
            dataio.plot_trajectories(out / f"trajectories_{scen.replace('+', '_')}.svg", sc, est,
                                     f"{scen} (scene {i})")


def cmd_report(opts, out):
    out = _out_dir(out)
    src = Path(opts["input"])
    if not src.is_file():
        raise DataError(f"{src}: file not found")
    try:
        report = json.loads(src.read_text())
        render_report(report, out)
    except (json.JSONDecodeError, KeyError) as e:
        raise DataError(f"{src}: not a benchmark report ({e})") from None
    return {"inputs": [src], "is_dir": True, "summary": {}}


COMMANDS = {
    "synth-data": cmd_synth_data,
    "pretrain": cmd_pretrain,
    "track": cmd_track,
    "evaluate": cmd_evaluate,
    "build-benchmark": cmd_build_benchmark,
    "synth-benchmark": cmd_synth_benchmark,
    "benchmark": cmd_benchmark,
    "report": cmd_report,
}


# ------------------------------------------------------------- manifests

def run_command(command: str, opts: dict, out, jobs: int = 1, argv=None) -> dict:
    """Execute one subcommand and write its RunManifest; returns the manifest."""
    t0 = time.perf_counter()
    fn = COMMANDS[command]
    info = fn(opts, out, jobs) if command == "benchmark" else fn(opts, out)
    wall = time.perf_counter() - t0
    out = Path(out)
    is_dir = info["is_dir"]
    mpath = _manifest_path(out, is_dir)
    nondet = [Path(p) for p in info.get("nondeterministic_outputs", [])]
    if is_dir:
        outputs = _hash_tree(out, exclude={"manifest.json"})
    else:
        outputs = {Path(p).name: sha256_file(p) for p in info.get("outputs", [out])}
    for p in nondet:
        outputs.pop(p.name, None)
    manifest = {
        "schema": "dvae-umot/run-manifest/1",
        "command": command,
        "argv": list(argv) if argv is not None else None,
        "config": opts,
        "seeds": info.get("seeds", {}),
        "inputs": _hash_inputs(info.get("inputs", [])),
        "outputs": outputs,
        "nondeterministic_outputs": sorted(p.name for p in nondet),
        "out": str(out.resolve()),
        "out_is_dir": is_dir,
        "jobs": jobs,
        "tool_version": __version__,
        "checkpoint_format_version": srnn.CHECKPOINT_VERSION,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "timings": {"wall_s": round(wall, 3)},
        "summary": info.get("summary", {}),
    }
    dataio.write_json(mpath, manifest)
    if info.get("numeric_failure"):
        raise NumericError(info["numeric_failure"])
    return manifest


def replay(manifest_path, out, jobs: int = 1) -> dict:
    mp = Path(manifest_path)
    if not mp.is_file():
        raise DataError(f"{mp}: manifest not found")
    try:
        man = json.loads(mp.read_text())
        command, opts = man["command"], man["config"]
    except (json.JSONDecodeError, KeyError) as e:
        raise DataError(f"{mp}: not a run manifest ({e})") from None
    for path, h in man.get("inputs", {}).items():
        if not Path(path).is_file():
            raise DataError(f"{path}: input recorded in the manifest is missing")
        if sha256_file(path) != h:
            raise DataError(f"{path}: input changed since the recorded run (hash mismatch)")
    out = Path(out)
    if not man.get("out_is_dir", True):
        # file outputs keep their recorded file name inside the replay directory
        out.mkdir(parents=True, exist_ok=True)
        target = out / Path(man["out"]).name
    else:
        target = out
    new = run_command(command, opts, target, jobs=man.get("jobs", 1) if jobs is None else jobs)
    diffs = sorted(k for k in set(man["outputs"]) | set(new["outputs"])
                   if man["outputs"].get(k) != new["outputs"].get(k))
    return {"identical": not diffs, "differences": diffs, "replayed": new}


# ---------------------------------------------------------------- main

def _emit_error(msg, code, as_json):
    if as_json:
        kind = {EXIT_USAGE: "usage", EXIT_DATA: "data", EXIT_NUMERIC: "numeric"}.get(code, "error")
        sys.stderr.write(json.dumps({"error": kind, "exit_code": code, "message": msg}) + "\n")
    else:
        sys.stderr.write(f"error: {msg}\n")


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    as_json = "--json-errors" in argv
    try:
        ap = build_parser()
        try:
            args = ap.parse_args(argv)
        except SystemExit as e:          # --help
            return EXIT_OK if not e.code else EXIT_USAGE
        if args.version:
            print(f"dvae-umot {__version__} (checkpoint format {srnn.CHECKPOINT_VERSION})")
            return EXIT_OK
        if not args.command:
            raise UsageError("missing subcommand\n" + ap.format_usage().strip())
        logging.basicConfig(level=logging.INFO if getattr(args, "verbose", None) else logging.WARNING,
                            format="%(levelname)s %(message)s")
        jobs = args.jobs if getattr(args, "jobs", None) else 1
        if jobs < 1:
            raise UsageError("--jobs must be >= 1")
        if args.command == "replay":
            res = replay(args.manifest, args.out, jobs=None if args.jobs is None else jobs)
            print(json.dumps({"identical": res["identical"], "differences": res["differences"]}))
            return EXIT_OK if res["identical"] else EXIT_NUMERIC
        opts = resolve(args)
        man = run_command(args.command, opts, args.out, jobs=jobs, argv=argv)
        print(json.dumps(man["summary"], sort_keys=True, default=str))
        return EXIT_OK
    except UsageError as e:
        _emit_error(str(e), EXIT_USAGE, as_json)
        return EXIT_USAGE
    except (DataError, FileNotFoundError, IsADirectoryError, PermissionError) as e:
        _emit_error(str(e), EXIT_DATA, as_json)
        return EXIT_DATA
    except (NumericError, ad.NonFiniteError, pretrain.DivergenceError, FloatingPointError,
            np.linalg.LinAlgError) as e:
        _emit_error(str(e), EXIT_NUMERIC, as_json)
        return EXIT_NUMERIC
    except ValueError as e:
        _emit_error(str(e), EXIT_DATA, as_json)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())


def main_exit():
    sys.exit(main())
