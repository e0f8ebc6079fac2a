"""Command-line entry points: ``egopoint <subcommand> [options]``.

Every run is configured by built-in defaults, then an optional INI-style
``--config`` file, then flags.  Each config key ``section.key`` has a flag
``--key`` (underscores become dashes); ``--set section.key=value`` also works.

Exit codes: 0 ok, 1 usage or config error, 2 runtime failure, 3 an
acceptance threshold checked with ``--check`` was missed.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .errors import EgoPointError

log = logging.getLogger("egopoint")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_THRESHOLD = 0, 1, 2, 3

DEFAULTS = {
    "scene": {"task_family": "pick_place", "n_demos": 100, "fixed_scene": False, "plant_far_demo": False},
    "tracker": {"pixel_sigma": 1.0, "lag_alpha": 0.2, "outlier_rate": 0.0},
    "hand": {"palm_rot_sigma": 0.1, "palm_trans_sigma": 0.03, "keypoint_sigma": 0.002},
    "arc": {"min_baseline": 0.3, "degenerate_arc": False},
    "triangulation": {
        "epsilon": 2.0,
        "min_consistent_views": 3,
        "ransac_iters": 256,
        "inlier_tau": 4.0,
        "huber_delta": 2.0,
        "depth_lambda": 0.1,
        "max_refine_iters": 100,
    },
    "pipeline": {"min_dist": 0.01, "subsample_factor": 2, "grasp_threshold": 0.05},
    "augment": {"rot_range": float(np.pi / 6), "trans_range": 0.5, "point_noise_sigma": 0.005},
    "policy": {
        "history_len": 6,
        "chunk_len": 10,
        "sigma": 0.1,
        "hidden_sizes": "256,256",
        "aggregation_m": 0.1,
        "learning_rate": 1e-3,
        "batch_size": 64,
        "epochs": 1500,
        "augment": True,
    },
    "rollout": {"episodes": 50, "first_seed": 100_000, "mode": "in", "depth": "true", "horizon": 200, "min_success": 0.8},
    "warp": {"scale": 1.1, "shift": 0.03, "bump_amplitude": 0.05, "bump_sigma_px": 300.0, "bench_scenes": 50},
    "io": {"corpus": "", "policy": ""},
}

# flags whose names differ from their config key
ALIASES = {"lag": ("tracker", "lag_alpha"), "lambda": ("triangulation", "depth_lambda")}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _convert(value, default):
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        v = str(value).strip().lower()
        if v in ("1", "true", "yes", "on"):
            return True
        if v in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"expected a boolean, got {value!r}")
    try:
        return type(default)(value)
    except (TypeError, ValueError):
        raise UsageError(f"expected {type(default).__name__}, got {value!r}") from None


def _key_index():
    idx = {}
    for sec, keys in DEFAULTS.items():
        for key in keys:
            if key in idx:
                raise RuntimeError(f"config key {key!r} is ambiguous")
            idx[key] = sec
    return idx


KEY_SECTION = _key_index()


def load_config(path=None, overrides=()) -> dict:
    """Defaults, then the file at ``path``, then ``(section, key, value)`` overrides."""
    cfg = {sec: dict(keys) for sec, keys in DEFAULTS.items()}
    if path:
        parser = configparser.ConfigParser()
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except OSError as e:
            raise UsageError(f"cannot read config {path}: {e.strerror}") from None
        except configparser.Error as e:
            raise UsageError(f"bad config {path}: {e}") from None
        for sec in parser.sections():
            if sec not in cfg:
                raise UsageError(f"{path}: unknown section [{sec}]; known: {', '.join(cfg)}")
            for key, value in parser.items(sec):
                if key not in cfg[sec]:
                    raise UsageError(f"{path}: unknown key {key!r} in [{sec}]")
                cfg[sec][key] = _convert(value, DEFAULTS[sec][key])
    for sec, key, value in overrides:
        cfg[sec][key] = _convert(value, DEFAULTS[sec][key])
    return cfg


# -- config -> module objects -------------------------------------------------


def episode_config(cfg):
    from .simulator import EpisodeConfig, HandNoiseModel, TrackerNoiseModel

    try:
        return EpisodeConfig(
            task_family=cfg["scene"]["task_family"],
            tracker=TrackerNoiseModel(cfg["tracker"]["pixel_sigma"], cfg["tracker"]["lag_alpha"], cfg["tracker"]["outlier_rate"]),
            hand=HandNoiseModel(cfg["hand"]["palm_rot_sigma"], cfg["hand"]["palm_trans_sigma"], cfg["hand"]["keypoint_sigma"]),
            min_baseline=cfg["arc"]["min_baseline"],
            degenerate_arc=cfg["arc"]["degenerate_arc"],
        )
    except ValueError as e:
        raise UsageError(f"invalid scene/noise config: {e}") from None


def triangulation_config(cfg):
    from .triangulation import TriangulationConfig

    try:
        return TriangulationConfig(**cfg["triangulation"])
    except ValueError as e:
        raise UsageError(f"invalid [triangulation] config: {e}") from None


def policy_config(cfg, seed):
    from .dataset import AugmentConfig
    from .policy import PolicyConfig

    p = dict(cfg["policy"])
    try:
        p["hidden_sizes"] = tuple(int(x) for x in str(p["hidden_sizes"]).split(",") if x.strip())
        return PolicyConfig(seed=seed, augment_cfg=AugmentConfig(seed=seed, **cfg["augment"]), **p)
    except ValueError as e:
        raise UsageError(f"invalid [policy] config: {e}") from None


def warp_model(cfg):
    from .simulator import DepthWarpModel

    w = {k: v for k, v in cfg["warp"].items() if k != "bench_scenes"}
    return DepthWarpModel(**w)


# -- helpers ----------------------------------------------------------------


def _write_json(path, doc) -> str:
    data = (json.dumps(doc, indent=2, sort_keys=True) + "\n").encode()
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _require_file(path, what):
    if not path:
        raise UsageError(f"no {what} given (use --{what} or [io] {what} in the config)")
    if not Path(path).is_file():
        raise UsageError(f"{what} file not found: {path}")
    return Path(path)


def _gate(report, checks, check: bool) -> int:
    report["checks"] = {name: bool(ok) for name, ok in checks.items()}
    failed = [name for name, ok in checks.items() if not ok]
    if check and failed:
        log.error("acceptance checks failed: %s", ", ".join(failed))
        return EXIT_THRESHOLD
    return EXIT_OK


# -- subcommands --------------------------------------------------------------


def cmd_gen_data(cfg, seed, out: Path, check=False) -> int:
    from dataclasses import replace

    from .dataset import build_demonstration, process_corpus, save_demos
    from .geometry import CameraIntrinsics
    from .simulator import simulate_episode

    n = cfg["scene"]["n_demos"]
    if n < 1:
        raise UsageError("scene.n_demos must be at least 1")
    k = CameraIntrinsics.default()
    ecfg, tcfg = episode_config(cfg), triangulation_config(cfg)
    task = cfg["scene"]["task_family"]
    seeds = [seed + i for i in range(n)]
    demos = []
    for s in seeds:
        ep = simulate_episode(seed if cfg["scene"]["fixed_scene"] else s, k, ecfg)
        demos.append(build_demonstration(
            ep.frames, ep.tracks, k, tcfg, cfg["pipeline"]["grasp_threshold"], seed=s, task_name=task
        ))
    if cfg["scene"]["plant_far_demo"]:
        # move one demo's object far from where its hand acted
        demos[-1] = replace(demos[-1], object_points=demos[-1].object_points + np.array([0.0, 0.0, 0.3]),
                            meta={**demos[-1].meta, "planted": True})
    kept, report = process_corpus(demos, cfg["pipeline"]["min_dist"], cfg["pipeline"]["subsample_factor"])
    corpus = out / "corpus.egd"
    save_demos(corpus, kept, task)
    manifest = {
        "version": __version__,
        "seed": seed,
        "seeds": seeds,
        "counts": report.counts,
        "discarded_seeds": report.discarded_seeds,
        "steps_before": report.steps_before,
        "steps_after": report.steps_after,
        "mean_reproj_error_px": float(np.mean([d.meta["reproj_error"] for d in demos])),
        "corpus": corpus.name,
        "corpus_sha256": _sha256(corpus),
        "config": cfg,
    }
    _write_json(out / "manifest.json", manifest)
    log.info("wrote %d of %d demos to %s", len(kept), n, corpus)
    return EXIT_OK


def cmd_triangulate_bench(cfg, seed, out: Path, check=False) -> int:
    from .geometry import CameraIntrinsics
    from .simulator import simulate_episode, warped_depth_points
    from .triangulation import TriangulationFailed, triangulate_object

    n = cfg["scene"]["n_demos"]
    if n < 1:
        raise UsageError("scene.n_demos must be at least 1")
    k = CameraIntrinsics.default()
    ecfg, tcfg = episode_config(cfg), triangulation_config(cfg)
    rows, failures = [], 0
    for s in range(seed, seed + n):
        ep = simulate_episode(s, k, ecfg)
        truth = ep.true_object_state()
        try:
            obj = triangulate_object(ep.tracks, k, tcfg, s, reference=ep.t0)
        except TriangulationFailed as e:
            failures += len(e.failures)
            continue
        for pid, (p, res) in enumerate(zip(obj.points, obj.results)):
            rows.append({
                "seed": s,
                "point_id": pid,
                "error_3d": float(np.linalg.norm(p - truth[pid])),
                "signed_depth_error": float(p[2] - truth[pid][2]),
                "reproj_error": float(res.mean_inlier_reproj_error),
                "inlier_fraction": len(res.inlier_frames) / len(ep.tracks[pid].frames),
            })
    if not rows:
        raise EgoPointError("every point failed to triangulate")
    err = np.array([r["error_3d"] for r in rows])
    report = {
        "demos": n,
        "points": len(rows),
        "failed_points": failures,
        "mean_error_3d": float(err.mean()),
        "median_error_3d": float(np.median(err)),
        "mean_signed_depth_error": float(np.mean([r["signed_depth_error"] for r in rows])),
        "mean_reproj_error_px": float(np.mean([r["reproj_error"] for r in rows])),
        "mean_inlier_fraction": float(np.mean([r["inlier_fraction"] for r in rows])),
        "config": cfg,
    }
    checks = {
        "reproj_in_0.5_4px": 0.5 <= report["mean_reproj_error_px"] <= 4.0,
        "median_error_below_1cm": report["median_error_3d"] < 0.01,
    }
    if cfg["warp"]["bench_scenes"] > 0:
        warp = warp_model(cfg)
        res = []
        for s in range(seed, seed + min(n, cfg["warp"]["bench_scenes"])):
            ep = simulate_episode(s, k, ecfg)
            pts = ep.true_object_state()
            est, fit = warped_depth_points(pts, k, warp)
            res.append(np.linalg.norm(est - pts, axis=1).mean())
        report["warped_depth"] = {"mean_residual": float(np.mean(res)), "min_residual": float(np.min(res))}
        checks["warped_residual_at_least_3cm"] = report["warped_depth"]["mean_residual"] >= 0.03
    code = _gate(report, checks, check)
    with open(out / "triangulation_points.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    _write_json(out / "triangulation_report.json", report)
    return code


def cmd_train(cfg, seed, out: Path, check=False) -> int:
    from .dataset import load_demos
    from .policy import save_policy, train

    corpus = _require_file(cfg["io"]["corpus"], "corpus")
    pcfg = policy_config(cfg, seed)
    demos = load_demos(corpus)
    t = time.perf_counter()
    params = train(demos, pcfg)
    log.info("trained in %.1f s", time.perf_counter() - t)
    digest = save_policy(out / "policy.json", params)
    with open(out / "loss_curve.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss"])
        w.writerows([i, repr(float(v))] for i, v in enumerate(params.loss_curve))
    curve = params.loss_curve
    report = {
        "policy": "policy.json",
        "policy_sha256": digest,
        "corpus_sha256": _sha256(corpus),
        "demos": len(demos),
        "initial_loss": curve[0],
        "final_loss": curve[-1],
        "config": cfg,
    }
    _write_json(out / "train_report.json", report)
    if not np.isfinite(curve[-1]) or curve[-1] > curve[0]:
        log.error("training diverged: loss %.4g -> %.4g", curve[0], curve[-1])
        return EXIT_RUNTIME
    return EXIT_OK


def _load_policy_arg(path):
    from .policy import load_policy

    if path == "oracle":
        return "oracle"
    return load_policy(_require_file(path, "policy"))


def cmd_rollout(cfg, seed, out: Path, check=False) -> int:
    from .dataset import load_demos
    from .policy import IN_VOLUME, OUT_OF_VOLUME, evaluate, training_volume
    from .simulator import EnvConfig

    r = cfg["rollout"]
    policy = _load_policy_arg(cfg["io"]["policy"])
    modes = [IN_VOLUME, OUT_OF_VOLUME] if r["mode"] == "both" else [r["mode"]]
    if any(m not in (IN_VOLUME, OUT_OF_VOLUME) for m in modes):
        raise UsageError(f"rollout.mode must be in, out or both, not {r['mode']!r}")
    if r["depth"] not in ("true", "triangulated", "warped"):
        raise UsageError("rollout.depth must be true, triangulated or warped")
    box = None if policy == "oracle" else policy.meta.get("training_box")
    if box is None and OUT_OF_VOLUME in modes:
        if not cfg["io"]["corpus"]:
            raise UsageError("out-of-volume rollout needs a training volume: pass --corpus")
        box = training_volume(load_demos(_require_file(cfg["io"]["corpus"], "corpus")))
    env_cfg = EnvConfig(horizon=r["horizon"])
    warp = warp_model(cfg) if r["depth"] == "warped" else None
    first = r["first_seed"] + seed
    results = {m: evaluate(policy, r["episodes"], first_seed=first, task_family=cfg["scene"]["task_family"],
                           mode=m, box=box, depth_warp=warp, triangulate=r["depth"] == "triangulated",
                           env_cfg=env_cfg) for m in modes}
    report = {
        "policy": cfg["io"]["policy"],
        "success_rate": {m: res["success_rate"] for m, res in results.items()},
        "episodes": {m: res["episodes"] for m, res in results.items()},
        "config": cfg,
    }
    checks = {f"{m}_success_at_least_{r['min_success']}": res["success_rate"] >= r["min_success"] for m, res in results.items()}
    code = _gate(report, checks, check)
    _write_json(out / "rollout_report.json", report)
    with open(out / "rollout_episodes.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["mode", "seed", "success", "grasped", "final_goal_distance", "state_error"])
        for m, res in results.items():
            for e in res["episodes"]:
                w.writerow([m, e["seed"], int(e["success"]), int(e["grasped"]), repr(e["final_goal_distance"]), repr(e["state_error"])])
    for m, res in results.items():
        log.info("%s-volume success %.2f over %d episodes", m, res["success_rate"], res["n"])
    return code


def cmd_calib_depth(cfg, seed, out: Path, check=False) -> int:
    from .geometry import CameraIntrinsics, project_many
    from .policy import evaluate
    from .simulator import calibration_tags, simulate_episode, warped_depth_points
    from .triangulation import TriangulationFailed, calibrate_depth_affine, triangulate_object

    k = CameraIntrinsics.default()
    warp = warp_model(cfg)
    tags = calibration_tags(k)
    fit = calibrate_depth_affine(warp(k, project_many(k, tags), tags[:, 2]), tags[:, 2])
    ecfg, tcfg = episode_config(cfg), triangulation_config(cfg)
    n = cfg["warp"]["bench_scenes"]
    if n < 1:
        raise UsageError("warp.bench_scenes must be at least 1")
    warped, tri = [], []
    for s in range(seed, seed + n):
        ep = simulate_episode(s, k, ecfg)
        truth = ep.true_object_state()
        est, _ = warped_depth_points(truth, k, warp, tags)
        warped.append(float(np.linalg.norm(est - truth, axis=1).mean()))
        try:
            obj = triangulate_object(ep.tracks, k, tcfg, s, reference=ep.t0)
            tri.append(float(np.linalg.norm(obj.points - truth, axis=1).mean()))
        except TriangulationFailed:
            tri.append(float("inf"))
    report = {
        "fit": {"scale": fit.scale, "shift": fit.shift, "tag_rms": fit.rms},
        "scenes": n,
        "warped_mean_residual": float(np.mean(warped)),
        "triangulated_mean_error": float(np.mean(tri)),
        "per_scene": [{"seed": seed + i, "warped": w, "triangulated": t} for i, (w, t) in enumerate(zip(warped, tri))],
        "config": cfg,
    }
    checks = {
        "warped_residual_at_least_3cm": report["warped_mean_residual"] >= 0.03,
        "triangulated_below_1cm": report["triangulated_mean_error"] < 0.01,
    }
    if cfg["io"]["policy"]:
        policy = _load_policy_arg(cfg["io"]["policy"])
        r = cfg["rollout"]
        first = r["first_seed"] + seed
        true_rate = evaluate(policy, r["episodes"], first_seed=first, triangulate=True)["success_rate"]
        warped_rate = evaluate(policy, r["episodes"], first_seed=first, depth_warp=warp)["success_rate"]
        report["policy_success"] = {"triangulated": true_rate, "warped": warped_rate}
        checks["warped_policy_at_most_20pct"] = warped_rate <= 0.2
        checks["triangulated_policy_at_least_80pct"] = true_rate >= 0.8
    code = _gate(report, checks, check)
    _write_json(out / "calib_depth_report.json", report)
    return code


COMMANDS = {
    "gen-data": (cmd_gen_data, "generate, process and save a synthetic demo corpus"),
    "triangulate-bench": (cmd_triangulate_bench, "triangulation accuracy report, with a warped-depth arm"),
    "train": (cmd_train, "train a policy on a corpus"),
    "rollout": (cmd_rollout, "closed-loop success rates of a policy file (or 'oracle')"),
    "calib-depth": (cmd_calib_depth, "affine depth calibration against a planted warp"),
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--config", help="INI-style config file")
    common.add_argument("--seed", type=int, default=0, help="base seed (default 0)")
    common.add_argument("--out", default=".", help="output directory (default .)")
    common.add_argument("--check", action="store_true", help="exit 3 when an acceptance threshold is missed")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="override any config value")
    common.add_argument("--no-augment", action="store_true", help="train without 3D augmentation")
    common.add_argument("--degenerate-arc", action="store_true", help="near-static head (<= 1 mm baseline)")
    common.add_argument("--lag", metavar="ALPHA", help="tracker lag (tracker.lag_alpha)")
    common.add_argument("--lambda", dest="lambda_", metavar="V", help="depth penalty (triangulation.depth_lambda)")
    common.add_argument("-v", "--verbose", action="store_true")
    for key, sec in KEY_SECTION.items():
        if key in ("degenerate_arc", "augment"):
            continue
        common.add_argument("--" + key.replace("_", "-"), dest="cfg__" + key, metavar="V", help=f"[{sec}] {key}")

    parser = _Parser(prog="egopoint", description="Egocentric demos to point-space policies.")
    parser.add_argument("--version", action="version", version=f"egopoint {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    for name, (_, help_) in COMMANDS.items():
        sub.add_parser(name, parents=[common], help=help_, description=help_)
    return parser


def _overrides(ns) -> list:
    out = []
    for item in getattr(ns, "set", []):
        lhs, sep, value = item.partition("=")
        sec, dot, key = lhs.partition(".")
        if not sep or not dot or sec not in DEFAULTS or key not in DEFAULTS[sec]:
            raise UsageError(f"bad --set {item!r}; expected SECTION.KEY=VALUE with a known key")
        out.append((sec, key, value))
    for name, value in vars(ns).items():
        if name.startswith("cfg__"):
            key = name[5:]
            out.append((KEY_SECTION[key], key, value))
    if getattr(ns, "lag", None) is not None:
        out.append((*ALIASES["lag"], ns.lag))
    if getattr(ns, "lambda_", None) is not None:
        out.append((*ALIASES["lambda"], ns.lambda_))
    if getattr(ns, "no_augment", False):
        out.append(("policy", "augment", False))
    if getattr(ns, "degenerate_arc", False):
        out.append(("arc", "degenerate_arc", True))
    return out


def main(argv=None) -> int:
    try:
        ns = build_parser().parse_args(argv)
        if not ns.command:
            raise UsageError("missing subcommand; choose from " + ", ".join(COMMANDS))
        logging.basicConfig(level=logging.INFO if getattr(ns, "verbose", False) else logging.WARNING,
                            format="%(levelname)s %(message)s", stream=sys.stderr)
        if ns.seed < 0:
            raise UsageError("--seed must be non-negative")
        cfg = load_config(getattr(ns, "config", None), _overrides(ns))
        out = Path(getattr(ns, "out", "."))
        out.mkdir(parents=True, exist_ok=True)
        fn = COMMANDS[ns.command][0]
        return fn(cfg, ns.seed, out, getattr(ns, "check", False))
    except UsageError as e:
        print(f"egopoint: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (EgoPointError, ValueError, OSError) as e:
        print(f"egopoint: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
