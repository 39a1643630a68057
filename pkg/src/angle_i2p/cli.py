"""Command-line front end: generate, train, filter, evaluate, ablate, selftest.

Settings resolve as defaults < ``--config`` key=value file < flags. The
effective configuration is written to ``config.txt`` in the run directory;
passing that file back with ``--config`` reruns the command exactly.
"""

from __future__ import annotations

import argparse
import datetime
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from .estimator import AngleI2PClassifier, filter_correspondences
from .experiment import ablation_csv, ablation_table, evaluate_sets, run_ablation
from .geometry import CorrespondenceSet
from .io import load_correspondences, save_correspondences
from .pose import aggregate, reports_to_csv, summary_text
from .synth import DEFAULT_INTRINSICS, SceneConfig, make_dataset, manifest_lines, parse_manifest

COMMANDS = ("generate", "train", "filter", "evaluate", "ablate", "selftest")
AUTO = "auto"

# key -> default; the default's type decides how file values are parsed
DEFAULTS: Dict[str, object] = {
    "seed": 0,
    # generate
    "scenes": 200,
    "n_points": 100,
    "outlier_ratio": 0.7,
    "outlier_mode": "uniform_resample",
    "scale_min": 0.8,
    "scale_max": 1.5,
    "depth_bias": 0.0,
    "depth_noise": 0.01,
    "pixel_noise": 0.0,
    "single_as_test": False,
    # pipeline
    "sigma_d": 0.1,
    "mode": "angle",
    "K": 32,
    "M": 100,
    "V": AUTO,
    "scale_alignment": True,
    "cross_theta": "ones",
    # network and training
    "d_model": 128,
    "n_heads": 4,
    "n_blocks": 3,
    "reweight": True,
    "cross_attention": True,
    "learning_rate": 1e-4,
    "weight_decay": 1e-6,
    "epochs": 50,
    "batch_size": 1,
    "loss": "bce",
    "tau": 0.2,
    # evaluation
    "ransac_iters": 1000,
    "pnp_solver": "sqpnp",
    "reproj_threshold_px": 3.0,
    "ir_threshold": 0.05,
    "rr_threshold": 0.1,
    "split": "test",
    # inputs
    "data": "",
    "model": "",
    "input": "",
    "reference": "",
    "quick": False,
}

# keys each command records in its config echo
COMMAND_KEYS = {
    "generate": ["seed", "scenes", "n_points", "outlier_ratio", "outlier_mode", "scale_min", "scale_max",
                 "depth_bias", "depth_noise", "pixel_noise", "single_as_test"],
    "train": ["seed", "data", "sigma_d", "mode", "K", "M", "V", "scale_alignment", "cross_theta", "d_model",
              "n_heads", "n_blocks", "reweight", "cross_attention", "learning_rate", "weight_decay", "epochs",
              "batch_size", "loss", "tau"],
    "filter": ["model", "input", "tau", "split"],
    "evaluate": ["seed", "input", "reference", "ransac_iters", "pnp_solver", "reproj_threshold_px", "ir_threshold",
                 "rr_threshold", "split"],
    "selftest": ["quick"],
}
COMMAND_KEYS["ablate"] = COMMAND_KEYS["train"] + [k for k in COMMAND_KEYS["evaluate"]
                                                  if k not in COMMAND_KEYS["train"] + ["input", "reference"]]

CHOICES = {
    "outlier_mode": ("uniform_resample", "pixel_shuffle"),
    "mode": ("angle", "distance"),
    "cross_theta": ("ones", "geometric"),
    "loss": ("bce", "focal"),
    "split": ("train", "val", "test", "all"),
    "pnp_solver": ("sqpnp", "epnp", "p3p", "dlt6"),
}


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"invalid config key '{key}': {message}")
        self.key = key


def parse_value(key: str, text: str):
    if key not in DEFAULTS:
        raise ConfigError(key, "unknown key")
    default = DEFAULTS[key]
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if key == "V":
            return AUTO if text.lower() == AUTO else int(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise ConfigError(key, f"cannot parse {text!r} as {type(default).__name__}") from None
    return text


def read_config_file(path) -> Dict[str, object]:
    """``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(line, f"line {lineno} of {path} is not key=value")
        key, value = (part.strip() for part in line.split("=", 1))
        out[key] = parse_value(key, value)
    return out


def validate(cfg: Dict[str, object], command: str) -> None:
    """Raise ConfigError naming the first out-of-range key."""
    def need(key, ok, msg):
        if not ok:
            raise ConfigError(key, f"{cfg[key]!r} {msg}")

    for key, choices in CHOICES.items():
        need(key, cfg[key] in choices, f"is not one of {', '.join(choices)}")
    for key in ("scenes", "n_points", "K", "M", "d_model", "n_heads", "batch_size", "ransac_iters"):
        need(key, cfg[key] >= 1, "must be at least 1")
    for key in ("epochs", "n_blocks"):
        need(key, cfg[key] >= 0, "must be non-negative")
    need("V", cfg["V"] == AUTO or cfg["V"] >= 1, "must be 'auto' or a positive count")
    need("outlier_ratio", 0 <= cfg["outlier_ratio"] < 1, "must lie in [0, 1)")
    need("scale_min", cfg["scale_min"] > 0, "must be positive")
    need("scale_max", cfg["scale_max"] >= cfg["scale_min"], "must be at least scale_min")
    for key in ("depth_noise", "pixel_noise", "weight_decay"):
        need(key, cfg[key] >= 0, "must be non-negative")
    for key in ("sigma_d", "learning_rate", "reproj_threshold_px", "ir_threshold", "rr_threshold"):
        need(key, cfg[key] > 0, "must be positive")
    need("d_model", cfg["d_model"] % cfg["n_heads"] == 0 and cfg["d_model"] % 2 == 0,
         "must be even and divisible by n_heads")
    if command in ("train", "ablate"):
        need("tau", 0 < cfg["tau"] < 1, "must lie in (0, 1) for training")
    else:
        need("tau", 0 <= cfg["tau"] <= 1, "must lie in [0, 1]")
    required = {"train": ["data"], "ablate": ["data"], "filter": ["model", "input"], "evaluate": ["input"]}
    for key in required.get(command, []):
        need(key, bool(cfg[key]), "is required")


def format_config(cfg: Dict[str, object], keys: List[str]) -> str:
    def fmt(v):
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, float):
            return repr(v)
        return str(v)

    return "".join(f"{k} = {fmt(cfg[k])}\n" for k in keys)


def _add_common(p: argparse.ArgumentParser):
    S = argparse.SUPPRESS
    p.add_argument("--config", metavar="PATH", default=None, help="key=value file applied over the defaults")
    p.add_argument("--out", metavar="DIR", default=None,
                   help="run directory (default: <command>-<timestamp>-s<seed>)")
    p.add_argument("--set", metavar="KEY=VALUE", action="append", default=[], help="override any config key")
    p.add_argument("--seed", type=int, default=S)
    p.add_argument("--tau", type=float, default=S)
    p.add_argument("--sigma-d", dest="sigma_d", type=float, default=S)
    p.add_argument("--mode", choices=CHOICES["mode"], default=S)
    p.add_argument("--no-reweight", dest="reweight", action="store_false", default=S)
    p.add_argument("--no-cross-attention", dest="cross_attention", action="store_false", default=S)
    p.add_argument("--no-scale-alignment", dest="scale_alignment", action="store_false", default=S)
    p.add_argument("--ransac-iters", dest="ransac_iters", type=int, default=S)
    p.add_argument("--epochs", type=int, default=S)
    p.add_argument("--data", metavar="DIR", default=S, help="dataset directory written by 'generate'")


def build_parser() -> argparse.ArgumentParser:
    S = argparse.SUPPRESS
    parser = argparse.ArgumentParser(prog="angle-i2p", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", metavar="{" + ",".join(COMMANDS) + "}")
    helps = {
        "generate": "write synthetic scenes and a manifest",
        "train": "fit the classifier; writes a checkpoint and history CSV",
        "filter": "score correspondences and keep those at or above tau",
        "evaluate": "IR / MRE / MTE / RR of correspondence files",
        "ablate": "train and compare the ablation variants and tau sweep",
        "selftest": "run the oracle-backed invariant suites",
    }
    for name in COMMANDS:
        p = sub.add_parser(name, help=helps[name])
        _add_common(p)
        if name == "generate":
            p.add_argument("--scenes", type=int, default=S)
            p.add_argument("--n-points", dest="n_points", type=int, default=S)
            p.add_argument("--outlier-ratio", dest="outlier_ratio", type=float, default=S)
        if name in ("filter", "evaluate"):
            p.add_argument("--input", metavar="PATH", default=S,
                           help="correspondence file, scene directory or dataset directory")
            p.add_argument("--split", choices=CHOICES["split"], default=S)
        if name == "filter":
            p.add_argument("--model", metavar="PATH", default=S, help="AGNN1 checkpoint")
        if name == "evaluate":
            p.add_argument("--reference", metavar="PATH", default=S,
                           help="unfiltered sets (same file names) whose points define the RR check")
        if name == "selftest":
            p.add_argument("--quick", action="store_true", default=S)
    return parser


def resolve_config(args: argparse.Namespace) -> Dict[str, object]:
    cfg = dict(DEFAULTS)
    if args.config:
        cfg.update(read_config_file(args.config))
    for item in args.set:
        if "=" not in item:
            raise ConfigError(item, "--set expects KEY=VALUE")
        key, value = item.split("=", 1)
        cfg[key.strip()] = parse_value(key.strip(), value)
    for key, value in vars(args).items():
        if key in DEFAULTS:
            cfg[key] = value
    return cfg


def run_dir(command: str, cfg: Dict[str, object], out: Optional[str]) -> Path:
    if out:
        path = Path(out)
    else:
        stamp = datetime.datetime.now().strftime("%Y%m%d-%H%M%S")
        path = Path(f"{command}-{stamp}-s{cfg['seed']}")
    path.mkdir(parents=True, exist_ok=True)
    return path


def _logger(outdir: Path) -> logging.Logger:
    log = logging.getLogger("angle_i2p.run")
    log.setLevel(logging.INFO)
    log.propagate = False
    for h in list(log.handlers):
        log.removeHandler(h)
        h.close()
    # no timestamps: the log is an artifact and must rerun byte-identically
    fh = logging.FileHandler(outdir / "run.log", mode="w")
    fh.setFormatter(logging.Formatter("%(message)s"))
    sh = logging.StreamHandler(sys.stderr)
    sh.setFormatter(logging.Formatter("%(message)s"))
    log.addHandler(fh)
    log.addHandler(sh)
    return log


# ---------------------------------------------------------------------------
# dataset access


def load_dataset(path, split: str = "all") -> Tuple[List[str], List[CorrespondenceSet]]:
    """Scenes from a dataset directory (manifest + scenes/), a scene directory or a single file."""
    path = Path(path)
    if path.is_file():
        return [path.stem], [load_correspondences(path)]
    manifest = path / "manifest.jsonl"
    if manifest.exists():
        recs = parse_manifest(manifest.read_text())
        recs = [r for r in recs if split == "all" or r["split"] == split]
        return ([Path(r["file"]).stem for r in recs],
                [load_correspondences(path / r["file"]) for r in recs])
    files = sorted(path.glob("*.txt"))
    if not files:
        raise FileNotFoundError(f"no correspondence files under {path}")
    return [f.stem for f in files], [load_correspondences(f) for f in files]


def estimator_params(cfg: Dict[str, object]) -> dict:
    return dict(d_model=cfg["d_model"], n_heads=cfg["n_heads"], n_blocks=cfg["n_blocks"],
                reweight=cfg["reweight"], cross_attention=cfg["cross_attention"], sigma_d=cfg["sigma_d"],
                mode=cfg["mode"], K=cfg["K"], M=cfg["M"], V=None if cfg["V"] == AUTO else cfg["V"],
                scale_alignment=cfg["scale_alignment"], cross_theta=cfg["cross_theta"],
                learning_rate=cfg["learning_rate"], weight_decay=cfg["weight_decay"], epochs=cfg["epochs"],
                batch_size=cfg["batch_size"], loss=cfg["loss"], tau=cfg["tau"], random_state=cfg["seed"])


def eval_kwargs(cfg: Dict[str, object]) -> dict:
    return dict(ransac_iterations=cfg["ransac_iters"], reproj_threshold_px=cfg["reproj_threshold_px"],
                ir_threshold=cfg["ir_threshold"], rr_threshold=cfg["rr_threshold"], seed=cfg["seed"],
                minimal_solver=cfg["pnp_solver"])


# ---------------------------------------------------------------------------
# commands


def cmd_generate(cfg, outdir: Path, log) -> int:
    template = SceneConfig(n_points=cfg["n_points"], intrinsics=DEFAULT_INTRINSICS, depth_scale=cfg["scale_min"],
                           depth_bias=cfg["depth_bias"], depth_noise_sigma=cfg["depth_noise"],
                           pixel_noise_px=cfg["pixel_noise"], outlier_ratio=cfg["outlier_ratio"],
                           outlier_mode=cfg["outlier_mode"])
    scale_range = None if cfg["scale_min"] == cfg["scale_max"] else (cfg["scale_min"], cfg["scale_max"])
    scenes, manifest = make_dataset(cfg["scenes"], template, cfg["seed"], scale_range, cfg["single_as_test"])
    (outdir / "scenes").mkdir(exist_ok=True)
    for rec, scene in zip(manifest, scenes):
        rec["file"] = f"scenes/scene_{rec['index']:04d}.txt"
        save_correspondences(outdir / rec["file"], scene.corrs)
    (outdir / "manifest.jsonl").write_text(manifest_lines(manifest))
    ir = float(np.mean([s.corrs.gt_labels.mean() for s in scenes]))
    log.info(f"generated {len(scenes)} scenes, mean inlier ratio {ir:.4f}")
    return 0


def cmd_train(cfg, outdir: Path, log) -> int:
    _, train = load_dataset(cfg["data"], "train")
    _, val = load_dataset(cfg["data"], "val")
    if not train:
        raise ConfigError("data", "dataset has no training scenes")
    log.info(f"training on {len(train)} scenes, validating on {len(val)}")
    est = AngleI2PClassifier(**estimator_params(cfg))
    est.fit(train, X_val=val or None,
            callback=lambda e, l, v: log.info(f"epoch {e} loss {l:.6f} val_ir {v:.4f}"))
    (outdir / "model.agnn").write_bytes(est.to_bytes())
    (outdir / "history.csv").write_text(est.history_.to_csv())
    return 0


def cmd_filter(cfg, outdir: Path, log) -> int:
    est = AngleI2PClassifier.from_bytes(Path(cfg["model"]).read_bytes(), tau=cfg["tau"])
    names, sets = load_dataset(cfg["input"], cfg["split"])
    (outdir / "filtered").mkdir(exist_ok=True)
    (outdir / "scores").mkdir(exist_ok=True)
    for name, corrs, scores in zip(names, sets, est.decision_scores(sets)):
        kept = filter_correspondences(corrs, scores, cfg["tau"])
        save_correspondences(outdir / "filtered" / f"{name}.txt", kept)
        rows = ["index,score,kept"] + [f"{i},{s:.17g},{int(s >= cfg['tau'])}" for i, s in enumerate(scores)]
        (outdir / "scores" / f"{name}.csv").write_text("\n".join(rows) + "\n")
        for w in kept.warnings:
            log.info(f"{name}: {w}")
        log.info(f"{name}: kept {len(kept)} of {len(corrs)}")
    return 0


def cmd_evaluate(cfg, outdir: Path, log) -> int:
    names, sets = load_dataset(cfg["input"], cfg["split"])
    refs = None
    if cfg["reference"]:
        ref_names, ref_sets = load_dataset(cfg["reference"], cfg["split"])
        lookup = dict(zip(ref_names, ref_sets))
        missing = [n for n in names if n not in lookup]
        if missing:
            raise ConfigError("reference", f"no reference set for {missing[0]}")
        refs = [lookup[n] for n in names]
    reports = evaluate_sets(sets, references=refs, names=names, **eval_kwargs(cfg))
    (outdir / "metrics.csv").write_text(reports_to_csv(reports))
    summary = summary_text(aggregate(reports))
    (outdir / "summary.txt").write_text(summary)
    log.info(summary.rstrip())
    return 0


def cmd_ablate(cfg, outdir: Path, log) -> int:
    _, train = load_dataset(cfg["data"], "train")
    _, val = load_dataset(cfg["data"], "val")
    _, test = load_dataset(cfg["data"], cfg["split"])
    rows = run_ablation(train, test, estimator_params(cfg), val=val or None, eval_kwargs=eval_kwargs(cfg),
                        log=log.info)
    (outdir / "ablation.csv").write_text(ablation_csv(rows))
    table = ablation_table(rows)
    (outdir / "ablation.txt").write_text(table)
    log.info(table.rstrip())
    return 0


def cmd_selftest(cfg, outdir: Path, log) -> int:
    from .selftest import run_selftest
    results = run_selftest(quick=cfg["quick"], log=log.info)
    lines = [f"{'PASS' if r.passed else 'FAIL'} {r.name} {r.detail}" for r in results]
    (outdir / "selftest.txt").write_text("\n".join(lines) + "\n")
    return 0 if all(r.passed for r in results) else 1


HANDLERS = {"generate": cmd_generate, "train": cmd_train, "filter": cmd_filter, "evaluate": cmd_evaluate,
            "ablate": cmd_ablate, "selftest": cmd_selftest}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    try:
        cfg = resolve_config(args)
        validate(cfg, args.command)
    except ConfigError as exc:
        print(f"angle-i2p {args.command}: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"angle-i2p {args.command}: cannot read config: {exc}", file=sys.stderr)
        return 2
    outdir = run_dir(args.command, cfg, args.out)
    (outdir / "config.txt").write_text(format_config(cfg, COMMAND_KEYS[args.command]))
    log = _logger(outdir)
    try:
        return HANDLERS[args.command](cfg, outdir, log)
    except ConfigError as exc:
        log.error(f"angle-i2p {args.command}: {exc}")
        return 2
    except (OSError, ValueError) as exc:
        log.error(f"angle-i2p {args.command}: {exc}")
        return 1
    finally:
        for h in list(log.handlers):
            log.removeHandler(h)
            h.close()


if __name__ == "__main__":
    sys.exit(main())
