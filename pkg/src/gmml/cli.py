"""Command-line interface.

Subcommands: gen-data, train, eval, compare, verify, rerun. Every run
writes a manifest JSON next to its primary artifact; `rerun` replays a
manifest and reproduces the numeric outputs bitwise in 64-bit single-thread
mode. Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

import argparse
import csv
import dataclasses
import json
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .data import PRESETS, SyntheticSpec, generate_synthetic, load_dataset, save_dataset
from .encoder import TrainConfig, init_mlp, load_checkpoint, save_checkpoint, train
from .episodes import evaluate
from .losses import LOSS_KINDS
from .report import save_compare_figure, save_history_figure
from .rng import stream  # noqa: F401  (re-exported for scripting convenience)
from .verify import run_suite

__all__ = ["main"]


def _resolve_seed(value):
    if value is not None:
        return int(value)
    env = os.environ.get("GMML_SEED")
    return int(env) if env else 0


def _write_manifest(subcommand, config, seed, artifacts, manifest_path):
    doc = {
        "subcommand": subcommand,
        "config": config,
        "seed": int(seed),
        "artifacts": {k: str(v) for k, v in artifacts.items()},
        "tool_version": __version__,
        "timestamp": datetime.now(timezone.utc).isoformat(),
    }
    with open(manifest_path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


# --- subcommand bodies (take plain JSON-round-trippable config dicts) ---------


def run_gen_data(cfg):
    spec_fields = {f.name for f in dataclasses.fields(SyntheticSpec)}
    if cfg.get("preset"):
        base = dataclasses.asdict(PRESETS[cfg["preset"]])
    else:
        base = dataclasses.asdict(SyntheticSpec())
    for key in spec_fields:
        if cfg.get(key) is not None:
            base[key] = cfg[key]
    base["seed"] = cfg["seed"]
    base["split_fractions"] = tuple(base["split_fractions"])
    spec = SyntheticSpec(**base)
    dataset = generate_synthetic(spec)
    out = cfg["output"]
    save_dataset(dataset, out)
    _write_manifest("gen-data", cfg, cfg["seed"], {"dataset": out}, str(out) + ".manifest.json")
    counts = {s: len(dataset.classes(s)) for s in ("train", "val", "test")}
    print(
        f"wrote {out}: dim={dataset.dim}, samples={dataset.features.shape[0]}, "
        f"classes train/val/test = {counts['train']}/{counts['val']}/{counts['test']}"
    )
    return 0


def run_train(cfg):
    dataset = load_dataset(cfg["data"])
    X, y = dataset.split_arrays(cfg.get("split", "train"))
    config = TrainConfig(
        batch_size=cfg["batch_size"],
        epochs=cfg["epochs"],
        warmup_epochs=cfg["warmup_epochs"],
        base_lr=cfg["lr"],
        decay_epoch=cfg["decay_epoch"],
        decay_factor=cfg["decay_factor"],
        momentum=cfg["momentum"],
        weight_decay=cfg["weight_decay"],
        loss_kind=cfg["loss"],
        p=cfg["p"],
        seed=cfg["seed"],
        precision=cfg["precision"],
    )
    params = init_mlp(dataset.dim, cfg["hidden_dims"], cfg["head_dim"], seed=cfg["seed"])
    params, history = train(X, y, params, config)
    out = cfg["output"]
    save_checkpoint(params, out)
    artifacts = {"checkpoint": out}
    history_path = cfg.get("history") or str(out) + ".history.csv"
    with open(history_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "mean_loss", "lr", "wall_time"])
        for i, rec in enumerate(history.epochs):
            writer.writerow([i, repr(rec.mean_loss), repr(rec.lr), f"{rec.wall_time:.6f}"])
    artifacts["history"] = history_path
    figure_path = str(Path(history_path).with_suffix(".png"))
    if history.epochs:
        save_history_figure(history, figure_path)
        artifacts["history_figure"] = figure_path
    _write_manifest("train", cfg, cfg["seed"], artifacts, str(out) + ".manifest.json")
    if history.epochs:
        print(f"trained {cfg['loss']} for {config.epochs} epochs; final mean batch loss "
              f"{history.epochs[-1].mean_loss:.6f}; checkpoint {out}")
    else:
        print(f"0 epochs requested; wrote initialization checkpoint {out}")
    return 0


def run_eval(cfg):
    params = load_checkpoint(cfg["checkpoint"])
    dataset = load_dataset(cfg["data"])
    X, y = dataset.split_arrays(cfg["split"])
    report = evaluate(
        params,
        X,
        y,
        n_way=cfg["n"],
        k_shot=cfg["k"],
        q_per_class=cfg["q"],
        trials=cfg["trials"],
        p=cfg["p"],
        seed=cfg["seed"],
    )
    out = cfg["output"]
    with open(out, "w") as fh:
        fh.write(report.to_json())
    artifacts = {"report": out}
    if cfg.get("csv"):
        with open(cfg["csv"], "w") as fh:
            fh.write("mean_accuracy,ci_halfwidth,trials,n_way,k_shot,q_per_class,p,seed\n")
            fh.write(report.to_csv_row() + "\n")
        artifacts["report_csv"] = cfg["csv"]
    _write_manifest("eval", cfg, cfg["seed"], artifacts, str(out) + ".manifest.json")
    print(
        f"{cfg['n']}-way {cfg['k']}-shot on {cfg['split']}: "
        f"{report.mean_accuracy:.4f} ± {report.ci_halfwidth:.4f} ({report.trials} trials)"
    )
    return 0


def run_compare(cfg):
    dataset = load_dataset(cfg["data"])
    X, y = dataset.split_arrays("train")
    eval_X, eval_y = dataset.split_arrays(cfg["split"])
    rows = []
    failed = False
    for loss in cfg["losses"]:
        try:
            config = TrainConfig(
                batch_size=cfg["batch_size"],
                epochs=cfg["epochs"],
                warmup_epochs=cfg["warmup_epochs"],
                base_lr=cfg["lr"],
                decay_epoch=cfg["decay_epoch"],
                decay_factor=cfg["decay_factor"],
                momentum=cfg["momentum"],
                weight_decay=cfg["weight_decay"],
                loss_kind=loss,
                p=cfg["p"],
                seed=cfg["seed"],
                precision=cfg["precision"],
            )
            params = init_mlp(dataset.dim, cfg["hidden_dims"], cfg["head_dim"], seed=cfg["seed"])
            params, _ = train(X, y, params, config)
            for n_way in cfg["n"]:
                for k_shot in cfg["k"]:
                    report = evaluate(
                        params, eval_X, eval_y,
                        n_way=n_way, k_shot=k_shot, q_per_class=cfg["q"],
                        trials=cfg["trials"], p=cfg["eval_p"], seed=cfg["seed"],
                    )
                    rows.append(
                        {"loss": loss, "n_way": n_way, "k_shot": k_shot,
                         "mean": report.mean_accuracy, "ci": report.ci_halfwidth, "status": "ok"}
                    )
        except Exception as exc:  # flush a partial table with failure markers
            failed = True
            print(f"loss {loss} failed: {exc}", file=sys.stderr)
            for n_way in cfg["n"]:
                for k_shot in cfg["k"]:
                    rows.append(
                        {"loss": loss, "n_way": n_way, "k_shot": k_shot,
                         "mean": None, "ci": None, "status": "failed"}
                    )
    prefix = cfg["output"]
    csv_path = prefix + ".csv"
    json_path = prefix + ".json"
    png_path = prefix + ".png"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["loss", "n_way", "k_shot", "mean", "ci"])
        for r in rows:
            writer.writerow(
                [r["loss"], r["n_way"], r["k_shot"],
                 "FAILED" if r["mean"] is None else repr(r["mean"]),
                 "FAILED" if r["ci"] is None else repr(r["ci"])]
            )
    with open(json_path, "w") as fh:
        json.dump({"rows": rows, "trials": cfg["trials"], "seed": cfg["seed"]}, fh, indent=2)
        fh.write("\n")
    artifacts = {"table_csv": csv_path, "table_json": json_path}
    if any(r["mean"] is not None for r in rows):
        save_compare_figure(rows, png_path)
        artifacts["table_figure"] = png_path
    _write_manifest("compare", cfg, cfg["seed"], artifacts, prefix + ".manifest.json")
    for r in rows:
        mean = "FAILED" if r["mean"] is None else f"{r['mean']:.4f} ± {r['ci']:.4f}"
        print(f"{r['loss']:>4}  {r['n_way']}-way {r['k_shot']}-shot  {mean}")
    return 1 if failed else 0


def run_verify(cfg):
    all_passed, results = run_suite(
        trials=cfg["trials"], seed=cfg["seed"], inject_fault=cfg.get("inject_fault")
    )
    doc = {
        "all_passed": all_passed,
        "trials": cfg["trials"],
        "seed": cfg["seed"],
        "checks": [r.to_dict() for r in results],
    }
    if cfg.get("output"):
        with open(cfg["output"], "w") as fh:
            json.dump(doc, fh, indent=2)
            fh.write("\n")
        _write_manifest(
            "verify", cfg, cfg["seed"], {"report": cfg["output"]},
            str(cfg["output"]) + ".manifest.json",
        )
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status}  {r.name}  (trials={r.trials}, max_error={r.max_error:.3g})")
        if not r.passed:
            print(f"      {r.detail}", file=sys.stderr)
            if r.failing_instance is not None:
                print(f"      instance: {json.dumps(r.failing_instance)}", file=sys.stderr)
    return 0 if all_passed else 1


_RUNNERS = {
    "gen-data": run_gen_data,
    "train": run_train,
    "eval": run_eval,
    "compare": run_compare,
    "verify": run_verify,
}

# artifact-path keys per subcommand, remappable by `rerun --out-dir`
_PATH_KEYS = {
    "gen-data": ("output",),
    "train": ("output", "history"),
    "eval": ("output", "csv"),
    "compare": ("output",),
    "verify": ("output",),
}


def run_rerun(manifest_path, out_dir=None):
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    sub = manifest["subcommand"]
    if sub not in _RUNNERS:
        raise ValueError(f"manifest names unknown subcommand {sub!r}")
    cfg = dict(manifest["config"])
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        for key in _PATH_KEYS[sub]:
            if cfg.get(key):
                cfg[key] = str(Path(out_dir) / Path(cfg[key]).name)
    return _RUNNERS[sub](cfg)


# --- argument parsing ----------------------------------------------------------


def _int_list(text):
    return [int(v) for v in text.split(",") if v]


def _add_train_flags(p, for_compare=False):
    p.add_argument("--data", required=True, help="dataset file (GMDS or CSV)")
    p.add_argument("--p", type=float, default=1.0, help="Lp distance exponent (default 1)")
    p.add_argument("--epochs", type=int, default=40)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--lr", type=float, default=0.003)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--weight-decay", type=float, default=5e-4)
    p.add_argument("--warmup-epochs", type=int, default=10)
    p.add_argument("--decay-epoch", type=int, default=28)
    p.add_argument("--decay-factor", type=float, default=10.0)
    p.add_argument("--hidden-dims", type=_int_list, default=[64, 64])
    p.add_argument("--head-dim", type=int, default=32)
    p.add_argument("--precision", choices=["64-bit", "32-bit"], default="64-bit")


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="gmml",
        description="Geometric-mean few-shot metric learning laboratory",
    )
    parser.add_argument("--version", action="version", version=f"gmml {__version__}")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset file")
    g.add_argument("--preset", choices=sorted(PRESETS), help="named synthetic benchmark")
    g.add_argument("--classes", type=int)
    g.add_argument("--modes-per-class", type=int)
    g.add_argument("--dim", type=int)
    g.add_argument("--mode-separation", type=float)
    g.add_argument("--class-separation", type=float)
    g.add_argument("--noise-sigma", type=float)
    g.add_argument("--samples-per-class", type=int)
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("-o", "--output", required=True)

    t = sub.add_parser("train", help="train the MLP encoder under a loss")
    t.add_argument("--loss", required=True, choices=LOSS_KINDS)
    _add_train_flags(t)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--history", help="history CSV path (default <ckpt>.history.csv)")
    t.add_argument("-o", "--output", required=True, help="checkpoint path")

    e = sub.add_parser("eval", help="episodic N-way K-shot evaluation")
    e.add_argument("--checkpoint", "--ckpt", dest="checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", choices=["train", "val", "test"], default="test")
    e.add_argument("--n", type=int, default=5)
    e.add_argument("--k", type=int, default=1)
    e.add_argument("--q", type=int, default=15)
    e.add_argument("--trials", type=int, default=2000)
    e.add_argument("--p", type=float, default=1.0)
    e.add_argument("--seed", type=int, default=None)
    e.add_argument("--csv", help="also write a one-line CSV row")
    e.add_argument("-o", "--output", required=True, help="report JSON path")

    c = sub.add_parser("compare", help="train + evaluate several losses into one table")
    c.add_argument("--losses", default="pn,nca,gm",
                   help="comma-separated subset of {pn,nca,gm,bce,asl}")
    _add_train_flags(c, for_compare=True)
    c.add_argument("--split", choices=["train", "val", "test"], default="test")
    c.add_argument("--n", type=_int_list, default=[5], help="comma-separated N values")
    c.add_argument("--k", type=_int_list, default=[1, 5], help="comma-separated K values")
    c.add_argument("--q", type=int, default=15)
    c.add_argument("--trials", type=int, default=2000)
    c.add_argument("--eval-p", type=float, default=None,
                   help="distance exponent at evaluation (default: training --p)")
    c.add_argument("--seed", type=int, default=None)
    c.add_argument("-o", "--output", required=True, help="output path prefix")

    v = sub.add_parser("verify", help="run the identity/bound verification suite")
    v.add_argument("--trials", type=int, default=200)
    v.add_argument("--seed", type=int, default=None)
    v.add_argument("-o", "--output", help="write per-check JSON detail here")
    v.add_argument("--inject-fault", choices=["gradient-fd-mismatch"], help=argparse.SUPPRESS)

    r = sub.add_parser("rerun", help="replay a run manifest")
    r.add_argument("manifest")
    r.add_argument("--out-dir", help="redirect output artifacts into this directory")

    parser.add_argument("--threads", type=int, default=1,
                        help="worker cap; 1 guarantees bitwise reference behavior")
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        if args.subcommand == "rerun":
            return run_rerun(args.manifest, args.out_dir)
        cfg = {k: v for k, v in vars(args).items() if k not in ("subcommand", "threads")}
        cfg["seed"] = _resolve_seed(cfg.get("seed"))
        if args.subcommand == "compare":
            cfg["losses"] = [l for l in cfg["losses"].split(",") if l]
            unknown = [l for l in cfg["losses"] if l not in LOSS_KINDS]
            if unknown:
                parser.error(
                    f"unknown loss {unknown[0]!r}; choose from {{{', '.join(LOSS_KINDS)}}}"
                )
            if cfg.get("eval_p") is None:
                cfg["eval_p"] = cfg["p"]
        return _RUNNERS[args.subcommand](cfg)
    except BrokenPipeError:
        return 1
    except Exception as exc:
        print(f"gmml: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
