"""Command-line entry point: ``robustlens <train|fisher|invert|transfer|report>``.

Exit codes: 0 success, 1 configuration or usage error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import csv
import sys
from dataclasses import replace
from pathlib import Path

from . import infogeom as ig
from . import inversion as inv
from . import transfer as tf
from .adversarial import AttackSpec, TrainConfig, TrainingDiverged, train
from .autodiff import GraphError, ShapeError
from .config import ExperimentConfig, check_dataset, load_config
from .data import DataError, child_seed, load_named
from .models import CheckpointError, ConfigError, Model, ModelConfig, init_model, load_checkpoint, save_checkpoint
from .report import build_report


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _out_dir(cfg: ExperimentConfig) -> Path:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _datasets(cfg: ExperimentConfig, spec: str | None = None):
    spec = spec or cfg["data.source"]
    tr = load_named(spec, "train", cfg["data.train_size"], cfg["seed"], cfg["data.root"])
    te = load_named(spec, "test", cfg["data.test_size"], cfg["seed"], cfg["data.root"])
    return tr, te


def _attack(cfg: ExperimentConfig, eps: float | None = None) -> AttackSpec:
    return AttackSpec(cfg["attack.eps"] if eps is None else eps, cfg["attack.steps"], cfg["attack.step_size"])


def _load(path) -> Model:
    if not Path(path).is_file():
        raise ConfigError(f"checkpoint {path} does not exist")
    return load_checkpoint(path)


# --------------------------------------------------------------------------
# commands


def cmd_train(cfg: ExperimentConfig) -> list:
    tr, te = _datasets(cfg)
    mcfg = ModelConfig(cfg["model.arch"], tr.shape, cfg["model.widths"], tr.num_classes,
                       cfg["model.norm"], cfg["model.activation"], child_seed(cfg["seed"], "model-init"))
    tcfg = TrainConfig(cfg["train.epochs"], cfg["train.batch_size"], cfg["train.lr"], momentum=cfg["train.momentum"],
                       weight_decay=cfg["train.weight_decay"], seed=child_seed(cfg["seed"], "train"),
                       beta=cfg["train.beta"], mode=cfg["train.mode"], eval_size=cfg["train.eval_size"])
    out = _out_dir(cfg)
    tcfg = replace(tcfg, dump_path=str(out / "diverged.rlns"))
    model, metrics = train(init_model(mcfg), tr, _attack(cfg), tcfg, eval_ds=te)
    save_checkpoint(model, out / "model.rlns")
    metrics.write_csv(out / "train_metrics.csv")
    (out / "train.cfg").write_text(cfg.dump(), encoding="utf-8")
    return [out / "model.rlns", out / "train_metrics.csv"]


FISHER_HEADER = ["model_id", "eps_train", "decoder", "tr_F_zx", "lambda1", "eff_info_term", "weight_logvar"]


def cmd_fisher(cfg: ExperimentConfig, checkpoints, dataset=None) -> list:
    models = [(str(p), _load(p)) for p in checkpoints]
    _, te = _datasets(cfg, dataset)
    decoder = ig.DecoderModel("categorical" if cfg["fisher.decoder"] == "categorical" else "gaussian-unit",
                              cfg["fisher.sigma"])
    rows = []
    for name, m in models:
        s = ig.fisher_summary(m, te, decoder, cfg["fisher.samples"], cfg["fisher.weight_samples"],
                              cfg["fisher.ridge"], cfg["fisher.floor"], child_seed(cfg["seed"], "fisher"))
        rows.append([name, repr(m.eps_train), decoder.kind] + [repr(float(s[k])) for k in FISHER_HEADER[3:]])
    out = _out_dir(cfg)
    with open(out / "fisher_report.csv", "w", newline="") as fh:
        fh.write("# schema: robustlens.fisher_report v1\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(FISHER_HEADER)
        w.writerows(rows)
    return [out / "fisher_report.csv"]


def cmd_invert(cfg: ExperimentConfig, checkpoint) -> list:
    mode = cfg["invert.mode"]
    if mode != "deterministic" and cfg["invert.beta"] is None:
        raise ConfigError("invert.beta: noise model required for mode " + repr(mode) + " (pass --beta)")
    model = _load(checkpoint)
    _, te = _datasets(cfg)
    images = te.images[:cfg["invert.images"]]
    seed = child_seed(cfg["seed"], "invert")
    base = dict(iters=cfg["invert.iters"], lr=cfg["invert.lr"], init_sigma=cfg["invert.init_sigma"], seed=seed)
    noise = None
    if cfg["invert.beta"] is not None:
        wf = ig.weight_fisher_diag(model, te, cfg["fisher.weight_samples"], seed)
        noise = ig.effective_noise(wf, cfg["invert.beta"], cfg["invert.lam"])
    modes = list(inv.MODES) if mode == "all" else ["deterministic"] + ([mode] if mode != "deterministic" else [])
    cfgs = [inv.InversionConfig(mode=m, noise=None if m == "deterministic" else noise, **base) for m in modes]
    comp = inv.compare_modes(model, images, cfgs)
    out = _out_dir(cfg)
    written = [out / "inversion_curves.csv"]
    comp.write_csv(written[0])
    for i, img in enumerate(images):
        p = out / f"source_{i:02d}.pgm" if img.shape[0] == 1 else out / f"source_{i:02d}.ppm"
        inv.write_image(img, p)
        written.append(p)
    for m, res in comp.results.items():
        for i, img in enumerate(res.x_hat):
            ext = "pgm" if img.shape[0] == 1 else "ppm"
            p = out / f"recon_{m}_{i:02d}.{ext}"
            inv.write_image(img, p)
            written.append(p)
    return written


def cmd_transfer(cfg: ExperimentConfig, sources, correlate: bool, reference=None) -> list:
    targets = list(cfg["transfer.targets"])
    if not targets:
        raise ConfigError("transfer.targets: no target datasets given")
    if correlate and len(targets) < 3:
        raise ConfigError(f"transfer.targets: --correlate needs at least 3 targets, got {len(targets)}")
    models = [(str(p), _load(p)) for p in sources]
    if reference is not None:
        ref = _load(reference)
    else:
        std = [m for _, m in models if m.eps_train == 0]
        ref = std[0] if std else models[0][1]
    for name, m in models:
        if m.config.norm is False and 1 in cfg["transfer.modes"]:
            raise ConfigError(f"transfer.modes: mode 1 needs normalization layers, {name} has none")
    probe_eps = cfg["transfer.probe_eps"]
    if probe_eps is None:
        probe_eps = max(m.eps_train for _, m in models)
    attack = _attack(cfg, probe_eps) if probe_eps > 0 else None

    reports, emds = [], []
    src_test = load_named(cfg["data.source"], "test", cfg["transfer.test_size"], cfg["seed"], cfg["data.root"])
    for t in targets:
        t_test = load_named(t, "test", cfg["transfer.test_size"], cfg["seed"], cfg["data.root"])
        emds.append(tf.dataset_emd(src_test, t_test, ref, ref_id="reference"))
    for seed in cfg["transfer.seeds"]:
        for t in targets:
            t_tr = load_named(t, "train", cfg["transfer.train_size"], child_seed(seed, "transfer-data"), cfg["data.root"])
            t_te = load_named(t, "test", cfg["transfer.test_size"], child_seed(seed, "transfer-data"), cfg["data.root"])
            for _, m in models:
                for mode in cfg["transfer.modes"]:
                    if mode == 0 and not m.config.norm:
                        _, r = tf.probe(m, t_tr, t_te, tf.ProbeConfig(seed=seed), attack)
                    else:
                        tcfg = TrainConfig(cfg["transfer.epochs"], cfg["train.batch_size"], cfg["transfer.lr"],
                                           seed=child_seed(seed, "finetune"), eval_size=0)
                        _, r = tf.finetune(m, t_tr, mode, tcfg, attack, t_te)
                    r.seed = seed
                    reports.append(r)
    out = _out_dir(cfg)
    tf.write_reports(reports, out / "transfer_report.csv")
    tf.write_emds(emds, out / "emd.csv")
    written = [out / "transfer_report.csv", out / "emd.csv"]
    if correlate:
        table = tf.gap_vs_distance(reports, {e.b: e.distance for e in emds})
        table.write_csv(out / "gap_vs_distance.csv")
        written.append(out / "gap_vs_distance.csv")
    return written


def cmd_report(run_dir) -> list:
    summary, plots = build_report(run_dir)
    run = Path(run_dir)
    (run / "summary.txt").write_text(summary, encoding="utf-8")
    for name, svg in plots.items():
        (run / name).write_text(svg, encoding="utf-8")
    return [run / "summary.txt"] + [run / n for n in plots]


# --------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="robustlens", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def common(sp):
        sp.add_argument("--config", help="flat 'dotted.key = value' config file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key (repeatable)")

    t = sub.add_parser("train", help="train a model (standard, PGD-AT or KL-regularized)")
    common(t)
    t.add_argument("--mode", choices=["standard", "at", "trades"])
    t.add_argument("--eps", type=float)
    t.add_argument("--epochs", type=int)

    f = sub.add_parser("fisher", help="Fisher diagnostics for one or more checkpoints")
    common(f)
    f.add_argument("--checkpoint", action="append", required=True)
    f.add_argument("--dataset")
    f.add_argument("--decoder", choices=["gaussian", "gaussian-unit", "categorical"])
    f.add_argument("--samples", type=int)

    i = sub.add_parser("invert", help="invert representations of test images")
    common(i)
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--mode", choices=["deterministic", "noise-once", "noise-each-step", "all"])
    i.add_argument("--iters", type=int)
    i.add_argument("--lr", type=float)
    i.add_argument("--beta", type=float)
    i.add_argument("--lam", type=float)
    i.add_argument("--images", type=int)

    x = sub.add_parser("transfer", help="linear-probe / fine-tune transfer grid with EMD distances")
    common(x)
    x.add_argument("--source", action="append", required=True, help="source checkpoint (repeatable)")
    x.add_argument("--targets", help="comma-separated target datasets")
    x.add_argument("--modes", help="comma-separated transfer modes (0, 1, 2)")
    x.add_argument("--seeds", help="comma-separated seeds")
    x.add_argument("--reference", help="checkpoint used as the EMD feature extractor")
    x.add_argument("--correlate", action="store_true", help="also write gap_vs_distance.csv")

    r = sub.add_parser("report", help="summarize a run directory")
    r.add_argument("run_dir")
    return p


FLAG_KEYS = {
    "train": {"mode": "train.mode", "eps": "attack.eps", "epochs": "train.epochs"},
    "fisher": {"decoder": "fisher.decoder", "samples": "fisher.samples"},
    "invert": {"mode": "invert.mode", "iters": "invert.iters", "lr": "invert.lr", "beta": "invert.beta",
               "lam": "invert.lam", "images": "invert.images"},
    "transfer": {"targets": "transfer.targets", "modes": "transfer.modes", "seeds": "transfer.seeds"},
}


def _config_from_args(args) -> ExperimentConfig:
    overrides = {"seed": args.seed, "out": args.out}
    for flag, key in FLAG_KEYS.get(args.command, {}).items():
        overrides[key] = getattr(args, flag, None)
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    cfg = load_config(args.config, {k: v for k, v in overrides.items() if v is not None})
    if args.command == "fisher" and args.dataset:
        check_dataset(cfg, args.dataset, "--dataset")
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "report":
            written = cmd_report(args.run_dir)
        else:
            cfg = _config_from_args(args)
            if args.command == "train":
                written = cmd_train(cfg)
            elif args.command == "fisher":
                written = cmd_fisher(cfg, args.checkpoint, args.dataset)
            elif args.command == "invert":
                written = cmd_invert(cfg, args.checkpoint)
            else:
                written = cmd_transfer(cfg, args.source, args.correlate, args.reference)
    except (ConfigError, UsageError) as exc:
        print(f"robustlens: config error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        if args.command == "report":
            print(f"robustlens: {exc}", file=sys.stderr)
            return 1
        print(f"robustlens: error: {exc}", file=sys.stderr)
        return 2
    except CheckpointError as exc:
        print(f"robustlens: checkpoint error: {exc}", file=sys.stderr)
        return 2
    except TrainingDiverged as exc:
        print(f"robustlens: {exc}", file=sys.stderr)
        return 2
    except (DataError, GraphError, ShapeError, ArithmeticError, ValueError, OSError, RuntimeError) as exc:
        print(f"robustlens: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    for p in written:
        print(p)
    return 0


if __name__ == "__main__":
    sys.exit(main())
