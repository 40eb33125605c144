"""Command-line entry point: ``loadvit <command> [options]``.

Exit status: 0 on success, 1 for usage and validation errors, 2 for runtime
failures. Every command writes its outputs, ``run.log`` and the resolved
``config.ini`` under ``--out``.
"""

from __future__ import annotations

import argparse
import logging
import platform
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from . import config as cfgmod
from .codec import DatasetManifest, file_digest, read_records_csv, window_dataset
from .errors import ConfigError, LoadVitError, ValidationError
from .model import ModelConfig, init_model, load_checkpoint, save_checkpoint
from .synthgen import derive_seed

log = logging.getLogger("loadvit")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # exit status 1 instead of argparse's 2
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="loadvit", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"loadvit {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for command, opts in cfgmod.SCHEMAS.items():
        p = sub.add_parser(command, help=f"{command} subcommand")
        p.add_argument("--config", type=Path, help="config file with a [%s] section" % command)
        p.add_argument("--out", type=Path, required=command != "grad-check", help="run directory")
        p.add_argument("--seed", type=str, help="master seed")
        for name, opt in opts.items():
            extra = {"choices": list(opt.choices)} if opt.choices else {}
            p.add_argument("--" + name.replace("_", "-"), dest=name, type=str,
                           help=f"{opt.help} (default {opt.default!r})", **extra)
    return parser


# ---------------------------------------------------------------------------
# run bookkeeping


class RunContext:
    def __init__(self, command: str, values: dict, out: Path | None, argv: Sequence[str]):
        self.command = command
        self.values = values
        self.out = out
        self.handler = None
        self.inputs: dict[str, str] = {}
        if out is None:
            return
        try:
            out.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise OSError(f"cannot create run directory {out}: {exc.strerror}") from exc
        self.handler = logging.FileHandler(out / "run.log", mode="w", encoding="utf-8")
        self.handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
        log.addHandler(self.handler)
        log.setLevel(logging.INFO)
        log.info("command %s argv %s", command, " ".join(argv))
        log.info("versions loadvit %s python %s numpy %s", __version__, platform.python_version(),
                 np.__version__)
        log.info("seed %d", values["seed"])
        (out / "config.ini").write_text(cfgmod.render(command, values))

    def record_input(self, label: str, path: Path) -> None:
        digest = file_digest(path)
        self.inputs[label] = digest
        log.info("input %s %s sha256 %s", label, path, digest)

    def close(self) -> None:
        if self.handler is not None:
            log.removeHandler(self.handler)
            self.handler.close()


def _load_dataset(ctx: RunContext):
    data = ctx.values["data"]
    if not data:
        raise ConfigError(f"{ctx.command}: --data is required")
    path = Path(data)
    csv_path = path / "data.csv" if path.is_dir() else path
    manifest_path = csv_path.parent / "manifest.txt"
    for p in (csv_path, manifest_path):
        if not p.is_file():
            raise ConfigError(f"dataset file not found: {p}")
    ctx.record_input("data", csv_path)
    ctx.record_input("manifest", manifest_path)
    records = read_records_csv(csv_path)
    manifest = DatasetManifest.read(manifest_path)
    known = {r.household_id for r in records}
    missing = (set(manifest.train_households) | set(manifest.test_households)) - known
    if missing:
        raise ConfigError(f"{manifest_path}: households not in {csv_path}: {sorted(missing)[:3]}")
    return records, manifest


def _split(records, manifest, part):
    keep = set(manifest.train_households if part == "train" else manifest.test_households)
    return [r for r in records if r.household_id in keep]


def _load_ckpt(ctx: RunContext, required: bool = True):
    ck = ctx.values.get("checkpoint", "")
    if not ck:
        if required:
            raise ConfigError(f"{ctx.command}: --checkpoint is required")
        return None
    path = Path(ck)
    if not path.is_file():
        raise ConfigError(f"checkpoint not found: {path}")
    ctx.record_input("checkpoint", path)
    return load_checkpoint(path)


def _emit(items: dict[str, object]) -> None:
    for k, v in items.items():
        print(f"{k} = {v}")


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(ctx: RunContext) -> int:
    from .synthgen import gen_dataset

    v = ctx.values
    ds = gen_dataset(ctx.out, v["households"], v["days"], v["pv_fraction"], v["ev_fraction"], v["seed"])
    _emit({"households": len(ds.records), "rows": sum(len(r.net_load) for r in ds.records),
           "data": ctx.out / "data.csv", "manifest": ctx.out / "manifest.txt",
           "data_sha256": file_digest(ctx.out / "data.csv")})
    return 0


def _plot_losses(log_rows, path: Path) -> None:
    from .analysis import _pyplot

    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot([r.step for r in log_rows], [r.loss for r in log_rows], lw=0.8, label="train")
    val = [(r.step, r.val_loss) for r in log_rows if r.val_loss == r.val_loss]
    if val:
        ax.plot(*zip(*val), "o-", ms=3, label="validation")
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("reconstruction loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=80)
    plt.close(fig)


def cmd_pretrain(ctx: RunContext) -> int:
    from .pretrain import PretrainConfig, pretrain

    v = ctx.values
    records, manifest = _load_dataset(ctx)
    images = window_dataset(_split(records, manifest, "train"), manifest.bounds, 24, v["stride_days"])
    if not images:
        raise ConfigError("no complete 24-day windows in the training households")
    pcfg = PretrainConfig(
        batch_size=v["batch_size"], epochs=v["epochs"], steps=v["steps"], dropout=v["dropout"],
        learning_rate=v["learning_rate"], mask_mode=v["mask_mode"], grid_parity=v["grid_parity"],
        mask_ratio=v["mask_ratio"], loss_scope=v["loss_scope"], seed=v["seed"],
        checkpoint_every=v["checkpoint_every"], val_fraction=v["val_fraction"], val_every=v["val_every"],
    )
    log.info("pre-training on %d images", len(images))
    meta = {**dict(manifest.bounds.to_items()), "data.sha256": ctx.inputs["data"]}
    result = pretrain(images, pcfg, ModelConfig(), ctx.out, meta)
    _plot_losses(result.log.rows, ctx.out / "train_loss.png")
    last = result.log.rows[-1]
    _emit({"images": len(images), "steps": last.step, "initial_loss": repr(result.log.rows[0].loss),
           "final_loss": repr(last.loss), "val_loss": repr(last.val_loss), "val_nmae": repr(last.val_nmae),
           "checkpoint": ctx.out / "pretrained.v4lp"})
    return 0


def _write_report_figures(report, out: Path) -> None:
    from .analysis import Histogram, _pyplot, plot_histogram

    if report.task == "disaggregation" and report.histogram:
        vals = [r.nmae for r in report.customers if r.nmae == r.nmae]
        width = report.histogram[1][0] - report.histogram[0][0] if len(report.histogram) > 1 else 5.0
        hist = Histogram(report.histogram, width, report.nmae, report.nmae_std, float(np.median(vals)), len(vals))
        plot_histogram(hist, out / "metrics_hist.png")
    elif report.task == "identification":
        plt = _pyplot()
        fig, ax = plt.subplots(figsize=(4, 3))
        keys = sorted(report.accuracy)
        ax.bar(keys, [report.accuracy[k] for k in keys])
        ax.set_ylim(0, 1)
        ax.set_ylabel("held-out accuracy")
        fig.tight_layout()
        fig.savefig(out / "metrics_accuracy.png", dpi=80)
        plt.close(fig)


def cmd_finetune(ctx: RunContext) -> int:
    from .downstream import FineTuneConfig, build_task_dataset, finetune

    v = ctx.values
    records, manifest = _load_dataset(ctx)
    loaded = _load_ckpt(ctx, required=v["init"] == "pretrained")
    state = loaded[0] if loaded else None
    train = build_task_dataset(_split(records, manifest, "train"), manifest.bounds, v["train_stride_days"])
    test = build_task_dataset(_split(records, manifest, "test"), manifest.bounds, v["eval_stride_days"])
    fcfg = FineTuneConfig(
        task=v["task"], init=v["init"], encoder_mode=v["encoder_mode"], encoder_lr_ratio=v["encoder_lr_ratio"],
        learning_rate=v["learning_rate"], labeled_example_count=v["labels"], epochs=v["epochs"],
        batch_size=v["batch_size"], dropout=v["dropout"], seed=v["seed"],
        train_stride_days=v["train_stride_days"], eval_stride_days=v["eval_stride_days"],
    )
    result = finetune(train, test, fcfg, state)
    meta = {**dict(manifest.bounds.to_items()), **fcfg.to_items(), "task": v["task"],
            "data.sha256": ctx.inputs["data"]}
    save_checkpoint(ctx.out / "finetuned.v4lp", result.state, meta, result.optimizers)
    result.report.write(ctx.out)
    _write_report_figures(result.report, ctx.out)
    _emit({**result.report.summary_items(), "checkpoint": ctx.out / "finetuned.v4lp"})
    return 0


def cmd_evaluate(ctx: RunContext) -> int:
    from .downstream import build_task_dataset, evaluate

    v = ctx.values
    records, manifest = _load_dataset(ctx)
    state, meta, _ = _load_ckpt(ctx)
    if "head.hvac.weight" in state:
        task = "disaggregation"
    elif "head.pv.weight" in state:
        task = "identification"
    else:
        raise ConfigError(f"{v['checkpoint']}: no task head; run finetune first")
    test = build_task_dataset(_split(records, manifest, "test"), manifest.bounds, v["stride_days"])
    report = evaluate(state, test, task)
    report.write(ctx.out)
    if v["figures"]:
        _write_report_figures(report, ctx.out)
    _emit(report.summary_items())
    return 0


def cmd_analyze(ctx: RunContext) -> int:
    from .analysis import analyze

    v = ctx.values
    records, manifest = _load_dataset(ctx)
    state, _, _ = _load_ckpt(ctx)
    test = _split(records, manifest, "test")
    images = window_dataset(test, manifest.bounds, 24, v["stride_days"])
    if not images:
        raise ConfigError("no complete 24-day windows in the test households")
    pixels = np.stack([im.pixels for im in images])
    report = analyze(state, pixels, [im.household_id for im in images], ctx.out,
                     sample_seed=derive_seed(v["seed"], "attention"), sample_size=v["sample_size"],
                     bin_width=v["bin_width"], figures=v["figures"])
    _emit(report.diagnostics)
    return 0


def cmd_grad_check(ctx: RunContext) -> int:
    from .patcher import grid_mask
    from .pretrain import mae_gradient_check
    from .synthgen import generate

    v = ctx.values
    ds = generate(2, 24, seed=v["seed"], train_fraction=1.0)
    pixels = np.stack([im.pixels for im in window_dataset(ds.records, ds.manifest.bounds, 24, 24)])
    state = init_model(ModelConfig(), derive_seed(v["seed"], "init"))
    errors = mae_gradient_check(state, pixels, grid_mask(6, 6, 0), v["loss_scope"], v["eps"],
                                v["coords"] or None, derive_seed(v["seed"], "coords"))
    worst = max(errors.values())
    if ctx.out is not None:
        (ctx.out / "grad_check.csv").write_text(
            "parameter,max_relative_error\n" + "".join(f"{k},{e!r}\n" for k, e in errors.items()))
    ok = worst < v["threshold"]
    _emit({"parameters": len(errors), "max_relative_error": repr(worst), "threshold": v["threshold"],
           "status": "pass" if ok else "fail"})
    log.info("grad-check max relative error %.3e (%s)", worst, "pass" if ok else "fail")
    return 0 if ok else 2


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "evaluate": cmd_evaluate,
    "analyze": cmd_analyze,
    "grad-check": cmd_grad_check,
}


def run(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    ctx = None
    try:
        ns = build_parser().parse_args(argv)
        command = ns.command
        file_values = cfgmod.read_config_file(ns.config, command) if ns.config else {}
        overrides = {k: getattr(ns, k) for k in cfgmod.schema(command)}
        values = cfgmod.resolve(command, file_values, overrides)
        ctx = RunContext(command, values, ns.out, argv)
        return COMMANDS[command](ctx)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except ValidationError as exc:
        log.error("validation error: %s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (LoadVitError, OSError, ArithmeticError) as exc:
        log.error("runtime failure: %s", exc)
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - unexpected failures still map to status 2
        log.exception("unexpected failure")
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    finally:
        if ctx is not None:
            ctx.close()


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
