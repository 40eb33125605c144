"""Run configuration: flat ``key = value`` files with one section per
subcommand, merged with command-line overrides.

Precedence is defaults < config file < command line. Unknown sections and
keys are rejected so a typo never silently falls back to a default.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

from .errors import ConfigError


def _bool(text: str) -> bool:
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


@dataclass(frozen=True)
class Option:
    name: str
    kind: Callable[[str], Any]
    default: Any
    help: str = ""
    choices: tuple | None = None


def _opts(*items) -> dict[str, Option]:
    return {o.name: o for o in (Option(*it) for it in items)}


COMMON = _opts(("seed", int, 0, "master seed; every random stream derives from it"))

SCHEMAS: dict[str, dict[str, Option]] = {
    "gen-data": _opts(
        ("households", int, 150, "number of households"),
        ("days", int, 365, "days per household"),
        ("pv_fraction", float, 0.5, "fraction of households with PV"),
        ("ev_fraction", float, 0.5, "fraction of households with an EV"),
    ),
    "pretrain": _opts(
        ("data", str, "", "dataset directory (data.csv + manifest.txt)"),
        ("epochs", int, 50, "training epochs"),
        ("steps", int, 0, "stop after this many steps (0 = no cap)"),
        ("batch_size", int, 64, "images per batch"),
        ("learning_rate", float, 1e-3, "Adam learning rate"),
        ("dropout", float, 0.1, "dropout probability"),
        ("mask_mode", str, "grid", "grid or random", ("grid", "random")),
        ("grid_parity", str, "alternate", "alternate, 0 or 1", ("alternate", "0", "1")),
        ("mask_ratio", float, 0.5, "masked fraction for random masks"),
        ("loss_scope", str, "masked_only", "masked_only or all_pixels", ("masked_only", "all_pixels")),
        ("checkpoint_every", int, 10, "epochs between checkpoints (0 = final only)"),
        ("val_fraction", float, 0.05, "held-out validation fraction"),
        ("val_every", int, 1, "epochs between validation passes (0 = end only)"),
        ("stride_days", int, 6, "window stride in days"),
    ),
    "finetune": _opts(
        ("data", str, "", "dataset directory"),
        ("checkpoint", str, "", "pretrained checkpoint (required for init=pretrained)"),
        ("task", str, "identification", "identification or disaggregation", ("identification", "disaggregation")),
        ("init", str, "pretrained", "pretrained or random", ("pretrained", "random")),
        ("encoder_mode", str, "trainable", "trainable or frozen", ("trainable", "frozen")),
        ("encoder_lr_ratio", float, 0.1, "encoder learning rate relative to the head"),
        ("learning_rate", float, 1e-2, "head learning rate"),
        ("labels", int, 0, "labeled training windows to use (0 = all)"),
        ("epochs", int, 10, "fine-tuning epochs"),
        ("batch_size", int, 32, "windows per batch"),
        ("dropout", float, 0.1, "dropout probability"),
        ("train_stride_days", int, 6, "training window stride"),
        ("eval_stride_days", int, 24, "evaluation window stride"),
    ),
    "evaluate": _opts(
        ("data", str, "", "dataset directory"),
        ("checkpoint", str, "", "fine-tuned checkpoint"),
        ("stride_days", int, 24, "evaluation window stride"),
        ("figures", _bool, True, "render PNG figures"),
    ),
    "analyze": _opts(
        ("data", str, "", "dataset directory"),
        ("checkpoint", str, "", "pretrained or fine-tuned checkpoint"),
        ("sample_size", int, 64, "images averaged into the attention maps"),
        ("bin_width", float, 0.25, "reconstruction nMAE histogram bin width (percent)"),
        ("stride_days", int, 24, "window stride for the test-split images"),
        ("figures", _bool, True, "render PNG figures"),
    ),
    "grad-check": _opts(
        ("eps", float, 1e-5, "central-difference step"),
        ("coords", int, 16, "coordinates probed per parameter tensor (0 = all)"),
        ("threshold", float, 1e-4, "pass threshold on the max relative error"),
        ("loss_scope", str, "masked_only", "masked_only or all_pixels", ("masked_only", "all_pixels")),
    ),
}


def schema(command: str) -> dict[str, Option]:
    if command not in SCHEMAS:
        raise ConfigError(f"unknown command {command!r}")
    return {**COMMON, **SCHEMAS[command]}


def _convert(opt: Option, raw: Any, origin: str) -> Any:
    try:
        value = opt.kind(raw) if isinstance(raw, str) else raw
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{origin}: bad value {raw!r} for {opt.name}: {exc}") from exc
    if opt.choices is not None and value not in opt.choices:
        raise ConfigError(f"{origin}: {opt.name} must be one of {opt.choices}, got {value!r}")
    return value


def read_config_file(path: Path, command: str) -> dict[str, str]:
    """Keys of ``[command]`` in ``path``; other known sections are ignored."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    parser.optionxform = str
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    for section in parser.sections():
        if section not in SCHEMAS:
            raise ConfigError(f"{path}: unknown section [{section}]")
        unknown = sorted(set(parser[section]) - set(schema(section)))
        if unknown:
            raise ConfigError(f"{path}: unknown key(s) in [{section}]: {', '.join(unknown)}")
    return dict(parser[command]) if parser.has_section(command) else {}


def resolve(command: str, file_values: dict[str, str], overrides: dict[str, Any]) -> dict[str, Any]:
    opts = schema(command)
    resolved = {k: o.default for k, o in opts.items()}
    for k, v in file_values.items():
        if k not in opts:
            raise ConfigError(f"unknown key {k!r} for {command}")
        resolved[k] = _convert(opts[k], v, "config")
    for k, v in overrides.items():
        if v is None:
            continue
        if k not in opts:
            raise ConfigError(f"unknown option {k!r} for {command}")
        resolved[k] = _convert(opts[k], v, "command line")
    return resolved


def render(command: str, values: dict[str, Any]) -> str:
    """Resolved config as a file that ``read_config_file`` accepts."""
    lines = [f"[{command}]"]
    for k in sorted(values):
        v = values[k]
        lines.append(f"{k} = {repr(v) if isinstance(v, float) else v}")
    return "\n".join(lines) + "\n"
