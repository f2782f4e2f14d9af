"""``ibcln <synth|train|infer|eval|sweep>`` command-line entry point.

Settings resolve in order: built-in defaults, ``--config FILE`` (TOML),
``--set key=value`` (dotted keys), then dedicated flags. Unknown keys are
usage errors. Every run writes ``resolved_config.toml`` next to its outputs.

Exit codes: 0 success, 1 usage error, 2 I/O or runtime error.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import tomli_w
import torch

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .evaluation import IdentityModel, benchmark, run_cascade, timestep_sweep
from .imaging import ColorSpace, Image, SignedImage, encode_array, from_tensor, load_image, save_image
from .synthesis import SynthesisConfig, generate_dataset, list_images, write_residual
from .training import TrainConfig, load_model, resolve_ablation, train

log = logging.getLogger("ibcln")

EXIT_OK, EXIT_USAGE, EXIT_IO = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# settings

def _defaults(command: str) -> dict:
    if command == "synth":
        d = dataclasses.asdict(SynthesisConfig())
        d["alpha_range"] = list(d["alpha_range"])
        d["blur_sigma_range"] = list(d["blur_sigma_range"])
        d.update(transmission_dir="", reflection_dir="", out="synth_out", n=10, size=0)
        return d
    if command == "train":
        d = TrainConfig(pretrained_features=True).to_dict()
        d.update(patch_size=0, mix=-1.0, data=[], out="train_out")
        return d
    if command == "infer":
        return {"checkpoint": "", "input": "", "output": "infer_out", "n_steps": 0, "dump_trace": False}
    if command == "eval":
        return {"checkpoint": "", "identity": False, "data": [], "out": "eval_out", "n_steps": 0,
                "contact_sheets": True}
    if command == "sweep":
        return {"checkpoint": "", "identity": False, "data": [], "out": "sweep_out", "n_list": [1, 2, 3],
                "checkpoints_per_n": {}}
    raise UsageError(f"unknown command {command}")


def _set_dotted(settings: dict, key: str, value, allow_new=False):
    parts = key.split(".")
    node = settings
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise UsageError(f"unknown config key: {key}")
        node = node[p]
    if parts[-1] not in node and not allow_new:
        raise UsageError(f"unknown config key: {key}")
    node[parts[-1]] = value


def _merge(settings: dict, overrides: dict, prefix=""):
    for k, v in overrides.items():
        full = f"{prefix}{k}"
        if isinstance(v, dict) and isinstance(settings.get(k), dict) and k != "checkpoints_per_n":
            _merge(settings[k], v, full + ".")
        else:
            if k not in settings:
                raise UsageError(f"unknown config key: {full}")
            settings[k] = v


def _parse_value(text: str):
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def resolve_settings(command: str, args) -> dict:
    settings = _defaults(command)
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
        _merge(settings, data.get(command, data) if command in data else data)
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        _set_dotted(settings, key.strip(), _parse_value(value.strip()))
    for key, value in vars(args).items():
        if key.startswith("opt_") and value is not None:
            name = key[4:]
            if isinstance(value, list) and isinstance(settings.get(name), list) and name != "n_list":
                settings[name] = list(value)
            else:
                settings[name] = value
    return settings


def write_snapshot(settings: dict, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "resolved_config.toml"
    path.write_text(tomli_w.dumps(_tomlable(settings)))
    return path


def _tomlable(x):
    if isinstance(x, dict):
        return {str(k): _tomlable(v) for k, v in x.items() if v is not None}
    if isinstance(x, (list, tuple)):
        return [_tomlable(v) for v in x]
    return x


# ---------------------------------------------------------------------------
# commands

def cmd_synth(args) -> int:
    s = resolve_settings("synth", args)
    try:
        cfg = SynthesisConfig(alpha_range=tuple(s["alpha_range"]), blur_sigma_range=tuple(s["blur_sigma_range"]),
                              kernel_truncation=s["kernel_truncation"], adaptive_subtract=s["adaptive_subtract"],
                              seed=s["seed"])
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc))
    if s["n"] < 0:
        raise UsageError("--n must be non-negative")
    if s["n"] > 0:
        for key in ("transmission_dir", "reflection_dir"):
            if not s[key]:
                raise UsageError(f"{key} is required when n > 0")
            if not Path(s[key]).is_dir():
                raise FileNotFoundError(f"source directory not found: {s[key]}")
    manifest = generate_dataset(s["transmission_dir"], s["reflection_dir"], cfg, s["out"], s["n"],
                                size=s["size"] or None)
    write_snapshot(s, s["out"])
    print(f"wrote {s['n']} triples; manifest at {manifest}")
    return EXIT_OK


def _train_config(s: dict) -> TrainConfig:
    fields = {f.name for f in dataclasses.fields(TrainConfig)}
    d = {k: v for k, v in s.items() if k in fields}
    d["patch_size"] = d["patch_size"] or None
    d["mix"] = None if d["mix"] is None or d["mix"] < 0 else d["mix"]
    try:
        return TrainConfig.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc))


def cmd_train(args) -> int:
    s = resolve_settings("train", args)
    config = resolve_ablation(_train_config(s))
    if not s["data"]:
        raise UsageError("at least one --data directory is required")
    resolved = config.to_dict()
    resolved.update(data=[str(d) for d in s["data"]], out=s["out"])
    resolved["patch_size"] = resolved["patch_size"] or 0
    resolved["mix"] = -1.0 if resolved["mix"] is None else resolved["mix"]
    write_snapshot(resolved, s["out"])
    for d in s["data"]:
        if not Path(d).exists():
            raise FileNotFoundError(f"dataset not found: {d}")
    ckpt = train(config, s["data"], s["out"])
    print(f"checkpoint: {ckpt}")
    return EXIT_OK


def _load(checkpoint):
    try:
        return load_model(checkpoint)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise OSError(f"cannot read checkpoint {checkpoint}: {exc}") from exc


def _model_from(s: dict):
    if s.get("identity"):
        return IdentityModel()
    if not s["checkpoint"]:
        raise UsageError("a --checkpoint (or --identity) is required")
    return _load(s["checkpoint"])


def cmd_infer(args) -> int:
    s = resolve_settings("infer", args)
    if not s["checkpoint"] or not s["input"]:
        raise UsageError("--checkpoint and --input are required")
    model = _load(s["checkpoint"])
    n_steps = s["n_steps"] or model.n_steps
    src = Path(s["input"])
    inputs = list_images(src) if src.is_dir() else [src]
    out = Path(s["output"])
    single_file = not src.is_dir() and out.suffix.lower() == ".png"
    out_dir = out.parent if single_file else out
    out_dir.mkdir(parents=True, exist_ok=True)
    for path in inputs:
        img = load_image(path)
        trace = run_cascade(model, img, n_steps)
        target = out if single_file else out_dir / f"{path.stem}.png"
        save_image(target, Image(encode_array(from_tensor(trace.final)), ColorSpace.GAMMA))
        if s["dump_trace"]:
            for t, T_hat in enumerate(trace.transmissions, start=1):
                save_image(out_dir / f"{path.stem}_T{t}.png", Image(encode_array(from_tensor(T_hat)), ColorSpace.GAMMA))
            for t, R_hat in enumerate(trace.residuals, start=1):
                r = from_tensor(R_hat)
                save_image(out_dir / f"{path.stem}_R{t}.png", Image(encode_array(r), ColorSpace.GAMMA))
                write_residual(out_dir / f"{path.stem}_R{t}.f32", SignedImage(r))
    write_snapshot({**s, "n_steps": n_steps}, out_dir)
    print(f"processed {len(inputs)} image(s) into {out_dir}")
    return EXIT_OK


def cmd_eval(args) -> int:
    s = resolve_settings("eval", args)
    if not s["data"]:
        raise UsageError("at least one --data directory is required")
    model = _model_from(s)
    n_steps = s["n_steps"] or model.n_steps
    rows, summary = benchmark(model, s["data"], n_steps, s["out"], contact_sheets=s["contact_sheets"])
    if not rows:
        raise UsageError("no pairs found")
    write_snapshot({**s, "n_steps": n_steps}, s["out"])
    for row in summary:
        print(f"{row['dataset']:>16s}  n={row['count']:<5d} PSNR {row['psnr']:.2f}  SSIM {row['ssim']:.4f}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    s = resolve_settings("sweep", args)
    if not s["data"]:
        raise UsageError("at least one --data directory is required")
    n_list = s["n_list"]
    if isinstance(n_list, str):
        try:
            n_list = [int(v) for v in n_list.split(",") if v.strip()]
        except ValueError:
            raise UsageError(f"--n-list must be comma-separated integers, got {s['n_list']!r}")
    if not n_list or min(n_list) < 1:
        raise UsageError("--n-list needs positive step counts")
    s["n_list"] = n_list
    if s["checkpoints_per_n"]:
        models = {int(n): _load(p) for n, p in s["checkpoints_per_n"].items()}
        missing = set(n_list) - set(models)
        if missing:
            raise UsageError(f"no checkpoint for N in {sorted(missing)}")
        target, retrain = models, True
    else:
        target, retrain = _model_from(s), False
    from .evaluation import find_pairs

    if not any(find_pairs(d)[0] for d in s["data"]):
        raise UsageError("no pairs found")
    out_csv = Path(s["out"]) / "sweep.csv"
    curve = timestep_sweep(target, s["data"], n_list, out_csv, retrain_mode=retrain)
    write_snapshot(s, s["out"])
    for c in curve:
        print(f"N={c['n']}: PSNR {c['psnr']:.2f}  SSIM {c['ssim']:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="TOML settings file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted-key override")
    common.add_argument("-v", "--verbose", action="count", default=0)
    common.add_argument("--workers", type=int, help="intra-op CPU threads")

    parser = _Parser(prog="ibcln", description="Cascaded reflection removal toolkit")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common], help="generate synthetic training triples")
    p.add_argument("--transmission-dir", dest="opt_transmission_dir")
    p.add_argument("--reflection-dir", dest="opt_reflection_dir")
    p.add_argument("--out", dest="opt_out")
    p.add_argument("--n", dest="opt_n", type=int)
    p.add_argument("--size", dest="opt_size", type=int)
    p.add_argument("--seed", dest="opt_seed", type=int)

    p = sub.add_parser("train", parents=[common], help="train the cascaded model")
    p.add_argument("--data", dest="opt_data", action="append")
    p.add_argument("--out", dest="opt_out")
    p.add_argument("--epochs", dest="opt_epochs", type=int)
    p.add_argument("--batch", dest="opt_batch_size", type=int)
    p.add_argument("--lr", dest="opt_learning_rate", type=float)
    p.add_argument("--n-steps", dest="opt_n_steps", type=int)
    p.add_argument("--seed", dest="opt_seed", type=int)
    p.add_argument("--ablate", dest="opt_ablation", action="append",
                   choices=sorted({"no_GR", "no_iteration", "drop_adv", "drop_residual", "drop_mp", "pixel_only"}))

    p = sub.add_parser("infer", parents=[common], help="remove reflections from images")
    p.add_argument("--checkpoint", dest="opt_checkpoint")
    p.add_argument("--input", dest="opt_input")
    p.add_argument("--output", dest="opt_output")
    p.add_argument("--n-steps", dest="opt_n_steps", type=int)
    p.add_argument("--dump-trace", dest="opt_dump_trace", action="store_true", default=None)

    for name, help_text in (("eval", "benchmark PSNR/SSIM on paired datasets"),
                            ("sweep", "metric as a function of the number of cascade steps")):
        p = sub.add_parser(name, parents=[common], help=help_text)
        p.add_argument("--checkpoint", dest="opt_checkpoint")
        p.add_argument("--identity", dest="opt_identity", action="store_true", default=None,
                       help="score the unprocessed input as the prediction")
        p.add_argument("--data", dest="opt_data", action="append")
        p.add_argument("--out", dest="opt_out")
        if name == "eval":
            p.add_argument("--n-steps", dest="opt_n_steps", type=int)
        else:
            p.add_argument("--n-list", dest="opt_n_list")
    return parser


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "infer": cmd_infer, "eval": cmd_eval, "sweep": cmd_sweep}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"ibcln: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    if args.workers:
        torch.set_num_threads(args.workers)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"ibcln {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, RuntimeError, tomllib.TOMLDecodeError) as exc:
        print(f"ibcln {args.command}: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
