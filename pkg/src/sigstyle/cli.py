"""``sigstyle`` command line.

Subcommands: tune, transfer, local, texture, generate, eval, grid.

Values resolve as built-in default < ``--config`` JSON < explicit flag.
Config keys use the flag names with dashes turned into underscores;
unknown keys are rejected.  Every run logs its fully resolved settings.
Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import glob
import json
import logging
import os
import sys
from dataclasses import replace
from typing import Optional, Sequence

log = logging.getLogger("sigstyle")

IMAGE_EXTS = (".png", ".jpg", ".jpeg", ".bmp", ".webp")

COMMON = {
    "backbone": "auto",
    "backbone_dir": None,
    "device": None,
    "backbone_seed": 0,
    "log_level": "INFO",
}
TUNE = {
    "steps": 1500,
    "lr": 1e-6,
    "seed": 0,
    "batch_size": 1,
    "lam": 1.0,
    "mode": "style",
    "no_crop": False,
    "no_flip": False,
    "train_decoder_direct": False,
    "loss_plot": None,
}
SAMPLER = {
    "num_steps": 50,
    "guidance_scale": None,  # backbone default: 1.0 toy, 7.5 sd
    "seed": 0,
    "lam": 1.0,
}
TRANSFER = {
    **SAMPLER,
    "k": 25,
    "target_prompt_template": None,  # per subcommand
    "content_prompt_template": "{caption}",
    "caption": "a photo",
    "caption_source": "user",
    "inversion_guidance": 1.0,
    "execution": "lockstep",
    "trace_memory_budget": None,
    "grid": None,
}
DEFAULTS = {
    "tune": {**COMMON, **TUNE},
    "transfer": {**COMMON, **TRANSFER},
    "local": {**COMMON, **TRANSFER},
    "texture": {**COMMON, **TRANSFER},
    "generate": dict(COMMON, **SAMPLER),
    "eval": {**COMMON, **TRANSFER, "limit": None, "no_resume": False},
    "grid": {"labels": None, "cols": None, "log_level": "INFO"},
}
DEFAULT_GUIDANCE = {"toy": 1.0, "sd": 7.5}


class UsageError(Exception):
    pass


def _common(p):
    p.add_argument("--config", help="JSON file of option values")
    p.add_argument("--backbone", choices=("auto", "toy", "sd"), default=None,
                   help="model to use; auto picks sd when a weights dir is set (default auto)")
    p.add_argument("--backbone-dir", default=None, help="diffusers weights dir (env SIGSTYLE_BACKBONE_DIR)")
    p.add_argument("--backbone-seed", type=int, default=None, help="toy backbone weight seed (default 0)")
    p.add_argument("--device", default=None, help="torch device (default: cuda if available)")
    p.add_argument("--log-level", default=None, help="logging level (default INFO)")


def _sampler(p):
    p.add_argument("--num-steps", type=int, default=None, help="DDIM steps T (default 50)")
    p.add_argument("--guidance-scale", type=float, default=None,
                   help="classifier-free guidance (default 1.0 toy, 7.5 sd)")
    p.add_argument("--seed", type=int, default=None, help="sampling seed (default 0)")
    p.add_argument("--lam", type=float, default=None, help="offset strength lambda (default 1.0)")


def _transfer(p):
    _sampler(p)
    p.add_argument("--k", type=int, default=None, help="attention-swap steps (default 25)")
    p.add_argument("--target-prompt-template", default=None,
                   help="default '{caption} in the style of *' ('appearance' for texture)")
    p.add_argument("--content-prompt-template", default=None, help="default '{caption}'")
    p.add_argument("--caption", default=None, help="content caption (default 'a photo')")
    p.add_argument("--caption-source", choices=("user", "captioner"), default=None)
    p.add_argument("--inversion-guidance", type=float, default=None, help="default 1.0")
    p.add_argument("--execution", choices=("lockstep", "replay"), default=None)
    p.add_argument("--trace-memory-budget", type=int, default=None, help="bytes kept in RAM before spilling")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sigstyle", description="Signature-style inversion and transfer.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("tune", help="learn a style checkpoint from style images")
    _common(p)
    p.add_argument("--style", action="append", required=True, help="style image (repeat for fusion)")
    p.add_argument("--out", required=True, help="output .sigstyle path")
    p.add_argument("--steps", type=int, default=None, help="default 1500")
    p.add_argument("--lr", type=float, default=None, help="default 1e-6")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--lam", type=float, default=None)
    p.add_argument("--mode", choices=("style", "appearance"), default=None)
    p.add_argument("--no-crop", action="store_true", default=None)
    p.add_argument("--no-flip", action="store_true", default=None)
    p.add_argument("--train-decoder-direct", action="store_true", default=None)
    p.add_argument("--loss-plot", default=None, help="write a loss-curve PNG here")

    for name, help_ in [("transfer", "global style transfer"), ("local", "masked style transfer"),
                        ("texture", "masked appearance transfer")]:
        p = sub.add_parser(name, help=help_)
        _common(p)
        _transfer(p)
        p.add_argument("--content", required=True)
        p.add_argument("--style", required=True, help=".sigstyle checkpoint")
        p.add_argument("--out", required=True)
        p.add_argument("--grid", default=None, help="also write content | reconstruction | output grid")
        if name != "transfer":
            p.add_argument("--mask", required=True, help="grayscale PNG, white = transfer region")

    p = sub.add_parser("generate", help="style-guided text-to-image")
    _common(p)
    _sampler(p)
    p.add_argument("--prompt", required=True, help="prompt containing '*'")
    p.add_argument("--style", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="content x style evaluation suite")
    _common(p)
    _transfer(p)
    p.add_argument("--contents", required=True, help="directory of content images")
    p.add_argument("--styles", required=True, help="directory of .sigstyle files with same-stem images")
    p.add_argument("--out", required=True, help="report directory")
    p.add_argument("--limit", type=int, default=None, help="use only the first N contents")
    p.add_argument("--no-resume", action="store_true", default=None)

    p = sub.add_parser("grid", help="tile images into a captioned grid")
    p.add_argument("images", nargs="+")
    p.add_argument("--out", required=True)
    p.add_argument("--labels", nargs="+", default=None)
    p.add_argument("--cols", type=int, default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--log-level", default=None)
    return parser


def resolve(args: argparse.Namespace) -> dict:
    """Merge defaults, the config file and explicit flags."""
    defaults = DEFAULTS[args.command]
    file_cfg = {}
    if getattr(args, "config", None):
        try:
            with open(args.config) as fh:
                file_cfg = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(file_cfg, dict):
            raise UsageError("config file must hold a JSON object")
        unknown = sorted(set(file_cfg) - set(defaults))
        if unknown:
            raise UsageError(f"unknown config keys for '{args.command}': {', '.join(unknown)}")
    out = {}
    for key, default in defaults.items():
        flag = getattr(args, key, None)
        out[key] = flag if flag is not None else file_cfg.get(key, default)
    for key, value in vars(args).items():
        if key not in out and key != "config":
            out[key] = value
    return out


def _load_model(cfg):
    from .backbone import load_backbone

    model = load_backbone(cfg["backbone"], cfg["backbone_dir"], cfg["device"], cfg["backbone_seed"])
    if cfg.get("guidance_scale", 0) is None:
        cfg["guidance_scale"] = DEFAULT_GUIDANCE[model.variant]
    return model


def _transfer_config(cfg, default_template):
    from .apps import TransferConfig
    from .ddim import SamplerConfig
    from .swap import SwapPlan

    return TransferConfig(
        sampler=SamplerConfig(cfg["num_steps"], cfg["guidance_scale"], cfg["seed"]),
        swap=SwapPlan(k=cfg["k"]),
        lam=cfg["lam"],
        target_prompt_template=cfg["target_prompt_template"] or default_template,
        content_prompt_template=cfg["content_prompt_template"],
        caption_source=cfg["caption_source"],
        caption=cfg["caption"],
        inversion_guidance=cfg["inversion_guidance"],
        execution=cfg["execution"],
        trace_memory_budget=cfg["trace_memory_budget"],
    )


def _log_config(cfg):
    log.info("resolved config: %s", json.dumps(cfg, sort_keys=True, default=str))


def cmd_tune(cfg):
    from .checkpoint import save_checkpoint
    from .imageio import load_rgb
    from .styletune import AugmentConfig, TrainConfig, finetune

    model = _load_model(cfg)
    _log_config(cfg)
    images = [load_rgb(p, model.dtype) for p in cfg["style"]]
    tcfg = TrainConfig.for_mode(
        cfg["mode"],
        learning_rate=cfg["lr"],
        steps=cfg["steps"],
        batch_size=cfg["batch_size"],
        lam=cfg["lam"],
        seed=cfg["seed"],
        augment=AugmentConfig(random_crop=not cfg["no_crop"], horizontal_flip=not cfg["no_flip"]),
        train_decoder_direct=cfg["train_decoder_direct"],
    )
    ckpt = finetune(model, images, tcfg)
    save_checkpoint(ckpt, cfg["out"])
    log.info("wrote %s (final loss %.6f)", cfg["out"], ckpt.loss_history[-1])
    if cfg["loss_plot"]:
        from .plotting import render_loss_curve

        render_loss_curve(ckpt.loss_history, cfg["loss_plot"])


def cmd_transfer(cfg):
    from .apps import APPEARANCE_TEMPLATE, STYLE_TEMPLATE, Mask, _warn_mode, run_transfer
    from .checkpoint import load_checkpoint
    from .imageio import emit_grid, load_mask, load_rgb, prepare, save_png

    model = _load_model(cfg)
    command = cfg["command"]
    template = APPEARANCE_TEMPLATE if command == "texture" else STYLE_TEMPLATE
    tcfg = _transfer_config(cfg, template)
    cfg["target_prompt_template"] = tcfg.target_prompt_template
    _log_config(cfg)
    ckpt = load_checkpoint(cfg["style"], model)
    _warn_mode(ckpt, "appearance" if command == "texture" else "style", command)
    content = load_rgb(cfg["content"], model.dtype)
    mask = Mask(load_mask(cfg["mask"])) if command in ("local", "texture") else None
    res = run_transfer(model, content, ckpt, tcfg, mask)
    res.run.trace.close()
    save_png(res.image, cfg["out"])
    log.info("wrote %s", cfg["out"])
    if cfg.get("grid"):
        emit_grid([prepare(content, model.image_size), res.reconstruction_image, res.image],
                  ["content", "reconstruction", command], cfg["grid"])


def cmd_generate(cfg):
    from .apps import style_guided_generate
    from .checkpoint import load_checkpoint
    from .ddim import SamplerConfig
    from .imageio import save_png

    model = _load_model(cfg)
    _log_config(cfg)
    ckpt = load_checkpoint(cfg["style"], model)
    sampler = SamplerConfig(cfg["num_steps"], cfg["guidance_scale"], cfg["seed"])
    save_png(style_guided_generate(model, cfg["prompt"], ckpt, sampler, cfg["lam"]), cfg["out"])
    log.info("wrote %s", cfg["out"])


def _images_in(directory):
    return sorted(p for p in glob.glob(os.path.join(directory, "*")) if p.lower().endswith(IMAGE_EXTS))


def cmd_eval(cfg):
    from .apps import STYLE_TEMPLATE
    from .checkpoint import EXTENSION, load_checkpoint
    from .imageio import load_rgb
    from .metrics import StyleEntry, evaluate_suite
    from .plotting import render_report_figure

    model = _load_model(cfg)
    tcfg = _transfer_config(cfg, STYLE_TEMPLATE)
    cfg["target_prompt_template"] = tcfg.target_prompt_template
    _log_config(cfg)
    content_paths = _images_in(cfg["contents"])[: cfg["limit"]]
    contents = [(os.path.splitext(os.path.basename(p))[0], load_rgb(p, model.dtype)) for p in content_paths]
    styles = []
    for path in sorted(glob.glob(os.path.join(cfg["styles"], f"*{EXTENSION}"))):
        stem = os.path.splitext(path)[0]
        image_path = next((stem + e for e in IMAGE_EXTS if os.path.exists(stem + e)), None)
        styles.append(StyleEntry(
            os.path.basename(stem), load_checkpoint(path, model),
            load_rgb(image_path, model.dtype) if image_path else None,
        ))
    report = evaluate_suite(model, contents, styles, tcfg, cfg["out"], resume=not cfg["no_resume"])
    render_report_figure(report, os.path.join(cfg["out"], "metrics.png"))
    agg = report.aggregates
    print(f"pairs={agg['pairs']} failed={agg['failed_pairs']} mean_style_loss={agg['mean_style_loss']:.6g} "
          f"mean_lpips={agg['mean_lpips']:.6g}")
    log.info("wrote report to %s", cfg["out"])


def cmd_grid(cfg):
    from .imageio import emit_grid, load_rgb

    _log_config(cfg)
    emit_grid([load_rgb(p) for p in cfg["images"]], cfg["labels"], cfg["out"], cfg["cols"])


COMMANDS = {
    "tune": cmd_tune, "transfer": cmd_transfer, "local": cmd_transfer, "texture": cmd_transfer,
    "generate": cmd_generate, "eval": cmd_eval, "grid": cmd_grid,
}


def run(argv: Optional[Sequence[str]] = None) -> int:
    from .errors import SigStyleError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = resolve(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"sigstyle: error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=str(cfg.get("log_level", "INFO")).upper(),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        COMMANDS[args.command](cfg)
    except (SigStyleError, OSError, ValueError) as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return 1
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
