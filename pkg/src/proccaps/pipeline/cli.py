"""Command-line entry point.

Exit codes: 0 on success, 1 on usage or configuration errors, 2 when the
requested work fails at runtime.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from ..colorspace import GamutError, build_gamut_grid, merge_luminance, lab_to_rgb
from ..evaluation import evaluate_dataset, model_colorizer
from ..network import Classifier, ConfigError
from ..training.loops import (
    ColorData,
    End2EndWeights,
    GanWeights,
    LossLog,
    TrainingError,
    dataset_rarity,
    train_classifier,
    train_end2end,
    train_gan,
)
from .archive import archive_luminance
from .checkpoint import (
    CheckpointError,
    ModelState,
    load_checkpoint,
    new_state,
    save_checkpoint,
)
from .config import RunConfig, RunConfigError, load_config
from .data import (
    DatasetError,
    ingest_dataset,
    load_color_stack,
    load_labeled_stack,
    read_luminance,
    read_rgb,
    write_rgb,
)

log = logging.getLogger("proccaps")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", type=Path, help="flat key=value run configuration")
    p.add_argument("--seed", type=int)
    p.add_argument("--scale", choices=("desk", "reference"))
    p.add_argument("--no-capsules", action="store_true")
    p.add_argument("--no-classifier", action="store_true")
    p.add_argument("--no-progl", action="store_true")
    p.add_argument("--no-gan", action="store_true", help="end-to-end only; no discriminator")
    p.add_argument("--epochs", type=int, help="override the epoch count of this phase")
    p.add_argument("--rho", type=int, help="epochs per progressive stage")
    p.add_argument("-v", "--verbose", action="count", default=0)
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = _Parser(prog="proccaps", description="Luminance-only underwater image colourisation.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train-classifier", parents=[common], help="finetune the image classifier")
    p.add_argument("data", type=Path, help="directory with one subdirectory per class")
    p.add_argument("-o", "--output", type=Path, required=True, help="checkpoint to write")
    p.add_argument("--log", type=Path, help="CSV loss stream")

    p = sub.add_parser("train", parents=[common], help="progressive end-to-end training")
    p.add_argument("data", type=Path, help="directory of colour images")
    p.add_argument("-o", "--output", type=Path, required=True)
    p.add_argument("--init", type=Path, help="checkpoint holding the trained classifier")
    p.add_argument("--log", type=Path)

    p = sub.add_parser("train-gan", parents=[common], help="adversarial refinement")
    p.add_argument("data", type=Path)
    p.add_argument("-o", "--output", type=Path, required=True)
    p.add_argument("--init", type=Path, required=True, help="end-to-end checkpoint")
    p.add_argument("--log", type=Path)

    p = sub.add_parser("colorize", parents=[common], help="colourise a stored luminance image")
    p.add_argument("input", type=Path, help="single-channel L image (or a colour image)")
    p.add_argument("-o", "--output", type=Path, required=True, help="RGB image to write")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--ab", type=Path, help="also dump the predicted ab map as .npy")

    p = sub.add_parser("eval", parents=[common], help="PSNR / SSIM over a dataset")
    p.add_argument("data", type=Path)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--report", type=Path, help="CSV report (default: stdout)")

    p = sub.add_parser("archive", parents=[common], help="store only the L channel of a capture")
    p.add_argument("input", type=Path)
    p.add_argument("-o", "--output", type=Path, required=True)

    p = sub.add_parser("gamut", parents=[common], help="build the in-gamut ab bins")
    p.add_argument("-o", "--output", type=Path, help="write the bin table here (default: stdout)")
    p.add_argument("--sweep", type=int, default=64, help="sRGB sweep steps per axis")
    return parser


def run_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.scale is not None:
        changes["scale"] = args.scale
        # Let scale-dependent defaults follow the new preset unless the file set them.
        if args.config is None:
            changes.update(rho=None, epochs_class=None, epochs_e2e=None, epochs_gan=None, batch_size=None)
    if args.rho is not None:
        changes["rho"] = args.rho
    for flag, key in (("no_capsules", "use_capsules"), ("no_classifier", "use_classifier"),
                      ("no_progl", "use_progl"), ("no_gan", "use_gan")):
        if getattr(args, flag):
            changes[key] = False
    return cfg.replace(**changes) if changes else cfg


def _grid(cfg: RunConfig, sweep: int = 64):
    return build_gamut_grid(cfg.bin_size, sweep)


def _seed(cfg: RunConfig):
    torch.manual_seed(cfg.seed)


def _state_for(cfg: RunConfig, init):
    grid = _grid(cfg)
    net = cfg.network(grid.Q)
    if init is not None:
        return grid, load_checkpoint(init, net)
    _seed(cfg)
    return grid, new_state(net, grid.centers)


def cmd_train_classifier(args, cfg: RunConfig) -> int:
    if not cfg.use_classifier:
        raise UsageError("train-classifier makes no sense with --no-classifier")
    grid, state = _state_for(cfg, None)
    ds = ingest_dataset(args.data, "labeled")
    net = state.cfg
    if len(ds.classes) != net.n_classes:
        raise DatasetError(f"found {len(ds.classes)} classes, the network expects {net.n_classes}")
    L, labels = load_labeled_stack(ds, net.input_size)
    sink = LossLog(args.log)
    epochs = cfg.epochs_class if args.epochs is None else args.epochs
    _seed(cfg)
    fresh = Classifier(net.n_classes, net.classifier_channels)
    try:
        trained, acc = train_classifier(fresh, L, labels, epochs, cfg.batch_size, cfg.lr, cfg.seed, sink)
    finally:
        sink.close()
    state.generator.classifier.load_state_dict(trained.state_dict())
    state.phase = "classifier"
    save_checkpoint(state, args.output)
    print(f"classifier: {len(ds)} images, final train accuracy {acc[-1] if acc else float('nan'):.3f}")
    return 0


def _color_data(args, cfg: RunConfig, state: ModelState) -> ColorData:
    ds = ingest_dataset(args.data, "paired")
    L, ab = load_color_stack(ds, state.cfg.input_size)
    return ColorData(L, ab)


def cmd_train(args, cfg: RunConfig) -> int:
    grid, state = _state_for(cfg, args.init)
    data = _color_data(args, cfg, state)
    model = state.generator
    rarity = dataset_rarity(data, grid, model.plan["Omega"][0], cfg.rebalance_lambda, cfg.soft_k, cfg.soft_sigma)
    model.rarity.copy_(torch.as_tensor(rarity, dtype=torch.float32))
    epochs = cfg.epochs_e2e if args.epochs is None else args.epochs
    sink = LossLog(args.log)
    try:
        sched = train_end2end(model, data, grid, epochs, rho=cfg.rho, batch_size=cfg.batch_size, lr=cfg.lr,
                              seed=cfg.seed, weights=End2EndWeights(cfg.weight_q, cfg.weight_ch), on_report=sink)
    finally:
        sink.close()
    state.phase = "end2end"
    save_checkpoint(state, args.output)
    last = sink.reports[-1].total if sink.reports else float("nan")
    print(f"end2end: {epochs} epochs, stage {sched.stage_name}, last loss {last:.4f}")
    return 0


def cmd_train_gan(args, cfg: RunConfig) -> int:
    if not cfg.use_gan:
        raise UsageError("train-gan cannot run with --no-gan")
    grid, state = _state_for(cfg, args.init)
    data = _color_data(args, cfg, state)
    epochs = cfg.epochs_gan if args.epochs is None else args.epochs
    weights = GanWeights(cfg.weight_adv, cfg.weight_perc,
                         cfg.weight_q if cfg.gan_e2e_terms else 0.0, cfg.weight_ch if cfg.gan_e2e_terms else 0.0)
    sink = LossLog(args.log)
    try:
        train_gan(state.generator, state.discriminator, data, grid, epochs, batch_size=cfg.batch_size,
                  lr=cfg.lr, seed=cfg.seed, weights=weights, on_report=sink)
    finally:
        sink.close()
    state.phase = "gan"
    save_checkpoint(state, args.output)
    print(f"gan: {epochs} epochs")
    return 0


def colorize_plane(model, L_plane: np.ndarray) -> np.ndarray:
    """ab map (H x W x 2) for an L plane of any size, values of L in [0, 1]."""
    h, w = L_plane.shape
    size = model.cfg.input_size
    L = torch.tensor(L_plane, dtype=torch.float32)[None, None]
    if (h, w) != (size, size):
        L = F.interpolate(L, size=(size, size), mode="bilinear", align_corners=False)
    model.eval()
    with torch.no_grad():
        ab = model(L).ab
    if (h, w) != (size, size):
        ab = F.interpolate(ab, size=(h, w), mode="bilinear", align_corners=False)
    return ab[0].permute(1, 2, 0).double().numpy()


def _read_plane(path: Path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        single = im.mode in ("L", "I", "I;16", "I;16B", "I;16L")
    if single:
        return read_luminance(path) / 100.0
    from ..colorspace import rgb_to_lab

    return rgb_to_lab(read_rgb(path))[..., 0] / 100.0


def cmd_colorize(args, cfg: RunConfig) -> int:
    _, state = _state_for(cfg, args.checkpoint)
    L_plane = _read_plane(args.input)
    ab = colorize_plane(state.generator, L_plane)
    write_rgb(args.output, lab_to_rgb(merge_luminance(L_plane, ab)))
    if args.ab:
        np.save(args.ab, ab.astype(np.float32))
    print(f"wrote {args.output} ({L_plane.shape[1]}x{L_plane.shape[0]})")
    return 0


def cmd_eval(args, cfg: RunConfig) -> int:
    _, state = _state_for(cfg, args.checkpoint)
    ds = ingest_dataset(args.data, "paired")
    model = state.generator
    images = ((s.color.name, read_rgb(s.color, model.cfg.input_size)) for s in ds.samples)
    report = evaluate_dataset(model_colorizer(model), images, model_id=args.checkpoint.name)
    text = report.to_csv()
    if args.report:
        args.report.write_text(text)
        s = report.summary()
        print(f"{len(report)} images: PSNR {s['psnr_mean']:.3f} dB, SSIM {s['ssim_mean']:.4f}")
    else:
        sys.stdout.write(text)
    return 0


def cmd_archive(args, cfg: RunConfig) -> int:
    rep = archive_luminance(args.input, args.output, cfg.lum_bits)
    print(rep.describe())
    return 0


def cmd_gamut(args, cfg: RunConfig) -> int:
    grid = _grid(cfg, args.sweep)
    text = grid.to_text()
    if args.output:
        args.output.write_text(text)
    else:
        sys.stdout.write(text)
    print(f"Q={grid.Q}", file=sys.stderr if not args.output else sys.stdout)
    return 0


COMMANDS = {
    "train-classifier": cmd_train_classifier,
    "train": cmd_train,
    "train-gan": cmd_train_gan,
    "colorize": cmd_colorize,
    "eval": cmd_eval,
    "archive": cmd_archive,
    "gamut": cmd_gamut,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=(logging.WARNING, logging.INFO, logging.DEBUG)[min(args.verbose, 2)],
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = run_config(args)
        return COMMANDS[args.command](args, cfg)
    except (UsageError, RunConfigError, ConfigError) as exc:
        print(f"proccaps: error: {exc}", file=sys.stderr)
        return 1
    except (DatasetError, CheckpointError, TrainingError, GamutError, OSError, ValueError) as exc:
        print(f"proccaps: {args.command} failed: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
