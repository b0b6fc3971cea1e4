"""Command-line entry point: ``faceadapt <command> ...``.

Exit codes: 0 success, 1 other failure (bad checkpoint, missing file), 2 configuration
error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from .config import TrainConfig, apply_overrides, load_toml
from .errors import FaceAdaptError, InvalidConfigError, NumericError

log = logging.getLogger("faceadapt")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3


def _overrides(pairs) -> dict:
    out = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise InvalidConfigError(f"override {pair!r} must look like key=value")
        key, value = pair.split("=", 1)
        out[key.strip()] = value
    return out


def _config(args) -> TrainConfig:
    cfg = load_toml(args.config) if getattr(args, "config", None) else TrainConfig()
    return apply_overrides(cfg, _overrides(getattr(args, "set", None)))


def _latest(path) -> Path:
    """Accept a checkpoint directory or a run directory holding a ``latest`` pointer."""
    path = Path(path)
    if (path / "latest").exists():
        return path / (path / "latest").read_text().strip()
    return path


def _load_model(args):
    from .checkpoint import load_checkpoint

    model, manifest, _ = load_checkpoint(_latest(args.checkpoint))
    sampler_keys = {k: v for k, v in _overrides(args.set).items()}
    bad = [k for k in sampler_keys if not k.startswith("sampler.")]
    if bad:
        raise InvalidConfigError(f"only sampler.* keys can be overridden here, got {bad}")
    cfg = apply_overrides(model.cfg, sampler_keys)
    if args.seed is not None:
        cfg = apply_overrides(cfg, {"sampler.seed": args.seed})
    model.eval()
    return model, cfg


def _reference(args, model, cfg):
    """Identity tokens for the reference image (a file, or a record of the regenerated dataset)."""
    from .encoder import FaceImage, load_image, mask_face_region
    from .training import make_dataset

    if args.reference:
        pixels = load_image(args.reference)
        mask = load_image(args.reference_mask)[..., 0] > 0.5 if args.reference_mask else None
        if mask is None:
            mask = np.ones(pixels.shape[:2], dtype=np.uint8)
        caption = args.caption if args.caption is not None else 0
        record = None
    else:
        dataset = make_dataset(cfg)
        record = dataset.records[args.record]
        pixels, mask = record.image, record.face_mask
        caption = args.caption if args.caption is not None else record.caption_id
    face = mask_face_region(FaceImage(pixels, mask.astype(np.uint8)))
    with torch.no_grad():
        raw = model.face_encoder.encode(torch.as_tensor(face.pixels[None], dtype=model.dtype))
        e_id = model.identity(raw)
        text = model.text(torch.tensor([caption]))
    return e_id, text, record


def _write_outputs(z, out, image_size):
    from .backbone import decode_latent
    from .encoder import save_png, save_raw

    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    z = z.detach().to(torch.float64)
    save_raw(out.with_suffix(".latent"), z[0].numpy())
    save_png(out.with_suffix(".png"), decode_latent(z, image_size)[0])
    print(f"wrote {out.with_suffix('.png')} and {out.with_suffix('.latent')}")


def cmd_make_dataset(args):
    from .training import make_dataset

    cfg = _config(args)
    dataset = make_dataset(cfg)
    dataset.save(args.out)
    print(f"wrote {len(dataset)} records to {args.out}")


def cmd_train(args):
    from .curriculum import IdentityDataset
    from .training import resume, train

    dataset = IdentityDataset.load(args.dataset) if args.dataset else None
    if args.resume:
        # the checkpoint's own config unless one is given; --steps then only sets where to stop
        cfg = _config(args) if (args.config or args.set) else None
        result = resume(_latest(args.resume), cfg, args.out, stop_step=args.steps,
                        dataset=dataset)
    else:
        cfg = _config(args)
        if args.steps is not None:
            cfg = apply_overrides(cfg, {"total_steps": args.steps})
        result = train(cfg, args.out, dataset=dataset)
    print(f"step {result.step}; checkpoint {result.checkpoint}")
    for step, value in sorted(result.probe.items()):
        print(f"  probe loss @ {step}: {value:.4f}")


def cmd_generate(args):
    from .sampler import generate

    model, cfg = _load_model(args)
    e_id, text, _ = _reference(args, model, cfg)
    with torch.no_grad():
        z = generate(text, e_id, cfg.sampler, model)
    _write_outputs(z, args.out, cfg.encoder.image_size)


def cmd_inpaint(args):
    from .backbone import encode_latent
    from .encoder import load_image
    from .sampler import inpaint

    model, cfg = _load_model(args)
    e_id, text, record = _reference(args, model, cfg)
    if args.template:
        template = load_image(args.template)
        mask = load_image(args.mask)[..., 0] > 0.5
    elif record is not None:
        template, mask = record.image, record.face_mask
    else:
        raise InvalidConfigError("inpaint needs --template and --mask, or --record")
    z0 = encode_latent(template[None], cfg.unet.latent_shape[-1]).to(model.dtype)
    with torch.no_grad():
        z = inpaint(z0, mask[None].astype(np.float64), text, e_id, cfg.sampler, model)
    _write_outputs(z, args.out, cfg.encoder.image_size)


def cmd_profile(args):
    from .sampler import increment_profile

    model, cfg = _load_model(args)
    e_id, text, _ = _reference(args, model, cfg)
    with torch.no_grad():
        profile = increment_profile(text, e_id, cfg.sampler, model)
    # one spatial map per block: the batch holds a single sample
    profile.per_block = {k: v[0] for k, v in profile.per_block.items()}
    Path(args.out).write_text(profile.to_json())
    print(f"wrote profile for {len(profile.per_block)} blocks to {args.out}")


def cmd_ablate(args):
    from .evaluation import render_reports, run_ablation

    cfg = _config(args)
    if args.steps is not None:
        cfg = apply_overrides(cfg, {"total_steps": args.steps})
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    reports = run_ablation(variants, cfg, seed=args.seed, out_dir=args.out)
    print(render_reports(reports))
    return EXIT_NUMERIC if any(r.error for r in reports) else EXIT_OK


def cmd_report(args):
    from .evaluation import EvalReport, render_reports

    paths = []
    for p in map(Path, args.paths):
        paths.extend(sorted(p.glob("*/report.json")) if p.is_dir() else [p])
    if not paths:
        raise FaceAdaptError("no report.json files found")
    print(render_reports([EvalReport.from_json(p.read_text()) for p in paths]))


def _parser():
    p = argparse.ArgumentParser(prog="faceadapt", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="TOML file with configuration sections")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config key, e.g. loss.lambda_fair=0")

    def with_sampling(sp, out_help):
        sp.add_argument("--checkpoint", required=True, help="checkpoint or run directory")
        sp.add_argument("--out", required=True, help=out_help)
        sp.add_argument("--record", type=int, default=0,
                        help="reference record of the regenerated dataset")
        sp.add_argument("--reference", help="reference image file instead of --record")
        sp.add_argument("--reference-mask", help="face mask for --reference")
        sp.add_argument("--caption", type=int, help="caption id (0 means empty text)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--set", action="append", metavar="sampler.KEY=VALUE")

    sp = sub.add_parser("make-dataset", help="render the synthetic identity dataset")
    with_config(sp)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_make_dataset)

    sp = sub.add_parser("train", help="train the identity adapters")
    with_config(sp)
    sp.add_argument("--out", required=True, help="run directory for checkpoints")
    sp.add_argument("--steps", type=int,
                    help="total training steps (with --resume: the step to stop at)")
    sp.add_argument("--dataset", help="dataset directory written by make-dataset")
    sp.add_argument("--resume", help="checkpoint to continue from")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("generate", help="sample an image for a reference identity")
    with_sampling(sp, "output path; .png and .latent are written")
    sp.set_defaults(func=cmd_generate)

    sp = sub.add_parser("inpaint", help="regenerate the face region of a template")
    with_sampling(sp, "output path; .png and .latent are written")
    sp.add_argument("--template", help="template image (defaults to the reference record)")
    sp.add_argument("--mask", help="face mask image for --template")
    sp.set_defaults(func=cmd_inpaint)

    sp = sub.add_parser("profile", help="per-block adapter increment maps as JSON")
    with_sampling(sp, "JSON output path")
    sp.set_defaults(func=cmd_profile)

    sp = sub.add_parser("ablate", help="train and evaluate named variants")
    with_config(sp)
    sp.add_argument("--variants", default="fair,nofair")
    sp.add_argument("--steps", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out", help="directory for per-variant runs and reports")
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("report", help="render report.json files as a table")
    sp.add_argument("paths", nargs="+", help="report files or ablation directories")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        code = args.func(args)
    except InvalidConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FaceAdaptError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK if code is None else code


if __name__ == "__main__":
    sys.exit(main())
