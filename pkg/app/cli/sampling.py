import argparse
import csv
from pathlib import Path

import numpy as np

from app.cli.common import RunContext, add_common_arguments, config_from_args
from app.models.geometry import Geometry, Sinogram
from app.services.experiments import data_root, load_assets
from app.services.metrics import consistency_error, psnr, ssim
from app.services.phantoms import load_manifest
from app.services.restorer import restore
from app.services.sampler import sample, sample_average
from app.services.tomography import fbp, radon
from app.utils.container import load_tensor, save_tensor
from app.utils.exceptions import ConfigurationException


def register(subparsers):
    parser = subparsers.add_parser("sample", help="Run the reverse sampler on one measurement")
    add_common_arguments(parser)
    source = parser.add_mutually_exclusive_group()
    source.add_argument("--item", default=None, help="Test item id from the dataset manifest (default: first)")
    source.add_argument("--sino", type=Path, default=None, help="Sinogram container with a geometry tag")
    parser.add_argument("--average", action="store_true", help="Average sampler.sa_count samples")
    parser.set_defaults(handler=sample_command, command_name="sample")


def write_trace(path: Path, trace):
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["index", "t", "kind", "consistency_error", "raw_consistency_error", "rectified", "gamma"])
        for index, record in enumerate(trace.records):
            writer.writerow(
                [
                    index,
                    record.t,
                    record.kind,
                    repr(record.consistency_error),
                    repr(record.raw_consistency_error),
                    int(record.rectified),
                    repr(record.gamma),
                ]
            )


def _measurement(args, ctx, cfg):
    """(sinogram, ground truth or None)"""
    if args.sino is not None:
        ctx.add_input(args.sino)
        values, meta = load_tensor(args.sino)
        geom = Geometry.from_tag(meta["geometry"]) if "geometry" in meta else cfg.geometry.build()
        return Sinogram(geom, values), None

    root = data_root(cfg)
    manifest = load_manifest(root)
    items = manifest.items_for("test")
    item = manifest.item(args.item) if args.item else (items[0] if items else None)
    if item is None:
        raise ConfigurationException(
            f"Unknown dataset item: {args.item}", error_code="UNKNOWN_ITEM", details={"item": args.item}
        )
    truth, _ = load_tensor(root / item.files["img"])
    ctx.add_input(root / item.files["img"])
    geom = cfg.geometry.build()
    stored = Geometry.from_tag(manifest.geometry)
    if stored.tag() == geom.tag():
        values, _ = load_tensor(root / item.files["sino"])
        return Sinogram(geom, values), truth
    return radon(truth, geom), truth


def sample_command(args: argparse.Namespace):
    cfg = config_from_args(args)
    ctx = RunContext("sample", cfg, args.out, args.export_png)
    y, truth = _measurement(args, ctx, cfg)
    method = "rnsde_sa" if args.average else ("rnsde" if cfg.sampler.rectify else "rnsde_norect")
    assets = load_assets(cfg, y.geometry.theta_miss, [method])
    assets.pinv.geometry.require_same(y.geometry, "measurement")
    recon = fbp(y)
    mu = restore(recon, assets.restorer) if assets.restorer is not None else recon

    result = {"seed": cfg.sampler.seed, "method": method, "T": assets.sched.T}
    if args.average:
        image = sample_average(y, mu, assets.score, assets.pinv, assets.sched, cfg.sampler)
        result["sa_count"] = cfg.sampler.sa_count
    else:
        image, trace = sample(y, mu, assets.score, assets.pinv, assets.sched, cfg.sampler)
        write_trace(ctx.path("trace.csv"), trace)
        ctx.output("trace", ctx.path("trace.csv"))
        result["iterations"] = trace.length
        result["expected_iterations"] = trace.expected_length

    target = ctx.path("sample.rnt")
    save_tensor(target, image, {"geometry": y.geometry.tag(), "seed": cfg.sampler.seed, "method": method})
    ctx.output("image", target)
    ctx.export_image("sample", image)
    result["consistency_error"] = consistency_error(image, y, y.geometry)
    if truth is not None:
        value = psnr(image, truth)
        result["psnr"] = value if np.isfinite(value) else None
        result["ssim"] = ssim(image, truth)
    return ctx.finish(result)
