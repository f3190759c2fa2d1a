import argparse
from pathlib import Path

from app.cli.common import RunContext, add_common_arguments, config_from_args
from app.models.geometry import Geometry, Sinogram
from app.services.tomography import fbp, radon
from app.utils.container import load_tensor, save_tensor
from app.utils.exceptions import InvalidInputException


def register(subparsers):
    project = subparsers.add_parser("project", help="Radon transform of an image container")
    add_common_arguments(project)
    project.add_argument("--image", type=Path, required=True)
    project.set_defaults(handler=project_command, command_name="project")

    recon = subparsers.add_parser("fbp", help="Filtered back-projection of a sinogram container")
    add_common_arguments(recon)
    recon.add_argument("--sino", type=Path, required=True)
    recon.add_argument("--window", choices=["none", "hann"], default="none")
    recon.set_defaults(handler=fbp_command, command_name="fbp")


def project_command(args: argparse.Namespace):
    cfg = config_from_args(args)
    ctx = RunContext("project", cfg, args.out, args.export_png)
    ctx.add_input(args.image)
    image, _ = load_tensor(args.image)
    if image.ndim != 2:
        raise InvalidInputException("project expects a single 2-D image", error_code="SHAPE_MISMATCH")
    geom = cfg.geometry.build()
    sino = radon(image, geom)
    target = ctx.path("sino.rnt")
    save_tensor(target, sino.values, {"geometry": geom.tag()})
    ctx.output("sinogram", target)
    return ctx.finish({"shape": list(sino.values.shape), "geometry": geom.tag()})


def fbp_command(args: argparse.Namespace):
    cfg = config_from_args(args)
    ctx = RunContext("fbp", cfg, args.out, args.export_png)
    ctx.add_input(args.sino)
    values, meta = load_tensor(args.sino)
    geom = Geometry.from_tag(meta["geometry"]) if "geometry" in meta else cfg.geometry.build()
    image = fbp(Sinogram(geom, values), window=args.window)
    target = ctx.path("fbp.rnt")
    save_tensor(target, image, {"geometry": geom.tag(), "window": args.window})
    ctx.output("image", target)
    ctx.export_image("fbp", image)
    return ctx.finish({"shape": list(image.shape), "geometry": geom.tag()})
