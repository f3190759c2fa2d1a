import argparse

from app.cli.common import RunContext, add_common_arguments, config_from_args
from app.services.experiments import data_root
from app.services.phantoms import MANIFEST_NAME, build_dataset
from app.utils.container import load_tensor


def register(subparsers):
    parser = subparsers.add_parser("dataset", help="Synthetic phantom datasets")
    commands = parser.add_subparsers(dest="dataset_command", required=True)
    build = commands.add_parser("build", help="Generate phantoms, sinograms and FBP reconstructions")
    add_common_arguments(build)
    build.set_defaults(handler=build_command, command_name="dataset build")


def build_command(args: argparse.Namespace):
    cfg = config_from_args(args)
    root = args.out or data_root(cfg)
    ctx = RunContext("dataset build", cfg, root, args.export_png)
    manifest = build_dataset(
        cfg.phantoms, cfg.dataset.n_train, cfg.dataset.n_test, cfg.geometry.build(), root=ctx.run_dir
    )
    ctx.output("manifest", ctx.path(MANIFEST_NAME))
    if ctx.export_png and manifest.items:
        first = manifest.items_for("test")[0]
        ctx.export_image(first.item_id, load_tensor(ctx.run_dir / first.files["img"])[0])
    return ctx.finish(
        {
            "n_train": len(manifest.splits["train"]),
            "n_test": len(manifest.splits["test"]),
            "geometry": manifest.geometry,
        }
    )
