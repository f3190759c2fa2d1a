import argparse

from app.cli.common import RunContext, add_common_arguments, config_from_args
from app.services.experiments import ablate, run_experiment


def register(subparsers):
    evaluate = subparsers.add_parser("evaluate", help="Metric tables over the test split")
    add_common_arguments(evaluate)
    evaluate.set_defaults(handler=evaluate_command, command_name="evaluate")

    sweep = subparsers.add_parser("ablate", help="Ablation sweeps (T, mu, rescale_alpha, skip_beta)")
    add_common_arguments(sweep)
    sweep.add_argument("--sweep", required=True, help="T=50,100,200 | mu | rescale_alpha=... | skip_beta=...")
    sweep.set_defaults(handler=ablate_command, command_name="ablate")


def evaluate_command(args: argparse.Namespace):
    cfg = config_from_args(args)
    ctx = RunContext("evaluate", cfg, args.out, args.export_png)
    report = run_experiment(cfg)
    target = ctx.write_json("metrics.json", report.model_dump(mode="json"))
    ctx.output("metrics", target)
    return ctx.finish(
        {
            "rows": [
                r.model_dump(include={"method", "theta_miss", "psnr", "ssim", "consistency"})
                for r in report.rows
            ]
        }
    )


def ablate_command(args: argparse.Namespace):
    cfg = config_from_args(args)
    ctx = RunContext("ablate", cfg, args.out, args.export_png)
    report = ablate(cfg, args.sweep)
    target = ctx.write_json("ablation.json", report.model_dump(mode="json"))
    ctx.output("ablation", target)
    return ctx.finish({"sweep": args.sweep, "rows": [row.model_dump(mode="json") for row in report.rows]})
