import argparse
from typing import Callable

from app.cli.common import RunContext, add_common_arguments, config_from_args
from app.services.experiments import checkpoint_path, fit_pinv, fit_restorer, fit_score
from app.services.training import write_loss_curve


def register(subparsers):
    for name, handler, help_text in (
        ("train-pinv", train_pinv_command, "Train the learnable pseudo-inverse"),
        ("train-score", train_score_command, "Train the conditional score network"),
        ("train-restorer", train_restorer_command, "Train the MMSE restorer that produces mu"),
    ):
        parser = subparsers.add_parser(name, help=help_text)
        add_common_arguments(parser)
        parser.add_argument("--theta-miss", type=float, default=None, help="Defaults to geometry.theta_miss")
        parser.set_defaults(handler=handler, command_name=name)


def _train(args: argparse.Namespace, command: str, kind: str, fit: Callable):
    cfg = config_from_args(args)
    theta = cfg.geometry.theta_miss if args.theta_miss is None else args.theta_miss
    ctx = RunContext(command, cfg, args.out, args.export_png)
    _, report = fit(cfg, theta)
    extra = {k: report.metadata[k] for k in ("l1", "l2") if k in report.metadata}
    curve = ctx.path("loss_curve.csv")
    write_loss_curve(curve, report.losses, extra)
    ctx.write_json("training_report.json", report.model_dump(mode="json", exclude={"losses"}))
    mu_source = report.metadata.get("mu_source", "fbp")
    ctx.output("checkpoint", checkpoint_path(cfg, kind, theta, mu_source))
    ctx.output("loss_curve", curve)
    return ctx.finish(
        {
            "theta_miss": theta,
            "initial_loss": report.initial_loss,
            "final_loss": report.final_loss,
            "best_loss": report.best_loss,
            "best_step": report.best_step,
            "alpha_schedule": report.alpha_schedule,
            "validation": report.validation,
        }
    )


def train_pinv_command(args):
    return _train(args, "train-pinv", "pinv", fit_pinv)


def train_score_command(args):
    return _train(args, "train-score", "score", fit_score)


def train_restorer_command(args):
    return _train(args, "train-restorer", "restorer", fit_restorer)
