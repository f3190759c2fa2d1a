"""
Run-directory plumbing shared by every command: config loading from CLI flags,
provenance (config echo, input hash, seeds), reports and PNG export.
"""

import argparse
import json
import time
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import numpy as np
import structlog

from app.core.config import config_hash, load_config, settings
from app.core.logging import bind_run_context
from app.models.config import RunConfig
from app.models.reports import RunReport

logger = structlog.get_logger(__name__)


def add_common_arguments(parser: argparse.ArgumentParser):
    parser.add_argument("--config", type=Path, default=None, help="JSON run configuration")
    parser.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="Dotted override, e.g. --set sampler.skip_beta=2 (repeatable)",
    )
    parser.add_argument("--out", type=Path, default=None, help="Output directory for this run")
    parser.add_argument("--seed", type=int, default=None, help="Overrides seed and sampler.seed")
    parser.add_argument("--threads", type=int, default=None, help="Upper bound for worker pools")
    parser.add_argument("--export-png", action="store_true", help="Also write images as PNG")


def config_from_args(args: argparse.Namespace) -> RunConfig:
    overrides: List[str] = list(args.overrides or [])
    if args.seed is not None:
        overrides += [f"seed={args.seed}", f"sampler.seed={args.seed}"]
    if args.threads is not None:
        settings.threads = max(1, int(args.threads))
    return load_config(args.config, overrides)


class RunContext:
    """One command invocation: its output directory, report and provenance"""

    def __init__(self, command: str, cfg: RunConfig, out: Optional[Path], export_png: bool = False):
        self.command = command
        self.cfg = cfg
        self.export_png = export_png
        default = Path(cfg.paths.runs_dir or settings.runs_dir) / cfg.experiment / command.replace(" ", "-")
        self.run_dir = Path(out or default)
        self.run_dir.mkdir(parents=True, exist_ok=True)
        self.started = time.perf_counter()
        self.inputs: List[Path] = []
        self.report = RunReport(
            command=command,
            experiment=cfg.experiment,
            config=cfg.model_dump(mode="json"),
            seeds={"seed": cfg.seed, "sampler": cfg.sampler.seed},
        )
        bind_run_context(command=command, run_dir=str(self.run_dir), seed=cfg.seed)
        self.write_json("config.json", self.report.config)

    def add_input(self, path: Union[str, Path]):
        self.inputs.append(Path(path))

    def path(self, name: str) -> Path:
        return self.run_dir / name

    def output(self, key: str, path: Union[str, Path]):
        self.report.outputs[key] = str(path)

    def write_json(self, name: str, payload: Any) -> Path:
        target = self.path(name)
        target.write_text(json.dumps(payload, indent=2, sort_keys=True, default=str))
        return target

    def export_image(self, name: str, image: np.ndarray):
        """PNG in gray with a fixed [0, 1] window, only when --export-png is set"""
        if not self.export_png:
            return
        import matplotlib

        matplotlib.use("Agg")
        from matplotlib import pyplot as plt

        target = self.path(f"{name}.png")
        plt.imsave(target, np.asarray(image, dtype=np.float64), cmap="gray", vmin=0.0, vmax=1.0)
        self.output(f"{name}_png", target)

    def finish(self, result: Dict[str, Any]) -> RunReport:
        self.report.wall_time_s = round(time.perf_counter() - self.started, 3)
        self.report.input_hash = config_hash(self.cfg, [p for p in self.inputs if p.is_file()])
        self.report.result = result
        self.write_json("report.json", self.report.model_dump(mode="json"))
        logger.info("run_finished", command=self.command, wall_time_s=self.report.wall_time_s)
        return self.report


def summary(report: RunReport) -> Dict[str, Any]:
    """What a command prints on stdout"""
    return {"success": True, "command": report.command, "outputs": report.outputs, "result": report.result}
