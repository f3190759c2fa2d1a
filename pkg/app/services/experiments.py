"""
Pipeline orchestration shared by the CLI: checkpoint layout, training entry
points, per-item reconstruction with every method, metric aggregation and
ablation sweeps.
"""

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import structlog
from pydantic import ValidationError

from app.core.config import settings
from app.models.config import RunConfig
from app.models.geometry import Geometry, Sinogram
from app.models.reports import AblationReport, AblationRow, ItemMetric, MetricReport, MetricRow, TrainingReport
from app.services.metrics import consistency_error, psnr, ssim
from app.services.mrsde import DiffusionSchedule, make_schedule
from app.services.phantoms import load_manifest, load_split
from app.services.pinv import LearnablePinv, pinv_apply, train_pinv
from app.services.restorer import Restorer, restore, train_restorer
from app.services.sampler import sample, sample_average
from app.services.score import CondDenoiser, train_score
from app.services.tomography import fbp, operator_for
from app.services.tv import tv_reconstruct
from app.utils.container import load_params, save_params
from app.utils.exceptions import ConfigurationException, DatasetException

logger = structlog.get_logger(__name__)

SAMPLED_METHODS = ("rnsde_norect", "rnsde")


def data_root(cfg: RunConfig) -> Path:
    return Path(cfg.paths.data_dir or settings.data_dir)


def runs_root(cfg: RunConfig) -> Path:
    return Path(cfg.paths.runs_dir or settings.runs_dir)


def checkpoint_path(cfg: RunConfig, kind: str, theta_miss: float, mu_source: str = "fbp") -> Path:
    """runs/<experiment>/checkpoints/<kind>_miss<theta>.rnt; score checkpoints trained on restorer mu get a suffix"""
    name = f"{kind}_restorer" if kind == "score" and mu_source == "restorer" else kind
    return runs_root(cfg) / cfg.experiment / "checkpoints" / f"{name}_miss{theta_miss:g}.rnt"


def schedule_for(cfg: RunConfig) -> DiffusionSchedule:
    return make_schedule(cfg.schedule.T, cfg.schedule.lambda2, cfg.schedule.kind)


def measure(images: np.ndarray, geom: Geometry) -> Tuple[np.ndarray, np.ndarray]:
    """Limited-angle sinograms and their FBP reconstructions for a stack of images"""
    values = operator_for(geom).project(images)
    recon = fbp(Sinogram(geom, values))
    return values, recon


def _split_arrays(cfg: RunConfig, split: str, geom: Geometry, limit: Optional[int] = None):
    root = data_root(cfg)
    manifest = load_manifest(root)
    ids, arrays = load_split(root, split, manifest, limit)
    stored = Geometry.from_tag(manifest.geometry)
    if stored.tag() == geom.tag():
        return ids, arrays["img"], arrays["sino"], arrays["fbp"]
    values, recon = measure(arrays["img"], geom)
    return ids, arrays["img"], values, recon


def _train_val(cfg: RunConfig, geom: Geometry):
    _, images, _, recon = _split_arrays(cfg, "train", geom)
    n_val = cfg.dataset.n_val if len(images) > cfg.dataset.n_val else 0
    cut = len(images) - n_val
    return images[:cut], recon[:cut], images[cut:], recon[cut:]


# Checkpoints


def load_pinv(cfg: RunConfig, geom: Geometry) -> LearnablePinv:
    params, meta = load_params(checkpoint_path(cfg, "pinv", geom.theta_miss))
    return LearnablePinv.from_checkpoint(params, meta, geom)


def load_score(cfg: RunConfig, theta_miss: float, mu_source: str = "fbp") -> CondDenoiser:
    params, meta = load_params(checkpoint_path(cfg, "score", theta_miss, mu_source))
    model = CondDenoiser.from_checkpoint(params, meta)
    trained = (model.sched.T, model.sched.lambda2, model.sched.kind)
    if trained != (cfg.schedule.T, cfg.schedule.lambda2, cfg.schedule.kind):
        raise ConfigurationException(
            "Score checkpoint was trained with a different schedule",
            error_code="SCHEDULE_MISMATCH",
            details={
                "checkpoint": {"T": trained[0], "lambda2": trained[1], "kind": trained[2]},
                "config": cfg.schedule.model_dump(),
            },
        )
    return model


def load_restorer(cfg: RunConfig, theta_miss: float) -> Restorer:
    params, meta = load_params(checkpoint_path(cfg, "restorer", theta_miss))
    return Restorer.from_checkpoint(params, meta)


# Training entry points


def fit_pinv(cfg: RunConfig, theta_miss: float, save: bool = True) -> Tuple[LearnablePinv, TrainingReport]:
    geom = cfg.geometry.build(theta_miss)
    images, _, val_images, _ = _train_val(cfg, geom)
    model = LearnablePinv.from_config(geom, cfg.training.pinv)
    model, report = train_pinv(images, model, cfg.training.pinv, validation=val_images)
    if save:
        save_params(checkpoint_path(cfg, "pinv", theta_miss), model.params, model.meta())
    return model, report


def fit_restorer(cfg: RunConfig, theta_miss: float, save: bool = True) -> Tuple[Restorer, TrainingReport]:
    geom = cfg.geometry.build(theta_miss)
    images, recon, val_images, val_recon = _train_val(cfg, geom)
    model = Restorer.from_config(cfg.training.restorer, geom.image_shape)
    validation = (val_recon, val_images) if len(val_images) else None
    model, report = train_restorer((recon, images), model, cfg.training.restorer, validation)
    if save:
        save_params(checkpoint_path(cfg, "restorer", theta_miss), model.params, model.meta())
    return model, report


def _mu(cfg: RunConfig, recon: np.ndarray, theta_miss: float, mu_source: str) -> np.ndarray:
    if mu_source == "restorer":
        return restore(recon, load_restorer(cfg, theta_miss))
    return recon


def fit_score(
    cfg: RunConfig, theta_miss: float, save: bool = True, mu_source: Optional[str] = None
) -> Tuple[CondDenoiser, TrainingReport]:
    mu_source = mu_source or cfg.sampler.mu_source
    geom = cfg.geometry.build(theta_miss)
    images, recon, _, _ = _train_val(cfg, geom)
    sched = schedule_for(cfg)
    model = CondDenoiser.from_config(sched, cfg.training.score)
    model, report = train_score((images, _mu(cfg, recon, theta_miss, mu_source)), sched, model, cfg.training.score)
    report.metadata["mu_source"] = mu_source
    if save:
        save_params(checkpoint_path(cfg, "score", theta_miss, mu_source), model.params, model.meta())
    return model, report


# Evaluation


@dataclass
class Assets:
    geometry: Geometry
    sched: DiffusionSchedule
    pinv: Optional[LearnablePinv] = None
    score: Optional[CondDenoiser] = None
    restorer: Optional[Restorer] = None


def load_assets(cfg: RunConfig, theta_miss: float, methods, mu_source: Optional[str] = None) -> Assets:
    """Load only what the requested methods need; missing checkpoints raise CheckpointNotFoundException"""
    mu_source = mu_source or cfg.sampler.mu_source
    geom = cfg.geometry.build(theta_miss)
    assets = Assets(geometry=geom, sched=schedule_for(cfg))
    sampled = any(m.startswith("rnsde") for m in methods)
    if "pinv" in methods or sampled:
        assets.pinv = load_pinv(cfg, geom)
    if sampled:
        assets.score = load_score(cfg, theta_miss, mu_source)
        if mu_source == "restorer":
            assets.restorer = load_restorer(cfg, theta_miss)
    return assets


def _metrics(image: np.ndarray, truth: np.ndarray, y: Sinogram, geom: Geometry) -> Tuple[float, float, float]:
    return psnr(image, truth), ssim(image, truth), consistency_error(image, y, geom)


def _mean_finite(values: List[float]) -> float:
    finite = [v for v in values if np.isfinite(v)]
    return float(np.mean(finite)) if finite else float("inf")


def evaluate_item(
    cfg: RunConfig,
    assets: Assets,
    truth: np.ndarray,
    values: np.ndarray,
    recon: np.ndarray,
    methods,
    sampler_cfg=None,
) -> Dict[str, Tuple[float, float, float]]:
    """(psnr, ssim, consistency) per method; sampled methods average over cfg.evaluation.n_runs seeds"""
    geom = assets.geometry
    y = Sinogram(geom, values)
    sampler_cfg = sampler_cfg or cfg.sampler
    mu = restore(recon, assets.restorer) if assets.restorer is not None else recon
    out: Dict[str, Tuple[float, float, float]] = {}
    for method in methods:
        if method == "fbp":
            out[method] = _metrics(recon, truth, y, geom)
        elif method == "tv":
            image = tv_reconstruct(y, geom, cfg.evaluation.lambda_tv, cfg.evaluation.tv_iters).image
            out[method] = _metrics(image, truth, y, geom)
        elif method == "pinv":
            out[method] = _metrics(pinv_apply(y, assets.pinv), truth, y, geom)
        elif method in SAMPLED_METHODS:
            run_cfg = sampler_cfg.model_copy(update={"rectify": method == "rnsde"})
            runs = []
            for run in range(cfg.evaluation.n_runs):
                image, _ = sample(y, mu, assets.score, assets.pinv, assets.sched, run_cfg, seed=run_cfg.seed + run)
                runs.append(_metrics(image, truth, y, geom))
            out[method] = (
                _mean_finite([r[0] for r in runs]),
                float(np.mean([r[1] for r in runs])),
                float(np.mean([r[2] for r in runs])),
            )
        elif method == "rnsde_sa":
            image = sample_average(y, mu, assets.score, assets.pinv, assets.sched, sampler_cfg)
            out[method] = _metrics(image, truth, y, geom)
        else:
            raise ConfigurationException(f"Unknown method: {method}", error_code="UNKNOWN_METHOD")
    return out


def _evaluate_split(cfg: RunConfig, assets: Assets, methods, sampler_cfg=None):
    ids, images, values, recon = _split_arrays(cfg, "test", assets.geometry, cfg.evaluation.max_items)
    if not ids:
        raise DatasetException("Test split is empty", error_code="EMPTY_SPLIT")
    with ThreadPoolExecutor(max_workers=settings.worker_count) as pool:
        results = list(
            pool.map(
                lambda i: evaluate_item(cfg, assets, images[i], values[i], recon[i], methods, sampler_cfg),
                range(len(ids)),
            )
        )
    return ids, results


def _row(method: str, theta: float, results, n_runs: int) -> MetricRow:
    psnrs = [r[method][0] for r in results]
    ssims = [r[method][1] for r in results]
    errors = [r[method][2] for r in results]
    finite = [v for v in psnrs if np.isfinite(v)]
    return MetricRow(
        method=method,
        theta_miss=theta,
        psnr=_mean_finite(psnrs),
        psnr_std=float(np.std(finite)) if finite else 0.0,
        ssim=float(np.mean(ssims)),
        ssim_std=float(np.std(ssims)),
        consistency=float(np.mean(errors)),
        consistency_std=float(np.std(errors)),
        n_items=len(results),
        n_runs=n_runs if method in SAMPLED_METHODS else 1,
        psnr_infinite=len(finite) < len(psnrs),
    )


def run_experiment(cfg: RunConfig) -> MetricReport:
    """
    Evaluate every configured method on the test split for each missing wedge
    in cfg.evaluation.theta_miss_list.

    Raises:
        CheckpointNotFoundException: a method needs a checkpoint that was never trained
    """
    methods = list(cfg.evaluation.methods)
    report = MetricReport(
        experiment=cfg.experiment,
        metadata={
            "methods": methods,
            "n_runs": cfg.evaluation.n_runs,
            "sampler": cfg.sampler.model_dump(mode="json"),
            "schedule": cfg.schedule.model_dump(mode="json"),
        },
    )
    for theta in cfg.evaluation.theta_miss_list:
        assets = load_assets(cfg, theta, methods)
        logger.info("evaluation_started", theta_miss=theta, methods=methods)
        ids, results = _evaluate_split(cfg, assets, methods)
        for method in methods:
            report.rows.append(_row(method, theta, results, cfg.evaluation.n_runs))
            for item_id, result in zip(ids, results):
                p, s, c = result[method]
                report.items.append(
                    ItemMetric(item_id=item_id, method=method, theta_miss=theta, psnr=p, ssim=s, consistency=c)
                )
        logger.info(
            "evaluation_finished",
            theta_miss=theta,
            psnr={row.method: round(row.psnr, 3) for row in report.rows if row.theta_miss == theta},
        )
    return report


# Ablations


def parse_sweep(sweep: str) -> Tuple[str, List]:
    """'T=50,100,200' -> ('T', [50, 100, 200]); 'mu' -> ('mu', [...])"""
    name, sep, raw = sweep.partition("=")
    name = name.strip()
    if name == "mu" and not sep:
        return "mu", [("fbp", True), ("fbp", False), ("restorer", True), ("restorer", False)]
    if name not in ("T", "rescale_alpha", "skip_beta") or not raw:
        raise ConfigurationException(
            f"Unknown sweep: {sweep!r}",
            error_code="BAD_SWEEP",
            details={"supported": ["T=a,b,...", "mu", "rescale_alpha=a,b,...", "skip_beta=a,b,..."]},
        )
    cast = float if name == "rescale_alpha" else int
    try:
        values = [cast(v) for v in raw.split(",") if v.strip()]
    except ValueError:
        raise ConfigurationException(f"Bad sweep values: {raw!r}", error_code="BAD_SWEEP")
    return name, values


def _sweep_variant(cfg: RunConfig, name: str, value) -> RunConfig:
    """Copy of cfg with one sweep value applied, validated like a loaded config"""
    data = cfg.model_dump()
    if name == "T":
        data["schedule"]["T"] = value
        data["sampler"]["T"] = None
    else:
        data["sampler"][name] = value
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigurationException(
            f"Invalid sweep value {name}={value!r}",
            error_code="BAD_SWEEP",
            details={"errors": json.loads(e.json(include_url=False))},
        )


def _ablation_row(setting: Dict, results, method: str) -> AblationRow:
    return AblationRow(
        setting=setting,
        psnr=_mean_finite([r[method][0] for r in results]),
        ssim=float(np.mean([r[method][1] for r in results])),
        consistency=float(np.mean([r[method][2] for r in results])),
    )


def ablate(cfg: RunConfig, sweep: str) -> AblationReport:
    """
    Sweeps at cfg.geometry.theta_miss:
        T=...               retrain the score per T, then sample with rectification
        mu                  mu in {fbp, restorer} x rectification on/off
        rescale_alpha=...   sampler-only, one checkpoint
        skip_beta=...       sampler-only, one checkpoint
    """
    name, values = parse_sweep(sweep)
    variants = {} if name == "mu" else {value: _sweep_variant(cfg, name, value) for value in values}
    theta = cfg.geometry.theta_miss
    report = AblationReport(experiment=cfg.experiment, sweep=sweep, metadata={"theta_miss": theta})
    for value in values:
        if name == "T":
            run_cfg = variants[value]
            score, _ = fit_score(run_cfg, theta, save=False)
            assets = load_assets(run_cfg, theta, ["pinv"])
            assets.sched, assets.score = score.sched, score
            if run_cfg.sampler.mu_source == "restorer":
                assets.restorer = load_restorer(run_cfg, theta)
            _, results = _evaluate_split(run_cfg, assets, ["rnsde"])
            report.rows.append(_ablation_row({"T": value}, results, "rnsde"))
        elif name == "mu":
            mu_source, rectified = value
            method = "rnsde" if rectified else "rnsde_norect"
            assets = load_assets(cfg, theta, [method], mu_source=mu_source)
            _, results = _evaluate_split(cfg, assets, [method])
            report.rows.append(_ablation_row({"mu": mu_source, "rectify": rectified}, results, method))
        else:
            sampler_cfg = variants[value].sampler
            assets = load_assets(cfg, theta, ["rnsde"])
            _, results = _evaluate_split(cfg, assets, ["rnsde"], sampler_cfg)
            report.rows.append(_ablation_row({name: value}, results, "rnsde"))
        logger.info("ablation_row", sweep=name, setting=report.rows[-1].setting, psnr=report.rows[-1].psnr)
    return report
