from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from bioslim.bench import BenchRow, LatencyStats, Mode, bench_workload, measure_energy, tiled_workload, time_run
from bioslim.config import logger, settings
from bioslim.datagen import generate, load_dataset, write_dataset
from bioslim.errors import ConfigError
from bioslim.executor import fit_window
from bioslim.graph import (
    Graph,
    ensure_valid,
    fold_batchnorm,
    load_model,
    param_count,
    save_model,
    serialize_model,
    weight_bytes,
    with_input_extents,
)
from bioslim.metrics import score
from bioslim.models import RunConfig, load_config
from bioslim.pruner import apply_prune, make_plan, predict_param_count, sweep
from bioslim.quantizer import calibrate, convert_int8
from bioslim.report import BenchReport, make_report
from bioslim.tensor import DType, Tensor, save_tensor
from bioslim.trainer import finetune
from bioslim.utils import read_json, sha256_bytes, sha256_file, timed, write_json
from bioslim.zoo import build_model

MODEL_FILE = "model.ebm"
MANIFEST_FILE = "manifest.json"
CURVE_FILE = "training_curve.csv"
ROWS_FILE = "bench_rows.json"

Pair = Tuple[Tensor, Tensor]


def _out_dir(out: Optional[str], cfg: RunConfig, fallback: Optional[Path] = None) -> Path:
    target = out or cfg.output or fallback
    if target is None:
        raise ConfigError(["output: no output directory given (--out or 'output')"])
    path = Path(target)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _stage(name: str, g: Graph, **extra) -> Dict[str, Any]:
    record = {"stage": name, "params": param_count(g), "weight_bytes": weight_bytes(g), "sha256": sha256_bytes(serialize_model(g))}
    record.update(extra)
    return record


def write_manifest(out: Path, command: str, cfg: RunConfig, inputs: Dict[str, str], **extra) -> Path:
    manifest = {
        "tool_version": settings.tool_version,
        "command": command,
        "mode": cfg.mode.value,
        "seed": cfg.seed,
        "config": cfg.model_dump(mode="json"),
        "inputs": {name: {"path": path, "sha256": sha256_file(path)} for name, path in inputs.items() if Path(path).is_file()},
    }
    manifest.update(extra)
    return write_json(out / MANIFEST_FILE, manifest)


def _samples(path: str, what: str) -> List[Pair]:
    try:
        pairs, _ = load_dataset(path)
    except FileNotFoundError as e:
        raise ConfigError([f"{what}: {e}"]) from None
    return pairs


def _training_pairs(pairs: Sequence[Pair]) -> List[Pair]:
    # instance label maps train as foreground probability
    return [(x, Tensor((y.array > 0).astype(np.float32)) if y.dtype is DType.I32 else y) for x, y in pairs]


def _tiled(g: Graph, pairs: Sequence[Pair], window, overlap: float, max_workers: int = 1) -> Callable[[], List[Tensor]]:
    spatial = pairs[0][0].shape[2:]
    if window is not None and len(window) != len(spatial):
        raise ConfigError([f"window: {len(window)} extents for a {len(spatial)}-D image"])
    return tiled_workload(g, [x for x, _ in pairs], window, overlap, max_workers=max_workers)


def _accuracy(cfg: RunConfig, predictions: Sequence[Tensor], pairs: Sequence[Pair]) -> float:
    scores = [score(cfg.metric.name, p, target, cfg.metric.threshold) for p, (_, target) in zip(predictions, pairs)]
    return float(np.mean(scores))


def _redeclared(g: Graph, x: Tensor) -> Graph:
    (name,) = g.inputs
    if list(g.inputs[name][2:]) == list(x.shape[2:]):
        return g
    return with_input_extents(g, x.shape[2:])


@timed
def cmd_compress(config_path, out: Optional[str] = None) -> Path:
    cfg = load_config(config_path).require("model")
    out_dir = _out_dir(out, cfg)
    g = ensure_valid(load_model(cfg.model))
    stages = [_stage("load", g)]
    logger.info("📦 compress started", model=cfg.model, mode=cfg.mode.value)

    if cfg.mode is not Mode.FP32:
        g = fold_batchnorm(g)
        stages.append(_stage("fold_batchnorm", g))

    if cfg.mode in (Mode.PRUNE, Mode.PRUNE_INT8):
        prune = cfg.prune
        plan = make_plan(g, prune.criterion, prune.sparsity)
        predicted = predict_param_count(g, plan)
        before = param_count(g)
        g = apply_prune(g, plan)
        stages.append(_stage("prune", g, params_before=before, predicted_params=predicted, criterion=prune.criterion.value, sparsity=prune.sparsity))

        if prune.finetune is not None and prune.sparsity > 0:
            if prune.train_data is None:
                raise ConfigError(["prune.train_data: required when prune.finetune is set"])
            result = finetune(g, _training_pairs(_samples(prune.train_data, "prune.train_data")), prune.loss, prune.finetune)
            g = result.graph
            result.curve().to_csv(out_dir / CURVE_FILE, index=False)
            stages.append(_stage("finetune", g, epochs=prune.finetune.epochs, final_loss=result.losses[-1]))

    if cfg.mode in (Mode.INT8, Mode.PRUNE_INT8):
        quant = cfg.quant
        pairs = _samples(quant.calib_data, "quant.calib_data")
        rng = np.random.default_rng(cfg.seed)
        chosen = sorted(rng.choice(len(pairs), size=min(quant.calib_samples, len(pairs)), replace=False))
        samples = [pairs[i][0] for i in chosen]
        # activation statistics do not depend on the declared tile size
        params = calibrate(_redeclared(g, samples[0]), samples, quant.observer_kind())
        g = convert_int8(g, params)
        stages.append(_stage("quantize", g, calib_samples=[int(i) for i in chosen], observer=quant.observer.value))

    size = save_model(g, out_dir / MODEL_FILE)
    write_manifest(
        out_dir,
        "compress",
        cfg,
        {"model": cfg.model},
        stages=stages,
        params_before=stages[0]["params"],
        params_after=param_count(g),
        output={"path": str(out_dir / MODEL_FILE), "bytes": size, "sha256": sha256_file(out_dir / MODEL_FILE)},
    )
    logger.info("✅ compress finished", out_dir=str(out_dir), bytes=size, params=param_count(g))
    return out_dir


def _append_rows(out_dir: Path, rows: List[BenchRow]) -> BenchReport:
    existing = []
    if (out_dir / ROWS_FILE).is_file():
        existing = [BenchRow.model_validate(item) for item in read_json(out_dir / ROWS_FILE)]
    report = make_report(existing + rows)
    report.write(out_dir)
    return report


@timed
def cmd_infer(config_path, out: Optional[str] = None) -> Dict[str, Any]:
    cfg = load_config(config_path).require("model", "infer")
    infer = cfg.infer
    out_dir = _out_dir(out, cfg, fallback=Path(cfg.model).parent)
    g = load_model(cfg.model)
    pairs = _samples(infer.data, "infer.data")

    predict = _tiled(g, pairs, infer.window, infer.overlap, infer.max_workers)
    predictions: List[Tensor] = []
    stats: List[LatencyStats] = []

    def workload():
        predictions[:] = predict()

    energy = measure_energy(lambda: stats.append(time_run(workload, runs=1, warmup=0)), cfg.energy)

    pred_dir = out_dir / "predictions"
    pred_dir.mkdir(exist_ok=True)
    for i, prediction in enumerate(predictions):
        save_tensor(pred_dir / f"sample_{i:03d}_pred.ebt", prediction)

    accuracy = _accuracy(cfg, predictions, pairs)
    row = BenchRow(
        task=infer.task,
        mode=cfg.mode,
        hardware=infer.hardware,
        latency=stats[0],
        energy=energy,
        accuracy=accuracy,
        accuracy_metric=cfg.metric.name.value,
        image_shape=list(pairs[0][0].shape),
        model_bytes=Path(cfg.model).stat().st_size,
    )
    report = _append_rows(out_dir, [row])
    window = list(fit_window(g, pairs[0][0].shape[2:], infer.window)[1])
    write_manifest(
        out_dir,
        "infer",
        cfg,
        {"model": cfg.model},
        window=window,
        overlap=infer.overlap,
        samples=len(pairs),
        accuracy=accuracy,
    )
    logger.info("✅ inference finished", samples=len(pairs), accuracy=round(accuracy, 4), joules=energy.joules)
    return {"predictions": pred_dir, "accuracy": accuracy, "row": row, "report": report}


def recommend(table: pd.DataFrame, min_params_reduction: float) -> Optional[Dict[str, Any]]:
    """Smallest accuracy drop among pruned cells that cut at least the given parameter fraction."""
    baseline = table.attrs["baseline"]
    candidates = table[(table["ratio"] > 0) & (1 - table["params"] / baseline["params"] >= min_params_reduction)]
    if candidates.empty:
        return None
    drops = baseline["accuracy"] - candidates["accuracy"]
    # idxmin keeps the first row on ties, i.e. criteria order then lower ratio
    best = candidates.loc[drops.idxmin()]
    return {
        "criterion": best["criterion"],
        "ratio": float(best["ratio"]),
        "accuracy": float(best["accuracy"]),
        "accuracy_drop": float(drops.min()),
        "params_reduction": float(1 - best["params"] / baseline["params"]),
    }


def _sweep_summary(table: pd.DataFrame, best: Optional[Dict[str, Any]], floor: float) -> str:
    baseline = table.attrs["baseline"]
    lines = [
        f"baseline accuracy {baseline['accuracy']:.4f}, params {baseline['params']}, flops {baseline['flops']}",
        "",
        table.to_string(index=False),
        "",
    ]
    if best is None:
        lines.append(f"no pruned configuration reaches a {floor:.0%} parameter reduction")
    else:
        lines.append(
            f"recommended: {best['criterion']} at ratio {best['ratio']:g} "
            f"(accuracy drop {best['accuracy_drop']:.4f}, params -{best['params_reduction']:.1%})"
        )
    return "\n".join(lines) + "\n"


@timed
def cmd_sweep(config_path, out: Optional[str] = None) -> pd.DataFrame:
    cfg = load_config(config_path).require("model", "sweep")
    spec = cfg.sweep
    out_dir = _out_dir(out, cfg)
    eval_data = _samples(spec.eval_data, "sweep.eval_data")
    train_data = _training_pairs(_samples(spec.train_data, "sweep.train_data") if spec.train_data else eval_data)
    g = _redeclared(fold_batchnorm(load_model(cfg.model)), eval_data[0][0])

    def metric(pred, target):
        return score(cfg.metric.name, pred, target, cfg.metric.threshold)

    table = sweep(g, eval_data, spec.criteria, spec.ratios, spec.finetune, train_data, metric, spec.loss)
    table.to_csv(out_dir / "sweep.csv", index=False)
    best = recommend(table, spec.min_params_reduction)
    (out_dir / "sweep_summary.txt").write_text(_sweep_summary(table, best, spec.min_params_reduction))
    write_manifest(out_dir, "sweep", cfg, {"model": cfg.model}, baseline=table.attrs["baseline"], recommendation=best)
    logger.info("✅ sweep finished", cells=len(table), recommendation=best)
    return table


@timed
def cmd_bench(config_path, out: Optional[str] = None) -> BenchReport:
    cfg = load_config(config_path).require("bench")
    spec = cfg.bench
    out_dir = _out_dir(out, cfg)
    pairs = _samples(spec.data, "bench.data")

    rows = []
    for entry in spec.entries:
        g = load_model(entry.model)
        workload = _tiled(g, pairs, spec.window, spec.overlap)
        accuracy = _accuracy(cfg, workload(), pairs)
        latency, energy = bench_workload(workload, spec.runs, spec.warmup, cfg.energy)
        rows.append(
            BenchRow(
                task=spec.task,
                mode=entry.mode,
                hardware=spec.hardware,
                latency=latency,
                energy=energy,
                accuracy=accuracy,
                accuracy_metric=cfg.metric.name.value,
                image_shape=list(pairs[0][0].shape),
                model_bytes=Path(entry.model).stat().st_size,
            )
        )
        logger.info("bench entry", mode=entry.mode.value, latency_s=round(latency.mean_s, 4), joules=energy.joules)

    report = make_report(rows)
    report.write(out_dir)
    write_manifest(out_dir, "bench", cfg, {f"model_{i}": e.model for i, e in enumerate(spec.entries)}, runs=spec.runs, warmup=spec.warmup)
    return report


@timed
def cmd_datagen(config_path, out: Optional[str] = None) -> Path:
    cfg = load_config(config_path).require("datagen")
    out_dir = _out_dir(out, cfg)
    files = {}
    for dataset in cfg.datagen.datasets:
        target = write_dataset(out_dir / dataset.name, generate(dataset.spec, dataset.count), dataset.spec)
        for path in sorted(target.iterdir()):
            files[str(path.relative_to(out_dir))] = sha256_file(path)
    write_manifest(out_dir, "datagen", cfg, {}, files=files)
    return out_dir


@timed
def cmd_train(config_path, out: Optional[str] = None) -> Path:
    cfg = load_config(config_path).require("train")
    spec = cfg.train
    out_dir = _out_dir(out, cfg)
    pairs = _training_pairs(_samples(spec.data, "train.data"))
    x, y = pairs[0]
    spatial, in_channels, out_channels = x.shape[2:], x.shape[1], y.shape[1]

    g = build_model(spec.arch, spatial, in_channels, out_channels, spec.base, spec.depth, spec.batchnorm, spec.final_activation, seed=cfg.seed)

    result = finetune(g, pairs, spec.loss, spec.sgd)
    save_model(result.graph, out_dir / MODEL_FILE)
    result.curve().to_csv(out_dir / CURVE_FILE, index=False)
    write_manifest(out_dir, "train", cfg, {}, stages=[_stage("train", result.graph, final_loss=result.losses[-1])])
    return out_dir
