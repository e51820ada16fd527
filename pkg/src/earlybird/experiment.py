"""Run a configured experiment end to end and write its artifacts.

Output directory layout::

    config.json          effective configuration (reparses to the same config)
    metrics.csv          one row per epoch of every phase
    distances.csv/.bin   pairwise mask distances over the search epochs
    detector.csv         per-epoch distance, window maximum and trigger flag
    checkpoints/         dense_epoch_NNN.ckpt (optional), dense_final.ckpt, final.ckpt
    sweep.csv            one row per sweep value (sweep mode only)
    summary.json         cost report, accuracies, ticket epoch, mask overhead
    run.log              timestamps and wall-clock timings (the only nondeterministic file)

Every artifact except ``run.log`` is byte-identical across repeated runs.
"""

import csv
import dataclasses
import io
import json
import logging
from pathlib import Path

from ._io import atomic_write, fmt_float
from .checkpoint import checkpoint_from_state, load_checkpoint, save_checkpoint, state_from_checkpoint
from .config import ExperimentConfig
from .data import MNIST_FILES, load_splits, write_synthetic_mnist
from .detector import EBDetectionResult, retroactive_detect
from .errors import CheckpointError, ConfigError, InputError
from .pruning import distance_matrix, network_mask
from .train import METRIC_COLUMNS, baseline_lt, eb_search, eb_train, new_phase, run_phase
from .model import build_network

log = logging.getLogger(__name__)

TIMING_KEYS = ("mask_seconds", "mask_time_fraction")


# --------------------------------------------------------------------------
# Artifact writers
# --------------------------------------------------------------------------

def _cell(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return fmt_float(v)
    return str(v)


def metrics_csv(rows, columns=METRIC_COLUMNS):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_cell(r.get(c)) for c in columns])
    return buf.getvalue()


SWEEP_COLUMNS = ("over", "value", "ticket_epoch", "fallback", "dense_accuracy",
                 "pruned_accuracy_before_retrain", "final_accuracy", "total_flops")


def sweep_csv(results):
    rows = [dict(r, over=r["sweep"]["over"], value=r["sweep"]["value"], total_flops=r["cost"]["total_flops"])
            for r in results]
    return metrics_csv(rows, SWEEP_COLUMNS)


def _json(obj):
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n"


def _split_timing(summary):
    """Move wall-clock fields out of a report summary so the rest stays deterministic."""
    summary = dict(summary)
    overhead = dict(summary.get("overhead", {}))
    timing = {k: overhead.pop(k) for k in TIMING_KEYS if k in overhead}
    summary["overhead"] = overhead
    return summary, timing


DETECTOR_COLUMNS = ("epoch", "distance", "max_window", "triggered")


def detector_csv(detector):
    rows = [dict(zip(DETECTOR_COLUMNS, h)) for h in detector.history]
    return metrics_csv(rows, DETECTOR_COLUMNS)


def _write_distances(out, masks, detector=None):
    if detector is not None:
        atomic_write(out / "detector.csv", detector_csv(detector))
    if len(masks) < 2:
        log.warning("fewer than two masks recorded; no distance matrix written")
        return None
    dm = distance_matrix(masks)
    dm.save(out / "distances.csv", out / "distances.bin")
    return dm


# --------------------------------------------------------------------------
# Inputs
# --------------------------------------------------------------------------

def prepare_data(cfg):
    ds = cfg.dataset
    root = Path(ds.root)
    if ds.synthesize and not all((root / f).exists() for f in MNIST_FILES["train"] + MNIST_FILES["test"]):
        log.info("rendering stand-in digits into %s", root)
        write_synthetic_mnist(root, n_train=ds.subset or 10000, n_test=ds.test_subset or 2000, seed=cfg.train.data_seed)
    return load_splits(root, ds.format, ds.subset, ds.test_subset, ds.val_fraction)


def _resume_state(cfg, path):
    ckpt = load_checkpoint(path)
    saved = ckpt.extra.get("config", {})
    if ckpt.extra.get("phase") != "dense":
        raise CheckpointError(f"{path}: only dense-phase checkpoints can be resumed (got {ckpt.extra.get('phase')!r})")
    if ckpt.spec != cfg.network_spec():
        raise ConfigError(f"{path}: checkpoint network differs from the configured network")
    if saved != cfg.train.to_dict():
        raise ConfigError(f"{path}: checkpoint was written with a different train section")
    return state_from_checkpoint(ckpt)


# --------------------------------------------------------------------------
# Modes
# --------------------------------------------------------------------------

class _Run:
    def __init__(self, cfg, out):
        self.cfg = cfg
        self.out = out
        self.ckpt_dir = out / "checkpoints"

    def on_epoch(self, state):
        if self.cfg.checkpoint_every_epoch:
            save_checkpoint(self.ckpt_dir / f"{state.phase}_epoch_{state.epoch:03d}.ckpt",
                            checkpoint_from_state(state, self.cfg.train))
        log.info("%s epoch %d done (train %.1fs cumulative)", state.phase, state.epoch, state.train_seconds)

    def save_final(self, dense, retrain):
        save_checkpoint(self.ckpt_dir / "dense_final.ckpt", checkpoint_from_state(dense, self.cfg.train))
        if retrain is not None:
            save_checkpoint(self.ckpt_dir / "final.ckpt", checkpoint_from_state(retrain, self.cfg.train))

    def dense_state(self, resume, precision):
        cfg = self.cfg
        if resume is not None:
            state = _resume_state(cfg, resume)
            log.info("resumed dense phase at epoch %d from %s", state.epoch, resume)
            return state
        return new_phase("dense", build_network(cfg.network_spec(), cfg.train.seed), cfg.train,
                         cfg.train.search_epochs, precision, detector=True)


def _run_eb_train(run, splits, resume):
    cfg = run.cfg
    state = run.dense_state(resume, cfg.train.precision)
    search = eb_search(splits, cfg.network_spec(), cfg.train, state, run.on_epoch, stop_on_trigger=True)
    report = eb_train(splits, cfg.network_spec(), cfg.train, search=search)
    run.save_final(search[1], report.retrain)
    _write_distances(run.out, search[1].masks, search[1].detector)
    return report.metrics, [report.summary()]


def _run_baseline(run, splits, resume):
    cfg = run.cfg
    state = run.dense_state(resume, "fp32")
    run_phase(state, splits, cfg.train, run.on_epoch)
    report = baseline_lt(splits, cfg.network_spec(), cfg.train, dense=state)
    run.save_final(state, report.retrain)
    _write_distances(run.out, state.masks, state.detector)
    return report.metrics, [report.summary()]


def _run_sweep(run, splits, resume):
    """One dense trajectory, then one retrain per sweep value.

    ``over="p"`` re-detects the ticket at each pruning ratio from per-epoch
    snapshots; ``over="draw_epoch"`` draws the ticket at fixed epochs.
    """
    cfg = run.cfg
    state = run.dense_state(resume, cfg.train.precision)
    snaps = {}

    def keep(s):
        snaps[s.epoch] = s.network.copy()
        run.on_epoch(s)

    run_phase(state, splits, cfg.train, keep)
    missing = [e for e in range(1, state.epoch + 1) if e not in snaps]
    if missing:
        raise CheckpointError(f"sweep resumed without snapshots for epochs {missing}; rerun without --resume")
    run.save_final(state, None)
    _write_distances(run.out, state.masks, state.detector)

    rows, summaries = list(state.metrics), []
    for value in cfg.sweep.values:
        if cfg.sweep.over == "p":
            tc = dataclasses.replace(cfg.train, p=float(value))
            masks = [network_mask(snaps[e], tc.p, e) for e in sorted(snaps)]
            result = retroactive_detect(masks, tc.window, tc.epsilon)
            if not result.triggered:
                result = EBDetectionResult(False, masks[-1].source_epoch, masks[-1], fallback=True)
        else:
            tc = cfg.train
            e = int(value)
            result = EBDetectionResult(False, e, network_mask(snaps[e], tc.p, e))
        result.network = snaps[result.epoch]
        report = eb_train(splits, cfg.network_spec(), tc, search=(result, state))
        tag = f"{cfg.sweep.over}={value}"
        rows += [dict(r, phase=f"{r['phase']}[{tag}]") for r in report.retrain.metrics]
        summaries.append(dict(report.summary(), sweep={"over": cfg.sweep.over, "value": value}))
    return rows, summaries


def run_distances(ckpt_dir, p, out=None, epsilon=0.1, window=5, normalize="per-pair"):
    """Offline distance matrix over the dense-phase checkpoints in ``ckpt_dir``."""
    ckpt_dir = Path(ckpt_dir)
    out = Path(out) if out is not None else ckpt_dir
    files = sorted(ckpt_dir.glob("*.ckpt"))
    by_epoch = {}
    for f in files:
        ckpt = load_checkpoint(f)
        if ckpt.extra.get("phase", "dense") != "dense":
            continue
        by_epoch.setdefault(ckpt.epoch, ckpt)
    if len(by_epoch) < 2:
        raise InputError(f"need at least two dense checkpoints in {ckpt_dir}, found {len(by_epoch)}")
    epochs = sorted(by_epoch)
    masks = [network_mask(by_epoch[e].network(), p, e) for e in epochs]
    dm = distance_matrix(masks, normalize)
    dm.save(out / "distances.csv", out / "distances.bin")
    result = retroactive_detect(masks, window, epsilon)
    summary = {
        "epochs": epochs,
        "p": p,
        "normalize": normalize,
        "epsilon": epsilon,
        "window": window,
        "triggered": result.triggered,
        "ticket_epoch": result.epoch,
        "consecutive": [float(dm.values[i, i + 1]) for i in range(len(epochs) - 1)],
    }
    atomic_write(out / "distances.json", _json(summary))
    return dm, summary


MODES = {"eb-train": _run_eb_train, "baseline": _run_baseline, "sweep": _run_sweep}


def run_experiment(cfg: ExperimentConfig, resume=None):
    """Execute ``cfg`` and write its artifacts; returns the summary document."""
    resume = resume or cfg.resume_from
    out = cfg.output_path()
    out.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(out / "run.log", mode="a", encoding="utf-8")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    pkg_log = logging.getLogger("earlybird")
    pkg_log.addHandler(handler)
    if pkg_log.level == logging.NOTSET or pkg_log.level > logging.INFO:
        pkg_log.setLevel(logging.INFO)
    try:
        atomic_write(out / "config.json", cfg.dumps())
        if cfg.mode == "distances":
            d = cfg.distances
            _, result = run_distances(d.ckpt_dir, d.p, out, cfg.train.epsilon, cfg.train.window, d.normalize)
            summary = {"mode": cfg.mode, "config": cfg.to_dict(), "distances": result}
        else:
            splits = prepare_data(cfg)
            rows, results = MODES[cfg.mode](_Run(cfg, out), splits, resume)
            atomic_write(out / "metrics.csv", metrics_csv(rows))
            clean = []
            for r in results:
                r, timing = _split_timing(r)
                if timing:
                    log.info("mask overhead timing: %s", timing)
                clean.append(r)
            summary = {"mode": cfg.mode, "config": cfg.to_dict(), "results": clean}
            if cfg.mode == "sweep":
                atomic_write(out / "sweep.csv", sweep_csv(clean))
        atomic_write(out / "summary.json", _json(summary))
        log.info("artifacts written to %s", out)
        return summary
    finally:
        pkg_log.removeHandler(handler)
        handler.close()
