"""Multi-round self-play: freeze a reference, sweep, select, promote.

Each round trains one fresh copy of the reference per grid point, scores
the EMA weights every ``eval_every`` steps, and promotes the best scoring
snapshot over all grid points and eval steps to be the next reference.
Grid points are independent; with ``jobs > 1`` they run in worker
processes and return their snapshots to the orchestrator, which alone
writes files.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import Dataset
from .ddo import DdoHyperParams
from .grad import GradError
from .metrics import SupportError
from .models import Model, load_model, save_model
from .train import Adam, DivergenceError, EmaState, Task, ema_update, gradient_step, warmup_lr

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("round", "grid_index", "step", "loss", "metric", "wallclock")

# beta scaled for 2-D data; see the README section on the diffusion toy
DIFFUSION_GRID = [DdoHyperParams(a, b) for a in (0.5, 1.0) for b in (0.5, 1.0, 2.0)]
AR_GRID = [DdoHyperParams(a, 1.0) for a in (1.0, 0.5, 2.0)]
CATEGORICAL_GRID = [DdoHyperParams(1.0, 1.0)]


class RoundAborted(RuntimeError):
    """Every grid point of a round diverged."""


@dataclass
class RoundConfig:
    steps: int = 2000
    batch: int = 256
    lr: float = 1e-4
    warmup: float = 0.1
    eval_every: int = 50
    ema_half_life: float | None = None  # examples; default 10% of the round
    cache_size: int = 50_000
    class_balance: bool = True
    online_ref: bool = False
    seed: int = 0
    jobs: int = 1
    record_wallclock: bool = False

    @property
    def half_life(self) -> float:
        return self.ema_half_life or 0.1 * self.steps * self.batch


@dataclass
class RoundState:
    round_index: int
    reference: Model
    sweep_grid: list[DdoHyperParams]
    reference_ckpt: str | None = None
    ref_sample_cache: Dataset | None = None
    winner: dict | None = None
    metrics_log: list[dict] = field(default_factory=list)


# -- reference cache ---------------------------------------------------------------------------

def generate_reference_cache(reference: Model, n_samples: int, class_balance: bool,
                             rng: np.random.Generator) -> Dataset:
    """Offline sample set from the frozen reference.

    Class-conditional references get exactly ``n_samples / classes`` samples
    per class when ``class_balance`` is set.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    C = getattr(reference, "class_count", 0)
    labels = None
    if C:
        if class_balance:
            if n_samples % C:
                raise ValueError(f"n_samples={n_samples} is not divisible by {C} classes")
            labels = np.repeat(np.arange(C), n_samples // C)
        else:
            labels = rng.integers(0, C, size=n_samples)
        items = reference.sample(rng, n_samples, labels)
    else:
        items = reference.sample(rng, n_samples)
    prov = {"generator": "reference_cache", "reference": reference.fingerprint(),
            "n_samples": n_samples, "class_balance": bool(class_balance)}
    return Dataset(items, labels, prov)


# -- training one grid point -------------------------------------------------------------------

@dataclass
class _Snapshot:
    step: int
    loss: float
    metric: float
    params: dict | None


def _train_grid_point(task: Task, reference: Model, hp: DdoHyperParams, cfg: RoundConfig,
                      cache: Dataset | None, round_index: int, grid_index: int):
    rng = np.random.default_rng([cfg.seed, round_index, grid_index])
    target = reference.clone()
    opt = Adam(target.params, cfg.lr)
    ema = EmaState.of(target, cfg.half_life)
    snaps: list[_Snapshot] = []
    t0 = time.perf_counter()
    try:
        for step in range(cfg.steps):
            loss = gradient_step(
                target, lambda P: task.ddo_loss(target, reference, P, rng, cfg.batch, hp, cache),
                opt, warmup_lr(cfg.lr, step, cfg.steps, cfg.warmup))
            ema = ema_update(ema, target.params, cfg.batch)
            if (step + 1) % cfg.eval_every == 0 or step + 1 == cfg.steps:
                evaluated = target.clone()
                evaluated.set_params(ema.shadow)
                snaps.append(_Snapshot(step + 1, loss, task.metric(evaluated),
                                       {k: v.copy() for k, v in ema.shadow.items()}))
    except (DivergenceError, GradError, FloatingPointError, SupportError) as exc:
        # a model that collapsed onto part of the support counts as diverged
        log.warning("round %d grid %d diverged: %s", round_index, grid_index, exc)
        snaps.append(_Snapshot(-1, math.nan, math.nan, None))
    return grid_index, snaps, time.perf_counter() - t0


def _run_grid(task, state: RoundState, cfg: RoundConfig, cache):
    args = [(task, state.reference, hp, cfg, cache, state.round_index, i)
            for i, hp in enumerate(state.sweep_grid)]
    if cfg.jobs > 1:
        with ProcessPoolExecutor(cfg.jobs) as pool:
            results = list(pool.map(_train_grid_point, *zip(*args)))
    else:
        results = [_train_grid_point(*a) for a in args]
    return sorted(results, key=lambda r: r[0])


# -- selection -----------------------------------------------------------------------------------

def select_winner(records: list[dict]) -> dict:
    """Lowest finite metric; ties go to the earliest (grid_index, step)."""
    valid = [r for r in records if r["metric"] is not None and math.isfinite(float(r["metric"]))
             and int(r["step"]) > 0]
    if not valid:
        raise RoundAborted("no finite evaluation in the metrics log")
    return min(valid, key=lambda r: (float(r["metric"]), int(r["grid_index"]), int(r["step"])))


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["round"], r["grid_index"], r["step"] = int(r["round"]), int(r["grid_index"]), int(r["step"])
        r["loss"], r["metric"] = float(r["loss"]), float(r["metric"])
    return rows


def _format_metrics(records: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for r in records:
        wall = "" if r["wallclock"] is None else f"{r['wallclock']:.3f}"
        w.writerow([r["round"], r["grid_index"], r["step"], repr(float(r["loss"])),
                    repr(float(r["metric"])), wall])
    return buf.getvalue()


# -- a round ---------------------------------------------------------------------------------------

def run_round(state: RoundState, task: Task, cfg: RoundConfig, out_dir=None) -> RoundState:
    """Sweep the grid against the frozen reference and promote the winner.

    Returns the next round's state. ``state.winner`` and
    ``state.metrics_log`` are filled in place for the finished round.
    """
    if not state.sweep_grid:
        raise ValueError("empty sweep grid")
    ref_id = state.reference.fingerprint()
    n = state.round_index
    rdir = None if out_dir is None else Path(out_dir) / "rounds" / str(n)
    cache = state.ref_sample_cache
    if cache is None and not cfg.online_ref:
        cache = generate_reference_cache(state.reference, cfg.cache_size, cfg.class_balance,
                                         np.random.default_rng([cfg.seed, n, 10 ** 6]))
        state.ref_sample_cache = cache

    results = _run_grid(task, state, cfg, cache)
    if state.reference.fingerprint() != ref_id:
        raise RuntimeError("reference parameters changed during the round")

    records, snapshots = [], {}
    for gi, snaps, elapsed in results:
        for s in snaps:
            records.append({"round": n, "grid_index": gi, "step": s.step, "loss": s.loss,
                            "metric": s.metric,
                            "wallclock": elapsed if cfg.record_wallclock else None})
            if s.params is not None:
                snapshots[(gi, s.step)] = s.params
    state.metrics_log = records
    try:
        best = select_winner(records)
    except RoundAborted:
        if rdir is not None:
            rdir.mkdir(parents=True, exist_ok=True)
            (rdir / "metrics.csv").write_text(_format_metrics(records))
        raise RoundAborted(f"round {n}: every grid point diverged") from None

    winner_model = state.reference.clone()
    winner_model.set_params(snapshots[(best["grid_index"], best["step"])])
    ckpt = None
    if rdir is not None:
        rdir.mkdir(parents=True, exist_ok=True)
        for (gi, step), params in sorted(snapshots.items()):
            m = state.reference.clone()
            m.set_params(params)
            p = save_model(rdir / f"grid_{gi}" / f"ckpt_{step:06d}.ddo", m, cfg.seed, n,
                           extra={"hp": asdict(state.sweep_grid[gi]), "step": step})
            if (gi, step) == (best["grid_index"], best["step"]):
                ckpt = str(p.relative_to(out_dir))
        (rdir / "metrics.csv").write_text(_format_metrics(records))
        (rdir / "winner.json").write_text(json.dumps(
            {"grid_index": best["grid_index"], "step": best["step"], "metric": best["metric"],
             "checkpoint": ckpt, "hp": asdict(state.sweep_grid[best["grid_index"]]),
             "winner_id": winner_model.fingerprint(), "reference_id": ref_id},
            indent=2, sort_keys=True) + "\n")
    state.winner = {"grid_index": best["grid_index"], "step": best["step"],
                    "metric": best["metric"], "checkpoint": ckpt,
                    "winner_id": winner_model.fingerprint(), "reference_id": ref_id}
    return RoundState(n + 1, winner_model, list(state.sweep_grid), reference_ckpt=ckpt)


# -- lineage ----------------------------------------------------------------------------------------

def write_lineage(out_dir, entries: list[dict]) -> Path:
    path = Path(out_dir) / "lineage.json"
    path.write_text(json.dumps({"rounds": entries}, indent=2, sort_keys=True) + "\n")
    return path


def validate_lineage(out_dir) -> bool:
    """Check that each round's winner is the next round's reference, on disk."""
    out_dir = Path(out_dir)
    rounds = json.loads((out_dir / "lineage.json").read_text())["rounds"]
    for prev, cur in zip(rounds, rounds[1:]):
        if prev["winner_id"] != cur["reference_id"]:
            return False
    for r in rounds:
        win = json.loads((out_dir / "rounds" / str(r["round"]) / "winner.json").read_text())
        if win["winner_id"] != r["winner_id"] or win["reference_id"] != r["reference_id"]:
            return False
        if win["checkpoint"] is not None:
            model, _ = load_model(out_dir / win["checkpoint"])
            if model.fingerprint() != r["winner_id"]:
                return False
        rows = read_metrics_csv(out_dir / "rounds" / str(r["round"]) / "metrics.csv")
        best = select_winner(rows)
        if (best["grid_index"], best["step"]) != (win["grid_index"], win["step"]):
            return False
    return True


def run_selfplay(reference: Model, task: Task, grid: list[DdoHyperParams], cfg: RoundConfig,
                 rounds: int, out_dir=None, min_rel_improvement: float | None = None,
                 reference_ckpt: str | None = None) -> tuple[Model, list[dict]]:
    """Run ``rounds`` rounds (stopping early when relative improvement is small)."""
    state = RoundState(1, reference, list(grid), reference_ckpt=reference_ckpt)
    lineage, prev_metric = [], None
    for _ in range(rounds):
        ref_ckpt = state.reference_ckpt
        finished = state
        state = run_round(state, task, cfg, out_dir)
        w = finished.winner
        lineage.append({"round": finished.round_index, "reference_id": w["reference_id"],
                        "reference_checkpoint": ref_ckpt, "winner_id": w["winner_id"],
                        "winner_checkpoint": w["checkpoint"], "metric": w["metric"],
                        "grid_index": w["grid_index"], "step": w["step"]})
        if out_dir is not None:
            write_lineage(out_dir, lineage)
        if min_rel_improvement is not None and prev_metric is not None:
            if (prev_metric - w["metric"]) / max(abs(prev_metric), 1e-300) < min_rel_improvement:
                break
        prev_metric = w["metric"]
    return state.reference, lineage
