"""Config-driven pipeline: build targets and models, pretrain, finetune, evaluate.

Output directory layout::

    config.toml              resolved configuration
    dataset.ddo              training set (container, re-loadable)
    pretrain/ckpt.ddo        MLE checkpoint
    pretrain/metrics.csv     step, loss
    baseline.json            metric of the round-1 reference
    rounds/<n>/...           see ``selfplay``
    lineage.json
    summary.json             baseline vs final on the independent final eval
"""
from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig, dump_config
from .data import (
    Dataset,
    make_categorical_dataset,
    make_gmm2d,
    make_markov_dataset,
)
from .ddo import DdoHyperParams
from .metrics import GridSpec, cell_masses, histogram
from .models import (
    ARModel,
    CategoricalDistribution,
    CategoricalModel,
    DiffusionModel,
    Model,
    NoiseSchedule,
    load_model,
    save_model,
)
from .selfplay import AR_GRID, CATEGORICAL_GRID, DIFFUSION_GRID, RoundConfig, run_selfplay, validate_lineage
from .train import ARTask, CategoricalTask, DiffusionTask, Task, pretrain

log = logging.getLogger(__name__)


# -- builders ---------------------------------------------------------------------------------

def build_target(cfg: ExperimentConfig):
    """Training set and the exact target it was drawn from."""
    d = cfg.dataset
    if d.kind == "categorical":
        if d.probs:
            probs = d.probs
        else:
            rng = np.random.default_rng([d.seed, 7])
            probs = CategoricalDistribution.random(rng, cfg.model.K, d.floor).probs
        if len(probs) != cfg.model.K:
            raise ConfigError(f"dataset.probs has {len(probs)} entries, model.K = {cfg.model.K}")
        return make_categorical_dataset(probs, d.n_samples, d.seed)
    if d.kind == "markov":
        T = np.array(d.transition) if d.transition else None
        init = np.array(d.initial) if d.initial else None
        return make_markov_dataset(cfg.model.vocab_size, cfg.model.seq_len, T, d.n_samples, d.seed, init)
    if d.weights:
        return make_gmm2d(None, d.weights, d.means, d.covs, d.n_samples, d.seed)
    return make_gmm2d(None, n_samples=d.n_samples, seed=d.seed)


def build_model(cfg: ExperimentConfig) -> Model:
    m, p = cfg.model, cfg.pretrain
    if m.kind == "categorical":
        return CategoricalModel(np.zeros(m.K))
    if m.kind == "ar":
        if m.class_count:
            raise ConfigError("the Markov dataset is unlabeled; model.class_count must be 0")
        return ARModel(m.vocab_size, m.seq_len, 0, m.hidden, seed=cfg.seed)
    schedule = NoiseSchedule(P_mean=p.P_mean, P_std=p.P_std, sigma_data=m.sigma_data)
    return DiffusionModel(2, m.class_count, m.hidden, m.depth, schedule, seed=cfg.seed)


def build_task(cfg: ExperimentConfig, dataset: Dataset, target) -> Task:
    e = cfg.eval
    if cfg.model.kind == "categorical":
        return CategoricalTask(p_data=target)
    if cfg.model.kind == "ar":
        return ARTask(chain=target, dataset=dataset)
    if cfg.model.class_count not in (0, target.n_components):
        raise ConfigError("model.class_count must be 0 or the number of mixture components")
    grid = GridSpec.around(target.mean(), target.std(), e.width, e.bins)
    return DiffusionTask(gmm=target, dataset=dataset, grid=grid, eval_samples=e.samples,
                         eval_seed=e.seed, sampler_steps=e.sampler_steps)


def default_grid(kind: str) -> list[DdoHyperParams]:
    return {"categorical": CATEGORICAL_GRID, "ar": AR_GRID, "diffusion": DIFFUSION_GRID}[kind]


def sweep_grid(cfg: ExperimentConfig) -> list[DdoHyperParams]:
    if not cfg.ddo.grid:
        return list(default_grid(cfg.model.kind))
    try:
        return [DdoHyperParams(**asdict(g)) for g in cfg.ddo.grid]
    except ValueError as exc:
        raise ConfigError(f"ddo.grid: {exc}") from None


def round_config(cfg: ExperimentConfig, jobs: int = 1) -> RoundConfig:
    d = cfg.ddo
    return RoundConfig(steps=d.steps, batch=d.batch, lr=d.lr, warmup=d.warmup,
                       eval_every=cfg.eval.every, ema_half_life=d.ema_half_life or None,
                       cache_size=d.cache_size, class_balance=d.class_balance,
                       online_ref=d.online_ref, seed=cfg.seed, jobs=jobs,
                       record_wallclock=d.record_wallclock)


class Experiment:
    """A config bound to its dataset, exact target and task."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg.validate()
        self.dataset, self.target = build_target(cfg)
        self.task = build_task(cfg, self.dataset, self.target)

    def check_compatible(self, model: Model) -> None:
        fresh = build_model(self.cfg)
        if model.kind != fresh.kind or model.config() != fresh.config():
            raise ConfigError(f"checkpoint ({model.kind}, {model.config()}) does not match the "
                              f"config's model ({fresh.kind}, {fresh.config()})")

    def metric(self, model: Model, final: bool = False) -> float:
        if final and isinstance(self.task, DiffusionTask):
            e = self.cfg.eval
            return self.task.metric(model, n=e.final_samples, seed=e.final_seed)
        return self.task.metric(model)

    # -- commands ------------------------------------------------------------------------------

    def pretrain(self, out_dir) -> dict:
        out = Path(out_dir)
        (out / "pretrain").mkdir(parents=True, exist_ok=True)
        dump_config(self.cfg, out / "config.toml")
        self.dataset.save(out / "dataset.ddo")
        model = build_model(self.cfg)
        p = self.cfg.pretrain
        losses = pretrain(model, self.task, p.steps, p.lr, p.batch, seed=[self.cfg.seed, 1],
                          warmup=p.warmup)
        save_model(out / "pretrain" / "ckpt.ddo", model, self.cfg.seed, 0)
        (out / "pretrain" / "metrics.csv").write_text(_csv(("step", "loss"), losses))
        summary = {"steps": p.steps, "final_loss": losses[-1][1] if losses else None,
                   "metric": self.metric(model), "checkpoint": "pretrain/ckpt.ddo",
                   "model_id": model.fingerprint()}
        _write_json(out / "pretrain" / "summary.json", summary)
        return summary

    def ddo(self, out_dir, ckpt=None, rounds: int | None = None, jobs: int = 1) -> dict:
        out = Path(out_dir)
        ckpt = Path(ckpt) if ckpt is not None else out / "pretrain" / "ckpt.ddo"
        base, _ = load_model(ckpt)
        self.check_compatible(base)
        out.mkdir(parents=True, exist_ok=True)
        dump_config(self.cfg, out / "config.toml")
        rounds = self.cfg.ddo.rounds if rounds is None else rounds
        ckpt_ref = _relative(ckpt, out)
        baseline = {"checkpoint": ckpt_ref, "model_id": base.fingerprint(),
                    "metric": self.metric(base), "final_metric": self.metric(base, final=True)}
        _write_json(out / "baseline.json", baseline)
        threshold = self.cfg.ddo.min_rel_improvement or None
        winner, lineage = run_selfplay(base, self.task, sweep_grid(self.cfg), round_config(self.cfg, jobs),
                                       rounds, out, threshold, reference_ckpt=ckpt_ref)
        final = self.metric(winner, final=True)
        summary = {"rounds": len(lineage), "baseline_metric": baseline["final_metric"],
                   "final_metric": final,
                   "ratio": final / baseline["final_metric"] if baseline["final_metric"] else None,
                   "per_round": [r["metric"] for r in lineage],
                   "winner_id": winner.fingerprint(), "lineage_valid": validate_lineage(out)}
        _write_json(out / "summary.json", summary)
        return summary

    def evaluate(self, model: Model) -> dict:
        self.check_compatible(model)
        report = {"kind": model.kind, "model_id": model.fingerprint(), "metric": self.metric(model),
                  "metric_name": "hist_kl" if isinstance(self.task, DiffusionTask) else "exact_kl"}
        if isinstance(self.task, DiffusionTask):
            report["final_metric"] = self.metric(model, final=True)
        return report


# -- sampling and plot data ---------------------------------------------------------------------

def sample_model(model: Model, n: int, seed: int, steps: int = 18) -> np.ndarray:
    rng = np.random.default_rng(seed)
    if n == 0:
        width = 1 if isinstance(model, CategoricalModel) else getattr(model, "d", getattr(model, "data_dim", 1))
        return np.zeros((0, width))
    if isinstance(model, DiffusionModel):
        return model.sample(rng, n, steps=steps)
    x = model.sample(rng, n)
    return x.reshape(n, -1)


def samples_csv(x: np.ndarray, kind: str) -> str:
    if kind == "diffusion":
        header = [f"x{i}" for i in range(x.shape[1])]
        rows = [[repr(float(v)) for v in r] for r in x]
    elif kind == "ar":
        header = [f"t{i}" for i in range(x.shape[1])]
        rows = [[int(v) for v in r] for r in x]
    else:
        header, rows = ["state"], [[int(r[0])] for r in x]
    return _csv(header, rows)


def density_grid_rows(grid: GridSpec, density: np.ndarray):
    cx, cy = grid.centers()
    for i, x in enumerate(cx):
        for j, y in enumerate(cy):
            yield (repr(float(x)), repr(float(y)), repr(float(density[i, j])))


def write_plotdata(exp: Experiment, models: dict[str, Model], out_dir, n_samples: int = 20_000,
                   scatter: int = 2000, seed: int = 0) -> dict[str, Path]:
    """Gridded densities and scatter samples for the data and each model.

    Diffusion: ``density_<name>.csv`` with columns x, y, density on the eval
    grid (exact for the data, normalized histograms for models) plus
    ``samples_<name>.csv``. Enumerable models: ``pmf.csv`` with one column
    per distribution.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = {}
    if isinstance(exp.task, DiffusionTask):
        grid = exp.task.grid
        dens = {"data": cell_masses(exp.target.log_density, grid) / grid.cell_area}
        scat = {"data": exp.target.sample(np.random.default_rng(seed), scatter)[0]}
        for name, model in models.items():
            x = model.sample(np.random.default_rng(seed), n_samples, steps=exp.cfg.eval.sampler_steps)
            dens[name] = histogram(x, grid, warn=False) / (len(x) * grid.cell_area)
            scat[name] = x[:scatter]
        for name, d in dens.items():
            path = out / f"density_{name}.csv"
            path.write_text(_csv(("x", "y", "density"), density_grid_rows(grid, d)))
            written[f"density_{name}"] = path
        for name, x in scat.items():
            path = out / f"samples_{name}.csv"
            path.write_text(_csv(("x", "y"), ([repr(float(a)), repr(float(b))] for a, b in x)))
            written[f"samples_{name}"] = path
        return written
    if isinstance(exp.task, CategoricalTask):
        cols = {"data": exp.target.probs}
        cols.update({name: m.distribution().probs for name, m in models.items()})
    else:
        cols = {"data": exp.target.exact_pmf()}
        cols.update({name: m.exact_pmf() for name, m in models.items()})
    names = list(cols)
    rows = ([i] + [repr(float(cols[n][i])) for n in names] for i in range(len(cols["data"])))
    path = out / "pmf.csv"
    path.write_text(_csv(["state"] + names, rows))
    written["pmf"] = path
    return written


# -- sweep report ------------------------------------------------------------------------------

def sweep_report(out_dir) -> list[dict]:
    """Per round and grid point: hyperparameters, best eval and final eval."""
    from .selfplay import read_metrics_csv

    out = Path(out_dir)
    rows = []
    for rdir in sorted((out / "rounds").iterdir(), key=lambda p: int(p.name)):
        records = read_metrics_csv(rdir / "metrics.csv")
        winner = json.loads((rdir / "winner.json").read_text()) if (rdir / "winner.json").exists() else {}
        hps = {}
        for gdir in rdir.glob("grid_*"):
            ckpts = sorted(gdir.glob("ckpt_*.ddo"))
            if ckpts:
                from .models import read_container
                hps[int(gdir.name.split("_")[1])] = read_container(ckpts[0])[0]["extra"]["hp"]
        for gi in sorted({r["grid_index"] for r in records}):
            rs = [r for r in records if r["grid_index"] == gi]
            finite = [r for r in rs if np.isfinite(r["metric"])]
            best = min(finite, key=lambda r: (r["metric"], r["step"])) if finite else None
            hp = hps.get(gi, {})
            rows.append({"round": int(rdir.name), "grid_index": gi, "alpha": hp.get("alpha"),
                         "beta": hp.get("beta"), "evals": len(finite),
                         "best_step": best["step"] if best else None,
                         "best_metric": best["metric"] if best else None,
                         "last_metric": finite[-1]["metric"] if finite else None,
                         "diverged": len(finite) < len(rs),
                         "winner": winner.get("grid_index") == gi})
    return rows


def sweep_report_csv(rows: list[dict]) -> str:
    cols = ("round", "grid_index", "alpha", "beta", "evals", "best_step", "best_metric",
            "last_metric", "diverged", "winner")
    return _csv(cols, ([("" if r[c] is None else r[c]) for c in cols] for r in rows))


# -- io helpers ----------------------------------------------------------------------------------

def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _relative(path, base) -> str:
    """``path`` relative to ``base`` when inside it, so reruns elsewhere compare equal."""
    try:
        return str(Path(path).resolve().relative_to(Path(base).resolve()))
    except ValueError:
        return str(path)


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=float) + "\n")
