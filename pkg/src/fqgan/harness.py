"""Configuration files, training runs, checkpoints, sweeps and paired comparisons."""

from __future__ import annotations

import csv
import io
import json
import math
import os
import statistics
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import Tensor
from .datasets import draw
from .gan import (
    STREAM_EVAL,
    ConfigError,
    DivergenceError,
    GanState,
    StepMetrics,
    TrainConfig,
    discriminate,
    generate,
    init_state,
    train_step,
)
from .metrics import feature_mmd, frechet_2d, mode_coverage
from .quantizer import codebook_to_text, usage_stats
from .rng import SplitMix64

CHECKPOINT_VERSION = 1
STREAM_EVAL_DATA = 7
MMD_MAX_ROWS = 1024

METRICS_HEADER = (
    "iteration", "d_loss", "g_loss", "alpha", "modes_covered", "high_quality_fraction",
    "frechet", "feature_mmd", "commit_loss", "perplexity",
)


# --- config files ---------------------------------------------------------


def _default_types() -> dict[str, type]:
    base = TrainConfig()
    return {f.name: type(getattr(base, f.name)) for f in fields(TrainConfig)}


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_value(key: str, text: str, kind: type):
    text = text.strip()
    try:
        if kind is bool:
            low = text.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(text)
        if kind is tuple:
            return tuple(int(v) for v in text.split(",") if v.strip())
        return kind(text)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {text!r}") from None


def parse_assignments(lines: Sequence[str], source: str = "<overrides>") -> dict:
    """``key=value`` pairs; blank lines and ``#`` comments are ignored."""
    kinds = _default_types()
    out = {}
    for n, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in kinds:
            raise ConfigError(f"{source}:{n}: unknown key {key!r}")
        out[key] = _parse_value(key, value, kinds[key])
    return out


def config_to_text(cfg: TrainConfig) -> str:
    return "".join(f"{f.name}={_format_value(getattr(cfg, f.name))}\n" for f in fields(TrainConfig))


def config_from_text(text: str, source: str = "<text>") -> TrainConfig:
    return TrainConfig(**parse_assignments(text.splitlines(), source)).validate()


def load_config(path=None, overrides: Sequence[str] = ()) -> TrainConfig:
    values = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as e:
            raise OSError(f"cannot read config {path}: {e.strerror}") from e
        values.update(parse_assignments(text.splitlines(), str(path)))
    values.update(parse_assignments(overrides))
    return TrainConfig(**values).validate()


# --- atomic writes ----------------------------------------------------------


def atomic_write(path, data: str | bytes) -> None:
    """Write to a temporary file in the same directory, then rename."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
        with os.fdopen(fd, "wb") as fh:
            fh.write(data.encode() if isinstance(data, str) else data)
        os.replace(tmp, path)
    except OSError as e:
        raise OSError(f"cannot write {path}: {e.strerror or e}") from e


# --- evaluation -------------------------------------------------------------


@dataclass
class RunRecord:
    iteration: int
    d_loss: float
    g_loss: float
    alpha: float
    modes_covered: int
    high_quality_fraction: float
    frechet: float
    feature_mmd: float
    commit_loss: dict[int, float] = field(default_factory=dict)
    perplexity: dict[int, float] = field(default_factory=dict)
    wall_seconds: float = 0.0

    def row(self) -> list[str]:
        per_layer = lambda d: ";".join(f"{k}:{v!r}" for k, v in sorted(d.items()))
        return [
            str(self.iteration), repr(self.d_loss), repr(self.g_loss), repr(self.alpha),
            str(self.modes_covered), repr(self.high_quality_fraction), repr(self.frechet),
            repr(self.feature_mmd), per_layer(self.commit_loss), per_layer(self.perplexity),
        ]

    def to_json(self) -> dict:
        d = asdict(self)
        d["commit_loss"] = {str(k): v for k, v in self.commit_loss.items()}
        d["perplexity"] = {str(k): v for k, v in self.perplexity.items()}
        return d

    @classmethod
    def from_json(cls, d: dict) -> "RunRecord":
        d = dict(d)
        d["commit_loss"] = {int(k): v for k, v in d["commit_loss"].items()}
        d["perplexity"] = {int(k): v for k, v in d["perplexity"].items()}
        return cls(**d)


def eval_sets(cfg: TrainConfig) -> tuple[np.ndarray, np.ndarray]:
    """Fixed evaluation latents and real samples, identical at every checkpoint."""
    z = SplitMix64(cfg.seed, STREAM_EVAL).normal((cfg.eval_samples, cfg.latent_dim))
    real = draw(cfg.spec(), cfg.eval_samples, SplitMix64(cfg.seed, STREAM_EVAL_DATA))
    return z, real


def evaluate(state: GanState, last: StepMetrics | None = None) -> tuple[RunRecord, np.ndarray]:
    """Metrics on the fixed evaluation sets; also returns the generated points."""
    cfg = state.config
    z, real = eval_sets(cfg)
    fake = generate(state.gen, Tensor(z)).data
    if not np.all(np.isfinite(fake)):
        raise DivergenceError(state.iteration, "generated samples")
    spec = cfg.spec()
    rep = mode_coverage(fake, spec)
    fr = frechet_2d(fake, real).value
    b = min(cfg.mmd_batch, cfg.eval_samples)
    layer = cfg.mmd_layer
    mmd = feature_mmd(state.disc, real[:b], fake[:b], layer, cfg.code_dim(layer), MMD_MAX_ROWS)
    perplexity = {}
    if state.disc.codebooks:
        _, quant = discriminate(state.disc, Tensor(np.concatenate([real, fake])))
        perplexity = {l: usage_stats(q.counts).perplexity for l, q in quant.items()}
    record = RunRecord(
        iteration=state.iteration,
        d_loss=last.d_loss if last else math.nan,
        g_loss=last.g_loss if last else math.nan,
        alpha=last.alpha if last else math.nan,
        modes_covered=rep.modes_covered,
        high_quality_fraction=rep.high_quality_fraction,
        frechet=fr,
        feature_mmd=mmd,
        commit_loss=dict(last.commit) if last else {},
        perplexity=perplexity,
    )
    return record, fake


# --- checkpoints ----------------------------------------------------------


def _state_arrays(state: GanState) -> dict[str, np.ndarray]:
    arrays = {}
    for prefix, params in (("gen", state.gen.parameters()), ("disc", state.disc.net.parameters())):
        for i, p in enumerate(params):
            arrays[f"{prefix}/{i}"] = p.data
    for layer, cb in state.disc.codebooks.items():
        arrays[f"codebook/{layer}/items"] = cb.items
        arrays[f"codebook/{layer}/ema_sum"] = cb.ema_sum
        arrays[f"codebook/{layer}/ema_count"] = cb.ema_count
        arrays[f"codebook/{layer}/usage"] = cb.usage
    for name, opt in (("opt_g", state.opt_g), ("opt_d", state.opt_d)):
        for i, (m, v) in enumerate(zip(opt.m, opt.v)):
            arrays[f"{name}/m/{i}"] = m
            arrays[f"{name}/v/{i}"] = v
    return arrays


def save_checkpoint(state: GanState, path, records: Sequence[RunRecord] = ()) -> None:
    meta = {
        "version": CHECKPOINT_VERSION,
        "iteration": state.iteration,
        "config": config_to_text(state.config),
        "opt_g_t": state.opt_g.t,
        "opt_d_t": state.opt_d.t,
        "data_rng": state.data_rng.state(),
        "latent_rng": state.latent_rng.state(),
        "records": [r.to_json() for r in records],
    }
    buf = io.BytesIO()
    np.savez(buf, __meta__=np.array(json.dumps(meta, sort_keys=True)), **_state_arrays(state))
    atomic_write(path, buf.getvalue())


def load_checkpoint(path) -> tuple[GanState, list[RunRecord]]:
    """Rebuild the training state bit for bit; returns it with the saved records."""
    try:
        with np.load(path, allow_pickle=False) as data:
            meta = json.loads(str(data["__meta__"]))
            if meta.get("version") != CHECKPOINT_VERSION:
                raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
            state = init_state(config_from_text(meta["config"], f"{path}:config"))
            for key, target in _state_arrays(state).items():
                saved = data[key]
                if saved.shape != target.shape:
                    raise ValueError(f"{key}: shape {saved.shape} != {target.shape}")
                target[...] = saved
    except OSError as e:
        raise OSError(f"cannot read checkpoint {path}: {e.strerror or e}") from e
    except (KeyError, ValueError) as e:
        raise OSError(f"corrupt checkpoint {path}: {e}") from e
    state.iteration = meta["iteration"]
    state.opt_g.t = meta["opt_g_t"]
    state.opt_d.t = meta["opt_d_t"]
    state.data_rng = SplitMix64.from_state(meta["data_rng"])
    state.latent_rng = SplitMix64.from_state(meta["latent_rng"])
    return state, [RunRecord.from_json(r) for r in meta["records"]]


def latest_checkpoint(out_dir) -> Path | None:
    found = sorted(Path(out_dir).glob("checkpoint_*.npz"), key=lambda p: int(p.stem.split("_")[1]))
    return found[-1] if found else None


# --- outputs ----------------------------------------------------------------


def metrics_csv(records: Sequence[RunRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_HEADER)
    for r in records:
        w.writerow(r.row())
    return buf.getvalue()


def points_csv(points: np.ndarray) -> str:
    return "x,y\n" + "".join(f"{a!r},{b!r}\n" for a, b in points.tolist())


def _mean(values) -> float:
    values = list(values)
    return float(sum(values) / len(values)) if values else math.nan


def summarize(records: Sequence[RunRecord], cfg: TrainConfig, divergence: dict | None) -> dict:
    """Last-k mean over checkpointed evaluations plus best-over-run values."""
    keys = ("modes_covered", "high_quality_fraction", "frechet", "feature_mmd")
    at_ckpt = [r for r in records if r.iteration % cfg.checkpoint_interval == 0]
    tail = (at_ckpt or list(records))[-cfg.last_k:]
    final = records[-1] if records else None
    return {
        "iterations_completed": final.iteration if final else 0,
        "diverged": divergence,
        "final": {k: getattr(final, k) for k in keys} if final else None,
        "last_k": {"k": len(tail), **{k: _mean(getattr(r, k) for r in tail) for k in keys}},
        "best": {
            "modes_covered": max((r.modes_covered for r in records), default=None),
            "high_quality_fraction": max((r.high_quality_fraction for r in records), default=None),
            "frechet": min((r.frechet for r in records), default=None),
            "feature_mmd": min((r.feature_mmd for r in records), default=None),
        },
    }


def json_text(obj) -> str:
    # NaN/inf become null so the file stays standard JSON
    def clean(v):
        if isinstance(v, float) and not math.isfinite(v):
            return None
        if isinstance(v, dict):
            return {k: clean(x) for k, x in v.items()}
        if isinstance(v, (list, tuple)):
            return [clean(x) for x in v]
        return v

    return json.dumps(clean(obj), indent=2, sort_keys=True) + "\n"


def emit_outputs(out_dir, cfg: TrainConfig, records: Sequence[RunRecord], divergence: dict | None = None) -> dict:
    """metrics.csv, timing.csv, summary.json and config.resolved."""
    out = Path(out_dir)
    summary = summarize(records, cfg, divergence)
    atomic_write(out / "metrics.csv", metrics_csv(records))
    atomic_write(out / "timing.csv",
                 "iteration,wall_seconds\n" + "".join(f"{r.iteration},{r.wall_seconds!r}\n" for r in records))
    atomic_write(out / "summary.json", json_text(summary))
    atomic_write(out / "config.resolved", config_to_text(cfg))
    return summary


# --- runs -----------------------------------------------------------------


@dataclass
class RunResult:
    config: TrainConfig
    out_dir: Path | None
    records: list[RunRecord]
    summary: dict
    divergence: dict | None = None
    state: GanState | None = None

    @property
    def diverged(self) -> bool:
        return self.divergence is not None


def train(cfg: TrainConfig, out_dir=None, resume: bool = True, stop_after: int | None = None,
          keep_state: bool = False) -> RunResult:
    """Train ``cfg`` to completion, evaluating and checkpointing on schedule.

    With ``out_dir`` and ``resume``, training continues from the newest
    checkpoint there. ``stop_after`` halts after that many total iterations
    without final outputs, as if the process had been killed.
    """
    cfg.validate()
    records: list[RunRecord] = []
    state = None
    if out_dir is not None and resume:
        ckpt = latest_checkpoint(out_dir)
        if ckpt is not None:
            state, records = load_checkpoint(ckpt)
            if config_to_text(state.config) != config_to_text(cfg):
                raise ConfigError(f"checkpoint {ckpt} was written with a different config")
    if state is None:
        state = init_state(cfg)
    divergence = None
    last = None
    start = time.perf_counter()
    try:
        while state.iteration < cfg.iterations:
            if stop_after is not None and state.iteration >= stop_after:
                return RunResult(cfg, out_dir, records, {}, None, state)
            last = train_step(state)
            it = state.iteration
            if it % cfg.eval_interval == 0 or it == cfg.iterations:
                record, fake = evaluate(state, last)
                record.wall_seconds = time.perf_counter() - start
                records.append(record)
                if out_dir is not None and it % cfg.checkpoint_interval == 0:
                    out = Path(out_dir)
                    atomic_write(out / f"samples_{it}.csv", points_csv(fake))
                    for layer, cb in state.disc.codebooks.items():
                        atomic_write(out / f"codebook_{it}_layer{layer}.txt", codebook_to_text(cb))
                    save_checkpoint(state, out / f"checkpoint_{it}.npz", records)
    except DivergenceError as e:
        divergence = {"iteration": e.iteration, "what": e.what}
    summary = emit_outputs(out_dir, cfg, records, divergence) if out_dir is not None \
        else summarize(records, cfg, divergence)
    return RunResult(cfg, Path(out_dir) if out_dir else None, records, summary, divergence,
                     state if keep_state else None)


def _train_job(args):
    cfg_text, out_dir = args
    res = train(config_from_text(cfg_text), out_dir)
    return res.summary, res.divergence


def _run_all(jobs: list[tuple[TrainConfig, Path]], workers: int) -> list[tuple[dict, dict | None]]:
    payload = [(config_to_text(c), str(d)) for c, d in jobs]
    if workers <= 1:
        return [_train_job(p) for p in payload]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_train_job, payload))


# --- sweeps -----------------------------------------------------------------

AXES = {"none": None, "P": "P", "lambda": "decay", "alpha": "alpha", "fq_position": "fq_layers"}


@dataclass
class Experiment:
    config: TrainConfig
    axis: str = "none"
    values: tuple = ()
    seeds: tuple[int, ...] = (0,)
    out_dir: Path = Path("runs")

    def __post_init__(self):
        if self.axis not in AXES:
            raise ConfigError(f"unknown sweep axis {self.axis!r}; choose from {', '.join(AXES)}")
        self.values = tuple(self.values)
        if self.axis == "alpha" and 0.0 not in [float(v) for v in self.values]:
            # the alpha = 0 control is part of every alpha sweep
            self.values = (0.0,) + self.values
        if self.axis == "none":
            self.values = (None,)
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        depth = len(self.config.d_hidden)
        for v in self.values:
            ok = {
                "none": lambda v: True,
                "P": lambda v: float(v).is_integer() and int(v) >= 1,
                "lambda": lambda v: 0.0 < float(v) < 1.0,
                "alpha": lambda v: float(v) >= 0.0,
                "fq_position": lambda v: float(v).is_integer() and 1 <= int(v) <= depth,
            }[self.axis](v)
            if not ok:
                raise ConfigError(f"invalid value {v!r} for sweep axis {self.axis}")
        if self.axis in ("P", "lambda") and not self.config.fq_layers:
            raise ConfigError(f"sweeping {self.axis} needs at least one fq layer")

    def point_config(self, value, seed: int) -> TrainConfig:
        changes = {"seed": seed}
        name = AXES[self.axis]
        if name == "fq_layers":
            changes[name] = (int(value),)
        elif name == "P":
            changes[name] = int(value)
        elif name is not None:
            changes[name] = float(value)
        return self.config.replace(**changes).validate()

    def label(self, value) -> str:
        return "base" if value is None else f"{self.axis}={value}"


def _median(values) -> float | None:
    vals = [v for v in values if v is not None and not math.isnan(v)]
    return float(statistics.median(vals)) if vals else None


def _final_metrics(summary: dict, divergence: dict | None) -> dict:
    """Final metrics, with a diverged run scored as the worst possible outcome."""
    if divergence is not None or not summary.get("final"):
        return {"modes_covered": 0, "high_quality_fraction": 0.0, "frechet": math.inf, "feature_mmd": math.inf}
    return dict(summary["final"])


def run_experiment(exp: Experiment, workers: int = 1) -> dict:
    points = [(v, s) for v in exp.values for s in exp.seeds]
    jobs = [(exp.point_config(v, s), Path(exp.out_dir) / exp.label(v) / f"seed={s}") for v, s in points]
    results = _run_all(jobs, workers)
    table = {}
    for (v, s), (summary, div) in zip(points, results):
        entry = table.setdefault(exp.label(v), {"value": v, "seeds": {}})
        entry["seeds"][str(s)] = {"final": _final_metrics(summary, div),
                                  "last_k": summary.get("last_k"), "diverged": div}
    for entry in table.values():
        runs = list(entry["seeds"].values())
        keys = ("modes_covered", "high_quality_fraction", "frechet", "feature_mmd")
        entry["median_final"] = {k: _median(r["final"][k] for r in runs) for k in keys}
        entry["median_last_k"] = {k: _median((r["last_k"] or {}).get(k) for r in runs) for k in keys}
        entry["diverged_runs"] = sum(r["diverged"] is not None for r in runs)
    out = {"axis": exp.axis, "seeds": list(exp.seeds), "points": table}
    atomic_write(Path(exp.out_dir) / "sweep_summary.json", json_text(out))
    return out


# --- paired comparison --------------------------------------------------------


def sign_test(diffs: Sequence[float]) -> dict:
    """Two-sided exact sign test on paired differences; zeros are dropped."""
    neg = sum(d < 0 for d in diffs)
    pos = sum(d > 0 for d in diffs)
    n = neg + pos
    k = min(neg, pos)
    p = min(1.0, 2.0 * sum(math.comb(n, i) for i in range(k + 1)) / 2**n) if n else 1.0
    return {"negative": neg, "positive": pos, "ties": len(diffs) - n, "p_value": p}


def compare_baseline(cfg: TrainConfig, seeds: Sequence[int] = (0, 1, 2, 3, 4), out_dir="compare",
                     workers: int = 1, P_values: Sequence[int] | None = None) -> dict:
    """Paired FQ vs. baseline runs sharing seeds, initial weights and data streams.

    The baseline arm measures feature MMD on the raw features of the same
    layer, split into positions of the FQ code width. With ``P_values`` one
    FQ arm per dictionary size is compared against a single baseline arm.
    """
    if not cfg.fq_layers:
        raise ConfigError("compare_baseline needs a config with at least one fq layer")
    layer = cfg.mmd_layer
    base = cfg.replace(fq_layers=(), probe_layer=layer, fq_dim=cfg.code_dim(layer)).validate()
    if P_values:
        arms = {f"P={int(p)}": cfg.replace(P=int(p)).validate() for p in P_values}
    else:
        arms = {"fq": cfg}
    out = Path(out_dir)
    names = ["baseline", *arms]
    configs = {"baseline": base, **arms}
    jobs = [(configs[a].replace(seed=s), out / a / f"seed={s}") for s in seeds for a in names]
    results = iter(_run_all(jobs, workers))
    keys = ("modes_covered", "high_quality_fraction", "frechet", "feature_mmd")
    per_seed = {}
    for s in seeds:
        row = {}
        for a in names:
            summary, div = next(results)
            row[a] = {**_final_metrics(summary, div), "diverged": div}
        per_seed[str(s)] = row
    median = {a: {k: _median(r[a][k] for r in per_seed.values()) for k in keys} for a in names}
    tests = {}
    for a in arms:
        diff = lambda k: [r[a][k] - r["baseline"][k] for r in per_seed.values()]
        tests[a] = {
            # equal infinities (both arms diverged) count as ties
            "feature_mmd": sign_test([0.0 if math.isnan(d) else d for d in diff("feature_mmd")]),
            "modes_covered": sign_test(diff("modes_covered")),
        }
    result = {"seeds": list(seeds), "layer": layer, "arms": list(arms),
              "per_seed": per_seed, "median": median, "sign_test": tests}
    atomic_write(out / "compare.json", json_text(result))
    return result
