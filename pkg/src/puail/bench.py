"""Experiment plumbing: YAML configs, demo generation, training runs, seed sweeps,
oracle reports, Welch tests and tidy CSV export.

All randomness derives from the config's root seed: demo sets use the spawn key
``(0, n_non_optimal)`` and training run ``i`` uses ``(1, i)``.
"""
from __future__ import annotations

import csv
import io
import math
import os
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml
from scipy import stats

from . import oracle
from .demos import (
    DemoSet,
    NoiseSpec,
    build_demo_set,
    dumps_demos,
    load_demos,
    make_d1_policies,
    make_d2_policies,
    optimal_policy,
)
from .mdp import CANONICAL_LAYOUT, TabularMdp, evaluate_return, gridworld, load_mdp_text
from .scorer import dumps_scorer
from .trainer import TAIL_FRACTION, RunRecord, TrainConfig, dumps_record, loads_record, train

SUMMARY_HEADER = "# puail-summary v1"
SOURCES_HEADER = "# puail-demo-sources v1"
POLICY_HEADER = "# puail-policy v1"
BASELINES = {"uid_gail": "gail", "uid_wail": "wail"}
ALPHA_METHODS = ("uid_gail", "uid_wail", "pu_gail")
RUN_COLUMNS = ("method", "seed", "iter", "return", "acc_do", "acc_dn", "clamp_active_frac",
               "alpha", "ratio")

# desk-scale benchmark: small MLP discriminator on grid coordinates
BENCHMARK_TRAIN = dict(
    iters=400, lr_disc=0.3, lr_policy=0.3, rollout_per_iter=32, horizon=60,
    architecture="mlp", feature_map="grid", hidden=16,
)


class ConfigError(ValueError):
    pass


def expand_seed(root: int, *key: int) -> int:
    """Deterministic child seed of ``root`` for the given spawn key."""
    ss = np.random.SeedSequence(int(root), spawn_key=tuple(int(k) for k in key))
    return int(ss.generate_state(1, dtype=np.uint32)[0])


# --- configuration ------------------------------------------------------------------------


@dataclass(frozen=True)
class EnvConfig:
    layout: str | None = "canonical"  # grid string, "canonical", or None with mdp_file
    mdp_file: str | None = None
    slip: float = 0.1
    gamma: float = 0.95

    def build(self) -> TabularMdp:
        if self.mdp_file:
            path = Path(self.mdp_file)
            if not path.exists():
                raise ConfigError(f"env.mdp_file: {path} does not exist")
            return load_mdp_text(path.read_text())
        if not self.layout:
            raise ConfigError("env: give either layout or mdp_file")
        layout = CANONICAL_LAYOUT if self.layout == "canonical" else self.layout
        try:
            return gridworld(layout, slip=self.slip, gamma=self.gamma)
        except ValueError as exc:
            raise ConfigError(f"env.layout: {exc}") from None


@dataclass(frozen=True)
class DemoConfig:
    kind: str = "action_noise"  # "action_noise" (D2) or "checkpoint" (D1)
    levels: tuple[float, ...] = (0.25, 0.4, 0.6)
    n_per_policy: int = 250
    horizon: int = 200

    def __post_init__(self):
        spec = NoiseSpec(self.kind, tuple(self.levels))
        object.__setattr__(self, "levels", spec.levels)
        if self.n_per_policy <= 0 or self.horizon <= 0:
            raise ConfigError("demo.n_per_policy and demo.horizon must be positive")

    def levels_for(self, n_non_optimal: int) -> tuple[float, ...]:
        """Noise levels for a 1:k optimal/non-optimal split."""
        if n_non_optimal <= 0:
            raise ConfigError("ratios must be positive integers")
        if n_non_optimal == len(self.levels):
            return self.levels
        if n_non_optimal == 1:
            return (float(np.median(self.levels)),)
        return tuple(float(x) for x in np.linspace(min(self.levels), max(self.levels), n_non_optimal))


@dataclass(frozen=True)
class SweepConfig:
    methods: tuple[str, ...] = ("uid_gail", "gail")
    alphas: tuple[float, ...] = (0.7,)
    ratios: tuple[int, ...] = (3,)  # k in "1:k" optimal to non-optimal sources
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)

    def __post_init__(self):
        for name in ("methods", "alphas", "ratios", "seeds"):
            vals = tuple(getattr(self, name))
            if not vals:
                raise ConfigError(f"sweep.{name} must be non-empty")
            object.__setattr__(self, name, vals)


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    output_dir: str = "out"
    env: EnvConfig = field(default_factory=EnvConfig)
    demo: DemoConfig = field(default_factory=DemoConfig)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(**BENCHMARK_TRAIN))
    sweep: SweepConfig | None = None
    workers: int = 1

    @property
    def default_ratio(self) -> int:
        return len(self.demo.levels)

    def with_overrides(self, seed=None, out=None, method=None, alpha=None) -> "ExperimentConfig":
        kw = {}
        if seed is not None:
            kw["seed"] = int(seed)
        if out is not None:
            kw["output_dir"] = str(out)
        tr = {}
        if method is not None:
            tr["method"] = method
        if alpha is not None:
            tr["alpha"] = float(alpha)
        if tr:
            try:
                kw["train"] = self.train.replace(**tr)
            except ValueError as exc:
                raise ConfigError(str(exc)) from None
            if self.sweep is not None:
                sw = {}
                if method is not None:
                    sw["methods"] = (method,)
                if alpha is not None:
                    sw["alphas"] = (float(alpha),)
                kw["sweep"] = SweepConfig(**{**asdict(self.sweep), **sw})
        return ExperimentConfig(**{**{f.name: getattr(self, f.name) for f in fields(self)}, **kw})

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("demo", "sweep"):
            if d[key] is not None:
                d[key] = {k: list(v) if isinstance(v, tuple) else v for k, v in d[key].items()}
        return d


def _section(cls, data, name):
    if data is None:
        return None
    if not isinstance(data, dict):
        raise ConfigError(f"{name}: expected a mapping")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{name}: unknown field(s) {unknown}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name}: {exc}") from None


def config_from_dict(d: dict) -> ExperimentConfig:
    d = dict(d or {})
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError(f"unknown top-level field(s) {unknown}")
    out = {k: d[k] for k in ("seed", "output_dir", "workers") if k in d}
    if "env" in d:
        out["env"] = _section(EnvConfig, d["env"], "env")
    if "demo" in d:
        out["demo"] = _section(DemoConfig, d["demo"], "demo")
    if "train" in d:
        out["train"] = _section(TrainConfig, {**BENCHMARK_TRAIN, **(d["train"] or {})}, "train")
    if d.get("sweep") is not None:
        out["sweep"] = _section(SweepConfig, d["sweep"], "sweep")
    return ExperimentConfig(**out)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"line {mark.line + 1}: " if mark is not None else ""
        raise ConfigError(f"{path}: {where}invalid YAML") from None
    return config_from_dict(data)


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)


# --- files --------------------------------------------------------------------------------


def atomic_write(path, text: str) -> Path:
    """Write via a temporary file in the same directory and rename into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def dumps_policy(probs: np.ndarray) -> str:
    S, A = probs.shape
    lines = [f"{POLICY_HEADER} n_states={S} n_actions={A}"]
    lines += [" ".join(repr(float(p)) for p in row) for row in probs]
    return "\n".join(lines) + "\n"


def _fmt_num(x) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return ""
    return repr(float(x))


# --- demonstrations -----------------------------------------------------------------------


@dataclass
class DemoBundle:
    demos: DemoSet
    levels: tuple[float, ...]
    returns: list[float]  # optimal first, then one per non-optimal source


def generate_demos(cfg: ExperimentConfig, mdp: TabularMdp, n_non_optimal: int | None = None) -> DemoBundle:
    k = cfg.default_ratio if n_non_optimal is None else n_non_optimal
    levels = cfg.demo.levels_for(k)
    seed = expand_seed(cfg.seed, 0, k)
    opt = optimal_policy(mdp)
    if cfg.demo.kind == "action_noise":
        non = make_d2_policies(opt, levels, mdp)
    else:
        non = make_d1_policies(mdp, levels, seed)
    demos = build_demo_set(mdp, opt, non, cfg.demo.n_per_policy, cfg.demo.horizon, seed)
    returns = [evaluate_return(mdp, p) for p in [opt, *non]]
    return DemoBundle(demos, levels, returns)


def dumps_sources(bundle: DemoBundle, kind: str) -> str:
    counts = np.bincount(bundle.demos.sources, minlength=len(bundle.returns))
    lines = [f"{SOURCES_HEADER} kind={kind} n_sources={len(bundle.returns)}",
             "source level is_optimal return count"]
    for i, ret in enumerate(bundle.returns):
        level = "optimal" if i == 0 else repr(float(bundle.levels[i - 1]))
        lines.append(f"{i} {level} {int(i == 0)} {float(ret)!r} {int(counts[i])}")
    return "\n".join(lines) + "\n"


def demo_path(cfg: ExperimentConfig, n_non_optimal: int | None = None) -> Path:
    k = cfg.default_ratio if n_non_optimal is None else n_non_optimal
    return Path(cfg.output_dir) / f"demos_1to{k}.txt"


def sources_path(demo_file) -> Path:
    p = Path(demo_file)
    return p.parent / f"{p.stem}_sources.txt"


def cmd_gen_demos(cfg: ExperimentConfig, n_non_optimal: int | None = None, log=print) -> Path:
    mdp = cfg.env.build()
    bundle = generate_demos(cfg, mdp, n_non_optimal)
    path = demo_path(cfg, n_non_optimal)
    atomic_write(path, dumps_demos(bundle.demos))
    atomic_write(sources_path(path), dumps_sources(bundle, cfg.demo.kind))
    for i, ret in enumerate(bundle.returns):
        label = "optimal" if i == 0 else f"level {bundle.levels[i - 1]}"
        log(f"source {i} ({label}): return {ret:.4f}")
    log(f"wrote {len(bundle.demos)} transitions, ratio_optimal={bundle.demos.ratio_optimal:.4f} -> {path}")
    return path


# --- training -----------------------------------------------------------------------------


def run_name(method: str, alpha: float | None, ratio: int, seed: int) -> str:
    a = f"_a{alpha:g}" if alpha is not None else ""
    return f"run_{method}{a}_1to{ratio}_s{seed}"


def _cell_train_config(cfg: ExperimentConfig, method: str, alpha: float | None, seed_index: int) -> TrainConfig:
    kw = {"method": method, "seed": expand_seed(cfg.seed, 1, seed_index)}
    if alpha is not None:
        kw["alpha"] = alpha
    return cfg.train.replace(**kw)


def run_cell(cfg: ExperimentConfig, method: str, alpha: float | None, ratio: int, seed_index: int,
             demos: DemoSet | None = None, mdp: TabularMdp | None = None) -> tuple[RunRecord, Path]:
    """Train one (method, alpha, ratio, seed) cell and write its record atomically."""
    mdp = mdp if mdp is not None else cfg.env.build()
    if demos is None:
        path = demo_path(cfg, ratio)
        if not path.exists():
            raise FileNotFoundError(f"demo file {path} missing; run gen-demos first")
        demos = load_demos(path)
    tcfg = _cell_train_config(cfg, method, alpha, seed_index)
    rec = train(mdp, demos, tcfg)
    rec.seed = seed_index
    rec.tags = {"alpha": "-" if alpha is None else repr(float(alpha)), "ratio": str(ratio),
                "train_seed": str(tcfg.seed)}
    out, name = Path(cfg.output_dir), run_name(method, alpha, ratio, seed_index)
    path = atomic_write(out / f"{name}.txt", dumps_record(rec))
    if rec.policy is not None:
        atomic_write(out / "artifacts" / f"{name}_policy.txt", dumps_policy(rec.policy.probs))
    if rec.scorer is not None:
        atomic_write(out / "artifacts" / f"{name}_scorer.txt", dumps_scorer(rec.scorer))
    return rec, path


def cmd_train(cfg: ExperimentConfig, log=print) -> tuple[RunRecord, Path]:
    method = cfg.train.method
    alpha = cfg.train.alpha if method in ALPHA_METHODS else None
    rec, path = run_cell(cfg, method, alpha, cfg.default_ratio, cfg.train.seed)
    if rec.aborted:
        log(f"aborted: {rec.aborted}")
    else:
        log(f"{method}: final return {rec.tail_return():.4f} over {len(rec)} iterations -> {path}")
    return rec, path


# --- statistics ---------------------------------------------------------------------------


@dataclass(frozen=True)
class WelchResult:
    t: float
    df: float
    p_value: float


def welch_one_sided(a, b) -> WelchResult:
    """One-sided Welch test of H1: mean(a) > mean(b) (null: mean(a) <= mean(b))."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if len(a) < 2 or len(b) < 2:
        raise ValueError("Welch test needs at least two samples per group")
    va, vb = a.var(ddof=1) / len(a), b.var(ddof=1) / len(b)
    diff = a.mean() - b.mean()
    se2 = va + vb
    if se2 == 0:
        # identical constants: no evidence either way unless the means differ
        return WelchResult(math.copysign(math.inf, diff) if diff else 0.0, math.nan,
                           0.0 if diff > 0 else (0.5 if diff == 0 else 1.0))
    t = diff / math.sqrt(se2)
    df = se2**2 / (va**2 / (len(a) - 1) + vb**2 / (len(b) - 1))
    return WelchResult(float(t), float(df), float(stats.t.sf(t, df)))


@dataclass
class SummaryRow:
    method: str
    ratio: int
    alpha: float | None
    n: int
    failed: int
    mean: float
    std: float
    baseline: str | None = None
    p_value: float | None = None
    finals: list[float] = field(default_factory=list)


SUMMARY_COLUMNS = ("method", "ratio", "alpha", "n", "failed", "mean", "std", "baseline", "p_value")


@dataclass
class SummaryTable:
    rows: list[SummaryRow]

    def find(self, method: str, ratio: int, alpha: float | None = None) -> SummaryRow:
        for r in self.rows:
            if r.method == method and r.ratio == ratio and (alpha is None or r.alpha == alpha):
                return r
        raise KeyError((method, ratio, alpha))

    def dumps(self) -> str:
        buf = io.StringIO()
        buf.write(SUMMARY_HEADER + " final_return=tail_mean\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(SUMMARY_COLUMNS)
        for r in self.rows:
            w.writerow([r.method, r.ratio, "" if r.alpha is None else repr(r.alpha), r.n, r.failed,
                        _fmt_num(r.mean), _fmt_num(r.std), r.baseline or "", _fmt_num(r.p_value)])
        return buf.getvalue()

    @classmethod
    def loads(cls, text: str) -> "SummaryTable":
        lines = text.splitlines()
        if not lines or not lines[0].startswith(SUMMARY_HEADER):
            raise ValueError("line 1: not a summary table")
        reader = csv.DictReader(lines[1:])
        f = lambda x: float(x) if x else None  # noqa: E731
        rows = [SummaryRow(d["method"], int(d["ratio"]), f(d["alpha"]), int(d["n"]), int(d["failed"]),
                           f(d["mean"]), f(d["std"]), d["baseline"] or None, f(d["p_value"]))
                for d in reader]
        return cls(rows)


def summarize(results: list[tuple[str, float | None, int, int, float | None]]) -> SummaryTable:
    """Aggregate (method, alpha, ratio, seed, final_return or None on failure) tuples."""
    cells: dict[tuple, list] = {}
    for method, alpha, ratio, _seed, final in results:
        cells.setdefault((method, ratio, alpha), []).append(final)
    rows = []
    for (method, ratio, alpha), finals in cells.items():
        ok = [x for x in finals if x is not None and math.isfinite(x)]
        rows.append(SummaryRow(
            method, ratio, alpha, len(ok), len(finals) - len(ok),
            float(np.mean(ok)) if ok else math.nan,
            float(np.std(ok, ddof=1)) if len(ok) > 1 else 0.0 if ok else math.nan,
            finals=ok,
        ))
    for r in rows:
        base = BASELINES.get(r.method)
        if base is None:
            continue
        cands = [b for b in rows if b.method == base and b.ratio == r.ratio]
        if not cands:
            continue
        r.baseline = base
        if len(r.finals) >= 2 and len(cands[0].finals) >= 2:
            r.p_value = welch_one_sided(r.finals, cands[0].finals).p_value
    rows.sort(key=lambda r: (r.ratio, r.method, -1.0 if r.alpha is None else r.alpha))
    return SummaryTable(rows)


# --- sweep --------------------------------------------------------------------------------


def sweep_cells(cfg: ExperimentConfig) -> list[tuple[str, float | None, int, int]]:
    sw = cfg.sweep or SweepConfig(methods=(cfg.train.method,), alphas=(cfg.train.alpha,),
                                  ratios=(cfg.default_ratio,), seeds=(cfg.train.seed,))
    cells = []
    for ratio in sw.ratios:
        for method in sw.methods:
            alphas = sw.alphas if method in ALPHA_METHODS else (None,)
            for alpha in alphas:
                for seed in sw.seeds:
                    cells.append((method, alpha, int(ratio), int(seed)))
    return cells


def _sweep_worker(args):
    cfg_dict, method, alpha, ratio, seed = args
    cfg = config_from_dict(cfg_dict)
    try:
        rec, _ = run_cell(cfg, method, alpha, ratio, seed)
    except Exception as exc:  # recorded per cell, sweep continues
        return method, alpha, ratio, seed, None, f"{type(exc).__name__}: {exc}"
    if rec.aborted:
        return method, alpha, ratio, seed, None, rec.aborted
    return method, alpha, ratio, seed, rec.tail_return(), None


def cmd_sweep(cfg: ExperimentConfig, log=print) -> tuple[SummaryTable, Path]:
    """Run every cell of the sweep, then aggregate into a summary table."""
    cells = sweep_cells(cfg)
    cfg.env.build()  # fail early on a bad environment
    for ratio in sorted({c[2] for c in cells}):
        if not demo_path(cfg, ratio).exists():
            cmd_gen_demos(cfg, ratio, log=lambda *_: None)
    cfg_dict = cfg.to_dict()
    jobs = [(cfg_dict, *c) for c in cells]
    if cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            out = list(pool.map(_sweep_worker, jobs))
    else:
        out = [_sweep_worker(j) for j in jobs]
    failures = [(o[:4], o[5]) for o in out if o[5] is not None]
    for cell, msg in failures:
        log(f"cell {cell} failed: {msg}")
    table = summarize([o[:5] for o in out])
    path = atomic_write(Path(cfg.output_dir) / "summary.csv", table.dumps())
    log(table.dumps().rstrip())
    return table, path


# --- oracle -------------------------------------------------------------------------------


def cmd_oracle(cfg: ExperimentConfig, self_test: bool = False, log=print) -> tuple[bool, Path]:
    reports = oracle.run_battery(seed=cfg.seed, self_test=self_test)
    text = oracle.format_reports(reports)
    name = "oracle_selftest.txt" if self_test else "oracle_report.txt"
    path = atomic_write(Path(cfg.output_dir) / name, text)
    log(text.rstrip())
    ok = all(r.passed for r in reports if r.asserted)
    return ok, path


# --- export -------------------------------------------------------------------------------


def read_run(path) -> RunRecord:
    path = Path(path)
    try:
        return loads_record(path.read_text())
    except ValueError as exc:
        raise ValueError(f"{path}: {exc}") from None


def export_rows(records: list[RunRecord]):
    for rec in records:
        alpha, ratio = rec.tags.get("alpha", "-"), rec.tags.get("ratio", "")
        for it, ret, _loss, clamp, ado, adn, _ent in rec.rows():
            yield (rec.method, rec.seed, it, _fmt_num(ret), _fmt_num(ado), _fmt_num(adn),
                   _fmt_num(clamp), "" if alpha == "-" else alpha, ratio)


def cmd_export_plots(run_paths, out_dir, log=print) -> list[Path]:
    """Tidy per-iteration CSV plus one row per run with its final return."""
    records = [read_run(p) for p in sorted(map(str, run_paths))]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RUN_COLUMNS)
    w.writerows(export_rows(records))
    runs_csv = atomic_write(Path(out_dir) / "runs.csv", buf.getvalue())
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("method", "alpha", "ratio", "seed", "final_return", "iters"))
    for rec in records:
        alpha = rec.tags.get("alpha", "-")
        w.writerow((rec.method, "" if alpha == "-" else alpha, rec.tags.get("ratio", ""), rec.seed,
                    _fmt_num(rec.tail_return()), len(rec)))
    finals_csv = atomic_write(Path(out_dir) / "final_returns.csv", buf.getvalue())
    log(f"wrote {runs_csv} and {finals_csv} from {len(records)} runs")
    return [runs_csv, finals_csv]


def summary_from_csv(path) -> SummaryTable:
    """Re-aggregate a tidy runs.csv into a summary table (tail-mean final returns)."""
    per_run: dict[tuple, list[float]] = {}
    with open(path) as fh:
        for d in csv.DictReader(fh):
            alpha = float(d["alpha"]) if d["alpha"] else None
            key = (d["method"], alpha, int(d["ratio"]) if d["ratio"] else 0, int(d["seed"]))
            per_run.setdefault(key, []).append(float(d["return"]))
    results = []
    for (method, alpha, ratio, seed), rets in per_run.items():
        k = max(1, int(len(rets) * TAIL_FRACTION))
        results.append((method, alpha, ratio, seed, float(np.mean(rets[-k:]))))
    return summarize(results)
