"""Config-driven continual-learning runs, their artifacts and summaries."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .bounds import BoundConfig, BoundReport, disagreement_from_losses, kl_isotropic_shift, kl_posteriors, structural_terms
from .learner import (
    AdamState,
    EwcState,
    LearnerError,
    StackedTasks,
    ewc_posterior,
    ewc_train_task,
    init_prior,
    sample_task_losses,
    save_checkpoint,
    vi_train_task,
)
from .metrics import LossFunction, MetricsLog, MetricsRecord, bwt_and_forgetting
from .mlp import MlpArchitecture
from .tasks import KINDS, EnvironmentConfig, make_environment

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    """Every field has a default, so ``{}`` is a complete config."""

    name: str = "run"
    method: str = "vi"
    environment: str = "similar"
    T: int = 100
    ref_angle_deg: float = 0.0
    max_dev_deg: float = 10.0
    drift_sign: int = 1
    m_train: int = 3000
    m_test: int = 1000
    hidden_dims: tuple = (64,)
    lam: float = 1e-3
    epochs: int = 1
    batch_size: int = 16
    lr: float = 1e-3
    init_std: float = 0.05
    n_mc_train: int = 1
    lam_ewc: float = 40.0
    sigma2: float = 1e-2
    n_fisher: int = 500
    delta: float = 0.05
    gamma: float = 0.95
    n_mc: int = 30
    n_mc_prior: int = 30
    checkpoint_stride: int = 4
    seeds: tuple = (0, 1, 2, 3, 4)
    save_checkpoints: bool = False

    def __post_init__(self):
        self.hidden_dims = tuple(int(h) for h in self.hidden_dims)
        self.seeds = tuple(int(s) for s in self.seeds)
        self.validate()

    def validate(self) -> None:
        if self.method not in ("vi", "ewc"):
            raise ConfigError(f"method must be 'vi' or 'ewc', got {self.method!r}")
        if self.environment not in KINDS:
            raise ConfigError(f"environment must be one of {KINDS}, got {self.environment!r}")
        positive = ("T", "m_train", "m_test", "epochs", "batch_size", "n_mc", "n_mc_prior", "checkpoint_stride", "n_fisher", "n_mc_train")
        for name in positive:
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.lam <= 0 or self.lr <= 0 or self.init_std <= 0 or self.sigma2 <= 0:
            raise ConfigError("lam, lr, init_std and sigma2 must be positive")
        if self.lam_ewc < 0:
            raise ConfigError("lam_ewc must be nonnegative")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        try:
            self.env_config(0)
            self.bound_config()
            self.arch()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**doc)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(doc)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_dims"] = list(self.hidden_dims)
        d["seeds"] = list(self.seeds)
        return d

    def arch(self) -> MlpArchitecture:
        return MlpArchitecture(10, self.hidden_dims, self.T, 2)

    def env_config(self, seed: int) -> EnvironmentConfig:
        return EnvironmentConfig(
            kind=self.environment,
            T=self.T,
            ref_angle=math.radians(self.ref_angle_deg),
            max_dev=math.radians(self.max_dev_deg),
            seed=seed,
            drift_sign=self.drift_sign,
        )

    def bound_config(self) -> BoundConfig:
        return BoundConfig(self.lam, self.delta, 1.0, self.n_mc_prior, self.n_mc, self.gamma)

    def checkpoints(self) -> list[int]:
        """1-based task counts at which metrics are recorded."""
        ts = list(range(self.checkpoint_stride, self.T + 1, self.checkpoint_stride))
        if not ts or ts[-1] != self.T:
            ts.append(self.T)
        return ts


@dataclass
class SeedResult:
    seed: int
    log: MetricsLog
    reports: list = field(default_factory=list)
    after_losses: list = field(default_factory=list)
    error: str = ""
    elapsed: float = 0.0


def _seed_streams(seed: int):
    """Independent generators: environment seed, init, training, evaluation."""
    ss = np.random.SeedSequence([seed, 0xC1B0])
    env_ss, init_ss, train_ss, eval_ss = ss.spawn(4)
    return int(env_ss.generate_state(1)[0]), np.random.default_rng(init_ss), train_ss, eval_ss


def run_seed(cfg: ExperimentConfig, seed: int, checkpoint_dir: Path | None = None) -> SeedResult:
    """One continual-learning pass over all tasks for a single seed.

    With ``checkpoint_dir`` set, the posterior is saved at every metrics checkpoint.
    """
    t0 = time.perf_counter()
    arch = cfg.arch()
    bcfg = cfg.bound_config()
    loss = LossFunction()
    env_seed, init_rng, train_ss, eval_ss = _seed_streams(seed)
    _, data = make_environment(cfg.env_config(env_seed), cfg.m_train, cfg.m_test)
    train_seeds = train_ss.spawn(cfg.T)
    eval_seeds = eval_ss.spawn(cfg.T)
    checkpoints = set(cfg.checkpoints())
    adam = AdamState(lr=cfg.lr)

    prior = init_prior(arch, init_rng, cfg.init_std)
    if cfg.method == "vi":
        q = prior
    else:
        state = EwcState.initial(prior.mean, cfg.lam_ewc, cfg.sigma2)
        q = ewc_posterior(state)

    result = SeedResult(seed, MetricsLog())
    after = result.after_losses
    n_ckpt = 0
    for t in range(cfg.T):
        train, test = data[t]
        prev_q = q
        try:
            if cfg.method == "vi":
                q = vi_train_task(
                    prev_q, arch, train, t, cfg.lam, cfg.epochs, cfg.batch_size, adam, cfg.n_mc_train, train_seeds[t]
                )
            else:
                prev_state = state
                state = ewc_train_task(
                    prev_state, arch, train, t, cfg.epochs, cfg.batch_size, adam, train_seeds[t], cfg.n_fisher
                )
                q = ewc_posterior(state)
        except LearnerError as exc:
            log.error("seed %d aborted at task %d: %s", seed, t + 1, exc)
            result.error = f"task {t + 1}: {exc}"
            break
        rng_fwd, rng_bwt, rng_emp, rng_prior = (np.random.default_rng(s) for s in eval_seeds[t].spawn(4))
        own = StackedTasks(arch, [t], [test])
        after.append(float(sample_task_losses(q, own, loss, cfg.n_mc, rng_fwd)[:, 0].mean()))

        n_seen = t + 1
        if n_seen not in checkpoints:
            continue
        n_ckpt += 1
        rec = MetricsRecord(checkpoint=n_ckpt, task_id=n_seen, fwd_loss=float(np.mean(after)))
        if checkpoint_dir is not None:
            save_checkpoint(checkpoint_dir / f"posterior_seed{seed}_t{n_seen}.json", {**q.to_json(arch), "method": cfg.method})
        if t == 0:
            result.log.append(rec)
            continue
        past = list(range(t))
        past_tests = StackedTasks(arch, past, [data[i][1] for i in past])
        cur = sample_task_losses(q, past_tests, loss, cfg.n_mc, rng_bwt)
        metrics = bwt_and_forgetting(cur.mean(axis=0), after[:t], cfg.gamma)

        lam = bcfg.lam_for(t)
        emp = sample_task_losses(q, StackedTasks(arch, [t], [train]), loss, cfg.n_mc, rng_emp)[:, 0]
        prior_draws = sample_task_losses(
            prev_q, StackedTasks(arch, past + [t], [data[i][1] for i in past] + [train]), loss, cfg.n_mc_prior, rng_prior
        )
        dis, dis_se = disagreement_from_losses(prior_draws[:, :t], prior_draws[:, t], lam)
        if cfg.method == "vi":
            kl = kl_posteriors(q, prev_q)
        else:
            kl = kl_isotropic_shift(state.weights, prev_state.weights, cfg.sigma2)
        hoeff, conf = structural_terms(lam, bcfg.K, train.m, bcfg.delta)
        emp_se = float(emp.std(ddof=1) / math.sqrt(emp.size)) if emp.size > 1 else 0.0
        report = BoundReport.from_terms(
            float(emp.mean()), float(np.mean(after[:t])), kl / lam, hoeff, conf, dis, math.hypot(emp_se, dis_se)
        )
        f_rows = cur.mean(axis=1)
        f_se = float(f_rows.std(ddof=1) / math.sqrt(f_rows.size)) if f_rows.size > 1 else 0.0
        rec.bwt = metrics.bwt
        rec.forgetting = metrics.forgetting
        rec.bwt_disc = metrics.bwt_disc
        rec.forget_disc = metrics.forget_disc
        rec.bwt_bound = report.total_bwt_bound
        rec.forget_bound = report.total_forgetting_bound
        rec.mc_stderr = math.hypot(f_se, report.mc_stderr)
        result.log.append(rec)
        result.reports.append({"task_id": n_seen, **asdict(report), "forgetting_stderr": f_se})

    result.elapsed = time.perf_counter() - t0
    result.final_posterior = q
    result.arch = arch
    return result


SUMMARY_COLUMNS = ("bwt", "bwt_bound", "forgetting", "forget_bound", "fwd_loss")


def _mean_stderr(values) -> tuple[float, float]:
    v = np.asarray(values, dtype=float)
    v = v[np.isfinite(v)]
    if v.size == 0:
        return math.nan, math.nan
    se = float(v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else 0.0
    return float(v.mean()), se


def summarize(logs: list[MetricsLog]) -> dict:
    """Mean and standard error across seeds of the final-checkpoint metrics, in percent."""
    out = {}
    for col in SUMMARY_COLUMNS:
        finals = [log.records[-1].__dict__[col] * 100 for log in logs if log.records]
        out[col] = _mean_stderr(finals)
    return out


def format_summary(name: str, summary: dict) -> str:
    cells = []
    for col in SUMMARY_COLUMNS:
        mean, se = summary[col]
        cells.append(f"{col}={mean:.1f}±{se:.1f}")
    return f"{name}: " + "  ".join(cells)


def write_summary_csv(rows: list[tuple[str, dict]], path: Path) -> None:
    lines = ["name," + ",".join(f"{c},{c}_se" for c in SUMMARY_COLUMNS)]
    for name, summary in rows:
        lines.append(name + "," + ",".join(f"{summary[c][0]!r},{summary[c][1]!r}" for c in SUMMARY_COLUMNS))
    path.write_text("\n".join(lines) + "\n")


@dataclass
class RunArtifacts:
    out_dir: Path
    metrics_csv: list
    bound_reports: list
    checkpoints: list
    config_echo: Path
    summary_csv: Path
    summary: dict
    failed_seeds: dict

    @property
    def ok(self) -> bool:
        return not self.failed_seeds


def run_experiment(cfg: ExperimentConfig, out_dir: str | Path, seeds=None) -> RunArtifacts:
    """Run every seed of ``cfg`` and write its artifacts under ``out_dir``.

    A seed whose training diverges is stopped; its partial metrics are still
    written and it is listed in ``status.json``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seeds = cfg.seeds if seeds is None else tuple(seeds)
    echo = out / "config.json"
    echo.write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    csvs, reports, ckpts, logs, failed = [], [], [], [], {}
    for seed in seeds:
        res = run_seed(cfg, seed, out if cfg.save_checkpoints else None)
        log.info("seed %d finished in %.1fs", seed, res.elapsed)
        csv_path = out / f"metrics_seed{seed}.csv"
        res.log.to_csv(csv_path)
        rep_path = out / f"bounds_seed{seed}.json"
        rep_path.write_text(json.dumps(res.reports, indent=1) + "\n")
        ck_path = out / f"posterior_seed{seed}.json"
        doc = res.final_posterior.to_json(res.arch)
        doc["method"] = cfg.method
        save_checkpoint(ck_path, doc)
        csvs.append(csv_path)
        reports.append(rep_path)
        ckpts.append(ck_path)
        logs.append(res.log)
        if res.error:
            failed[seed] = res.error
    (out / "status.json").write_text(
        json.dumps({"complete": not failed, "failed_seeds": {str(k): v for k, v in failed.items()}}, indent=2) + "\n"
    )
    summary = summarize(logs)
    summary_csv = out / "summary.csv"
    write_summary_csv([(cfg.name, summary)], summary_csv)
    return RunArtifacts(out, csvs, reports, ckpts, echo, summary_csv, summary, failed)


def load_run(run_dir: str | Path) -> tuple[ExperimentConfig, list[MetricsLog]]:
    run_dir = Path(run_dir)
    cfg = ExperimentConfig.load(run_dir / "config.json")
    logs = [MetricsLog.from_csv(p) for p in sorted(run_dir.glob("metrics_seed*.csv"))]
    return cfg, logs


def report(artifacts_dir: str | Path) -> list[tuple[str, dict]]:
    """Summaries for the run in ``artifacts_dir`` or for every run directory below it."""
    root = Path(artifacts_dir)
    run_dirs = [root] if (root / "config.json").exists() else sorted(p.parent for p in root.glob("*/config.json"))
    if not run_dirs:
        raise FileNotFoundError(f"no run artifacts under {root}")
    rows = []
    for d in run_dirs:
        cfg, logs = load_run(d)
        rows.append((f"{cfg.name} [{cfg.environment}/{cfg.method}]", summarize(logs)))
    write_summary_csv(rows, root / "report.csv")
    return rows
