import json
import math

import numpy as np
import pytest

from clbounds import harness
from clbounds.cli import EXIT_CONFIG, EXIT_FAIL, EXIT_OK, main
from clbounds.harness import ConfigError, ExperimentConfig, load_run, report, run_experiment, run_seed, summarize
from clbounds.learner import LearnerError, load_checkpoint
from clbounds.metrics import MetricsLog, MetricsRecord
from clbounds.verify import verify_suite

TINY = {"name": "tiny", "T": 4, "m_train": 60, "m_test": 40, "hidden_dims": [6], "checkpoint_stride": 2, "seeds": [0], "lam": 20.0}


def write_config(tmp_path, **overrides):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({**TINY, **overrides}))
    return path


def test_empty_config_uses_defaults():
    cfg = ExperimentConfig.from_dict({})
    assert (cfg.T, cfg.m_train, cfg.epochs, cfg.batch_size, cfg.lam_ewc, cfg.sigma2) == (100, 3000, 1, 16, 40.0, 1e-2)
    assert cfg.checkpoints()[-1] == 100 and len(cfg.checkpoints()) == 25


@pytest.mark.parametrize(
    "doc",
    [{"method": "sgd"}, {"environment": "spiral"}, {"T": 0}, {"lam": -1.0}, {"seeds": []}, {"learning_rate": 0.1}, {"drift_sign": 2}],
)
def test_invalid_configs_are_rejected(doc):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(doc)


def test_config_roundtrip(tmp_path):
    cfg = ExperimentConfig.load(write_config(tmp_path, method="ewc"))
    assert ExperimentConfig.from_dict(cfg.to_dict()) == cfg


def test_checkpoints_include_last_task():
    assert ExperimentConfig.from_dict({"T": 10, "checkpoint_stride": 4}).checkpoints() == [4, 8, 10]


def test_single_task_has_only_forward_loss():
    cfg = ExperimentConfig.from_dict({**TINY, "T": 1})
    res = run_seed(cfg, 0)
    assert len(res.log) == 1
    rec = res.log.records[0]
    assert math.isfinite(rec.fwd_loss)
    assert all(math.isnan(getattr(rec, c)) for c in ("bwt", "forgetting", "bwt_bound", "forget_bound"))


@pytest.mark.parametrize("method", ["vi", "ewc"])
def test_run_records_bounds(method):
    res = run_seed(ExperimentConfig.from_dict({**TINY, "method": method}), 0)
    assert not res.error
    assert [r.task_id for r in res.log] == [2, 4]
    assert len(res.reports) == 2
    rep = res.reports[-1]
    total = rep["empirical_term"] - rep["past_loss_term"] + rep["kl_term"] + rep["hoeffding_term"] + rep["confidence_term"] + rep["disagreement_term"]
    assert abs(total - rep["total_forgetting_bound"]) < 1e-12
    assert rep["forgetting_stderr"] >= 0


def test_runs_are_byte_identical(tmp_path):
    cfg = ExperimentConfig.from_dict(TINY)
    run_experiment(cfg, tmp_path / "a")
    run_experiment(cfg, tmp_path / "b")
    for name in ("metrics_seed0.csv", "bounds_seed0.json", "summary.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_seeds_differ(tmp_path):
    cfg = ExperimentConfig.from_dict({**TINY, "seeds": [0, 1]})
    run_experiment(cfg, tmp_path)
    assert (tmp_path / "metrics_seed0.csv").read_bytes() != (tmp_path / "metrics_seed1.csv").read_bytes()


def test_artifacts_and_report(tmp_path):
    cfg = ExperimentConfig.from_dict({**TINY, "save_checkpoints": True})
    arts = run_experiment(cfg, tmp_path / "run")
    assert arts.ok
    assert json.loads((tmp_path / "run" / "status.json").read_text())["complete"]
    arch, q = load_checkpoint(arts.checkpoints[0])
    assert arch.n_tasks == 4 and q.dim == arch.n_params
    assert (tmp_path / "run" / "posterior_seed0_t2.json").exists()
    loaded_cfg, logs = load_run(tmp_path / "run")
    assert loaded_cfg == cfg and len(logs) == 1
    rows = report(tmp_path)
    assert rows[0][0] == "tiny [similar/vi]"
    assert (tmp_path / "report.csv").exists()


def test_summary_mean_and_stderr():
    logs = []
    for f in (0.1, 0.3):
        log = MetricsLog()
        log.append(MetricsRecord(1, 2, bwt=0.2, forgetting=f, fwd_loss=0.1, bwt_bound=0.5, forget_bound=0.4))
        logs.append(log)
    s = summarize(logs)
    assert s["forgetting"][0] == pytest.approx(20.0)
    assert s["forgetting"][1] == pytest.approx(100 * np.std([0.1, 0.3], ddof=1) / math.sqrt(2))
    assert s["bwt"] == pytest.approx((20.0, 0.0))


def test_diverging_seed_is_reported(tmp_path, monkeypatch):
    def boom(*args, **kwargs):
        raise LearnerError("diverged", "forced")

    monkeypatch.setattr(harness, "vi_train_task", boom)
    arts = run_experiment(ExperimentConfig.from_dict(TINY), tmp_path)
    assert not arts.ok and "diverged" in arts.failed_seeds[0]
    assert not json.loads((tmp_path / "status.json").read_text())["complete"]


def test_cli_run_and_report(tmp_path, capsys):
    assert main(["run", str(write_config(tmp_path)), "--out", str(tmp_path / "out")]) == EXIT_OK
    assert (tmp_path / "out" / "metrics_seed0.csv").exists()
    assert main(["report", str(tmp_path / "out")]) == EXIT_OK
    assert "tiny" in capsys.readouterr().out


def test_cli_exit_codes(tmp_path, monkeypatch):
    bad = tmp_path / "bad.json"
    bad.write_text('{"method": "sgd"}')
    assert main(["run", str(bad)]) == EXIT_CONFIG
    assert main(["run", str(tmp_path / "missing.json")]) == EXIT_CONFIG
    assert main(["report", str(tmp_path / "nothing")]) == EXIT_CONFIG

    def boom(*args, **kwargs):
        raise LearnerError("diverged", "forced")

    monkeypatch.setattr(harness, "vi_train_task", boom)
    assert main(["run", str(write_config(tmp_path)), "--out", str(tmp_path / "x")]) == EXIT_FAIL


def test_cli_verify_quick(tmp_path, capsys):
    out = tmp_path / "v.json"
    assert main(["verify", "--scope", "lemmas", "--quick", "--json", str(out)]) == EXIT_OK
    assert "checks passed" in capsys.readouterr().out
    assert all(r["passed"] for r in json.loads(out.read_text()))


def test_verify_gradients_reports_error():
    (res,) = verify_suite("gradients", seed=1, quick=True)
    assert res.passed and res.value < 1e-4


def test_verify_oracle_scope_passes():
    results = {r.name: r for r in verify_suite("oracle", quick=True)}
    assert all(r.passed for r in results.values())
