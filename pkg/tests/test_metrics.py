from __future__ import annotations

import json
import math

import numpy as np
import pytest

from opdlab.distill import rollout_opd
from opdlab.env import EnvConfig, make_env, make_teacher
from opdlab.errors import ConfigError, UsageError
from opdlab.metrics import (
    EvalRecord,
    MetricsLog,
    TrainRecord,
    config_hash,
    per_turn_kl_profile,
    read_records,
    round9,
    write_csv,
    write_records,
)
from opdlab.policy import PolicyParams


def eval_record(step=0, **kw):
    base = dict(step=step, success_rate=0.5, avg_rounds=8.25, traj_kl_mean=1.5,
                traj_kl_turn_mean=0.1875, per_turn_kl=[0.1, 0.2], active_k=3,
                split="eval", n_rollouts=64, mean_prefix_len=0.0)
    base.update(kw)
    return EvalRecord(**base)


def train_record(step=0, **kw):
    base = dict(step=step, loss=0.25, grad_norm=1.125, buffer_size=96,
                discarded_stale=4, active_k=2, mean_staleness=0.5)
    base.update(kw)
    return TrainRecord(**base)


# -- profile ------------------------------------------------------------------------


def test_profile_zero_for_matched_policies():
    env = make_env(EnvConfig())
    teacher = make_teacher(env, on_support_temperature=1e-3)
    params = teacher.materialize()
    rng = np.random.default_rng(0)
    trajs = [rollout_opd(env, params, teacher, t, rng) for t in range(8)]
    assert all(v == 0.0 for v in per_turn_kl_profile(trajs))


def test_profile_single_trajectory_equals_turn_kls():
    env = make_env(EnvConfig())
    teacher = make_teacher(env)
    student = PolicyParams(num_actions=6)
    traj = rollout_opd(env, student, teacher, 0, np.random.default_rng(1))
    profile = per_turn_kl_profile([traj])
    assert profile == [t.turn_kl for t in traj.turns]


def test_profile_increases_for_uniform_student():
    from scipy import stats

    env = make_env(EnvConfig())
    teacher = make_teacher(env)
    student = PolicyParams(num_actions=6)
    rng = np.random.default_rng(2)
    trajs = [rollout_opd(env, student, teacher, i % 32, rng) for i in range(64)]
    profile = per_turn_kl_profile(trajs)
    rho = stats.spearmanr(np.arange(len(profile)), profile).statistic
    assert rho > 0


def test_profile_empty_input_rejected():
    with pytest.raises(UsageError):
        per_turn_kl_profile([])


def test_success_rate_is_exact_fraction():
    env = make_env(EnvConfig())
    teacher = make_teacher(env, on_support_temperature=1e-3)
    params = teacher.materialize()
    rng = np.random.default_rng(3)
    trajs = [rollout_opd(env, params, teacher, t % 32, rng) for t in range(10)]
    k = sum(t.success for t in trajs)
    assert k / 10 == sum(t.success for t in trajs) / len(trajs)
    assert k == 10  # expert path always succeeds


# -- serialization --------------------------------------------------------------------


def test_round9():
    assert round9(0.123456789123456) == 0.123456789
    assert round9(1e-300) == 1e-300
    assert math.isnan(round9(math.nan))


def test_round_trip_equal_records(tmp_path):
    log = MetricsLog(config_hash="abc123")
    log.append(train_record(step=0))
    log.append(eval_record(step=0, success_rate=1 / 3, traj_kl_mean=math.pi))
    log.append(train_record(step=1, loss=1e-12))
    path = tmp_path / "m.jsonl"
    write_records(log, path)
    loaded = read_records(path)
    assert loaded.config_hash == "abc123"
    assert loaded.records == log.records


def test_empty_log_writes_header_only(tmp_path):
    path = tmp_path / "empty.jsonl"
    write_records(MetricsLog(config_hash="x"), path)
    lines = path.read_text().splitlines()
    assert len(lines) == 1
    assert json.loads(lines[0])["schema_version"] == 1


def test_schema_version_mismatch_rejected(tmp_path):
    path = tmp_path / "old.jsonl"
    path.write_text('{"kind": "metrics", "schema_version": 99, "config_hash": ""}\n')
    with pytest.raises(ConfigError, match="schema version"):
        read_records(path)


def test_floats_serialized_at_9_significant_digits(tmp_path):
    log = MetricsLog()
    log.append(train_record(loss=0.12345678987654321))
    path = tmp_path / "m.jsonl"
    write_records(log, path)
    stored = json.loads(path.read_text().splitlines()[1])
    assert stored["loss"] == 0.123456790
    assert log.records[0].loss == 0.123456790


def test_write_is_byte_stable(tmp_path):
    log = MetricsLog(config_hash="h")
    log.append(eval_record())
    log.append(train_record())
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    write_records(log, a)
    write_records(log, b)
    assert a.read_bytes() == b.read_bytes()


def test_nan_profile_entries_round_trip(tmp_path):
    log = MetricsLog()
    log.append(eval_record(per_turn_kl=[0.5, math.nan, 1.0]))
    path = tmp_path / "m.jsonl"
    write_records(log, path)
    loaded = read_records(path).records[0]
    assert loaded.per_turn_kl[0] == 0.5
    assert math.isnan(loaded.per_turn_kl[1])
    assert loaded.per_turn_kl[2] == 1.0


def test_csv_export(tmp_path):
    log = MetricsLog()
    log.append(eval_record(step=5, per_turn_kl=[0.1, 0.2, 0.3]))
    log.append(train_record(step=5))
    log.append(eval_record(step=6, per_turn_kl=[0.4]))
    path = tmp_path / "m.csv"
    write_csv(log, path)
    lines = path.read_text().splitlines()
    assert lines[0].startswith("step,split,active_k,success_rate")
    assert lines[0].endswith("kl_t0,kl_t1,kl_t2")
    assert len(lines) == 3  # header + two eval records, train excluded
    assert lines[2].endswith(",,")  # shorter profile padded


def test_config_hash_order_insensitive():
    a = config_hash({"x": 1, "y": {"z": 2}})
    b = config_hash({"y": {"z": 2}, "x": 1})
    assert a == b
    assert a != config_hash({"x": 2, "y": {"z": 2}})
