"""Training orchestration: actors, learner, snapshots, and evaluation.

Sync mode runs actors and learner on one thread of control with a fixed
round-robin over tasks, and is bit-reproducible per seed. Async mode runs a
pool of actor threads against the latest published snapshot while the
learner consumes staleness-filtered batches; it matches sync mode
statistically, not bitwise.

The curriculum clock is the learner's step counter: at step n the actors
roll out under horizon_at(schedule, n) and the newest snapshot. Evaluation
always runs full-horizon with no truncation and no expert prefix,
regardless of the training algorithm.
"""

from __future__ import annotations

import math
import threading
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from .curriculum import CurriculumSchedule, horizon_at, steps_to_full_horizon
from .distill import (
    ALGO_B2F,
    ALGO_F2B,
    ALGO_OPD,
    ALGO_SFT,
    TeacherTrajectoryStore,
    Trajectory,
    apply_gradient,
    batch_gradient,
    nll_loss,
    rollout_b2f,
    rollout_f2b,
    rollout_opd,
    sft_update,
)
from .env import Env, EnvConfig, TeacherPolicy, make_env, make_teacher
from .errors import ConfigError, UsageError
from .metrics import (
    SPLIT_EVAL,
    SPLIT_ROLLOUT,
    EvalRecord,
    MetricsLog,
    TrainRecord,
    per_turn_kl_profile,
)
from .policy import PolicyParams
from .replay import RingBuffer, decompose

MODE_SYNC = "sync"
MODE_ASYNC = "async"
ALGOS = (ALGO_OPD, ALGO_F2B, ALGO_B2F, ALGO_SFT)


@dataclass(frozen=True)
class TeacherConfig:
    on_support_temperature: float = 0.3
    off_support_floor: float = 0.05
    turn_sharpening: float = 0.75
    depth_decay: float = 0.85


@dataclass
class RunConfig:
    algo: str = ALGO_OPD
    env: EnvConfig = field(default_factory=EnvConfig)
    teacher: TeacherConfig = field(default_factory=TeacherConfig)
    k_start: int = 1
    eta: int = 2
    cap: int | None = None  # defaults to env.horizon_cap
    total_steps: int = 400
    lr: float = 0.7
    batch_size: int = 32
    actor_count: int = 4
    delta_max: int = 2
    buffer_capacity: int = 4096
    eval_every: int = 5
    eval_episodes: int = 64
    seed: int = 42
    mode: str = MODE_SYNC
    pass_m: int = 10
    train_temperature: float = 1.0
    eval_temperature: float = 0.4
    window: int | None = None

    def __post_init__(self):
        if self.algo not in ALGOS:
            raise ConfigError(f"unknown algo {self.algo!r}, expected one of {ALGOS}")
        if self.mode not in (MODE_SYNC, MODE_ASYNC):
            raise ConfigError(f"mode must be 'sync' or 'async', got {self.mode!r}")
        if self.cap is None:
            self.cap = self.env.horizon_cap
        if self.lr <= 0:
            raise ConfigError("lr must be > 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.actor_count < 1:
            raise ConfigError("actor_count must be >= 1")
        if self.delta_max < 0:
            raise ConfigError("delta_max must be >= 0")
        if self.eval_every < 1:
            raise ConfigError("eval_every must be >= 1")
        if self.eval_episodes < 1:
            raise ConfigError("eval_episodes must be >= 1")
        if self.pass_m < 1:
            raise ConfigError("pass_m must be >= 1")
        if self.train_temperature <= 0 or self.eval_temperature <= 0:
            raise ConfigError("temperatures must be > 0")

    def schedule(self) -> CurriculumSchedule:
        return CurriculumSchedule(k_start=self.k_start, eta=self.eta,
                                  cap=self.cap, total_steps=self.total_steps)


class SnapshotBoard:
    """Latest published parameter snapshot; published versions only increase."""

    def __init__(self, params: PolicyParams):
        self._lock = threading.Lock()
        self._params = params

    def publish(self, params: PolicyParams) -> None:
        with self._lock:
            if params.version <= self._params.version:
                raise UsageError(
                    f"snapshot version {params.version} does not advance "
                    f"past {self._params.version}"
                )
            self._params = params

    def latest(self) -> PolicyParams:
        with self._lock:
            return self._params


@dataclass
class TrainingResult:
    log: MetricsLog
    final_params: PolicyParams
    max_staleness_seen: int
    store: TeacherTrajectoryStore | None = None


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


def evaluate(params: PolicyParams, env: Env, teacher: TeacherPolicy,
             episodes: int, rng: np.random.Generator, *,
             temperature: float = 0.4, window: int | None = None,
             step: int = 0, active_k: int = 0) -> EvalRecord:
    """Full-horizon, prefix-free evaluation of ``params``.

    Episodes cycle round-robin over tasks. Sampling uses the evaluation
    temperature; the KL profile compares the expert's distribution against
    the student's canonical (temperature-1) policy on the realized states.
    """
    if episodes < 1:
        raise ConfigError(f"episodes must be >= 1, got {episodes}")
    trajs: list[Trajectory] = []
    for e in range(episodes):
        task_id = e % env.config.task_count
        trajs.append(rollout_opd(env, params, teacher, task_id, rng,
                                 temperature=temperature, window=window))
    kl_sums = [sum(t.turn_kl for t in traj.turns) for traj in trajs]
    kl_means = [s / traj.rounds for s, traj in zip(kl_sums, trajs) if traj.rounds]
    return EvalRecord(
        step=step,
        success_rate=sum(t.success for t in trajs) / episodes,
        avg_rounds=float(np.mean([t.rounds for t in trajs])),
        traj_kl_mean=float(np.mean(kl_sums)),
        traj_kl_turn_mean=float(np.mean(kl_means)) if kl_means else 0.0,
        per_turn_kl=per_turn_kl_profile(trajs),
        active_k=active_k,
        split=SPLIT_EVAL,
        n_rollouts=episodes,
    )


# ---------------------------------------------------------------------------
# Shared learner-side helpers
# ---------------------------------------------------------------------------


def _rollout_for(algo: str, env: Env, store, snapshot: PolicyParams,
                 teacher: TeacherPolicy, task_id: int, k: int,
                 rng: np.random.Generator, temperature: float,
                 window: int | None) -> Trajectory:
    if algo == ALGO_OPD:
        return rollout_opd(env, snapshot, teacher, task_id, rng,
                           temperature=temperature, window=window)
    if algo == ALGO_F2B:
        return rollout_f2b(env, snapshot, teacher, task_id, k, rng,
                           temperature=temperature, window=window)
    if algo == ALGO_B2F:
        return rollout_b2f(env, store, snapshot, teacher, task_id, k, rng,
                           temperature=temperature, window=window)
    raise ConfigError(f"no rollout mode for algo {algo!r}")


def _rollout_record(step: int, k: int, trajs: list[Trajectory]) -> EvalRecord:
    kl_sums = [sum(t.turn_kl for t in traj.turns) for traj in trajs]
    kl_means = [s / traj.rounds for s, traj in zip(kl_sums, trajs) if traj.rounds]
    return EvalRecord(
        step=step,
        success_rate=sum(t.success for t in trajs) / len(trajs),
        avg_rounds=float(np.mean([t.rounds for t in trajs])),
        traj_kl_mean=float(np.mean(kl_sums)),
        traj_kl_turn_mean=float(np.mean(kl_means)) if kl_means else 0.0,
        per_turn_kl=[],
        active_k=k,
        split=SPLIT_ROLLOUT,
        n_rollouts=len(trajs),
        mean_prefix_len=float(np.mean([t.prefix_len for t in trajs])),
    )


def _validate_run(config: RunConfig, store) -> None:
    if config.algo == ALGO_B2F:
        if store is None or len(store) == 0:
            raise ConfigError("b2f training requires a non-empty expert "
                              "trajectory store; run collection first")
        max_l = store.max_length()
        need = steps_to_full_horizon(config.schedule(), min(max_l, config.cap))
        if need >= config.total_steps:
            warnings.warn(
                f"total_steps={config.total_steps} never clears the expert "
                f"prefix for the longest stored trajectory (L={max_l}, needs "
                f"step {need}); the curriculum will not reach end-to-end rollouts",
                stacklevel=2,
            )
    if config.algo == ALGO_F2B:
        need = steps_to_full_horizon(config.schedule(), config.cap)
        if need >= config.total_steps:
            warnings.warn(
                f"total_steps={config.total_steps} never reaches the full "
                f"horizon cap {config.cap} (needs step {need})",
                stacklevel=2,
            )


# ---------------------------------------------------------------------------
# Training loops
# ---------------------------------------------------------------------------


def run_training(config: RunConfig, store: TeacherTrajectoryStore | None = None,
                 ) -> TrainingResult:
    """Execute total_steps learner steps and return the log and final params.

    B2F runs need a pre-collected store. Snapshots are published after every
    learner step; every eval_every steps (and at the end) an evaluation
    record is appended.
    """
    _validate_run(config, store)
    env = make_env(config.env)
    teacher = make_teacher(env, config.teacher.on_support_temperature,
                           config.teacher.off_support_floor,
                           config.teacher.turn_sharpening,
                           config.teacher.depth_decay)
    if config.algo == ALGO_SFT:
        return _run_sft(config, env, teacher, store)
    if config.mode == MODE_SYNC:
        return _run_sync(config, env, teacher, store)
    return _run_async(config, env, teacher, store)


def _seed_streams(config: RunConfig):
    root = np.random.SeedSequence(config.seed)
    ss_rollout, ss_sample, ss_eval = root.spawn(3)
    return ss_rollout, ss_sample, ss_eval


def _run_sync(config: RunConfig, env: Env, teacher: TeacherPolicy,
              store) -> TrainingResult:
    ss_rollout, ss_sample, ss_eval = _seed_streams(config)
    rollout_rng = np.random.Generator(np.random.PCG64(ss_rollout))
    sample_rng = np.random.Generator(np.random.PCG64(ss_sample))
    eval_rng = np.random.Generator(np.random.PCG64(ss_eval))

    params = PolicyParams(num_actions=config.env.num_actions)
    board = SnapshotBoard(params.snapshot())
    buffer = RingBuffer(config.buffer_capacity)
    schedule = config.schedule()
    log = MetricsLog()
    task_counter = 0
    traj_counter = 0
    max_staleness = 0

    for n in range(config.total_steps):
        k = horizon_at(schedule, n)
        snapshot = board.latest()
        step_trajs: list[Trajectory] = []
        while buffer.count_at_version(snapshot.version) < config.batch_size:
            task_id = task_counter % config.env.task_count
            task_counter += 1
            traj = _rollout_for(config.algo, env, store, snapshot, teacher,
                                task_id, k, rollout_rng,
                                config.train_temperature, config.window)
            traj.traj_id = traj_counter
            traj_counter += 1
            buffer.push(decompose(traj))
            step_trajs.append(traj)

        batch = buffer.sample_batch(snapshot.version, config.delta_max,
                                    config.batch_size, sample_rng)
        staleness = [snapshot.version - e.policy_version for e in batch]
        assert all(s <= config.delta_max for s in staleness)
        max_staleness = max(max_staleness, max(staleness))

        loss, grads = batch_gradient(batch, params)
        params = apply_gradient(params, grads, config.lr)
        board.publish(params.snapshot())

        log.append(TrainRecord(
            step=n, loss=loss,
            grad_norm=math.sqrt(sum(float(g @ g) for g in grads.values())),
            buffer_size=len(buffer),
            discarded_stale=buffer.discarded_stale_total,
            active_k=k,
            mean_staleness=float(np.mean(staleness)),
        ))
        log.append(_rollout_record(n, k, step_trajs))
        if (n + 1) % config.eval_every == 0 or n == config.total_steps - 1:
            log.append(evaluate(params, env, teacher, config.eval_episodes,
                                eval_rng, temperature=config.eval_temperature,
                                window=config.window, step=n, active_k=k))

    return TrainingResult(log=log, final_params=params,
                          max_staleness_seen=max_staleness, store=store)


def _run_async(config: RunConfig, env_proto: Env, teacher: TeacherPolicy,
               store) -> TrainingResult:
    # children 0..2 mirror the sync streams (rollout/sample/eval); the
    # remainder seed one rng per actor thread
    children = np.random.SeedSequence(config.seed).spawn(3 + config.actor_count)
    sample_rng = np.random.Generator(np.random.PCG64(children[1]))
    eval_rng = np.random.Generator(np.random.PCG64(children[2]))
    actor_seeds = children[3:]

    params = PolicyParams(num_actions=config.env.num_actions)
    board = SnapshotBoard(params.snapshot())
    buffer = RingBuffer(config.buffer_capacity)
    schedule = config.schedule()
    log = MetricsLog()
    stop = threading.Event()

    state_lock = threading.Lock()
    shared = {"step": 0, "task_counter": 0, "traj_counter": 0}
    pending_trajs: list[Trajectory] = []

    def actor_loop(seed_seq):
        rng = np.random.Generator(np.random.PCG64(seed_seq))
        # Each actor keeps its own simulator instance; they share only the
        # snapshot board (read) and the ring buffer (append).
        actor_env = make_env(config.env)
        actor_teacher = make_teacher(actor_env,
                                     config.teacher.on_support_temperature,
                                     config.teacher.off_support_floor,
                                     config.teacher.turn_sharpening,
                                     config.teacher.depth_decay)
        while not stop.is_set():
            snapshot = board.latest()
            # backpressure: don't run ahead of the learner by more than two
            # batches of fresh data, so async sees a data rate per learner
            # step comparable to sync mode
            if buffer.count_at_version(snapshot.version) >= 2 * config.batch_size:
                time.sleep(0.0005)
                continue
            with state_lock:
                n = shared["step"]
                task_id = shared["task_counter"] % config.env.task_count
                shared["task_counter"] += 1
                traj_id = shared["traj_counter"]
                shared["traj_counter"] += 1
            k = horizon_at(schedule, min(n, config.total_steps - 1))
            traj = _rollout_for(config.algo, actor_env, store, snapshot,
                                actor_teacher, task_id, k, rng,
                                config.train_temperature, config.window)
            traj.traj_id = traj_id
            buffer.push(decompose(traj))
            with state_lock:
                pending_trajs.append(traj)

    actors = [threading.Thread(target=actor_loop, args=(s,), daemon=True)
              for s in actor_seeds]
    for t in actors:
        t.start()

    max_staleness = 0
    try:
        for n in range(config.total_steps):
            with state_lock:
                shared["step"] = n
            k = horizon_at(schedule, n)
            while buffer.count_eligible(params.version, config.delta_max) < config.batch_size:
                time.sleep(0.0005)
            batch = buffer.sample_batch(params.version, config.delta_max,
                                        config.batch_size, sample_rng)
            staleness = [params.version - e.policy_version for e in batch]
            assert all(s <= config.delta_max for s in staleness)
            max_staleness = max(max_staleness, max(staleness))

            loss, grads = batch_gradient(batch, params)
            params = apply_gradient(params, grads, config.lr)
            board.publish(params.snapshot())

            with state_lock:
                step_trajs = list(pending_trajs)
                pending_trajs.clear()
            log.append(TrainRecord(
                step=n, loss=loss,
                grad_norm=math.sqrt(sum(float(g @ g) for g in grads.values())),
                buffer_size=len(buffer),
                discarded_stale=buffer.discarded_stale_total,
                active_k=k,
                mean_staleness=float(np.mean(staleness)),
            ))
            if step_trajs:
                log.append(_rollout_record(n, k, step_trajs))
            if (n + 1) % config.eval_every == 0 or n == config.total_steps - 1:
                log.append(evaluate(params, env_proto, teacher,
                                    config.eval_episodes, eval_rng,
                                    temperature=config.eval_temperature,
                                    window=config.window, step=n, active_k=k))
    finally:
        stop.set()
        for t in actors:
            t.join(timeout=5.0)

    return TrainingResult(log=log, final_params=params,
                          max_staleness_seen=max_staleness, store=store)


def _run_sft(config: RunConfig, env: Env, teacher: TeacherPolicy,
             store) -> TrainingResult:
    if store is None or len(store) == 0:
        raise ConfigError("sft training requires a non-empty expert "
                          "trajectory store; run collection first")
    _, _, ss_eval = _seed_streams(config)
    eval_rng = np.random.Generator(np.random.PCG64(ss_eval))
    params = PolicyParams(num_actions=config.env.num_actions)
    log = MetricsLog()
    n_turns = sum(len(a) for a in store.actions_by_task.values())

    for n in range(config.total_steps):
        params = sft_update(store, params, config.lr, env, config.window)
        loss = nll_loss(store, params, env, config.window) / n_turns
        log.append(TrainRecord(step=n, loss=loss, grad_norm=0.0, buffer_size=0,
                               discarded_stale=0, active_k=0,
                               mean_staleness=0.0))
        if (n + 1) % config.eval_every == 0 or n == config.total_steps - 1:
            log.append(evaluate(params, env, teacher, config.eval_episodes,
                                eval_rng, temperature=config.eval_temperature,
                                window=config.window, step=n, active_k=0))

    return TrainingResult(log=log, final_params=params, max_staleness_seen=0,
                          store=store)
