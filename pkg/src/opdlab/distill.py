"""Trajectory generation and the distillation losses.

Three rollout modes share one loop: vanilla on-policy distillation runs the
student for the whole horizon, forward-curriculum (f2b) truncates after k
student turns, and backward-curriculum (b2f) replays the first L - k actions
of a stored expert trajectory before handing over to the student. Expert
prefix turns carry no distributions and are excluded from every loss and
gradient.

The per-turn loss is the exact categorical KL between the expert's and the
student's action distributions on the realized history, and its logit
gradient is q - p, so the learner update is plain gradient descent on the
logit table.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .curriculum import b2f_prefix_len
from .env import Env, TeacherPolicy
from .errors import ConfigError, UsageError
from .policy import (
    HistoryKey,
    PolicyParams,
    action_dist,
    encode_history,
    forward_kl,
    kl_logit_gradient,
    sample_action,
    softmax,
)
from .replay import ExperienceEntry

ALGO_OPD = "opd"
ALGO_F2B = "f2b"
ALGO_B2F = "b2f"
ALGO_SFT = "sft"

EXECUTED_STUDENT = "student"
EXECUTED_PREFIX = "teacher_prefix"

STORE_SCHEMA = 1


@dataclass
class TurnRecord:
    history_key: HistoryKey
    action: int
    student_dist: np.ndarray | None
    teacher_dist: np.ndarray | None
    turn_index: int
    executed_by: str
    turn_kl: float


@dataclass
class Trajectory:
    task_id: int
    turns: list[TurnRecord]
    success: bool
    rounds: int  # student-executed turns only
    policy_version: int
    algo: str
    traj_id: int = 0

    @property
    def prefix_len(self) -> int:
        return sum(1 for t in self.turns if t.executed_by == EXECUTED_PREFIX)


# ---------------------------------------------------------------------------
# Rollouts
# ---------------------------------------------------------------------------


def _rollout(env: Env, student: PolicyParams, teacher: TeacherPolicy, task_id: int,
             rng: np.random.Generator, *, max_student_turns: int,
             prefix_actions: list[int] | None, algo: str,
             temperature: float = 1.0, window: int | None = None) -> Trajectory:
    """Shared rollout loop; the three modes differ only in their arguments."""
    state, obs = env.reset(task_id)
    observations = [obs.token_id]
    actions: list[int] = []
    turns: list[TurnRecord] = []

    for a in prefix_actions or []:
        if state.done:
            raise UsageError(
                f"stored trajectory for task {task_id} terminated during its prefix"
            )
        key = encode_history(observations, actions, window)
        turns.append(TurnRecord(history_key=key, action=int(a), student_dist=None,
                                teacher_dist=None, turn_index=state.turn,
                                executed_by=EXECUTED_PREFIX, turn_kl=0.0))
        state, result = env.step(state, int(a))
        actions.append(int(a))
        observations.append(result.observation.token_id)

    rounds = 0
    while not state.done and rounds < max_student_turns:
        key = encode_history(observations, actions, window)
        q_policy = action_dist(student, key, 1.0)
        q_sample = q_policy if temperature == 1.0 else action_dist(student, key, temperature)
        p_teacher = teacher.dist(state)
        a = sample_action(q_sample, rng)
        turns.append(TurnRecord(history_key=key, action=a, student_dist=q_policy,
                                teacher_dist=p_teacher, turn_index=state.turn,
                                executed_by=EXECUTED_STUDENT,
                                turn_kl=forward_kl(p_teacher, q_policy)))
        state, result = env.step(state, a)
        actions.append(a)
        observations.append(result.observation.token_id)
        rounds += 1

    return Trajectory(task_id=task_id, turns=turns, success=state.success,
                      rounds=rounds, policy_version=student.version, algo=algo)


def rollout_opd(env, student, teacher, task_id, rng, *, temperature=1.0,
                window=None) -> Trajectory:
    """Student acts every turn until done or the horizon cap."""
    return _rollout(env, student, teacher, task_id, rng,
                    max_student_turns=env.config.horizon_cap, prefix_actions=None,
                    algo=ALGO_OPD, temperature=temperature, window=window)


def rollout_f2b(env, student, teacher, task_id, k, rng, *, temperature=1.0,
                window=None) -> Trajectory:
    """Like rollout_opd but truncated after min(k, horizon_cap) student turns.

    Success is recorded only if the goal is reached inside the truncated
    window. For k >= horizon_cap this is bit-identical to rollout_opd
    (given identical rng state) apart from the algo tag.
    """
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    return _rollout(env, student, teacher, task_id, rng,
                    max_student_turns=min(k, env.config.horizon_cap),
                    prefix_actions=None, algo=ALGO_F2B,
                    temperature=temperature, window=window)


def rollout_b2f(env, store, student, teacher, task_id, k, rng, *, temperature=1.0,
                window=None) -> Trajectory:
    """Replay the first L - k stored expert actions, then hand over.

    Prefix turns are tagged and excluded from losses. The student then acts
    until done or the horizon cap; with k >= L the prefix is empty and the
    rollout distribution matches rollout_opd.
    """
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    stored = store.get(task_id)
    if stored is None:
        raise ConfigError(f"task {task_id} missing from the expert trajectory store")
    n_prefix = b2f_prefix_len(len(stored), k)
    return _rollout(env, student, teacher, task_id, rng,
                    max_student_turns=env.config.horizon_cap,
                    prefix_actions=list(stored[:n_prefix]), algo=ALGO_B2F,
                    temperature=temperature, window=window)


# ---------------------------------------------------------------------------
# Loss and gradients
# ---------------------------------------------------------------------------


def trajectory_loss(traj: Trajectory, params: PolicyParams | None = None,
                    ) -> tuple[float, dict[HistoryKey, np.ndarray]]:
    """Summed KL over student-executed turns plus its sparse logit gradient.

    With ``params`` given, the student distributions are recomputed at those
    parameters (same keys, softmax at temperature 1); otherwise the
    distributions recorded at collection time are used. Expert prefix turns
    contribute exactly zero to both outputs.
    """
    loss = 0.0
    grads: dict[HistoryKey, np.ndarray] = {}
    for turn in traj.turns:
        if turn.executed_by != EXECUTED_STUDENT:
            continue
        p = turn.teacher_dist
        q = turn.student_dist
        if p is None or (q is None and params is None):
            raise UsageError("student turn is missing recorded distributions")
        if params is not None:
            q = action_dist(params, turn.history_key, 1.0)
        loss += forward_kl(p, q)
        g = kl_logit_gradient(p, q)
        acc = grads.get(turn.history_key)
        grads[turn.history_key] = g if acc is None else acc + g
    return loss, grads


def batch_gradient(batch: list[ExperienceEntry], params: PolicyParams,
                   ) -> tuple[float, dict[HistoryKey, np.ndarray]]:
    """Mean loss and per-key mean gradient over a replay batch.

    The student distribution is recomputed at the current parameters, so
    repeated steps on a fixed batch descend the current KL objective. The
    gradient for a key is averaged over that key's occurrences in the batch,
    keeping the learning rate independent of batch composition.
    """
    if not batch:
        raise UsageError("empty batch")
    loss = 0.0
    sums: dict[HistoryKey, np.ndarray] = {}
    counts: dict[HistoryKey, int] = {}
    for entry in batch:
        q = softmax(params.logits_for(entry.history_key))
        loss += forward_kl(entry.teacher_dist, q)
        g = kl_logit_gradient(entry.teacher_dist, q)
        if entry.history_key in sums:
            sums[entry.history_key] = sums[entry.history_key] + g
            counts[entry.history_key] += 1
        else:
            sums[entry.history_key] = g
            counts[entry.history_key] = 1
    grads = {k: sums[k] / counts[k] for k in sums}
    return loss / len(batch), grads


def apply_gradient(params: PolicyParams, grads: dict[HistoryKey, np.ndarray],
                   lr: float) -> PolicyParams:
    """Gradient-descent step on the logit table; bumps the version by 1.

    Rows are replaced, never mutated, so previously published snapshots
    remain valid.
    """
    new_logits = dict(params.logits)
    for key, g in grads.items():
        new_logits[key] = params.logits_for(key) - lr * g
    return PolicyParams(num_actions=params.num_actions, logits=new_logits,
                        default_logits=params.default_logits,
                        version=params.version + 1)


def learner_step(batch: list[ExperienceEntry], params: PolicyParams,
                 lr: float) -> PolicyParams:
    """One distillation update from a replay batch; see batch_gradient."""
    _, grads = batch_gradient(batch, params)
    return apply_gradient(params, grads, lr)


# ---------------------------------------------------------------------------
# Expert trajectory store
# ---------------------------------------------------------------------------


@dataclass
class TeacherTrajectoryStore:
    """Successful expert action sequences, one per covered task."""

    actions_by_task: dict[int, list[int]] = field(default_factory=dict)
    skipped_tasks: list[int] = field(default_factory=list)
    collection_seed: int | None = None

    def get(self, task_id: int) -> list[int] | None:
        return self.actions_by_task.get(task_id)

    def length(self, task_id: int) -> int:
        return len(self.actions_by_task[task_id])

    def task_ids(self) -> list[int]:
        return sorted(self.actions_by_task)

    def __len__(self) -> int:
        return len(self.actions_by_task)

    def max_length(self) -> int:
        return max((len(a) for a in self.actions_by_task.values()), default=0)


def collect_teacher_trajectories(env: Env, teacher: TeacherPolicy, pass_m: int,
                                 rng: np.random.Generator,
                                 collection_seed: int | None = None,
                                 ) -> TeacherTrajectoryStore:
    """Sample up to pass_m expert rollouts per task, keeping the first success.

    Tasks with no success within pass_m attempts are excluded from the store
    and reported via ``skipped_tasks``.
    """
    if pass_m < 1:
        raise ConfigError(f"pass_m must be >= 1, got {pass_m}")
    store = TeacherTrajectoryStore(collection_seed=collection_seed)
    for task_id in range(env.config.task_count):
        for _ in range(pass_m):
            state, _ = env.reset(task_id)
            actions: list[int] = []
            while not state.done:
                a = sample_action(teacher.dist(state), rng)
                state, _result = env.step(state, a)
                actions.append(a)
            if state.success:
                store.actions_by_task[task_id] = actions
                break
        else:
            store.skipped_tasks.append(task_id)
    return store


def replay_succeeds(env: Env, task_id: int, actions: list[int]) -> bool:
    """Replay an action sequence from reset and report terminal success."""
    state, _ = env.reset(task_id)
    for a in actions:
        if state.done:
            return False
        state, result = env.step(state, a)
    return state.success


def save_store(store: TeacherTrajectoryStore, path) -> None:
    header = {
        "schema": STORE_SCHEMA,
        "kind": "teacher_store",
        "collection_seed": store.collection_seed,
        "skipped_tasks": store.skipped_tasks,
    }
    with open(path, "w") as f:
        f.write(json.dumps(header, sort_keys=True) + "\n")
        for task_id in store.task_ids():
            actions = store.actions_by_task[task_id]
            row = {"task_id": task_id, "actions": actions, "length": len(actions)}
            f.write(json.dumps(row, sort_keys=True) + "\n")


def load_store(path, env: Env) -> TeacherTrajectoryStore:
    """Read a store file and revalidate every trajectory against ``env``."""
    with open(path) as f:
        header = json.loads(f.readline())
        if header.get("schema") != STORE_SCHEMA or header.get("kind") != "teacher_store":
            raise ConfigError(f"{path}: not a teacher trajectory store")
        store = TeacherTrajectoryStore(
            collection_seed=header.get("collection_seed"),
            skipped_tasks=list(header.get("skipped_tasks", [])),
        )
        for line in f:
            if not line.strip():
                continue
            row = json.loads(line)
            task_id = int(row["task_id"])
            actions = [int(a) for a in row["actions"]]
            if len(actions) != int(row["length"]):
                raise ConfigError(f"{path}: length mismatch for task {task_id}")
            if not replay_succeeds(env, task_id, actions):
                raise ConfigError(
                    f"{path}: stored trajectory for task {task_id} no longer "
                    "replays to success in this environment"
                )
            store.actions_by_task[task_id] = actions
    return store


# ---------------------------------------------------------------------------
# SFT baseline
# ---------------------------------------------------------------------------


def store_turns(env: Env, store: TeacherTrajectoryStore,
                window: int | None = None) -> list[tuple[HistoryKey, int]]:
    """Materialize (history key, expert action) pairs for every stored turn."""
    pairs: list[tuple[HistoryKey, int]] = []
    for task_id in store.task_ids():
        state, obs = env.reset(task_id)
        observations = [obs.token_id]
        actions: list[int] = []
        for a in store.actions_by_task[task_id]:
            pairs.append((encode_history(observations, actions, window), a))
            state, result = env.step(state, a)
            actions.append(a)
            observations.append(result.observation.token_id)
    return pairs


def sft_update(store: TeacherTrajectoryStore, student: PolicyParams, lr: float,
               env: Env, window: int | None = None) -> PolicyParams:
    """One epoch of NLL gradient descent on the stored expert turns.

    The per-turn gradient is softmax(logits) - onehot(expert action); turns
    sharing a key accumulate. Returns new parameters with version + 1.
    """
    if not store.actions_by_task:
        raise ConfigError("SFT requires a non-empty trajectory store")
    grads: dict[HistoryKey, np.ndarray] = {}
    for key, a_star in store_turns(env, store, window):
        q = softmax(student.logits_for(key))
        g = q.copy()
        g[a_star] -= 1.0
        acc = grads.get(key)
        grads[key] = g if acc is None else acc + g
    return apply_gradient(student, grads, lr)


def nll_loss(store: TeacherTrajectoryStore, student: PolicyParams, env: Env,
             window: int | None = None) -> float:
    """-sum log softmax(logits)[expert action] over all stored turns."""
    total = 0.0
    for key, a_star in store_turns(env, store, window):
        q = softmax(student.logits_for(key))
        total -= float(np.log(max(q[a_star], 1e-300)))
    return total
