"""CriticalStepWorld: an episodic multi-step environment with a synthetic
dual-precision policy pair whose step-wise divergence is bimodal by
construction.

Each episode derives, from (config.seed, episode_seed), a task with a goal
length G = horizon - 2 and a small set of critical step indices. At a
critical step exactly ``n_correct_paths`` actions advance progress and every
other action silently poisons the episode (it runs on but can no longer
succeed). At non-critical steps a majority of actions advance and the rest
merely waste the step. The high-precision policy concentrates mass on
advancing actions everywhere; the low-precision policy matches it within
``divergence_low`` at non-critical steps and shifts mass onto poisoning
actions at critical steps until KL(low || high) reaches ``divergence_high``.

Transitions are deterministic given the action, so rollouts are driven by
three separate RNG streams (policy sampling, router sampling, driver coins),
each derived from (master_seed, stream tag, episode_seed, sample_index).
This keeps klst-collection trajectories bitwise identical to fixed-high
ones under equal seeds.
"""

from __future__ import annotations

import hashlib
import json
import socket
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path
from typing import Callable

import numpy as np

from .router import RouterParams, StepSequence, route

# RNG stream tags (first entropy word after the master seed)
STREAM_TASK = 0
STREAM_POLICY = 1
STREAM_ROUTER = 2
STREAM_DRIVER = 3

LOW, HIGH = 0, 1

TRAJECTORY_SCHEMA_VERSION = 1


class EnvConfigError(ValueError):
    pass


class EnvProtocolError(RuntimeError):
    """step() called on a terminal state."""


class RemotePolicyError(RuntimeError):
    pass


class RemoteTimeoutError(RemotePolicyError):
    pass


class MalformedResponseError(RemotePolicyError):
    pass


class UnnormalizedDistributionError(RemotePolicyError):
    pass


def _rng(*key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in key]))


@dataclass(frozen=True)
class ActionSpace:
    size: int

    def __post_init__(self):
        if self.size < 2:
            raise EnvConfigError("action space needs at least 2 actions")


@dataclass(frozen=True)
class EnvConfig:
    horizon: int = 12
    action_space: ActionSpace = field(default_factory=lambda: ActionSpace(6))
    critical_steps: frozenset[int] | None = None  # explicit; None -> seeded per episode
    n_critical: int = 2
    n_correct_paths: int = 1
    divergence_low: float = 0.01
    divergence_high: float = 1.0
    seed: int = 0

    def __post_init__(self):
        problems = []
        if self.horizon < 1:
            problems.append("horizon must be >= 1")
        if self.critical_steps is not None:
            object.__setattr__(self, "critical_steps", frozenset(self.critical_steps))
            bad = [t for t in self.critical_steps if not 1 <= t <= self.horizon]
            if bad:
                problems.append(f"critical steps {bad} outside [1, {self.horizon}]")
        if self.n_critical < 0:
            problems.append("n_critical must be >= 0")
        if not 1 <= self.n_correct_paths < self.action_space.size:
            problems.append("n_correct_paths must be in [1, |A|)")
        if self.divergence_low < 0:
            problems.append("divergence_low must be >= 0")
        if self.divergence_high <= self.divergence_low:
            problems.append("divergence_high must be > divergence_low")
        if self.seed < 0:
            problems.append("seed must be >= 0")
        if problems:
            raise EnvConfigError("invalid EnvConfig: " + "; ".join(problems))

    @property
    def goal_len(self) -> int:
        return max(1, self.horizon - 2)


@dataclass(frozen=True)
class TaskSpec:
    task_id: int
    goal_len: int
    critical_steps: frozenset[int]
    advancing: tuple[frozenset[int], ...]   # indexed by step, entry 0 unused
    zones: tuple[int, ...]
    notes: tuple[int, ...]
    concentration: tuple[float, ...]        # high-policy mass on advancing set
    kl_targets: tuple[float, ...]           # low-policy divergence target


def _build_task(config: EnvConfig, episode_seed: int) -> TaskSpec:
    rng = _rng(config.seed, STREAM_TASK, episode_seed)
    task_id = int(rng.integers(0, 10_000))
    goal = config.goal_len
    if config.critical_steps is not None:
        critical = config.critical_steps
    else:
        candidates = np.arange(2, goal + 1)
        n = min(config.n_critical, candidates.size)
        critical = frozenset(
            int(t) for t in rng.choice(candidates, size=n, replace=False)
        ) if n > 0 else frozenset()

    n_actions = config.action_space.size
    majority = max(config.n_correct_paths, n_actions // 2 + 1)
    advancing = [frozenset()]  # index 0 unused; steps are 1-based
    zones, notes, conc, kl_targets = [0], [0], [0.0], [0.0]
    for t in range(1, config.horizon + 3):
        is_critical = t in critical
        width = config.n_correct_paths if is_critical else majority
        advancing.append(frozenset(
            int(a) for a in rng.choice(n_actions, size=width, replace=False)
        ))
        zones.append(int(rng.integers(0, 20)))
        notes.append(int(rng.integers(0, 50)))
        if is_critical:
            conc.append(float(rng.uniform(0.988, 0.996)))
            kl_targets.append(config.divergence_high * float(rng.uniform(1.02, 1.30)))
        else:
            conc.append(float(rng.uniform(0.975, 0.990)))
            kl_targets.append(config.divergence_low * float(rng.uniform(0.25, 0.75)))
    return TaskSpec(
        task_id=task_id,
        goal_len=goal,
        critical_steps=critical,
        advancing=tuple(advancing),
        zones=tuple(zones),
        notes=tuple(notes),
        concentration=tuple(conc),
        kl_targets=tuple(kl_targets),
    )


@dataclass(frozen=True)
class EnvState:
    config: EnvConfig
    episode_seed: int
    task: TaskSpec
    t: int                 # 1-based index of the pending decision step
    progress: int
    poisoned: bool
    history: tuple[tuple[int, tuple[str, ...]], ...]  # (action, resulting observation)
    observation: tuple[str, ...]  # visible before acting at step t
    terminal: bool = False
    success: bool = False

    @property
    def task_tokens(self) -> tuple[str, ...]:
        return ("task", f"t{self.task.task_id}", "goal", f"g{self.task.goal_len}")

    @property
    def is_critical_now(self) -> bool:
        return self.t in self.task.critical_steps


def _observation(task: TaskSpec, t: int, result: str, progress: int) -> tuple[str, ...]:
    status = ("alarm", "fragile") if t in task.critical_steps else ("calm", "steady")
    return (
        result, "prog", f"p{progress}",
        "zone", f"z{task.zones[t]}",
        *status,
        "note", f"n{task.notes[t]}",
    )


def reset(config: EnvConfig, episode_seed: int) -> EnvState:
    task = _build_task(config, episode_seed)
    return EnvState(
        config=config,
        episode_seed=episode_seed,
        task=task,
        t=1,
        progress=0,
        poisoned=False,
        history=(),
        observation=_observation(task, 1, "start", 0),
    )


def step(state: EnvState, action: int):
    """Apply one action. Returns (next_state, observation, done, success).

    Poisoning is silent: the failed episode keeps emitting ordinary
    observations and fails at the horizon.
    """
    if state.terminal:
        raise EnvProtocolError("step() on a terminal state")
    n_actions = state.config.action_space.size
    if not 0 <= action < n_actions:
        raise ValueError(f"action {action} outside [0, {n_actions})")

    task = state.task
    advancing = action in task.advancing[state.t]
    poisoned = state.poisoned or (state.t in task.critical_steps and not advancing)
    if advancing and not poisoned:
        progress = state.progress + 1
        result = "ok"
    else:
        progress = state.progress
        result = "noop"

    success = (not poisoned) and progress >= task.goal_len
    done = success or state.t >= state.config.horizon
    obs = _observation(task, state.t + 1, result, progress)
    next_state = replace(
        state,
        t=state.t + 1,
        progress=progress,
        poisoned=poisoned,
        history=state.history + ((action, obs),),
        observation=obs,
        terminal=done,
        success=success,
    )
    return next_state, list(obs), done, success


# --- dual-precision policy pair ----------------------------------------------

@dataclass(frozen=True)
class PolicyPair:
    high: Callable[[EnvState], np.ndarray]
    low: Callable[[EnvState], np.ndarray]
    costs: tuple[float, float] = (0.0, 1.0)  # per-call cost (low, high)


def policy_distribution(pair: PolicyPair, which: str, state: EnvState) -> np.ndarray:
    if state.terminal:
        raise EnvProtocolError("policy queried on a terminal state")
    if which == "high":
        return pair.high(state)
    if which == "low":
        return pair.low(state)
    raise ValueError(f"unknown policy {which!r}")


def _concentrated(n_actions: int, on: frozenset[int], mass: float) -> np.ndarray:
    dist = np.zeros(n_actions)
    on_idx = sorted(on)
    dist[on_idx] = mass / len(on_idx)
    rest = [a for a in range(n_actions) if a not in on]
    if rest:
        dist[rest] = (1.0 - mass) / len(rest)
    else:
        dist /= dist.sum()
    return dist


def _categorical_kl(p: np.ndarray, q: np.ndarray) -> float:
    live = p > 0
    return float(np.sum(p[live] * np.log(p[live] / q[live])))


def _solve_mixture(base: np.ndarray, direction: np.ndarray, target_kl: float) -> np.ndarray:
    """Smallest mixture (1-a)*base + a*direction with KL(mix || base) = target.

    KL of the mixture is convex in ``a`` with value 0 at a=0, hence
    nondecreasing on [0, 1]; bisection is exact enough at 80 iterations.
    """
    if target_kl <= 0.0:
        return base.copy()
    reachable = _categorical_kl(direction, base)
    if reachable < target_kl:
        raise EnvConfigError(
            f"divergence target {target_kl:.4g} unreachable (max {reachable:.4g}); "
            "lower divergence_high or flatten the high policy"
        )
    lo, hi = 0.0, 1.0
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        mix = (1.0 - mid) * base + mid * direction
        if _categorical_kl(mix, base) < target_kl:
            lo = mid
        else:
            hi = mid
    return (1.0 - hi) * base + hi * direction


class SyntheticPolicy:
    """Deterministic state-conditional action distribution for the world.

    ``which`` is "high" or "low". Picklable so rollouts can fan out across
    worker processes.
    """

    def __init__(self, which: str):
        if which not in ("high", "low"):
            raise ValueError(f"unknown policy {which!r}")
        self.which = which

    def __call__(self, state: EnvState) -> np.ndarray:
        task = state.task
        t = state.t
        n_actions = state.config.action_space.size
        high = _concentrated(n_actions, task.advancing[t], task.concentration[t])
        if self.which == "high":
            return high
        if t in task.critical_steps:
            poison = frozenset(range(n_actions)) - task.advancing[t]
            direction = _concentrated(n_actions, poison, 1.0)
        else:
            direction = np.full(n_actions, 1.0 / n_actions)
        return _solve_mixture(high, direction, task.kl_targets[t])


def make_policy_pair(config: EnvConfig) -> PolicyPair:
    return PolicyPair(high=SyntheticPolicy("high"), low=SyntheticPolicy("low"))


# --- step embeddings ----------------------------------------------------------

@lru_cache(maxsize=65536)
def _token_hash(token: str) -> int:
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def embed_step(task_tokens, action: int | None, observation_tokens, dim: int) -> np.ndarray:
    """Feature-hash one interaction step into a unit-norm vector.

    Tokens of the task description, the action that led into the step, and
    the step's observation are hashed into ``dim`` signed buckets. A zero
    accumulation (no tokens) stays the zero vector.
    """
    acc = np.zeros(dim)
    action_tokens = () if action is None else (f"act{action}",)
    for tok in (*task_tokens, *action_tokens, *observation_tokens):
        h = _token_hash(tok)
        acc[(h >> 1) % dim] += 1.0 if h & 1 else -1.0
    norm = np.linalg.norm(acc)
    if norm == 0.0:
        return acc
    return acc / norm


# --- trajectories -------------------------------------------------------------

@dataclass(frozen=True)
class TrajStep:
    t: int
    observation: tuple[str, ...]
    action: int
    executed: int                      # LOW or HIGH: precision actually queried
    route_choice: int | None           # router decision, None for fixed drivers
    d_t: float | None                  # KL(low || high), klst collection only
    embedding: np.ndarray | None
    critical: bool                     # construction-time ground truth


@dataclass(frozen=True)
class Trajectory:
    episode_seed: int
    driver: str
    steps: tuple[TrajStep, ...]
    success: bool
    n_high: int
    n_steps: int

    def __post_init__(self):
        if self.n_high > self.n_steps:
            raise ValueError("high-precision calls cannot exceed total steps")

    @property
    def high_ratio(self) -> float:
        return self.n_high / self.n_steps if self.n_steps else 0.0


# --- rollout drivers ----------------------------------------------------------

@dataclass(frozen=True)
class FixedLow:
    tag: str = "fixed_low"


@dataclass(frozen=True)
class FixedHigh:
    tag: str = "fixed_high"


@dataclass(frozen=True)
class KlstCollect:
    tag: str = "klst_collect"


@dataclass(frozen=True)
class RandomDriver:
    p: float
    tag: str = "random"

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise ValueError("p must lie in [0, 1]")


@dataclass(frozen=True)
class RouterDriver:
    params: RouterParams
    mode: str = "sampled"
    tag: str = "router"


Driver = FixedLow | FixedHigh | KlstCollect | RandomDriver | RouterDriver


def _sample(dist: np.ndarray, rng: np.random.Generator) -> int:
    u = rng.random()
    return int(min(np.searchsorted(np.cumsum(dist), u, side="right"), len(dist) - 1))


def rollout(config: EnvConfig, pair: PolicyPair, driver: Driver, episode_seed: int,
            master_seed: int = 0, sample_index: int = 0, embed_dim: int = 64,
            record_embeddings: bool | None = None) -> Trajectory:
    """Run one episode under a driver.

    fixed_low / fixed_high query a single policy; random(p) flips an
    independent coin per step; the router driver routes each step from the
    incrementally built StepSequence; klst_collect evaluates both policies,
    records D_t = KL(low || high) and executes the high-precision sample.
    """
    policy_rng = _rng(master_seed, STREAM_POLICY, episode_seed, sample_index)
    driver_rng = _rng(master_seed, STREAM_DRIVER, episode_seed, sample_index)
    router_rng = _rng(master_seed, STREAM_ROUTER, episode_seed, sample_index)

    if isinstance(driver, RouterDriver):
        if driver.params.config.num_precisions != 2:
            raise ValueError("synthetic rollouts need a binary (K=2) router")
        embed_dim = driver.params.config.embed_dim
    if record_embeddings is None:
        record_embeddings = isinstance(driver, (RouterDriver, KlstCollect))

    state = reset(config, episode_seed)
    steps: list[TrajStep] = []
    embeddings: list[np.ndarray] = []
    prev_action: int | None = None
    n_high = 0

    while not state.terminal:
        z = None
        if record_embeddings:
            z = embed_step(state.task_tokens, prev_action, state.observation, embed_dim)
            embeddings.append(z)

        choice: int | None = None
        d_t: float | None = None
        high_dist: np.ndarray | None = None
        if isinstance(driver, FixedLow):
            executed = LOW
        elif isinstance(driver, FixedHigh):
            executed = HIGH
        elif isinstance(driver, RandomDriver):
            executed = HIGH if driver_rng.random() < driver.p else LOW
        elif isinstance(driver, KlstCollect):
            from .klst import kl_divergence  # local import: klst builds on env
            low_dist = pair.low(state)
            high_dist = pair.high(state)
            d_t = kl_divergence(low_dist, high_dist)
            executed = HIGH
        elif isinstance(driver, RouterDriver):
            seq = StepSequence.of(np.asarray(embeddings))
            decision = route(seq, driver.params, driver.mode, router_rng)
            choice = decision.chosen
            executed = HIGH if choice == HIGH else LOW
        else:
            raise TypeError(f"unknown driver {driver!r}")

        if high_dist is None:
            dist = pair.high(state) if executed == HIGH else pair.low(state)
        else:
            dist = high_dist
        action = _sample(dist, policy_rng)
        n_high += int(executed == HIGH)

        steps.append(TrajStep(
            t=state.t,
            observation=state.observation,
            action=action,
            executed=executed,
            route_choice=choice,
            d_t=d_t,
            embedding=z,
            critical=state.is_critical_now,
        ))
        prev_action = action
        state, _, _, _ = step(state, action)

    return Trajectory(
        episode_seed=episode_seed,
        driver=driver.tag,
        steps=tuple(steps),
        success=state.success,
        n_high=n_high,
        n_steps=len(steps),
    )


def _rollout_job(args) -> Trajectory:
    config, pair, driver, episode_seed, master_seed, embed_dim, record = args
    return rollout(config, pair, driver, episode_seed, master_seed,
                   embed_dim=embed_dim, record_embeddings=record)


def run_episodes(config: EnvConfig, pair: PolicyPair, driver: Driver,
                 episode_seeds, master_seed: int = 0, embed_dim: int = 64,
                 record_embeddings: bool | None = None,
                 workers: int = 1) -> list[Trajectory]:
    """Roll out many independent episodes, optionally across processes.

    Results are ordered by the given seeds regardless of worker count, so
    parallelism never changes the outcome.
    """
    jobs = [(config, pair, driver, int(s), master_seed, embed_dim, record_embeddings)
            for s in episode_seeds]
    if workers <= 1:
        return [_rollout_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_rollout_job, jobs, chunksize=max(1, len(jobs) // (4 * workers))))


# --- trajectory persistence (JSONL) -------------------------------------------

def save_trajectories(trajectories, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for traj in trajectories:
            record = {
                "schema": TRAJECTORY_SCHEMA_VERSION,
                "episode_seed": traj.episode_seed,
                "driver": traj.driver,
                "success": traj.success,
                "S": traj.n_high,
                "T": traj.n_steps,
                "steps": [
                    {
                        "t": s.t,
                        "action": s.action,
                        "observation_tokens": list(s.observation),
                        "executed": s.executed,
                        "crit": s.critical,
                        **({"r": s.route_choice} if s.route_choice is not None else {}),
                        **({"D": s.d_t} if s.d_t is not None else {}),
                    }
                    for s in traj.steps
                ],
            }
            f.write(json.dumps(record, sort_keys=True) + "\n")


def load_trajectories(path) -> list[Trajectory]:
    out = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            rec = json.loads(line)
            if rec.get("schema") != TRAJECTORY_SCHEMA_VERSION:
                raise ValueError(f"unsupported trajectory schema {rec.get('schema')}")
            steps = tuple(
                TrajStep(
                    t=s["t"],
                    observation=tuple(s["observation_tokens"]),
                    action=s["action"],
                    executed=s["executed"],
                    route_choice=s.get("r"),
                    d_t=s.get("D"),
                    embedding=None,
                    critical=s["crit"],
                )
                for s in rec["steps"]
            )
            out.append(Trajectory(
                episode_seed=rec["episode_seed"],
                driver=rec["driver"],
                steps=steps,
                success=rec["success"],
                n_high=rec["S"],
                n_steps=rec["T"],
            ))
    return out


# --- remote policy adapter -----------------------------------------------------

class RemotePolicy:
    """Queries a policy server speaking newline-delimited JSON over TCP.

    Request:  {"task": [...], "history": [{"action": a|null,
              "observation": [...]}, ...], "action_space_size": n}
    The final history entry carries the current observation with a null
    action. Response: {"probs": [p_0, ..., p_{n-1}]}.
    """

    def __init__(self, host: str, port: int, timeout: float = 5.0):
        self.host = host
        self.port = port
        self.timeout = timeout

    def __call__(self, state: EnvState) -> np.ndarray:
        n_actions = state.config.action_space.size
        request = {
            "task": list(state.task_tokens),
            "history": [
                {"action": a, "observation": list(obs)} for a, obs in state.history
            ] + [{"action": None, "observation": list(state.observation)}],
            "action_space_size": n_actions,
        }
        try:
            with socket.create_connection((self.host, self.port), timeout=self.timeout) as sock:
                sock.sendall(json.dumps(request).encode("utf-8") + b"\n")
                with sock.makefile("rb") as reader:
                    line = reader.readline()
        except (socket.timeout, TimeoutError) as exc:
            raise RemoteTimeoutError(f"{self.host}:{self.port} timed out") from exc
        except OSError as exc:
            raise RemotePolicyError(f"{self.host}:{self.port}: {exc}") from exc
        if not line:
            raise MalformedResponseError("server closed the connection without a response")
        try:
            payload = json.loads(line)
            probs = payload["probs"]
        except (ValueError, KeyError, TypeError) as exc:
            raise MalformedResponseError(f"unparseable response: {line[:200]!r}") from exc
        if not isinstance(probs, list) or len(probs) != n_actions:
            raise MalformedResponseError(
                f"expected {n_actions} probabilities, got {probs!r}"
            )
        dist = np.asarray(probs, dtype=np.float64)
        if not np.all(np.isfinite(dist)) or (dist < 0).any():
            raise MalformedResponseError("probabilities must be finite and nonnegative")
        if abs(float(dist.sum()) - 1.0) > 1e-6:
            raise UnnormalizedDistributionError(
                f"probabilities sum to {dist.sum():.8f}, expected 1"
            )
        return dist


def remote_policy(address: str, timeout: float = 5.0) -> RemotePolicy:
    """Build a policy function from a "host:port" endpoint address."""
    host, _, port = address.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"address must look like host:port, got {address!r}")
    return RemotePolicy(host, int(port), timeout=timeout)
