"""Config-driven experiment runner for the oracle / static / acrl / full_update comparison."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence


from . import agent as ag
from . import reward_model as rm
from .active import AcquisitionLog, AcquisitionStrategy, ExperienceWindow, acquisition_round
from .core import (
    ConfigError,
    DivergenceError,
    DomainError,
    ImprovementFromStart,
    Transition,
    improvement_increment,
    state_key,
)
from .envs import ENVIRONMENTS, InstrumentedOracle
from .nn import adam_step, loss_and_grad, make_rng, save_network

log = logging.getLogger(__name__)

MODES = ("oracle", "static", "acrl", "full_update")

METRICS_HEADER = [
    "episode", "episode_return", "model_reward", "spot_check", "epsilon",
    "oracle_queries", "model_queries", "buffer_size", "retrained",
    # ground-truth audit of each episode's end state; never counted as oracle queries
    "true_return", "true_final",
]


# --------------------------------------------------------------------------- config


@dataclass
class EnvConfig:
    kind: str = "seq"
    params: dict = field(default_factory=dict)
    latency_ms: float = 0.0


@dataclass
class AgentConfig:
    gamma: float = 0.95
    hidden: tuple = (32, 32)
    lr: float = 1e-3
    buffer_capacity: int = 20000
    batch_size: int = 32
    update_every: int = 1
    sync_every: int = 100
    eps0: float = 1.0
    lam: float = 0.0
    eps_end: float = 0.01
    t_end: int = 4800
    # recompute stored rewards from the current committee when sampled
    recompute_rewards: bool = False


@dataclass
class RewardModelConfig:
    k: int = 3
    hidden: tuple = (64, 64)
    epochs: int = 60
    batch_size: int = 64
    lr: float = 1e-3
    split_fraction: float = 0.8
    initial_size: int = 500
    retrain_every: int = 100
    strategy: str = "std"
    budget: int | None = None
    window: int = 2000
    num_bins: int = 5
    fine_tune: bool = False
    fine_tune_steps: int = 200


@dataclass
class Seeds:
    run: int = 0
    oracle: int = 0
    model: int = 0


@dataclass
class ExperimentConfig:
    env: EnvConfig = field(default_factory=EnvConfig)
    agent: AgentConfig = field(default_factory=AgentConfig)
    reward_model: RewardModelConfig = field(default_factory=RewardModelConfig)
    mode: str = "acrl"
    episodes: int = 1000
    seeds: Seeds = field(default_factory=Seeds)
    output_dir: str = "runs/default"
    spot_check_every: int = 0
    audit: bool = True
    name: str = ""

    @property
    def strategy(self) -> AcquisitionStrategy:
        m = self.reward_model
        return AcquisitionStrategy(m.strategy, m.budget or 1, m.window, m.retrain_every, m.num_bins)

    @property
    def model_hyper(self) -> rm.ModelHyper:
        m = self.reward_model
        return rm.ModelHyper(tuple(m.hidden), m.epochs, m.batch_size, m.lr, m.fine_tune, m.fine_tune_steps)


def _build(cls, data: Any, path: str):
    if not isinstance(data, dict):
        raise ConfigError(path, f"expected an object, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"{path}.{unknown[0]}" if path else unknown[0], "unknown field")
    kwargs = {}
    for name, value in data.items():
        f = fields[name]
        where = f"{path}.{name}" if path else name
        default = f.default_factory() if f.default_factory is not dataclasses.MISSING else f.default
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, where)
        elif isinstance(default, tuple):
            if not isinstance(value, list) or not all(isinstance(v, int) and v > 0 for v in value):
                raise ConfigError(where, "expected a list of positive integers")
            kwargs[name] = tuple(value)
        elif isinstance(default, bool):
            if not isinstance(value, bool):
                raise ConfigError(where, "expected true/false")
            kwargs[name] = value
        elif isinstance(default, float):
            if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
                raise ConfigError(where, "expected a finite number")
            kwargs[name] = float(value)
        elif isinstance(default, int) or default is None:
            # ``None`` defaults are optional integers
            if value is not None and (isinstance(value, bool) or not isinstance(value, int)):
                raise ConfigError(where, "expected an integer")
            if value is None and default is not None:
                raise ConfigError(where, "expected an integer")
            kwargs[name] = value
        elif isinstance(default, str):
            if not isinstance(value, str):
                raise ConfigError(where, "expected a string")
            kwargs[name] = value
        elif isinstance(default, dict):
            if not isinstance(value, dict):
                raise ConfigError(where, "expected an object")
            kwargs[name] = value
    return cls(**kwargs)


def validate(cfg: ExperimentConfig) -> ExperimentConfig:
    """Check cross-field consistency and fill mode-dependent defaults."""
    if cfg.mode not in MODES:
        raise ConfigError("mode", f"must be one of {MODES}")
    if cfg.episodes < 0:
        raise ConfigError("episodes", "must be >= 0")
    if cfg.env.kind not in ENVIRONMENTS:
        raise ConfigError("env.kind", f"must be one of {sorted(ENVIRONMENTS)}")
    if cfg.env.latency_ms < 0:
        raise ConfigError("env.latency_ms", "must be >= 0")
    if cfg.spot_check_every < 0:
        raise ConfigError("spot_check_every", "must be >= 0")
    a, m = cfg.agent, cfg.reward_model
    for name in ("buffer_capacity", "batch_size", "update_every", "t_end"):
        if getattr(a, name) < 1:
            raise ConfigError(f"agent.{name}", "must be >= 1")
    if a.sync_every < 0:
        raise ConfigError("agent.sync_every", "must be >= 0")
    if not 0.0 <= a.gamma <= 1.0:
        raise ConfigError("agent.gamma", "must lie in [0, 1]")
    if not 0.0 <= a.lam <= 1.0:
        raise ConfigError("agent.lam", "must lie in [0, 1]")
    if a.eps0 <= 0:
        raise ConfigError("agent.eps0", "must be positive")
    if a.batch_size > a.buffer_capacity:
        raise ConfigError("agent.batch_size", "exceeds buffer capacity")
    if m.k < 1:
        raise ConfigError("reward_model.k", "must be >= 1")
    if not 0.0 < m.split_fraction <= 1.0:
        raise ConfigError("reward_model.split_fraction", "must lie in (0, 1]")
    if cfg.mode != "oracle" and m.initial_size < 1:
        raise ConfigError("reward_model.initial_size", "must be >= 1 when a reward model is used")
    if m.epochs < 0 or m.batch_size < 1 or m.fine_tune_steps < 1:
        raise ConfigError("reward_model", "epochs >= 0, batch_size >= 1 and fine_tune_steps >= 1 required")
    if cfg.mode in ("static", "full_update", "oracle") and m.budget:
        raise ConfigError("reward_model.budget", f"mode {cfg.mode} does not acquire; budget must be 0")
    if cfg.mode == "acrl":
        if m.budget is None:
            m.budget = 50
        if m.budget < 1:
            raise ConfigError("reward_model.budget", "acrl needs a positive budget")
        cfg.strategy  # constructing it validates the strategy fields
    else:
        m.budget = 0
        AcquisitionStrategy(m.strategy, 1, max(1, m.window), max(1, m.retrain_every), max(1, m.num_bins))
    if a.recompute_rewards and cfg.env.kind == "improve":
        raise ConfigError("agent.recompute_rewards", "only supported for delta-reward environments")
    try:
        make_env(cfg)
    except TypeError as exc:
        raise ConfigError("env.params", str(exc)) from None
    return cfg


def config_from_dict(data: dict) -> ExperimentConfig:
    return validate(_build(ExperimentConfig, data, ""))


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError("<file>", f"{path} does not exist") from None
    except json.JSONDecodeError as exc:
        raise ConfigError("<file>", f"{path} is not valid JSON: {exc}") from None
    return config_from_dict(data)


def config_to_dict(cfg: ExperimentConfig) -> dict:
    def plain(v):
        if isinstance(v, tuple):
            return [plain(x) for x in v]
        if isinstance(v, dict):
            return {k: plain(x) for k, x in v.items()}
        return v
    return plain(dataclasses.asdict(cfg))


def make_env(cfg: ExperimentConfig):
    cls = ENVIRONMENTS[cfg.env.kind]
    params = dict(cfg.env.params)
    params.setdefault("oracle_seed", cfg.seeds.oracle)
    for key in ("constraint", "init_constraint", "start_len"):
        if key in params:
            params[key] = tuple(params[key])
    return cls(**params)


# --------------------------------------------------------------------------- running


def speedup(oracle_queries: int, model_queries: int) -> float:
    """Reward-model queries served per oracle query."""
    if oracle_queries <= 0:
        raise DomainError("speed-up undefined without oracle queries")
    return model_queries / oracle_queries


@dataclass
class RunResult:
    config: ExperimentConfig
    rows: list[dict]
    out_dir: Path | None
    oracle: InstrumentedOracle
    committee: rm.Committee | None
    q: ag.QFunction
    init_keys: set
    acquired_keys: set
    spot_keys: set
    retrain_episodes: list[int]
    final_states: list
    start_states: list
    diverged: str | None = None

    @property
    def metrics_path(self) -> Path | None:
        return None if self.out_dir is None else self.out_dir / "metrics.csv"


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return repr(v)
    return str(v)


class _RewardSource:
    """Values of states under the oracle or the current committee, with query counting."""

    def __init__(self, env, oracle: InstrumentedOracle, features: ag.StateFeatures):
        self.env = env
        self.oracle = oracle
        self.features = features
        self.committee: rm.Committee | None = None
        self.model_queries = 0
        self._cache: dict = {}

    def set_committee(self, committee: rm.Committee) -> None:
        self.committee = committee
        self._cache = {}

    def value(self, state):
        if self.committee is None:
            return self.oracle(state)
        self.model_queries += 1
        key = state_key(state)
        v = self._cache.get(key)
        if v is None:
            out = rm.member_outputs(self.committee, self.features.encode(state)).mean(axis=0)[0]
            v = float(out[0]) if len(out) == 1 else tuple(float(o) for o in out)
            self._cache[key] = v
        return v

    def reward(self, v_prev, v_next, v_start) -> float:
        mode = self.env.reward_mode
        if isinstance(mode, ImprovementFromStart):
            return improvement_increment(v_prev, v_next, v_start, mode)
        return float(v_prev) - float(v_next)


def run_experiment(cfg: ExperimentConfig, out_dir=None, write: bool = True) -> RunResult:
    """Run the full training loop for ``cfg.mode``; see README for per-mode semantics.

    Writes ``metrics.csv``, ``config.json``, checkpoints, per-member datasets
    and the acquisition log under ``out_dir`` (default ``cfg.output_dir``).
    """
    out = Path(out_dir or cfg.output_dir) if write else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(config_to_dict(cfg), indent=2, sort_keys=True) + "\n")

    env = make_env(cfg)
    a, m = cfg.agent, cfg.reward_model
    seed = cfg.seeds.run
    rng_env, rng_act, rng_buf, rng_acq, rng_spot = (make_rng((seed, s)) for s in (1, 2, 3, 4, 5))
    oracle = InstrumentedOracle(env.oracle_fn, cfg.env.latency_ms)
    feats = ag.StateFeatures(env)
    source = _RewardSource(env, oracle, feats)
    q = ag.make_q(env.feature_dim + 1, a.hidden, (seed, 6), a.gamma, a.lr)
    buffer = ag.ReplayBuffer(a.buffer_capacity)
    schedule = ag.EpsilonSchedule(a.eps0, a.lam, a.t_end, a.eps_end)
    strategy = cfg.strategy if cfg.mode == "acrl" else None
    window = ExperienceWindow(m.window) if strategy else None
    hyper = cfg.model_hyper
    if cfg.mode == "full_update":
        # retraining every episode: continue from the previous members to bound cost
        hyper = dataclasses.replace(hyper, fine_tune=True)
    acq_log = AcquisitionLog(out / "acquisition.csv") if (out is not None and strategy) else None

    init_keys: set = set()
    acquired_keys: set = set()
    spot_keys: set = set()
    committee = None
    datasets: list[rm.LabeledDataset] = []
    written = []
    if cfg.mode != "oracle":
        base = rm.LabeledDataset(env.feature_dim, env.output_dim)
        for s in env.sample_initial(m.initial_size, make_rng((cfg.seeds.model, 20))):
            key = state_key(s)
            if key not in base:
                base.add(feats.encode(s), oracle(s), rm.INITIAL, key)
                init_keys.add(key)
        committee = rm.build_committee(base, m.k, m.split_fraction, hyper, cfg.seeds.model)
        datasets = rm.member_datasets(base, m.k)
        source.set_committee(committee)
        if out is not None:
            for i, ds in enumerate(datasets):
                ds.write_csv(out / f"dataset_member{i}.csv")
            written = [len(ds) for ds in datasets]

    def recompute(t: Transition) -> Transition:
        r = source.reward(source.value(t.state), source.value(t.next_state), None)
        return dataclasses.replace(t, reward=r)

    metrics_fh = None
    writer = None
    if out is not None:
        metrics_fh = (out / "metrics.csv").open("w", newline="")
        writer = csv.writer(metrics_fh)
        writer.writerow(METRICS_HEADER)

    rows: list[dict] = []
    retrain_episodes: list[int] = []
    final_states, start_states = [], []
    diverged = None
    steps = 0
    try:
        for episode in range(1, cfg.episodes + 1):
            eps = schedule(episode - 1)
            s = env.reset(rng_env)
            s0 = s
            v0 = source.value(s)
            v_prev = v0
            visited = [s]
            ret = 0.0
            for t in range(env.horizon):
                left = env.horizon - t - 1
                succ, x = feats.successor_inputs(s, left)
                idx = ag.select_action(q, x, eps, rng_act)
                action, s_next = succ[idx]
                v_next = source.value(s_next)
                r = source.reward(v_prev, v_next, v0)
                ret += r
                buffer.add(Transition(s, action, r, s_next, left == 0, left))
                if window is not None:
                    window.add(s_next)
                visited.append(s_next)
                steps += 1
                if steps % a.update_every == 0 and len(buffer) >= a.batch_size:
                    if a.recompute_rewards and source.committee is not None:
                        _optimize_recomputed(q, buffer, a, rng_buf, feats, recompute)
                    else:
                        ag.optimize_step(q, buffer, a.batch_size, rng_buf, feats, a.sync_every)
                s, v_prev = s_next, v_next
            model_reward = ret if source.committee is not None else None
            final_states.append(s)
            start_states.append(s0)

            spot = None
            if cfg.spot_check_every and episode % cfg.spot_check_every == 0:
                probe = visited[int(rng_spot.integers(len(visited)))]
                spot_keys.add(state_key(probe))
                spot_keys.add(state_key(s0))
                spot = env.objective(oracle(probe), oracle(s0))

            retrained = False
            if cfg.mode == "acrl" and episode % strategy.every == 0:
                res = acquisition_round(window, committee, oracle, strategy, feats.encode, datasets, rng_acq)
                for rows_i in res.rows:
                    acquired_keys.update(k for k, _, _ in rows_i)
                datasets = rm.append_acquired(datasets, res.rows)
                committee = rm.retrain(committee, datasets, hyper, (cfg.seeds.model, episode))
                source.set_committee(committee)
                retrained = True
                if acq_log is not None:
                    acq_log.write(episode, strategy, res)
            elif cfg.mode == "full_update":
                new = []
                for st in visited:
                    key = state_key(st)
                    if key not in datasets[0]:
                        new.append((key, feats.encode(st), oracle(st)))
                        acquired_keys.add(key)
                new.sort(key=lambda row: row[0])
                datasets = rm.append_acquired(datasets, [new] * len(datasets))
                committee = rm.retrain(committee, datasets, hyper, (cfg.seeds.model, episode))
                source.set_committee(committee)
                retrained = True
            if retrained:
                retrain_episodes.append(episode)
                if out is not None:
                    for i, ds in enumerate(datasets):
                        ds.write_csv(out / f"dataset_member{i}.csv", start=written[i])
                    written = [len(ds) for ds in datasets]

            true_return = true_final = None
            if cfg.audit:
                g0 = oracle.unmetered(s0)
                gT = oracle.unmetered(s)
                true_final = env.objective(gT, g0)
                true_return = env.objective(g0, g0) - true_final
            row = {
                "episode": episode, "episode_return": ret, "model_reward": model_reward,
                "spot_check": spot, "epsilon": eps, "oracle_queries": oracle.calls,
                "model_queries": source.model_queries, "buffer_size": len(buffer),
                "retrained": retrained, "true_return": true_return, "true_final": true_final,
            }
            rows.append(row)
            if writer is not None:
                writer.writerow([_fmt(row[h]) for h in METRICS_HEADER])
    except DivergenceError as exc:
        diverged = str(exc)
        log.error("run diverged at episode %d: %s", len(rows) + 1, exc)
        if writer is not None:
            writer.writerow([len(rows) + 1, "diverged"] + [""] * (len(METRICS_HEADER) - 2))
    finally:
        if metrics_fh is not None:
            metrics_fh.close()

    if out is not None:
        save_network(q.online, out / "q_online.json")
        save_network(q.target, out / "q_target.json")
        if committee is not None:
            rm.save_committee(committee, out)
    return RunResult(cfg, rows, out, oracle, committee, q, init_keys, acquired_keys, spot_keys,
                     retrain_episodes, final_states, start_states, diverged)


def _optimize_recomputed(q, buffer, a: AgentConfig, rng, feats, recompute) -> None:
    batch = [recompute(t) for t in buffer.sample(a.batch_size, rng)]
    y = ag.compute_targets(batch, q, feats)
    x = feats.q_inputs([t.next_state for t in batch], [t.steps_left for t in batch])
    loss, grads = loss_and_grad(q.online, x, y)
    if not math.isfinite(loss):
        raise DivergenceError("non-finite Q loss")
    q.online, q.opt = adam_step(q.online, grads, q.opt)
    q.updates += 1
    if a.sync_every and q.updates % a.sync_every == 0:
        ag.sync_target(q)


# --------------------------------------------------------------------------- reporting

SUMMARY_HEADER = [
    "run", "mode", "seed", "episodes", "window", "median_return", "median_true_return",
    "median_true_final", "oracle_queries", "model_queries", "speedup",
]


def read_metrics(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [h for h in METRICS_HEADER if h not in (reader.fieldnames or [])]
        if missing:
            raise DomainError(f"{path}: metrics file lacks columns {missing}")
        return [r for r in reader if r["episode_return"] != "diverged"]


def _median(values: Sequence[str]) -> float | None:
    vals = [float(v) for v in values if v != ""]
    return statistics.median(vals) if vals else None


def summarize_run(path, fraction: float = 0.1) -> dict:
    path = Path(path)
    rows = read_metrics(path)
    mode, seed, name = "", "", path.parent.name
    cfg_path = path.parent / "config.json"
    if cfg_path.exists():
        doc = json.loads(cfg_path.read_text())
        mode, seed = doc.get("mode", ""), doc.get("seeds", {}).get("run", "")
        name = doc.get("name") or name
    n = len(rows)
    w = max(1, math.ceil(fraction * n)) if n else 0
    tail = rows[n - w:]
    oq = int(rows[-1]["oracle_queries"]) if rows else 0
    mq = int(rows[-1]["model_queries"]) if rows else 0
    return {
        "run": name, "mode": mode, "seed": seed, "episodes": n, "window": w,
        "median_return": _median([r["episode_return"] for r in tail]),
        "median_true_return": _median([r["true_return"] for r in tail]),
        "median_true_final": _median([r["true_final"] for r in tail]),
        "oracle_queries": oq, "model_queries": mq,
        "speedup": speedup(oq, mq) if oq > 0 else None,
    }


def compare_report(paths: Sequence, out=None, fraction: float = 0.1) -> list[dict]:
    """Per-run final-window medians plus one aggregate row per mode (median over seeds)."""
    if not paths:
        raise DomainError("no runs to report")
    rows = [summarize_run(p, fraction) for p in paths]
    by_mode: dict[str, list[dict]] = {}
    for r in rows:
        by_mode.setdefault(r["mode"], []).append(r)
    aggregate = []
    for mode in sorted(by_mode):
        group = by_mode[mode]
        agg = {"run": "aggregate", "mode": mode, "seed": "all",
               "episodes": group[0]["episodes"], "window": group[0]["window"]}
        for col in ("median_return", "median_true_return", "median_true_final",
                    "oracle_queries", "model_queries", "speedup"):
            vals = [g[col] for g in group if g[col] is not None]
            agg[col] = statistics.median(vals) if vals else None
        aggregate.append(agg)
    table = rows + aggregate
    if out is not None:
        with Path(out).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(SUMMARY_HEADER)
            for r in table:
                w.writerow([_fmt(r[h]) for h in SUMMARY_HEADER])
    return table
