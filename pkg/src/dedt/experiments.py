"""Dataset generation, pipeline stages and the NMSE / rate experiment drivers."""

from __future__ import annotations

import csv
import io
import time
from dataclasses import astuple, dataclass, fields
from pathlib import Path

import numpy as np

from .channel_sim import EnvConfig, mrt_rate, sample_slots
from .config import ExperimentConfig, OverheadConfig, seed_stream, seed_torch, torch_seed
from .diffusion import (average_nmse, draw_mask, est_noise_var_from_snr, extract_condition,
                        observed_count, vectorize)
from .dt_policy import (UNKNOWN_TAG, DtModel, ReplayBuffer, build_trajectory, dt_rollout, dt_train,
                        fine_tune, pairs_from_phases)
from .experts import BeamEnv, ao_optimize_batch, random_phases, rc_impute, wrap_phase
from .imputer import DiffusionImputer
from .ppo import PpoConfig, ppo_evaluate, ppo_train
from .storage import save_dataset

METHODS = ("DEDT", "PCDT", "RCDT", "DM-PPO", "RC-PPO", "AO", "RANDOM")


@dataclass(frozen=True)
class MetricsRow:
    experiment_id: str
    env_tag: str
    method: str
    mask_ratio: float | None = None
    snr_db: float | None = None
    nmse: float | None = None
    raw_rate: float | None = None
    effective_rate: float | None = None
    step: int | None = None
    seed: int | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")


FIELDS = tuple(f.name for f in fields(MetricsRow))


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def metrics_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(FIELDS)
    for r in rows:
        w.writerow([_cell(v) for v in astuple(r)])
    return buf.getvalue()


def write_metrics(path, rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(metrics_csv(rows))
    return path


def read_metrics(path) -> list:
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = tuple(next(reader, ()))
        if header != FIELDS:
            raise ValueError(f"{path}: header {header} does not match the metrics schema")
        rows = []
        for rec in reader:
            d = dict(zip(FIELDS, rec))
            for k in ("mask_ratio", "snr_db", "nmse", "raw_rate", "effective_rate"):
                d[k] = float(d[k]) if d[k] else None
            for k in ("step", "seed"):
                d[k] = int(d[k]) if d[k] else None
            rows.append(MetricsRow(**d))
    return rows


def effective_rate(raw_rate, N_p: int, overhead: OverheadConfig, N: int):
    """Rate left after spending ``N_p * T_p`` of the ``T_s`` slot symbols on pilots."""
    if N_p < 0:
        raise ValueError("N_p must be >= 0")
    return max(0.0, 1.0 - N_p * overhead.T_p / overhead.slot_symbols(N)) * raw_rate


def entry_variance(env: EnvConfig) -> float:
    """Average variance of one complex cascaded entry."""
    return float(np.mean(env.cascaded_variance()))


def generate_dataset(env: EnvConfig, slots: int, seed: int, path=None, stream: str = "dataset"):
    """Draw ``slots`` i.i.d. realizations; optionally persist them to ``path``."""
    if slots < 1:
        raise ValueError("slots must be >= 1")
    rng = seed_stream(seed, stream)
    G, h, H = sample_slots(env, env.correlation(), rng, slots)
    if path is not None:
        save_dataset(path, env, G, h, H, seed)
    return G, h, H


def train_imputer(cfg: ExperimentConfig, H: np.ndarray, steps: int | None = None, callback=None,
                  time_budget: float | None = None) -> DiffusionImputer:
    e = cfg.env
    imp = DiffusionImputer(cfg.dm, e.N1, e.N2, e.M, seed=torch_seed(cfg.seed, "dm-train"))
    history = imp.train(vectorize(H), seed_stream(cfg.seed, "dm-train"), steps, callback, time_budget)
    imp.meta.update(seed=cfg.seed, loss_tail=float(np.mean(history[-100:])))
    return imp


def run_nmse_experiment(cfg: ExperimentConfig, imputer: DiffusionImputer, env: EnvConfig,
                        experiment_id: str = "nmse", slots: int | None = None) -> list:
    """Average NMSE of the diffusion imputer and of random fill over the (SNR, mask ratio) grid."""
    slots = cfg.sweep.nmse_slots if slots is None else slots
    _, _, H = sample_slots(env, env.correlation(), seed_stream(cfg.seed, "dataset", 1), slots)
    x = vectorize(H)
    var = entry_variance(env)
    rows = []
    for i, snr in enumerate(cfg.sweep.snr_db):
        for j, rho in enumerate(cfg.sweep.nmse_rho):
            rng = seed_stream(cfg.seed, "mask", i, j)
            nv = est_noise_var_from_snr(snr, var)
            conds = [extract_condition(xi, draw_mask(env.N, rho, rng, cfg.sweep.mask_pattern),
                                       env.M, nv, rng) for xi in x]
            x_dm = imputer.impute(conds, seed_stream(cfg.seed, "rollout", i, j))
            x_rc = np.stack([rc_impute(c, var, rng) for c in conds])
            for method, est in (("DEDT", x_dm), ("RCDT", x_rc)):
                rows.append(MetricsRow(experiment_id, env.tag, method, float(rho), float(snr),
                                       average_nmse(est, x), seed=cfg.seed))
    return rows


def expert_trajectories(env: EnvConfig, episodes: int, rng, tag: int = UNKNOWN_TAG) -> list:
    """AO-expert episodes on the true CSI, actions canonicalized to theta_0 = 0."""
    _, _, H = sample_slots(env, env.correlation(), rng, episodes * env.T)
    theta, rate = ao_optimize_batch(H, env.P, env.noise_var, rng=rng)
    X = vectorize(H).reshape(episodes, env.T, -1)
    A = pairs_from_phases(theta).reshape(episodes, env.T, -1)
    R = rate.reshape(episodes, env.T)
    return [build_trajectory(X[e], A[e], R[e], tag) for e in range(episodes)]


def ppo_trajectories(env: EnvConfig, episodes: int, rng, ppo_cfg: PpoConfig, tag: int = UNKNOWN_TAG,
                     seed: int = 0) -> list:
    """Episodes of a PPO policy trained on ``env`` with true CSI, canonicalized like the AO actions."""
    policy, _ = ppo_train(BeamEnv(env, rng=rng), ppo_cfg, rng, seed=seed)
    benv = BeamEnv(env, rng=rng)
    out = []
    for _ in range(episodes):
        state = benv.reset()
        S, A, R = [], [], []
        done = False
        while not done:
            theta = policy.act(state)
            theta = wrap_phase(theta - theta[0])
            S.append(state)
            A.append(pairs_from_phases(theta))
            r, state, done = benv.step(theta)
            R.append(r)
        out.append(build_trajectory(np.stack(S), np.stack(A), R, tag))
    return out


def collect_expert(cfg: ExperimentConfig) -> ReplayBuffer:
    """Expert buffer over all training environments; environment ``i`` gets tag ``i + 1``."""
    buf = ReplayBuffer()
    for i, env in enumerate(cfg.training_envs()):
        rng = seed_stream(cfg.seed, "dataset", 100 + i)
        if cfg.dt.expert == "ppo":
            trajs = ppo_trajectories(env, cfg.dt.episodes_per_env, rng, cfg.ppo, tag=i + 1,
                                     seed=torch_seed(cfg.seed, "dt-train") + i)
        else:
            trajs = expert_trajectories(env, cfg.dt.episodes_per_env, rng, tag=i + 1)
        for traj in trajs:
            buf.add(traj)
    return buf


def train_policy(cfg: ExperimentConfig, buffer: ReplayBuffer, callback=None):
    seed_torch(cfg.seed, "dt-train")
    model = DtModel(cfg.dt_model_config())
    history = dt_train(model, buffer, cfg.dt.iters, cfg.dt.batch, cfg.dt.lr,
                       seed=torch_seed(cfg.seed, "dt-train"), final_only=cfg.dt.final_only, callback=callback)
    return model, history


def fewshot_buffer(cfg: ExperimentConfig, env: EnvConfig) -> ReplayBuffer:
    buf = ReplayBuffer()
    for traj in expert_trajectories(env, cfg.dt.fewshot_episodes, seed_stream(cfg.seed, "dataset", 200)):
        buf.add(traj)
    return buf


def target_return(cfg: ExperimentConfig, buffer: ReplayBuffer, tag: int | None = None) -> float:
    """``prompt_scale`` times the mean expert episode return (optionally of one tag)."""
    prompts = [p for t, p in zip(buffer.trajectories, buffer.prompts) if tag is None or t.tag == tag]
    return cfg.dt.prompt_scale * float(np.mean(prompts))


def beam_env(cfg: ExperimentConfig, env: EnvConfig, view: str, rho: float, imputer, key,
             episodes: int) -> BeamEnv:
    """Evaluation environment; the channel sequence depends only on ``key``, not on the view."""
    rng = seed_stream(cfg.seed, "rollout", *key)
    bound = imputer.bind(seed_stream(cfg.seed, "rollout", *key, 1)) if imputer is not None else None
    return BeamEnv(env, view=view, rho=rho, est_snr_db=cfg.sweep.rate_snr_db, imputer=bound,
                   mask_pattern=cfg.sweep.mask_pattern, rng=rng, prefetch=env.T * episodes)


def policy_rates(model: DtModel, benv: BeamEnv, episodes: int, target: float,
                 tag: int = UNKNOWN_TAG) -> np.ndarray:
    """Per-episode mean rate of DT rollouts."""
    return np.array([dt_rollout(model, benv, target, tag=tag).rates.mean() for _ in range(episodes)])


def _episode_channels(benv: BeamEnv, episodes: int) -> np.ndarray:
    H = []
    for _ in range(episodes):
        benv.reset()
        done = False
        while not done:
            H.append(benv.current_H())
            _, _, done = benv.step(np.zeros(benv.env.N))
    return np.stack(H)


def reference_rates(cfg: ExperimentConfig, env: EnvConfig, key, episodes: int):
    """Per-episode mean rates of AO and of random phases on the evaluation channels of ``key``."""
    H = _episode_channels(beam_env(cfg, env, "true", 0.0, None, key, episodes), episodes)
    rng = seed_stream(cfg.seed, "rollout", *key, 2)
    _, ao = ao_optimize_batch(H, env.P, env.noise_var, rng=rng)
    rnd = mrt_rate(random_phases(env.N, rng, len(H)), H, env.P, env.noise_var)
    return ao.reshape(episodes, -1).mean(1), rnd.reshape(episodes, -1).mean(1)


def bootstrap_ci(diff, rng, resamples: int = 10_000, level: float = 0.95):
    """Percentile bootstrap interval of the mean of paired differences."""
    diff = np.asarray(diff, dtype=float)
    idx = rng.integers(0, len(diff), (resamples, len(diff)))
    means = diff[idx].mean(1)
    a = (1 - level) / 2
    return float(np.quantile(means, a)), float(np.quantile(means, 1 - a))


def adapt_policy(cfg: ExperimentConfig, model: DtModel, env: EnvConfig, imputer=None,
                 curve_every: int = 0, curve_episodes: int = 5):
    """Few-shot head fine-tuning on ``env``.

    Returns ``(tuned, target, seconds, curve)`` where ``seconds`` covers expert
    collection and fine-tuning, and ``curve`` holds ``(step, mean rate)`` of
    imputed-view rollouts every ``curve_every`` steps (excluded from the timing).
    """
    t0 = time.perf_counter()
    few = fewshot_buffer(cfg, env)
    target = target_return(cfg, few)
    spent = time.perf_counter() - t0
    curve = []
    rho = cfg.sweep.eval_rho

    def probe(m, step):
        view = "imputed" if imputer is not None else "true"
        benv = beam_env(cfg, env, view, rho, imputer, (900,), curve_episodes)
        curve.append((step, float(policy_rates(m, benv, curve_episodes, target).mean())))

    if curve_every:
        probe(model, 0)
    tuned = model
    done = 0
    chunk = curve_every or cfg.dt.finetune_steps
    while done < cfg.dt.finetune_steps:
        n = min(chunk, cfg.dt.finetune_steps - done)
        t1 = time.perf_counter()
        tuned = fine_tune(tuned, few, n, learning_rate=cfg.dt.finetune_lr,
                          seed=torch_seed(cfg.seed, "dt-train") + done)
        spent += time.perf_counter() - t1
        done += n
        if curve_every:
            probe(tuned, done)
    if cfg.dt.finetune_steps == 0:
        tuned = fine_tune(model, few, 0)
    return tuned, target, spent, curve


def ppo_baseline(cfg: ExperimentConfig, env: EnvConfig, view: str, rho: float, imputer,
                 ppo_cfg: PpoConfig | None = None, key=(700,)):
    """Train PPO from scratch on ``env`` with the given CSI view; returns ``(policy, curve)``."""
    ppo_cfg = cfg.ppo if ppo_cfg is None else ppo_cfg
    benv = beam_env(cfg, env, view, rho, imputer, key, max(1, ppo_cfg.rollout // env.T))
    return ppo_train(benv, ppo_cfg, seed_stream(cfg.seed, "rollout", *key, 3),
                     seed=torch_seed(cfg.seed, "rollout"))


@dataclass
class RateResult:
    rows: list
    episodes: dict  # (method, rho) -> per-episode mean rates
    target: float
    finetune_seconds: float


def run_rate_experiment(cfg: ExperimentConfig, imputer: DiffusionImputer, model: DtModel,
                        experiment_id: str = "rate", with_ppo: bool = True) -> RateResult:
    """Held-out environment comparison across mask ratios.

    The pre-trained policy is fine-tuned on a few expert episodes of the
    held-out environment, then rolled out with imputed (DEDT), perfect (PCDT)
    and random-fill (RCDT) CSI on identical channel sequences.  AO and random
    phases give the reference rows; PPO is trained from scratch with imputed
    and random-fill states.
    """
    env = cfg.heldout_env()
    n_ep = cfg.sweep.eval_episodes
    N = env.N
    tuned, target, seconds, curve = adapt_policy(cfg, model, env, imputer, curve_every=100)
    rows = [MetricsRow(experiment_id, env.tag, "DEDT", cfg.sweep.eval_rho, cfg.sweep.rate_snr_db,
                       raw_rate=r, step=s, seed=cfg.seed) for s, r in curve]
    episodes = {}
    key = (500,)

    def record(method, rho, rates, n_p, step=None):
        episodes[(method, rho)] = rates
        raw = float(rates.mean())
        rows.append(MetricsRow(experiment_id, env.tag, method, rho, cfg.sweep.rate_snr_db, None, raw,
                               effective_rate(raw, n_p, cfg.overhead, N), step, cfg.seed))

    ao, rnd = reference_rates(cfg, env, key, n_ep)
    record("AO", 0.0, ao, N)
    record("RANDOM", 1.0, rnd, 0)
    pc = policy_rates(tuned, beam_env(cfg, env, "true", 0.0, None, key, n_ep), n_ep, target)
    record("PCDT", 0.0, pc, N)
    for rho in cfg.sweep.rho:
        n_p = observed_count(N, rho)
        for method, view in (("DEDT", "imputed"), ("RCDT", "random")):
            benv = beam_env(cfg, env, view, rho, imputer, key, n_ep)
            record(method, float(rho), policy_rates(tuned, benv, n_ep, target), n_p)
    if with_ppo:
        rho = cfg.sweep.eval_rho
        for method, view in (("DM-PPO", "imputed"), ("RC-PPO", "random")):
            policy, pcurve = ppo_baseline(cfg, env, view, rho, imputer)
            for u, r in enumerate(pcurve):
                rows.append(MetricsRow(experiment_id, env.tag, method, rho, cfg.sweep.rate_snr_db,
                                       raw_rate=r, step=u, seed=cfg.seed))
            rates = ppo_evaluate(policy, beam_env(cfg, env, view, rho, imputer, key, n_ep), n_ep)
            record(method, rho, rates, observed_count(N, rho), step=len(pcurve))
    return RateResult(rows, episodes, target, seconds)


def interior_argmax(values) -> bool:
    i = int(np.argmax(values))
    return 0 < i < len(values) - 1




@dataclass
class Pipeline:
    """Trained artifacts of the desk-scale pipeline."""

    cfg: ExperimentConfig
    workdir: Path
    H_train: np.ndarray
    imputer: DiffusionImputer
    buffer: ReplayBuffer
    model: DtModel
    seconds: dict


def desk_pipeline(cfg: ExperimentConfig, workdir, log=None) -> Pipeline:
    """Dataset, imputer, expert buffer and policy, cached in ``workdir``.

    Cached files are reused only while ``workdir/config.txt`` matches ``cfg``.
    Training wall-clock seconds are stored in the checkpoint metadata.
    """
    from .config import dump_config
    from .storage import load_buffer, load_dataset, load_dt, load_imputer, save_buffer, save_dt, save_imputer

    log = log or (lambda msg: None)
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    stamp = workdir / "config.txt"
    if not stamp.is_file() or stamp.read_text() != dump_config(cfg):
        for f in ("dataset.dedt", "dm.ckpt", "buffer.dedt", "dt.ckpt"):
            (workdir / f).unlink(missing_ok=True)
        stamp.write_text(dump_config(cfg))
    seconds = {}
    env = cfg.training_envs()[0]
    path = workdir / "dataset.dedt"
    if path.is_file():
        H = load_dataset(path)[1]["H"]
    else:
        H = generate_dataset(env, cfg.data.slots, cfg.seed, path)[2]
    path = workdir / "dm.ckpt"
    if path.is_file():
        imp = load_imputer(path)
    else:
        t0 = time.perf_counter()
        imp = train_imputer(cfg, H)
        seconds["dm"] = time.perf_counter() - t0
        imp.meta["train_seconds"] = seconds["dm"]
        save_imputer(path, imp)
        log(f"trained imputer in {seconds['dm']:.0f} s")
    path = workdir / "buffer.dedt"
    if path.is_file():
        buf = load_buffer(path)[0]
    else:
        buf = collect_expert(cfg)
        save_buffer(path, buf)
    path = workdir / "dt.ckpt"
    if path.is_file():
        model = load_dt(path)[0]
    else:
        t0 = time.perf_counter()
        model, history = train_policy(cfg, buf)
        seconds["dt"] = time.perf_counter() - t0
        save_dt(path, model, {"iters": len(history), "final_loss": history[-1], "train_seconds": seconds["dt"]})
        log(f"trained policy in {seconds['dt']:.0f} s")
    return Pipeline(cfg, workdir, H, imp, buf, model, seconds)


__all__ = [name for name in dir() if not name.startswith("_") and name != "annotations"]
