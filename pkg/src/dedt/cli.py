"""Command-line entry point.

Every command reads the flat config (``--config``, ``--override``,
``--seed``), writes its artifacts into ``--out`` together with a
``metrics-<command>.csv`` and a ``manifest-<command>.json`` that records the config
snapshot, the seed streams and SHA-256 digests of inputs and outputs.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import experiments as ex
from .config import STREAMS, ConfigError, config_dict, load_config, seed_stream, torch_seed
from .diffusion import average_nmse, draw_mask, extract_condition, observed_count, vectorize
from .dt_policy import dataset_loss
from .imputer import validation_loss
from .plots import FIGURES, emit_plots
from .storage import (load_buffer, load_dataset, load_dt, load_imputer, save_buffer, save_dt,
                      save_imputer, write_container, _state_arrays)

log = logging.getLogger("dedt")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _input(path, what: str) -> Path:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"{what} not found: {path}")
    return path


def _manifest(args, cfg, inputs, outputs):
    out = Path(args.out)
    doc = {
        "command": args.command,
        "seed": cfg.seed,
        "streams": {name: torch_seed(cfg.seed, name) for name in STREAMS},
        "config": config_dict(cfg),
        "inputs": {str(p): _digest(Path(p)) for p in inputs},
        "outputs": {Path(p).name: _digest(Path(p)) for p in outputs},
    }
    path = out / f"manifest-{args.command}.json"
    path.write_text(json.dumps(doc, indent=1, sort_keys=True))
    return path


def _env_by_tag(cfg, tag: str):
    envs = {e.tag: e for e in cfg.training_envs()}
    envs["heldout"] = cfg.heldout_env()
    if tag not in envs:
        raise UsageError(f"unknown environment {tag!r}; choose from {sorted(envs)}")
    return envs[tag]


def cmd_gen_data(args, cfg):
    env = _env_by_tag(cfg, args.env)
    out = Path(args.out)
    path = out / "dataset.dedt"
    _, _, H = ex.generate_dataset(env, cfg.data.slots, cfg.seed, path)
    n = min(len(H), cfg.sweep.nmse_slots)
    ao, rnd = ex.reference_rates(cfg, env, (800,), max(1, n // env.T))
    rows = [ex.MetricsRow("gen-data", env.tag, "AO", 0.0, raw_rate=float(ao.mean()), seed=cfg.seed),
            ex.MetricsRow("gen-data", env.tag, "RANDOM", 1.0, raw_rate=float(rnd.mean()), seed=cfg.seed)]
    return rows, [], [path]


def cmd_train_dm(args, cfg):
    data = _input(args.data or Path(args.out) / "dataset.dedt", "dataset")
    env, arrays = load_dataset(data)
    H = arrays["H"]
    n_val = min(cfg.data.test_slots, len(H) // 5)
    imp = ex.train_imputer(cfg, H[n_val:])
    x_val = vectorize(H[:n_val])
    imp.meta["validation_loss"] = validation_loss(imp, x_val, seed=cfg.seed)
    path = save_imputer(Path(args.out) / "dm.ckpt", imp)
    rows = []
    rng = seed_stream(cfg.seed, "mask", 99)
    for rho in cfg.sweep.nmse_rho:
        conds = [extract_condition(x, draw_mask(env.N, rho, rng), env.M, 0.0, rng) for x in x_val]
        est = imp.impute(conds, seed_stream(cfg.seed, "rollout", 99))
        rows.append(ex.MetricsRow("train-dm", env.tag, "DEDT", float(rho), None, average_nmse(est, x_val),
                                  step=imp.meta["steps"], seed=cfg.seed))
    return rows, [data], [path]


def cmd_eval_nmse(args, cfg):
    ck = _input(args.dm or Path(args.out) / "dm.ckpt", "DM checkpoint")
    imp = load_imputer(ck)
    env = _env_by_tag(cfg, args.env)
    return ex.run_nmse_experiment(cfg, imp, env), [ck], []


def cmd_collect_expert(args, cfg):
    buf = ex.collect_expert(cfg)
    envs = cfg.training_envs()
    path = save_buffer(Path(args.out) / "buffer.dedt", buf, {str(i + 1): e.tag for i, e in enumerate(envs)})
    rows = []
    for i, env in enumerate(envs):
        rates = [t.rewards.mean() for t in buf.trajectories if t.tag == i + 1]
        rows.append(ex.MetricsRow("collect-expert", env.tag, "AO", 0.0, raw_rate=float(np.mean(rates)),
                                  seed=cfg.seed))
    return rows, [], [path]


def cmd_train_dt(args, cfg):
    src = _input(args.buffer or Path(args.out) / "buffer.dedt", "trajectory buffer")
    buf, meta = load_buffer(src)
    model, history = ex.train_policy(cfg, buf)
    training = {"iters": len(history), "final_loss": history[-1], "seed": cfg.seed,
                "dataset_loss": dataset_loss(model, buf)}
    path = save_dt(Path(args.out) / "dt.ckpt", model, training)
    rows = []
    for i, env in enumerate(cfg.training_envs()):
        target = ex.target_return(cfg, buf, tag=i + 1)
        benv = ex.beam_env(cfg, env, "true", 0.0, None, (600, i), cfg.sweep.eval_episodes)
        rates = ex.policy_rates(model, benv, cfg.sweep.eval_episodes, target, tag=i + 1)
        rows.append(ex.MetricsRow("train-dt", env.tag, "PCDT", 0.0, raw_rate=float(rates.mean()),
                                  step=len(history), seed=cfg.seed))
    return rows, [src], [path]


def cmd_finetune(args, cfg):
    ck = _input(args.dt or Path(args.out) / "dt.ckpt", "DT checkpoint")
    model, training = load_dt(ck)
    inputs = [ck]
    imp = None
    if args.dm or (Path(args.out) / "dm.ckpt").is_file():
        dm = _input(args.dm or Path(args.out) / "dm.ckpt", "DM checkpoint")
        imp = load_imputer(dm)
        inputs.append(dm)
    env = _env_by_tag(cfg, args.env)
    tuned, target, _, curve = ex.adapt_policy(cfg, model, env, imp, curve_every=100)
    path = save_dt(Path(args.out) / "dt_finetuned.ckpt", tuned,
                   dict(training, finetune_steps=cfg.dt.finetune_steps, target_return=target))
    method = "DEDT" if imp is not None else "PCDT"
    rows = [ex.MetricsRow("finetune", env.tag, method, cfg.sweep.eval_rho if imp else 0.0,
                          raw_rate=r, step=s, seed=cfg.seed) for s, r in curve]
    return rows, inputs, [path]


_VIEWS = {"imputed": "DEDT", "true": "PCDT", "random": "RCDT"}


def _policy_inputs(args, cfg, need_dm: bool):
    default = Path(args.out) / "dt_finetuned.ckpt"
    ck = _input(args.dt or (default if default.is_file() else Path(args.out) / "dt.ckpt"), "DT checkpoint")
    model, training = load_dt(ck)
    inputs = [ck]
    imp = None
    if need_dm:
        dm = _input(args.dm or Path(args.out) / "dm.ckpt", "DM checkpoint")
        imp = load_imputer(dm)
        inputs.append(dm)
    return model, training, imp, inputs


def cmd_rollout(args, cfg):
    model, training, imp, inputs = _policy_inputs(args, cfg, args.view == "imputed")
    env = _env_by_tag(cfg, args.env)
    rho = cfg.sweep.eval_rho if args.rho is None else args.rho
    if "target_return" in training:
        target = training["target_return"]
    else:
        target = ex.target_return(cfg, ex.fewshot_buffer(cfg, env))
    n = cfg.sweep.eval_episodes
    benv = ex.beam_env(cfg, env, args.view, rho, imp, (500,), n)
    n_p = env.N if args.view == "true" else observed_count(env.N, rho)
    rows = []
    for e in range(n):
        raw = float(ex.dt_rollout(model, benv, target).rates.mean())
        rows.append(ex.MetricsRow("rollout", env.tag, _VIEWS[args.view], float(rho), cfg.sweep.rate_snr_db,
                                  None, raw, ex.effective_rate(raw, n_p, cfg.overhead, env.N), e, cfg.seed))
    return rows, inputs, []


def cmd_train_ppo(args, cfg):
    imp, inputs = None, []
    if args.view == "imputed":
        dm = _input(args.dm or Path(args.out) / "dm.ckpt", "DM checkpoint")
        imp = load_imputer(dm)
        inputs.append(dm)
    env = _env_by_tag(cfg, args.env)
    rho = cfg.sweep.eval_rho
    method = {"imputed": "DM-PPO", "random": "RC-PPO"}[args.view]
    policy, curve = ex.ppo_baseline(cfg, env, args.view, rho, imp)
    path = write_container(Path(args.out) / f"{method.lower()}.ckpt", "ppo-checkpoint",
                           {"view": args.view, "rho": rho, "updates": len(curve)}, _state_arrays(policy))
    rows = [ex.MetricsRow("train-ppo", env.tag, method, rho, cfg.sweep.rate_snr_db, raw_rate=r, step=u,
                          seed=cfg.seed) for u, r in enumerate(curve)]
    return rows, inputs, [path]


def cmd_eval_rate(args, cfg):
    dt = _input(args.dt or Path(args.out) / "dt.ckpt", "DT checkpoint")
    dm = _input(args.dm or Path(args.out) / "dm.ckpt", "DM checkpoint")
    model, _ = load_dt(dt)
    result = ex.run_rate_experiment(cfg, load_imputer(dm), model, with_ppo=not args.no_ppo)
    return result.rows, [dt, dm], []


def cmd_plot(args, cfg):
    files = [_input(f, "metrics file") for f in args.metrics]
    o = cfg.overhead
    slot = f"{o.T_s:g}" if o.T_s > 0 else "2N"
    caption = f"overhead: T_p = {o.T_p:g} symbol per element, T_s = {slot} symbols per slot"
    paths = emit_plots(files, Path(args.out) / "plots", args.figures, caption)
    return None, files, paths


COMMANDS = {
    "gen-data": (cmd_gen_data, "generate a channel dataset"),
    "train-dm": (cmd_train_dm, "train the diffusion imputer"),
    "eval-nmse": (cmd_eval_nmse, "NMSE over the SNR x mask-ratio grid"),
    "collect-expert": (cmd_collect_expert, "collect AO-expert trajectories"),
    "train-dt": (cmd_train_dt, "train the decision transformer"),
    "finetune": (cmd_finetune, "few-shot head fine-tuning on a new environment"),
    "rollout": (cmd_rollout, "roll out a trained policy"),
    "train-ppo": (cmd_train_ppo, "train a PPO baseline"),
    "eval-rate": (cmd_eval_rate, "method comparison across mask ratios"),
    "plot": (cmd_plot, "figures from metrics files"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--seed", type=int, help="root seed (overrides the config)")
    common.add_argument("--out", default="runs", help="output directory")
    common.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="dedt", description="RIS beamforming with diffusion-imputed CSI and a decision transformer")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, (_, help_) in COMMANDS.items():
        sp = sub.add_parser(name, parents=[common], help=help_)
        if name in ("gen-data", "eval-nmse"):
            sp.add_argument("--env", default="train0")
        if name in ("finetune", "rollout", "train-ppo"):
            sp.add_argument("--env", default="heldout")
        if name == "train-dm":
            sp.add_argument("--data")
        if name == "train-dt":
            sp.add_argument("--buffer")
        if name in ("eval-nmse", "finetune", "rollout", "train-ppo", "eval-rate"):
            sp.add_argument("--dm")
        if name in ("finetune", "rollout", "eval-rate"):
            sp.add_argument("--dt")
        if name == "rollout":
            sp.add_argument("--view", choices=sorted(_VIEWS), default="imputed")
            sp.add_argument("--rho", type=float)
        if name == "train-ppo":
            sp.add_argument("--view", choices=("imputed", "random"), default="imputed")
        if name == "eval-rate":
            sp.add_argument("--no-ppo", action="store_true")
        if name == "plot":
            sp.add_argument("metrics", nargs="+")
            sp.add_argument("--figures", nargs="+", choices=FIGURES, default=list(FIGURES))
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    torch.set_num_threads(1)
    try:
        cfg = load_config(args.config, args.override, args.seed)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        rows, inputs, outputs = COMMANDS[args.command][0](args, cfg)
        if rows is not None:
            outputs = [*outputs, ex.write_metrics(out / f"metrics-{args.command}.csv", rows)]
        _manifest(args, cfg, inputs, outputs)
    except (ConfigError, UsageError) as e:
        print(f"dedt {args.command}: usage error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001
        log.debug("failure", exc_info=True)
        print(f"dedt {args.command}: failed: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
