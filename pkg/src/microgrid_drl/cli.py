"""Command-line front end: ``synth``, ``train-forecaster``, ``train-policy``, ``evaluate``, ``compare``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import subprocess
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import WORKERS_ENV, SchemeConfig
from .env import MicrogridEnv
from .data import DataError, TimeSeriesDataset, load_csv, split, synth_generate, write_csv
from .forecast import (ForecastDivergence, ForecasterBundle, evaluate_bundle, format_table,
                       train_bundle, write_report)
from .rl import (LOG_HEADER, SCHEMES, WITH_PREDICTION, Policy, evaluate_episodes, random_policy, train)

log = logging.getLogger("microgrid_drl")

EXIT_OK = 0
EXIT_ERROR = 2
EXIT_DIVERGED = 3

TRACE_HEADER = ("episode", "t", "timestamp", "soc", "price", "action_requested", "action_executed", "reward")


class CliError(RuntimeError):
    pass


# -- helpers -----------------------------------------------------------------------


def _code_version() -> str:
    try:
        rev = subprocess.run(["git", "rev-parse", "--short", "HEAD"], capture_output=True, text=True,
                             cwd=Path(__file__).parent, timeout=5)
        if rev.returncode == 0:
            return f"{__version__}+{rev.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def write_manifest(out: Path, command: str, cfg: SchemeConfig, started: float, outputs: list[str],
                   extra: dict | None = None) -> None:
    doc = {
        "command": command,
        "code_version": _code_version(),
        "seed": cfg.seed,
        "config_digest": cfg.digest(),
        "config": cfg.to_ini(),
        "wall_time_s": round(time.time() - started, 3),
        "outputs": outputs,
    }
    doc.update(extra or {})
    (out / "manifest.json").write_text(json.dumps(doc, indent=2) + "\n")


def _write_csv(path: Path, header, rows) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def load_config(args) -> SchemeConfig:
    cfg = SchemeConfig.load(args.config) if getattr(args, "config", None) else SchemeConfig()
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    if getattr(args, "out", None):
        cfg = replace(cfg, out=args.out)
    if getattr(args, "data", None):
        cfg = replace(cfg, data=replace(cfg.data, source=args.data))
    if getattr(args, "scheme", None):
        cfg = replace(cfg, scheme=args.scheme)
    if getattr(args, "iterations", None) is not None:
        cfg = replace(cfg, ppo=replace(cfg.ppo, iterations=args.iterations))
    return cfg.with_worker_override()


def load_dataset(cfg: SchemeConfig) -> TimeSeriesDataset:
    if cfg.data.source == "synth":
        return synth_generate(cfg.synth)
    path = Path(cfg.data.source)
    if not path.exists():
        raise CliError(f"dataset {path} not found")
    return load_csv(path)


def _out_dir(cfg: SchemeConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def pearson(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.size < 2 or x.std() == 0 or y.std() == 0:
        return 0.0
    return float(np.clip(np.corrcoef(x, y)[0, 1], -1.0, 1.0))


# -- commands -------------------------------------------------------------------------


def cmd_synth(args) -> int:
    started = time.time()
    cfg = load_config(args)
    synth = cfg.synth
    if args.days is not None:
        synth = replace(synth, days=args.days)
    if args.seed is not None:
        synth = replace(synth, seed=args.seed)
    cfg = replace(cfg, synth=synth)
    ds = synth_generate(synth)
    out = _out_dir(cfg)
    write_csv(ds, out / "data.csv")
    for name in ("generation", "demand", "price"):
        s = ds.series(name)
        print(f"{name:<11} mean {s.mean():10.4f}  std {s.std():10.4f}  min {s.min():10.4f}  max {s.max():10.4f}")
    print(f"{len(ds)} hours written to {out / 'data.csv'}")
    write_manifest(out, "synth", cfg, started, ["data.csv"])
    return EXIT_OK


def _train_bundle(cfg: SchemeConfig, ds: TimeSeriesDataset):
    train_view, test_view = split(ds, cfg.data.train_fraction)
    bundle = train_bundle(train_view, horizons=tuple(range(1, cfg.k + 1)), epochs=cfg.forecast.epochs,
                          seed=cfg.seed, hidden=cfg.forecast.hidden, learning_rate=cfg.forecast.learning_rate)
    return bundle, train_view, test_view


def cmd_train_forecaster(args) -> int:
    started = time.time()
    cfg = load_config(args)
    ds = load_dataset(cfg)
    out = _out_dir(cfg)
    try:
        bundle, _, test_view = _train_bundle(cfg, ds)
    except ForecastDivergence as exc:
        print(f"error: forecaster diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    bundle.save(out / "forecaster.json", cfg.digest())
    scores = evaluate_bundle(bundle, test_view)
    write_report(scores, out / "forecast_report.csv")
    keys = sorted(bundle.models)
    epochs = len(bundle.models[keys[0]].losses)
    _write_csv(out / "loss_curves.csv", ["epoch"] + [f"{q}_k{k}" for q, k in keys],
               [[e] + [bundle.models[key].losses[e] for key in keys] for e in range(epochs)])
    print(format_table(scores))
    write_manifest(out, "train-forecaster", cfg, started,
                   ["forecaster.json", "forecast_report.csv", "loss_curves.csv"])
    return EXIT_OK


def _require_bundle(cfg: SchemeConfig, path: str | None) -> ForecasterBundle | None:
    if cfg.scheme != WITH_PREDICTION:
        return None
    path = path or cfg.forecast.checkpoint
    if not path:
        raise CliError("the with-prediction scheme needs --forecaster (or [forecast] checkpoint)")
    if not Path(path).exists():
        raise CliError(f"forecaster checkpoint {path} not found")
    return ForecasterBundle.load(path)


def _training_log_rows(rows):
    return [tuple("" if v == "" else (repr(v) if isinstance(v, float) else v) for v in row) for row in rows]


def cmd_train_policy(args) -> int:
    started = time.time()
    cfg = load_config(args)
    bundle = _require_bundle(cfg, args.forecaster)
    forecaster_path = (args.forecaster or cfg.forecast.checkpoint) if bundle is not None else ""
    if forecaster_path:
        cfg = replace(cfg, forecast=replace(cfg.forecast, checkpoint=str(forecaster_path)))
    ds = load_dataset(cfg)
    train_view, test_view = split(ds, cfg.data.train_fraction)
    out = _out_dir(cfg)
    result = train(cfg.scheme, train_view, cfg.ppo, cfg.env, cfg.seed, bundle, eval_view=test_view)
    _write_csv(out / "training_log.csv", LOG_HEADER, _training_log_rows(result.log))
    result.policy.save(out / "policy.json", cfg.digest(), {"config": cfg.to_ini()})
    outputs = ["training_log.csv", "policy.json"]
    if result.diverged:
        print(f"error: training diverged at {result.diverged}; last good parameters kept", file=sys.stderr)
        write_manifest(out, "train-policy", cfg, started, outputs, {"diverged": result.diverged})
        return EXIT_DIVERGED
    if result.log:
        tail = [r[2] for r in result.log[-10:]]
        print(f"{cfg.scheme}: {len(result.log)} iterations, final mean episode reward {np.mean(tail):.2f}")
    write_manifest(out, "train-policy", cfg, started, outputs,
                   {"grad_clip_norm": cfg.ppo.max_grad_norm})
    return EXIT_OK


def evaluate_policy_report(policy: Policy, ds: TimeSeriesDataset, test_view, episodes: int):
    probe = MicrogridEnv(test_view, policy.env_params, policy.build_obs.warmup)
    if episodes > probe.n_episodes:
        raise CliError(f"asked for {episodes} evaluation days, the held-out split has {probe.n_episodes}")
    batch = evaluate_episodes(policy, test_view, list(range(episodes)) if episodes else None)
    rewards = batch.episode_rewards
    T = batch.rewards.shape[0]
    rows = []
    for j, ep in enumerate(batch.episodes):
        start = probe.starts[ep]
        for t in range(T):
            rows.append((ep, t, ds.timestamps[start + t].isoformat(), repr(float(batch.soc[t, j])),
                         repr(float(batch.price[t, j])), repr(float(batch.requested[t, j])),
                         repr(float(batch.executed[t, j])), repr(float(batch.rewards[t, j]))))
    report = {
        "episodes": len(batch.episodes),
        "mean_episode_reward": float(rewards.mean()),
        "std_episode_reward": float(rewards.std()),
        "episode_rewards": [float(r) for r in rewards],
        "action_price_correlation": pearson(batch.executed.T.ravel(), batch.price.T.ravel()),
    }
    return report, rows


def cmd_evaluate(args) -> int:
    started = time.time()
    from .nn import load_checkpoint
    _, _, meta = load_checkpoint(args.checkpoint)
    if meta.get("kind") != "policy":
        raise CliError(f"{args.checkpoint} is not a policy checkpoint")
    ckpt_cfg = SchemeConfig.from_ini(meta["config"])
    cfg = SchemeConfig.load(args.config) if args.config else ckpt_cfg
    if cfg.env.horizon != int(meta["horizon"]):
        raise CliError(f"horizon mismatch: config {cfg.env.horizon}, checkpoint {meta['horizon']}")
    cfg = replace(cfg, scheme=meta["scheme"], out=args.out or cfg.out, seed=ckpt_cfg.seed)
    if args.data:
        cfg = replace(cfg, data=replace(cfg.data, source=args.data))
    bundle = _require_bundle(cfg, args.forecaster)
    policy = Policy.load(args.checkpoint, cfg.env, bundle)
    ds = load_dataset(cfg)
    _, test_view = split(ds, cfg.data.train_fraction)
    out = _out_dir(cfg)
    report, rows = evaluate_policy_report(policy, ds, test_view, args.episodes)
    _write_csv(out / "trace.csv", TRACE_HEADER, rows)
    (out / "evaluation.json").write_text(json.dumps(report, indent=2) + "\n")
    print(f"mean episode reward {report['mean_episode_reward']:.2f} "
          f"(std {report['std_episode_reward']:.2f}, {report['episodes']} episodes), "
          f"action-price correlation {report['action_price_correlation']:.3f}")
    write_manifest(out, "evaluate", cfg, started, ["trace.csv", "evaluation.json"])
    return EXIT_OK


def sign_test(wins: int, losses: int) -> float:
    """Two-sided binomial sign test p-value; ties are excluded beforehand."""
    n = wins + losses
    if n == 0:
        return 1.0
    from scipy.stats import binomtest
    return float(binomtest(wins, n, 0.5).pvalue)


def run_comparison(cfg_a: SchemeConfig, cfg_b: SchemeConfig, seeds: list[int], final_window: int = 10,
                   progress=None, on_trained=None) -> dict:
    """Train both configurations on each seed; B winning means B's final reward is higher.

    ``on_trained(label, seed, result)`` is called after every training run.
    """
    ds_a, ds_b = load_dataset(cfg_a), load_dataset(cfg_b)
    if ds_a.fingerprint() != ds_b.fingerprint():
        raise CliError("the two configurations use different datasets")
    train_view, test_view = split(ds_a, cfg_a.data.train_fraction)
    per_seed, curves = [], []
    for seed in seeds:
        bundle = None
        if WITH_PREDICTION in (cfg_a.scheme, cfg_b.scheme):
            bundle = train_bundle(train_view, horizons=tuple(range(1, cfg_a.k + 1)), epochs=cfg_a.forecast.epochs,
                                  seed=seed, hidden=cfg_a.forecast.hidden,
                                  learning_rate=cfg_a.forecast.learning_rate)
        row = {"seed": seed}
        for label, cfg in (("a", cfg_a), ("b", cfg_b)):
            res = train(cfg.scheme, train_view, cfg.ppo, cfg.env, seed,
                        bundle if cfg.scheme == WITH_PREDICTION else None)
            if res.diverged:
                raise CliError(f"seed {seed}, {label}: training diverged ({res.diverged})")
            if on_trained:
                on_trained(label, seed, res)
            rewards = [r[2] for r in res.log]
            row[f"{label}_final"] = float(np.mean(rewards[-final_window:]))
            row[f"{label}_eval"] = float(evaluate_episodes(res.policy, test_view).episode_rewards.mean())
            curves += [(label, cfg.scheme, seed, i, r) for i, r in enumerate(rewards)]
        diff = row["b_final"] - row["a_final"]
        row["winner"] = "b" if diff > 0 else "a" if diff < 0 else "tie"
        per_seed.append(row)
        if progress:
            progress(row)
    wins = sum(r["winner"] == "b" for r in per_seed)
    losses = sum(r["winner"] == "a" for r in per_seed)
    return {
        "scheme_a": cfg_a.scheme,
        "scheme_b": cfg_b.scheme,
        "per_seed": per_seed,
        "curves": curves,
        "mean_final_a": float(np.mean([r["a_final"] for r in per_seed])),
        "mean_final_b": float(np.mean([r["b_final"] for r in per_seed])),
        "mean_eval_a": float(np.mean([r["a_eval"] for r in per_seed])),
        "mean_eval_b": float(np.mean([r["b_eval"] for r in per_seed])),
        "b_wins": wins,
        "a_wins": losses,
        "ties": len(per_seed) - wins - losses,
        "sign_test_p": sign_test(wins, losses),
    }


def cmd_compare(args) -> int:
    started = time.time()
    if args.seeds < 2:
        raise CliError("compare needs at least 2 seeds")
    base = load_config(args)
    scheme_a, scheme_b = args.schemes
    cfg_a = replace(base, scheme=scheme_a)
    cfg_b = replace(SchemeConfig.load(args.config_b).with_worker_override() if args.config_b else base,
                    scheme=scheme_b)
    if args.iterations is not None:
        cfg_b = replace(cfg_b, ppo=replace(cfg_b.ppo, iterations=args.iterations))
    out = _out_dir(base)
    seeds = [base.seed + i for i in range(args.seeds)]

    def progress(row):
        print(f"seed {row['seed']}: {scheme_a} {row['a_final']:.2f}, {scheme_b} {row['b_final']:.2f} "
              f"-> winner {scheme_a if row['winner'] == 'a' else scheme_b if row['winner'] == 'b' else 'tie'}")

    result = run_comparison(cfg_a, cfg_b, seeds, progress=progress)
    _write_csv(out / "comparison.csv",
               ("seed", "final_a", "final_b", "eval_a", "eval_b", "winner"),
               [(r["seed"], repr(r["a_final"]), repr(r["b_final"]), repr(r["a_eval"]), repr(r["b_eval"]),
                 r["winner"]) for r in result["per_seed"]])
    _write_csv(out / "curves.csv", ("label", "scheme", "seed", "iteration", "mean_reward"),
               [(l, s, sd, i, repr(r)) for l, s, sd, i, r in result.pop("curves")])
    (out / "comparison.json").write_text(json.dumps(result, indent=2) + "\n")
    print(f"{scheme_b} beat {scheme_a} on {result['b_wins']}/{len(seeds)} seeds "
          f"(ties {result['ties']}), sign test p = {result['sign_test_p']:.3f}")
    write_manifest(out, "compare", base, started, ["comparison.csv", "curves.csv", "comparison.json"],
                   {"seeds": seeds, "config_b": cfg_b.to_ini()})
    return EXIT_OK


# -- argument parsing ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="microgrid-drl", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="experiment config file (INI)")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")

    p = sub.add_parser("synth", help="write a synthetic dataset CSV")
    common(p)
    p.add_argument("--days", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train-forecaster", help="train the generation/demand/price forecasters")
    common(p)
    p.add_argument("--data", help="dataset CSV (default: config data source)")
    p.set_defaults(func=cmd_train_forecaster)

    p = sub.add_parser("train-policy", help="train a PPO policy for one scheme")
    common(p)
    p.add_argument("--data")
    p.add_argument("--scheme", choices=SCHEMES)
    p.add_argument("--forecaster", help="forecaster checkpoint (with-prediction scheme)")
    p.add_argument("--iterations", type=int)
    p.set_defaults(func=cmd_train_policy)

    p = sub.add_parser("evaluate", help="evaluate a trained policy deterministically")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.add_argument("--forecaster")
    p.add_argument("--episodes", type=int, default=4, help="consecutive held-out days (0 = all)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("compare", help="train two schemes over several seeds and compare")
    common(p)
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--schemes", nargs=2, choices=SCHEMES, default=[WITH_PREDICTION, "without-prediction"],
                   metavar=("A", "B"))
    p.add_argument("--config-b", help="config for scheme B (default: same as --config)")
    p.add_argument("--data")
    p.add_argument("--iterations", type=int)
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CliError, DataError, FileNotFoundError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
