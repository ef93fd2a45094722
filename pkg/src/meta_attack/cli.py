"""Command-line harness: train, attack, eval, synthetic and diag subcommands."""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import re
import sys
import warnings
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import attack as atk
from . import diagnostics as diag
from . import env, meta, synthetic
from . import policy as pol
from .errors import ConfigError
from .runlog import RunLog, read_csv

log = logging.getLogger("meta_attack")

PAPER_SCALE = {"iterations": 1000, "meta_batch": 20, "inner_batch": 20, "outer_batch": 20}


@dataclass
class ExperimentConfig:
    task: str = "nav2d"
    attack: str = "none"
    scheme: str = "none"
    seed: int = 0
    out: str = "runs/default"
    eval_seeds: int = 10
    # learner
    iterations: int = 300
    alpha: float = 0.1
    eta1: float = 1.0
    meta_batch: int = 10
    inner_batch: int = 10
    outer_batch: int = 10
    adapt_depth: int = 1
    gamma: float = 0.99
    estimator: str = "gae"
    hidden: list = field(default_factory=lambda: [64, 64])
    init_log_std: float = -1.0
    objective_scale: float = 1e-4
    output_init_scale: float = 0.01
    eq3_literal: bool = False
    checkpoint_every: int = 0
    log_losses: bool = False
    eval_tasks: int = 20
    # attacker
    eta2: float = 1e5
    delta_lo: float = -50.0
    delta_hi: float = 50.0
    lambda_reg: float = 0.0
    inner_k: int = 10
    literal_sign: bool = False
    stabilize: bool = False
    # tabular tasks
    tabular_tasks: int = 4
    tabular_horizon: int = 3

    def validate(self) -> None:
        if self.task not in ("nav2d", "tabular"):
            raise ConfigError(f"task must be nav2d or tabular, got {self.task!r}", "task")
        if self.attack not in atk.MODELS:
            raise ConfigError(f"attack must be one of {atk.MODELS}, got {self.attack!r}", "attack")
        if self.scheme not in ("none", "intermittent", "persistent", "robust"):
            raise ConfigError(f"unknown scheme {self.scheme!r}", "scheme")
        if self.attack == "none" and self.scheme != "none":
            raise ConfigError("a scheme needs an attack model (attack = none)", "scheme")
        if self.attack != "none" and self.scheme == "none":
            raise ConfigError("an attack model needs a scheme", "attack")
        if self.scheme == "robust" and not self.eta1 < self.eta2:
            raise ConfigError("robust training needs eta1 < eta2", "eta1")
        if self.scheme == "persistent" and not self.eta1 > self.eta2:
            warnings.warn("persistent attack usually wants eta1 > eta2", stacklevel=2)
        if self.adapt_depth not in (1, 2):
            raise ConfigError("adapt_depth must be 1 or 2", "adapt_depth")
        if self.scheme == "intermittent" and self.inner_k < 1:
            raise ConfigError("inner_k must be >= 1", "inner_k")
        if self.eval_seeds < 1:
            raise ConfigError("eval_seeds must be >= 1", "eval_seeds")
        self.meta_config()
        if self.attack != "none":
            self.attack_state()

    def meta_config(self) -> meta.MetaConfig:
        return meta.MetaConfig(
            alpha=self.alpha, eta1=self.eta1, meta_batch=self.meta_batch, inner_batch=self.inner_batch,
            outer_batch=self.outer_batch, iterations=self.iterations, adaptation_depth=self.adapt_depth,
            gamma=self.gamma, estimator=self.estimator, hidden=tuple(self.hidden), init_log_std=self.init_log_std,
            seed=self.seed, eq3_literal=self.eq3_literal, checkpoint_every=self.checkpoint_every, out_dir=self.out,
            log_losses=self.log_losses, eval_tasks=self.eval_tasks, objective_scale=self.objective_scale,
            output_init_scale=self.output_init_scale,
        )

    def attack_state(self) -> atk.AttackState:
        return atk.AttackState(1.0, self.delta_lo, self.delta_hi, self.attack, self.lambda_reg, self.eta2)

    def attack_config(self) -> atk.AttackConfig:
        rounds = max(1, self.iterations // self.inner_k)
        return atk.AttackConfig(self.attack_state(), rounds, self.inner_k, self.literal_sign, self.stabilize)

    def distribution(self):
        if self.task == "nav2d":
            return env.Nav2DUniform(horizon=100, discount=self.gamma)
        rng = meta.stream(self.seed, 4242)
        tasks = [env.random_tabular_task(rng, horizon=self.tabular_horizon) for _ in range(self.tabular_tasks)]
        return env.TabularFixedSet(tasks)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _key_line(text: str, key: str) -> int | None:
    for i, line in enumerate(text.splitlines(), 1):
        if re.match(rf"\s*{re.escape(key)}\s*=", line):
            return i
    return None


def load_config(path: str | None, overrides: dict, paper_scale: bool = False) -> ExperimentConfig:
    """Defaults <- paper-scale preset <- config file <- command-line flags."""
    cfg = ExperimentConfig()
    values: dict = {}
    text = ""
    if paper_scale:
        values.update(PAPER_SCALE)
    if path:
        text = Path(path).read_text()
        try:
            doc = tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        flat = {}
        for k, v in doc.items():
            if isinstance(v, dict):  # tables are only a grouping device
                flat.update(v)
            else:
                flat[k] = v
        values.update(flat)
    values.update({k: v for k, v in overrides.items() if v is not None})
    known = {f.name: f for f in fields(ExperimentConfig)}
    for k, v in values.items():
        if k not in known:
            line = _key_line(text, k)
            where = f"{path}:{line}: " if line else ""
            raise ConfigError(f"{where}unknown key {k!r}")
        setattr(cfg, k, v)
    try:
        cfg.validate()
    except ConfigError as exc:
        key = exc.args[1] if len(exc.args) > 1 else None
        line = _key_line(text, key) if key and text else None
        where = f"{path}:{line}: " if line else ""
        raise ConfigError(f"{where}{exc.args[0]}") from exc
    return cfg


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _prepare_out(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.json", cfg.to_dict())
    return out


def _emit_runlog(out: Path, runlog: RunLog) -> None:
    runlog.write_csv(out / "runlog.csv")
    runlog.write_jsonl(out / "runlog.jsonl")
    if len(runlog):
        diag.line_chart(out / "train_return.svg", {"train_return": runlog.column("train_return")}, "post-adaptation return")


def cmd_train(cfg: ExperimentConfig) -> int:
    out = _prepare_out(cfg)
    mc, dist = cfg.meta_config(), cfg.distribution()
    params0 = meta.initial_params(mc, dist)
    try:
        params, runlog = meta.sg_mrl(mc, dist, params=params0)
    except meta.TrainingAborted as exc:
        _emit_runlog(out, exc.runlog)
        log.error("training aborted: %s", exc)
        return 3
    pol.save_checkpoint(params, out / "checkpoint.bin", {"iter": cfg.iterations, "seed": cfg.seed})
    _emit_runlog(out, runlog)
    return 0


def cmd_attack(cfg: ExperimentConfig) -> int:
    if cfg.scheme == "none":
        raise ConfigError("attack needs --scheme and --attack")
    out = _prepare_out(cfg)
    mc, dist, ac = cfg.meta_config(), cfg.distribution(), cfg.attack_config()
    fn = {"intermittent": atk.intermittent_attack, "persistent": atk.persistent_attack, "robust": atk.robust_train}[cfg.scheme]
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            res = fn(mc, dist, ac)
    except meta.TrainingAborted as exc:
        _emit_runlog(out, exc.runlog)
        log.error("attack run aborted: %s", exc)
        return 3
    pol.save_checkpoint(res.params, out / "checkpoint.bin", {"iter": cfg.iterations, "seed": cfg.seed})
    _emit_runlog(out, res.runlog)
    res.write_trace(out / "delta_trace.csv")
    diag.line_chart(out / "delta_trace.svg", {"delta": res.deltas}, "attack parameter", xlabel="attacker update")
    return 0


def cmd_eval(cfg: ExperimentConfig, checkpoint: str) -> int:
    params, _ = pol.load_checkpoint(checkpoint)
    mc, dist = cfg.meta_config(), cfg.distribution()
    mean, std = meta.evaluate(params, dist, mc, range(cfg.eval_seeds))
    row = {"checkpoint": str(checkpoint), "mean": mean, "std": std, "seeds": cfg.eval_seeds}
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "eval.json", row)
    print(f"eval mean {mean:.3f} std {std:.3f} over {cfg.eval_seeds} seeds")
    return 0


def cmd_synthetic(cfg: ExperimentConfig, sigma: float, m0: float) -> int:
    out = _prepare_out(cfg)
    problem = synthetic.QuadraticPL(a=np.array([1.0, -0.5]), c=1.0, delta0=0.5, lo=cfg.delta_lo, hi=cfg.delta_hi, sigma=sigma)
    study = synthetic.rate_study(problem, seeds=range(cfg.eval_seeds), m0=m0)
    study.write(out)
    eps = sorted({r["epsilon"] for r in study.rows}, reverse=True)
    n = [np.mean([r["iterations"] for r in study.rows if r["epsilon"] == e]) for e in eps]
    diag.line_chart(out / "rates.svg", {"iterations": n}, "iterations to eps-stationarity", xlabel="eps index", logy=True)
    print(json.dumps(study.summary(), sort_keys=True))
    return 0


def cmd_diag(run_dir: str) -> int:
    run = Path(run_dir)
    rows = read_csv(run / "runlog.csv")
    if not rows:
        raise ConfigError(f"{run / 'runlog.csv'} has no rows")
    for col in ("objective", "grad_norm_theta"):
        if rows[0].get(col) is None:
            raise KeyError(f"runlog.csv lacks column {col!r}")
    f = [r["objective"] for r in rows]
    g = [r["grad_norm_theta"] for r in rows]
    pl = diag.pl_rsi_log(f, g)
    diag.write_rows(pl, run / "diagnostics.csv", diag.PL_COLUMNS)
    fit = diag.fit_pl_rsi(pl)
    fit["phi_is_estimate"] = True
    _write_json(run / "diagnostics.json", fit)
    diag.line_chart(run / "pl.svg", {"half_grad_sq": [r["half_grad_sq"] for r in pl], "gap": [r["gap"] for r in pl]},
                    "PL check", logy=True)
    if (run / "delta_trace.csv").exists():
        diag.plot_csv(run / "delta_trace.csv", run / "delta_trace.svg", ["delta"], "attack parameter")
    print(json.dumps(fit, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config")
    common.add_argument("--seed", type=int)
    common.add_argument("--out")
    common.add_argument("--task", choices=("nav2d", "tabular"))
    common.add_argument("--attack", choices=atk.MODELS)
    common.add_argument("--scheme", choices=("none", "intermittent", "persistent", "robust"))
    common.add_argument("--eta1", type=float)
    common.add_argument("--eta2", type=float)
    common.add_argument("--alpha", type=float)
    common.add_argument("--delta-lo", dest="delta_lo", type=float)
    common.add_argument("--delta-hi", dest="delta_hi", type=float)
    common.add_argument("--lambda", dest="lambda_reg", type=float)
    common.add_argument("--iterations", type=int)
    common.add_argument("--inner-k", dest="inner_k", type=int)
    common.add_argument("--adapt-depth", dest="adapt_depth", type=int, choices=(1, 2))
    common.add_argument("--eval-seeds", dest="eval_seeds", type=int)
    common.add_argument("--paper-scale", action="store_true")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="meta-attack", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="benchmark meta-training")
    sub.add_parser("attack", parents=[common], help="training under an attack scheme")
    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    e.add_argument("checkpoint")
    s = sub.add_parser("synthetic", parents=[common], help="convergence-rate study on the quadratic problem")
    s.add_argument("--sigma", type=float, default=1.0)
    s.add_argument("--m0", type=float, default=1.0)
    d = sub.add_parser("diag", help="post-process a run directory")
    d.add_argument("run_dir")
    return p


_FLAG_KEYS = ("seed", "out", "task", "attack", "scheme", "eta1", "eta2", "alpha", "delta_lo", "delta_hi", "lambda_reg",
              "iterations", "inner_k", "adapt_depth", "eval_seeds")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "diag":
            return cmd_diag(args.run_dir)
        overrides = {k: getattr(args, k) for k in _FLAG_KEYS}
        cfg = load_config(args.config, overrides, args.paper_scale)
        if args.command == "train":
            if cfg.scheme != "none":
                raise ConfigError("train runs the benchmark; use the attack subcommand for schemes")
            return cmd_train(cfg)
        if args.command == "attack":
            return cmd_attack(cfg)
        if args.command == "eval":
            return cmd_eval(cfg, args.checkpoint)
        return cmd_synthetic(cfg, args.sigma, args.m0)
    except (ConfigError, KeyError, FileNotFoundError) as exc:
        print(f"error: {exc.args[0] if exc.args else exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
