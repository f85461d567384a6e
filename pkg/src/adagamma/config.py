"""Run configuration: an INI-style file with sections ``run``, ``env``, ``sac``,
``ppo`` and ``gamma``.

Every key is optional; missing keys take the defaults below. Keys in the
``gamma`` section whose default is ``None`` are resolved per algorithm (the
SAC and PPO hyperparameter tables differ). Unknown sections or keys and
out-of-range values raise :class:`ConfigError` naming the offending key.

Environment variables ``ADAGAMMA_<SECTION>_<KEY>`` override file values,
e.g. ``ADAGAMMA_GAMMA_VARIANT=fixed``.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

ALGORITHMS = ("sac", "ppo")
ENVS = ("pendulum", "corridor", "tabular")
VARIANTS = ("adagamma-rc", "cross-validated", "uncertainty", "naive-td", "fixed")
VALUE_TARGETS = ("gae", "nstep")


class ConfigError(ValueError):
    pass


@dataclass
class RunSection:
    algorithm: str = "sac"
    env: str = "pendulum"
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    max_steps: int = 1_000_000
    eval_interval: int = 10_000
    eval_episodes: int = 10
    log_interval: int = 10_000
    stop_at_return: Optional[float] = None


@dataclass
class EnvSection:
    horizon: Optional[int] = None
    max_torque: float = 2.0
    noise_std: float = 0.5
    goal_reward: float = 10.0
    shaping: float = 0.1
    step_cost: float = 0.0


@dataclass
class SacSection:
    actor_lr: float = 3e-4
    critic_lr: float = 3e-4
    alpha_lr: float = 3e-4
    tau: float = 5e-3
    buffer_size: int = 1_000_000
    learning_starts: int = 5000
    batch_size: int = 256
    grad_steps: int = 1
    hidden: int = 256
    alpha_init: float = 0.2
    autotune_alpha: bool = True
    max_grad_norm: float = 1.0


@dataclass
class PpoSection:
    actor_lr: float = 3e-4
    critic_lr: float = 3e-4
    clip: float = 0.2
    gae_lambda: float = 0.95
    epochs: int = 10
    rollout: int = 4096
    minibatch: int = 128
    ent_coef: float = 0.01
    max_grad_norm: float = 0.5
    std_init: float = 0.5
    std_floor: float = 0.1
    std_decay: float = 0.05
    std_decay_period: int = 200_000
    hidden: int = 64
    value_target: str = "gae"
    value_nstep: int = 10
    normalize_before_targets: bool = False
    reward_scale: float = 1.0


@dataclass
class GammaSection:
    variant: str = "adagamma-rc"
    gamma_min: float = 0.9
    gamma_max: float = 0.999
    hidden: int = 256
    lr: Optional[float] = None
    warmup: Optional[int] = None
    update_freq: Optional[int] = None
    n_step: Optional[int] = None
    lambda_rc: float = 1.0
    lambda_dev: Optional[float] = None
    lambda_var: Optional[float] = None
    lambda_bound: Optional[float] = None
    boundary_margin: float = 0.005
    gamma_init: Optional[float] = None
    gamma_target: Optional[float] = None
    ref_init: Optional[float] = None
    ref_tau: float = 0.1
    ref_period: Optional[int] = None
    ref_adaptive: bool = True
    ref_after_warmup: bool = True
    fixed_gamma: float = 0.99
    uncertainty_beta: float = 2.0
    uncertainty_lr: float = 1e-3
    uncertainty_eta: float = 1.0


# Per-algorithm defaults for the gamma section. SAC counts warmup in env steps,
# ref_period in episodes; PPO counts warmup in episodes, ref_period in updates.
GAMMA_DEFAULTS = {
    "sac": dict(lr=1e-4, warmup=100_000, update_freq=20, n_step=5, lambda_dev=0.005,
                lambda_var=0.012, lambda_bound=0.05, gamma_init=0.98, ref_init=0.98,
                ref_period=5),
    "ppo": dict(lr=3e-4, warmup=200, update_freq=1, n_step=10, lambda_dev=0.01,
                lambda_var=0.005, lambda_bound=0.05, gamma_init=0.99, ref_init=0.99,
                ref_period=1),
}

SECTIONS = {"run": RunSection, "env": EnvSection, "sac": SacSection,
            "ppo": PpoSection, "gamma": GammaSection}


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    env: EnvSection = field(default_factory=EnvSection)
    sac: SacSection = field(default_factory=SacSection)
    ppo: PpoSection = field(default_factory=PpoSection)
    gamma: GammaSection = field(default_factory=GammaSection)

    def replace(self, **sections) -> "RunConfig":
        """Copy with per-section overrides, e.g. ``replace(gamma={"variant": "fixed"})``."""
        new = {}
        for name in SECTIONS:
            sec = getattr(self, name)
            new[name] = dataclasses.replace(sec, **sections.get(name, {}))
        cfg = RunConfig(**new)
        old_algo, new_algo = self.run.algorithm, cfg.run.algorithm
        if old_algo != new_algo and old_algo in GAMMA_DEFAULTS:
            # values still at the old algorithm's defaults follow the new one
            explicit = sections.get("gamma", {})
            for key, value in GAMMA_DEFAULTS[old_algo].items():
                if key not in explicit and getattr(cfg.gamma, key) == value:
                    setattr(cfg.gamma, key, None)
        resolve(cfg)
        validate(cfg)
        return cfg


# ---------------------------------------------------------------------------
# parsing


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_value(text: str, hint):
    text = text.strip()
    origin = typing.get_origin(hint)
    if origin is typing.Union:
        args = [a for a in typing.get_args(hint) if a is not type(None)]
        if text.lower() in ("none", "", "auto"):
            return None
        return _parse_value(text, args[0])
    if hint is bool:
        return _parse_bool(text)
    if hint is int:
        return int(float(text)) if "e" in text.lower() else int(text)
    if hint is float:
        return float(text)
    if hint is list:
        return [int(s) for s in text.replace(" ", "").split(",") if s]
    return text


def _format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, list):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config(text: str, environ: Optional[dict] = None) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, default_section="__defaults__")
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    raw: dict[str, dict[str, str]] = {name: {} for name in SECTIONS}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
        raw[section].update(parser[section])
    environ = os.environ if environ is None else environ
    for var, value in environ.items():
        if not var.startswith("ADAGAMMA_"):
            continue
        rest = var[len("ADAGAMMA_"):].lower()
        section, _, key = rest.partition("_")
        if section not in SECTIONS:
            raise ConfigError(f"environment override {var}: unknown section {section!r}")
        raw[section][key] = value

    built = {}
    for name, cls in SECTIONS.items():
        hints = typing.get_type_hints(cls)
        known = {f.name for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, value in raw[name].items():
            if key not in known:
                raise ConfigError(f"unknown key {name}.{key}")
            try:
                kwargs[key] = _parse_value(value, hints[key])
            except ValueError as exc:
                raise ConfigError(f"bad value for {name}.{key}: {exc}") from exc
        built[name] = cls(**kwargs)
    cfg = RunConfig(**built)
    resolve(cfg)
    validate(cfg)
    return cfg


def load_config(path, environ: Optional[dict] = None) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text(), environ)


def resolve(cfg: RunConfig) -> None:
    """Fill algorithm-dependent gamma defaults in place."""
    algo = cfg.run.algorithm
    if algo not in GAMMA_DEFAULTS:
        raise ConfigError(f"run.algorithm must be one of {ALGORITHMS}, got {algo!r}")
    for key, value in GAMMA_DEFAULTS[algo].items():
        if getattr(cfg.gamma, key) is None:
            setattr(cfg.gamma, key, value)


def _check(cond: bool, key: str, msg: str):
    if not cond:
        raise ConfigError(f"{key}: {msg}")


def validate(cfg: RunConfig) -> None:
    r, e, s, p, g = cfg.run, cfg.env, cfg.sac, cfg.ppo, cfg.gamma
    _check(r.algorithm in ALGORITHMS, "run.algorithm", f"must be one of {ALGORITHMS}")
    _check(r.env in ENVS, "run.env", f"must be one of {ENVS}")
    _check(len(r.seeds) >= 1, "run.seeds", "need at least one seed")
    _check(r.max_steps >= 1, "run.max_steps", "must be >= 1")
    _check(r.eval_interval >= 1, "run.eval_interval", "must be >= 1")
    _check(r.eval_episodes >= 1, "run.eval_episodes", "must be >= 1")
    _check(r.log_interval >= 1, "run.log_interval", "must be >= 1")
    _check(e.horizon is None or e.horizon >= 1, "env.horizon", "must be >= 1")
    _check(e.max_torque > 0, "env.max_torque", "must be > 0")
    _check(e.noise_std >= 0, "env.noise_std", "must be >= 0")
    for key in ("actor_lr", "critic_lr", "alpha_lr", "alpha_init"):
        _check(getattr(s, key) > 0, f"sac.{key}", "must be > 0")
    _check(0 < s.tau <= 1, "sac.tau", "must lie in (0, 1]")
    _check(s.batch_size >= 1, "sac.batch_size", "must be >= 1")
    _check(s.buffer_size >= s.batch_size, "sac.buffer_size", "must be >= batch_size")
    _check(s.learning_starts >= 1, "sac.learning_starts", "must be >= 1")
    _check(s.grad_steps >= 1, "sac.grad_steps", "must be >= 1")
    _check(s.hidden >= 1, "sac.hidden", "must be >= 1")
    for key in ("actor_lr", "critic_lr", "std_init", "std_floor", "reward_scale"):
        _check(getattr(p, key) > 0, f"ppo.{key}", "must be > 0")
    _check(p.clip > 0, "ppo.clip", "must be > 0")
    _check(0 <= p.gae_lambda <= 1, "ppo.gae_lambda", "must lie in [0, 1]")
    _check(p.epochs >= 1, "ppo.epochs", "must be >= 1")
    _check(p.rollout >= 2, "ppo.rollout", "must be >= 2")
    _check(1 <= p.minibatch <= p.rollout, "ppo.minibatch", "must lie in [1, rollout]")
    _check(p.std_floor <= p.std_init, "ppo.std_floor", "must not exceed std_init")
    _check(p.std_decay_period >= 1, "ppo.std_decay_period", "must be >= 1")
    _check(p.value_target in VALUE_TARGETS, "ppo.value_target", f"must be one of {VALUE_TARGETS}")
    _check(p.value_nstep >= 1, "ppo.value_nstep", "must be >= 1")
    _check(g.variant in VARIANTS, "gamma.variant", f"must be one of {VARIANTS}")
    _check(0 <= g.gamma_min < 1, "gamma.gamma_min", "must lie in [0, 1)")
    _check(0 <= g.gamma_max < 1, "gamma.gamma_max", "must lie in [0, 1)")
    _check(g.gamma_min <= g.gamma_max, "gamma.gamma_min", "must not exceed gamma_max")
    _check(0 <= g.fixed_gamma < 1, "gamma.fixed_gamma", "must lie in [0, 1)")
    _check(0 < g.ref_init < 1, "gamma.ref_init", "must lie in (0, 1)")
    _check(0 < g.gamma_init < 1, "gamma.gamma_init", "must lie in (0, 1)")
    _check(g.gamma_target is None or 0 <= g.gamma_target < 1, "gamma.gamma_target",
           "must lie in [0, 1)")
    _check(0 <= g.ref_tau <= 1, "gamma.ref_tau", "must lie in [0, 1]")
    _check(g.ref_period >= 1, "gamma.ref_period", "must be >= 1")
    _check(g.lr > 0, "gamma.lr", "must be > 0")
    _check(g.hidden >= 1, "gamma.hidden", "must be >= 1")
    _check(g.warmup >= 0, "gamma.warmup", "must be >= 0")
    _check(g.update_freq >= 1, "gamma.update_freq", "must be >= 1")
    _check(g.n_step >= 1, "gamma.n_step", "must be >= 1")
    for key in ("lambda_rc", "lambda_dev", "lambda_var", "lambda_bound", "boundary_margin"):
        _check(getattr(g, key) >= 0, f"gamma.{key}", "must be >= 0")
    _check(g.uncertainty_lr > 0, "gamma.uncertainty_lr", "must be > 0")
    _check(g.uncertainty_eta >= 0, "gamma.uncertainty_eta", "must be >= 0")


def dump_config(cfg: RunConfig) -> str:
    """Textual echo of the effective config; ``parse_config`` reads it back."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    for name in SECTIONS:
        sec = getattr(cfg, name)
        parser[name] = {f.name: _format_value(getattr(sec, f.name))
                        for f in dataclasses.fields(sec)}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def config_for_env(cfg: RunConfig) -> dict:
    """Keyword arguments for :func:`adagamma.envs.make_env`."""
    e = cfg.env
    kwargs: dict = {}
    if cfg.run.env == "pendulum":
        kwargs["max_torque"] = e.max_torque
    elif cfg.run.env == "corridor":
        kwargs.update(noise_std=e.noise_std, goal_reward=e.goal_reward, shaping=e.shaping,
                      step_cost=e.step_cost)
    if e.horizon is not None:
        kwargs["horizon"] = e.horizon
    return kwargs
