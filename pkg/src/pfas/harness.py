"""Monte-Carlo experiments: channel-estimation NMSE and downlink rate.

Every trial draws its randomness from its own counter-based stream,
``Philox(SeedSequence([seed, trial]))``, so results do not depend on the
number of workers or on scheduling.  Results are reduced in trial order.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from functools import lru_cache
from pathlib import Path

import numpy as np

from .channel import (
    ArrayGeometry,
    GridModel,
    exact_channel_matrix,
    make_grid,
    project_scene_to_grid,
    snap_scene,
    synth_scene,
)
from .errors import ConfigError
from .omp import run_momp
from .patterns import IsotropicPatternSet, synth_pattern_set
from .precoding import (
    DownlinkChannelSet,
    PrecoderConfig,
    discrete_rate,
    group_opt,
    nonfas,
    optimize_states,
    random_baseline,
    upper_bound,
)
from .sounding import generate_observation, ls_estimate, make_plan, preprocess
from .vbi import VbiConfig, build_mask, run_turbo_vbi

__all__ = [
    "ScenarioConfig",
    "RunResult",
    "PROFILES",
    "ESTIMATORS",
    "PRECODERS",
    "profile_config",
    "load_config",
    "parse_config_text",
    "trial_rng",
    "run_nmse_experiment",
    "run_rate_experiment",
    "run_experiment",
    "emit_csv",
    "nmse_db",
]

log = logging.getLogger(__name__)

ESTIMATORS = ("ls", "omp", "vbi")
PRECODERS = ("proposed", "random", "nonfas", "groupopt", "upper")
SCENE_MODES = ("grid", "exact")
N_TEST_STATES = 50


@dataclass(frozen=True)
class ScenarioConfig:
    """One experiment point.

    Powers are in dB with unit noise variance, so ``p_t_db`` is the SNR.
    The scene's total path power is ``M``, which makes ``p_t_db`` the
    average per-antenna receive SNR of the sounding pilots.
    ``estimator`` and ``precoder`` are comma-separated lists.
    """

    m1: int = 4
    m2: int = 4
    n_states: int = 12
    n_subcarriers: int = 64
    grid_step_deg: float = 15.0
    delay_span: int = 8
    n_users: int = 8
    n_blocks: int = 4
    n_paths: int = 8
    angle_spread_deg: float = 10.0
    scene_mode: str = "grid"
    p_t_db: float = 20.0
    noise_var: float = 1.0
    noise_var_dl: float = 1.0
    n_trials: int = 20
    seed: int = 0
    pattern_seed: int = 7
    pattern_order: int = 3
    estimator: str = "vbi"
    precoder: str = "proposed"
    vbi_iters: int = 20
    opt_steps: int = 500
    opt_restarts: int = 4
    opt_lr: float = 1e-3
    opt_init_scale: float = 0.01
    workers: int = 1
    profile: str = "desk"

    def __post_init__(self):
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        need(self.m1 >= 1 and self.m2 >= 1, "m1 and m2 must be positive")
        need(self.n_states >= 1, "n_states must be positive")
        need(self.n_subcarriers >= 1, "n_subcarriers must be positive")
        need(1 <= self.delay_span <= self.n_subcarriers, "need 1 <= delay_span <= n_subcarriers")
        need(self.n_users >= 1, "n_users must be positive")
        need(self.n_blocks >= 1, "n_blocks (T) must be >= 1")
        need(self.n_paths >= 1, "n_paths must be positive")
        need(self.n_trials >= 0, "n_trials must be >= 0")
        need(self.noise_var > 0 and self.noise_var_dl > 0, "noise variances must be positive")
        need(self.pattern_order >= 1, "pattern_order must be positive")
        need(self.workers >= 1, "workers must be >= 1")
        need(self.scene_mode in SCENE_MODES, f"scene_mode must be one of {SCENE_MODES}")
        need(math.isfinite(self.p_t_db), "p_t_db must be finite")
        ratio = 180.0 / self.grid_step_deg if self.grid_step_deg > 0 else 0.0
        need(ratio >= 1 and abs(ratio - round(ratio)) < 1e-9, "grid_step_deg must divide 180")
        for name in self.estimators:
            need(name in ESTIMATORS, f"unknown estimator {name!r}; choose from {ESTIMATORS}")
        for name in self.precoders:
            need(name in PRECODERS, f"unknown precoder {name!r}; choose from {PRECODERS}")

    @property
    def m(self) -> int:
        return self.m1 * self.m2

    @property
    def estimators(self) -> tuple[str, ...]:
        return _split_list(self.estimator)

    @property
    def precoders(self) -> tuple[str, ...]:
        return _split_list(self.precoder)

    @property
    def p_t(self) -> float:
        return 10.0 ** (self.p_t_db / 10.0)

    def replace(self, **changes) -> "ScenarioConfig":
        return dataclasses.replace(self, **changes)

    def keys(self) -> dict:
        """Scenario columns written in front of every CSV row."""
        return {
            "profile": self.profile,
            "m": self.m,
            "n_states": self.n_states,
            "n_subcarriers": self.n_subcarriers,
            "grid_step_deg": self.grid_step_deg,
            "delay_span": self.delay_span,
            "n_users": self.n_users,
            "n_blocks": self.n_blocks,
            "scene_mode": self.scene_mode,
            "p_t_db": self.p_t_db,
            "seed": self.seed,
        }


def _split_list(text: str) -> tuple[str, ...]:
    return tuple(s.strip().lower() for s in str(text).split(",") if s.strip())


PROFILES = {
    "desk": {},
    "paper": {
        "n_subcarriers": 256,
        "grid_step_deg": 5.0,
        "delay_span": 16,
        "n_paths": 12,
        "angle_spread_deg": 5.0,
        "profile": "paper",
    },
}


def profile_config(name: str = "desk", **overrides) -> ScenarioConfig:
    if name not in PROFILES:
        raise ConfigError(f"unknown profile {name!r}; choose from {sorted(PROFILES)}")
    values = {**PROFILES[name], "profile": name, **overrides}
    return ScenarioConfig(**values)


def _coerce(name: str, text: str):
    types = {f.name: f.type for f in fields(ScenarioConfig)}
    if name not in types:
        raise ConfigError(f"unknown configuration key {name!r}")
    kind = types[name]
    try:
        if kind in ("int", int):
            return int(text)
        if kind in ("float", float):
            return float(text)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {text!r} as {kind}") from None
    return text


def parse_config_text(text: str) -> dict:
    """``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = _coerce(key, value)
    return out


def load_config(path=None, profile: str | None = None, **overrides) -> ScenarioConfig:
    """Profile defaults, then the file, then explicit overrides."""
    values = {}
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from None
        values = parse_config_text(text)
    name = profile or values.pop("profile", "desk")
    values.pop("profile", None)
    values.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return profile_config(name, **values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def trial_rng(seed: int, trial: int) -> np.random.Generator:
    """Independent stream per trial from a counter-based generator."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(trial)])))


def nmse_db(estimate, truth) -> float:
    """``10 log10(sum |est - truth|^2 / sum |truth|^2)`` over paired arrays."""
    err = ref = 0.0
    for e, t in zip(estimate, truth):
        err += float(np.sum(np.abs(e - t) ** 2))
        ref += float(np.sum(np.abs(t) ** 2))
    if ref == 0:
        raise ValueError("reference channel is identically zero")
    return 10.0 * math.log10(max(err, 1e-300) / ref)


@dataclass
class RunResult:
    experiment: str
    config: ScenarioConfig
    records: list[tuple[int, str, float]] = field(default_factory=list)

    @property
    def metrics(self) -> list[str]:
        seen = []
        for _, name, _ in self.records:
            if name not in seen:
                seen.append(name)
        return seen

    def values(self, metric: str) -> np.ndarray:
        return np.array([v for _, name, v in self.records if name == metric])

    def mean(self, metric: str) -> float:
        return float(np.mean(self.values(metric)))

    def std(self, metric: str) -> float:
        return float(np.std(self.values(metric)))

    @property
    def n_trials(self) -> int:
        return len({t for t, _, _ in self.records})

    def summary(self) -> dict[str, tuple[float, float]]:
        return {m: (self.mean(m), self.std(m)) for m in self.metrics}


# --------------------------------------------------------------------------
# per-trial work


@lru_cache(maxsize=8)
def _context(config: ScenarioConfig):
    """Grid tables shared by every trial of a configuration."""
    geom = ArrayGeometry(config.m1, config.m2)
    grid = make_grid(config.grid_step_deg)
    patterns = synth_pattern_set(config.pattern_seed, config.n_states, config.pattern_order)
    model = GridModel(grid, patterns, geom)
    iso = GridModel(grid, IsotropicPatternSet(), geom)
    return model, iso


def _draw_scene(config, model, rng):
    scene = synth_scene(
        rng,
        config.n_users,
        config.n_paths,
        config.delay_span,
        config.angle_spread_deg,
        power=float(config.m),
    )
    if config.scene_mode == "grid":
        scene = snap_scene(scene, model.grid)
    return scene


def _true_channel_fn(config, model, scene, truth, user):
    if config.scene_mode == "grid":
        return lambda s: model.channel(truth, s, config.n_subcarriers)
    return lambda s: exact_channel_matrix(
        scene, model.patterns, model.geom, s, config.n_subcarriers, user
    )


def _estimate(name, reduced, model, config, trace_path=None):
    if name == "ls":
        return ls_estimate(reduced)
    omp = run_momp(reduced)
    if name == "omp":
        return omp.coeffs
    if len(omp.coeffs.support) == 0:
        return omp.coeffs
    mask = build_mask(omp.coeffs, model.grid, config.delay_span)
    vbi = run_turbo_vbi(
        reduced, mask, VbiConfig(max_iter=config.vbi_iters), init=omp.coeffs, trace_path=trace_path
    )
    return vbi.coeffs


def _sound_and_estimate(config, model, scene, user, rng, trace_prefix=None, trial=0):
    """Sounding for one user and every requested estimator."""
    truth = project_scene_to_grid(scene, model.grid, user)
    source = truth if config.scene_mode == "grid" else scene
    plan = make_plan(
        rng,
        config.n_blocks,
        config.m,
        config.n_states,
        config.n_subcarriers,
        config.noise_var,
        config.p_t,
    )
    obs = generate_observation(source, model, plan, rng, user)
    reduced = preprocess(obs, model, config.delay_span)
    estimates = {}
    for name in config.estimators:
        trace = None
        if trace_prefix is not None and name == "vbi":
            trace = f"{trace_prefix}_trial{trial}_user{user}.csv"
        estimates[name] = _estimate(name, reduced, model, config, trace)
    return truth, plan, estimates


def _nmse_trial(args):
    config, trial, trace_prefix = args
    model, _ = _context(config)
    rng = trial_rng(config.seed, trial)
    scene = _draw_scene(config, model, rng)
    test_states = rng.integers(0, config.n_states, size=(N_TEST_STATES, config.m))
    sums = {name: np.zeros(4) for name in config.estimators}  # train err/ref, test err/ref
    for user in range(config.n_users):
        truth, plan, estimates = _sound_and_estimate(
            config, model, scene, user, rng, trace_prefix, trial
        )
        true_h = _true_channel_fn(config, model, scene, truth, user)
        for name, est in estimates.items():
            for offset, states in ((0, plan.block_states), (2, test_states)):
                for s in states:
                    h = true_h(s)
                    he = model.channel(est, s, config.n_subcarriers)
                    sums[name][offset] += np.sum(np.abs(he - h) ** 2)
                    sums[name][offset + 1] += np.sum(np.abs(h) ** 2)
    rows = []
    for name in config.estimators:
        s = sums[name]
        rows.append((trial, f"nmse_train_{name}", 10 * math.log10(max(s[0], 1e-300) / s[1])))
        rows.append((trial, f"nmse_test_{name}", 10 * math.log10(max(s[2], 1e-300) / s[3])))
    return rows


def _rate_trial(args):
    config, trial, trace_prefix = args
    model, iso = _context(config)
    rng = trial_rng(config.seed, trial)
    scene = _draw_scene(config, model, rng)
    truths = []
    estimates = {name: [] for name in config.estimators}
    need_estimates = "proposed" in config.precoders
    for user in range(config.n_users):
        if need_estimates:
            truth, _, est = _sound_and_estimate(config, model, scene, user, rng, trace_prefix, trial)
            for name in config.estimators:
                estimates[name].append(est[name])
        else:
            truth = project_scene_to_grid(scene, model.grid, user)
        truths.append(truth)
    n_c = config.n_subcarriers
    if config.scene_mode == "grid":
        true_set = DownlinkChannelSet.from_coeffs(model, truths, n_c)
    else:
        true_set = DownlinkChannelSet.from_scene(scene, model.patterns, model.geom, n_c)
    opt = PrecoderConfig(
        lr=config.opt_lr,
        steps=config.opt_steps,
        restarts=config.opt_restarts,
        init_scale=config.opt_init_scale,
    )
    p_t, nv = config.p_t, config.noise_var_dl
    rows = []
    for scheme in config.precoders:
        if scheme == "proposed":
            for name in config.estimators:
                est_set = DownlinkChannelSet.from_coeffs(model, estimates[name], n_c)
                sol = optimize_states(est_set, p_t, nv, opt, rng)
                r, _ = discrete_rate(true_set, sol.states, p_t, nv)
                rows.append((trial, f"rate_proposed_{name}", r))
        elif scheme == "random":
            rows.append((trial, "rate_random", random_baseline(true_set, p_t, nv, rng).rate))
        elif scheme == "nonfas":
            if config.scene_mode == "grid":
                iso_set = DownlinkChannelSet.from_coeffs(iso, truths, n_c)
            else:
                iso_set = DownlinkChannelSet.from_scene(scene, iso.patterns, iso.geom, n_c)
            rows.append((trial, "rate_nonfas", nonfas(iso_set, p_t, nv).rate))
        elif scheme == "groupopt":
            rows.append((trial, "rate_groupopt", group_opt(true_set, p_t, nv).rate))
        elif scheme == "upper":
            rows.append((trial, "rate_upper", upper_bound(true_set, p_t, nv, opt, rng).rate))
    return rows


def _run(kind, worker, config: ScenarioConfig, trace_prefix=None) -> RunResult:
    jobs = [(config, t, trace_prefix) for t in range(config.n_trials)]
    if config.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            chunks = list(pool.map(worker, jobs))
    else:
        chunks = [worker(j) for j in jobs]
    result = RunResult(kind, config)
    for rows in chunks:
        result.records.extend(rows)
    return result


def run_nmse_experiment(config: ScenarioConfig, trace_prefix=None) -> RunResult:
    """Per trial: scene, sounding of every user, estimation, channel NMSE.

    NMSE is accumulated over users and over the ``T`` sounding
    configurations (``nmse_train_*``) or 50 fresh random configurations
    (``nmse_test_*``).
    """
    return _run("nmse", _nmse_trial, config, trace_prefix)


def run_rate_experiment(config: ScenarioConfig, trace_prefix=None) -> RunResult:
    """Per trial: estimate every user, choose states, score ZF rate on the true channel."""
    if config.n_users > config.m:
        raise ConfigError("zero-forcing needs n_users <= m1 * m2")
    return _run("rate", _rate_trial, config, trace_prefix)


def run_experiment(kind: str, config: ScenarioConfig, trace_prefix=None) -> RunResult:
    if kind == "nmse":
        return run_nmse_experiment(config, trace_prefix)
    if kind == "rate":
        return run_rate_experiment(config, trace_prefix)
    raise ConfigError(f"unknown experiment {kind!r}")


def _fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return str(value)
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return "%.9g" % value
    return str(value)


def emit_csv(result: RunResult, path) -> None:
    """Header plus one row per (trial, metric), scenario keys first."""
    keys = result.config.keys()
    header = ["experiment", *keys, "trial", "metric", "value"]
    prefix = [result.experiment, *(_fmt(v) for v in keys.values())]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for trial, metric, value in result.records:
            w.writerow([*prefix, str(trial), metric, _fmt(value)])
