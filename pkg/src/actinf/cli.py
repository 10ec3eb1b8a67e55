"""
Command line interface.

    actinf run --task explore-mountaincar --agent reward_only --seeds 1,2,3 --epochs 100
    actinf run --config actinf.ini --planner.N 50
    actinf plot runs/explore-mountaincar-active_inference runs/explore-mountaincar-reward_only
    actinf selftest
    actinf env-serve --env mountaincar --port 5555

Configuration is resolved in this order: built-in defaults, the task
preset, the INI file given with *--config*, then command line flags and
dotted overrides (``--section.key value``). Exit status is 0 on success,
1 on a runtime failure (partial outputs are kept) and 2 on an invalid
configuration.
"""

import argparse
import concurrent.futures
import configparser
import copy
import glob
import logging
import os
import platform
import sys
from dataclasses import dataclass

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

from actinf.agentloop import AGENT_KINDS, AgentConfig, CoverageGrid, read_record_csv, run_experiment  # noqa: E402
from actinf.envsim import ENVIRONMENTS, action_repeat, make_env, remote_env, serve_env  # noqa: E402
from actinf.genmodel import MODES, ModelConfig, TrainConfig  # noqa: E402
from actinf.planner import PlannerConfig  # noqa: E402

logger = logging.getLogger(__name__)

TASKS = ("explore-mountaincar", "exploit-pendulum", "custom")

# Band quantiles of the aggregate report and the numpy method computing them.
BAND_QUANTILES = (0.025, 0.975)
QUANTILE_METHOD = "linear"


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending key."""


def _parse_bool(text):
    value = text.strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _parse_ints(text):
    parts = [p.strip() for p in text.replace(";", ",").split(",") if p.strip()]
    if not parts:
        raise ValueError("expected a comma separated list of integers")
    return tuple(int(p) for p in parts)


def _parse_optional_float(text):
    return None if text.strip().lower() in ("auto", "none", "") else float(text)


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    if value is None:
        return "auto"
    if isinstance(value, float):
        return repr(value)
    return str(value)


class Key:
    def __init__(self, parse, default, doc, choices=None):
        self.parse = parse
        self.default = default
        self.doc = doc
        self.choices = choices


SCHEMA = {
    "run": {
        "task": Key(str, "explore-mountaincar", "task preset", TASKS),
        "agent": Key(str, "active_inference", "agent kind", AGENT_KINDS),
        "epochs": Key(int, 100, "train-then-collect epochs per seed"),
        "seeds": Key(_parse_ints, (1, 2, 3, 4, 5), "experiment seeds"),
        "out": Key(str, "", "output directory (empty: $ACTINF_OUT/<task>-<agent>)"),
        "endpoint": Key(str, "", "remote environment host:port (empty: in-process)"),
        "timeout": Key(float, 10.0, "remote environment timeout in seconds"),
        "workers": Key(int, 1, "seeds run in parallel processes"),
        "noise_variance": Key(float, 0.3, "epsilon_greedy exploration noise variance"),
        "trace": Key(_parse_bool, False, "write a per-step JSON-lines trace"),
        "checkpoint": Key(_parse_bool, True, "write the final model checkpoint"),
    },
    "model": {
        "mode": Key(str, "bayesian", "bayesian or point", MODES),
        "hidden": Key(_parse_ints, (500, 500), "transition network hidden widths"),
        "reward_hidden": Key(_parse_ints, (200, 200), "reward network hidden widths"),
        "init_variance": Key(float, 0.05, "initial weight posterior variance"),
        "transition_variance": Key(float, 1.0, "fixed transition variance (bayesian mode)"),
        "recognition_variance": Key(_parse_optional_float, None, "auto: 1.0 bayesian, 0.1 point"),
        "K": Key(int, 1, "weight samples per training batch"),
        "kl_weight": Key(_parse_optional_float, None, "auto: batch_size / dataset_size"),
        "observation_nll": Key(_parse_bool, True, "include observation NLL in the objective"),
    },
    "train": {
        "batches": Key(int, 100, "batches per epoch"),
        "batch_size": Key(int, 50, "transitions per batch"),
        "learning_rate": Key(float, 1e-3, "Adam step size"),
        "beta1": Key(float, 0.9, "Adam first moment decay"),
        "beta2": Key(float, 0.999, "Adam second moment decay"),
        "epsilon": Key(float, 1e-8, "Adam epsilon"),
        "seed_episodes": Key(int, 5, "random-action episodes before the first epoch"),
    },
    "planner": {
        "H": Key(int, 12, "horizon"),
        "N": Key(int, 1000, "candidates per iteration"),
        "M": Key(int, 100, "elites per iteration"),
        "I": Key(int, 10, "iterations"),
        "B": Key(int, 5, "weight samples per candidate"),
        "J": Key(int, 4, "particles per weight sample"),
        "info_gain_weight": Key(float, 1.0, "information gain multiplier (0 disables)"),
        "extrinsic": Key(_parse_bool, True, "score predicted reward"),
        "variance_floor": Key(float, 1e-4, "policy variance floor"),
        "particle_clamp": Key(float, 1e6, "particle state clamp"),
        "workers": Key(int, 1, "threads scoring candidates"),
    },
    "env": {
        "name": Key(str, "mountaincar", "in-process environment", tuple(ENVIRONMENTS)),
        "action_repeat": Key(int, 1, "action repeat"),
        "max_steps": Key(int, 200, "episode cap of the inner environment"),
    },
    "coverage": {
        "enabled": Key(_parse_bool, True, "track state-space coverage (2-D states only)"),
        "resolution": Key(int, 32, "coverage grid cells per axis"),
    },
}

PRESETS = {
    "explore-mountaincar": {"env.name": "mountaincar", "env.action_repeat": 1, "model.mode": "bayesian",
                            "coverage.enabled": True},
    "exploit-pendulum": {"env.name": "pendulum", "env.action_repeat": 3, "model.mode": "point",
                         "model.recognition_variance": 0.1, "planner.info_gain_weight": 0.0,
                         "coverage.enabled": False},
    "custom": {"coverage.enabled": False},
}


class RunConfig:
    """
    Fully resolved configuration: every key of every section holds a typed
    value. Build it with *resolve()*; *to_ini()* serializes it back.
    """

    def __init__(self):
        self.values = {section: {key: copy.copy(spec.default) for key, spec in keys.items()}
                       for section, keys in SCHEMA.items()}

    def __eq__(self, other):
        return isinstance(other, RunConfig) and self.values == other.values

    def __getitem__(self, section):
        return self.values[section]

    @staticmethod
    def _split(dotted):
        section, _, key = dotted.partition(".")
        if section not in SCHEMA:
            raise ConfigError(f"unknown section {section!r} in {dotted!r}")
        if key not in SCHEMA[section]:
            raise ConfigError(f"unknown key {section}.{key}")
        return section, key

    def set(self, dotted, value):
        """Sets *section.key*; strings are parsed, other values checked."""
        section, key = self._split(dotted)
        spec = SCHEMA[section][key]
        try:
            parsed = spec.parse(value) if isinstance(value, str) else value
            if spec.parse is _parse_ints:
                parsed = tuple(int(v) for v in parsed)
            elif spec.parse in (int, float):
                parsed = spec.parse(parsed)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"{section}.{key}: invalid value {value!r} ({e})") from None
        if spec.choices and parsed not in spec.choices:
            raise ConfigError(f"{section}.{key}: {parsed!r} is not one of {', '.join(spec.choices)}")
        self.values[section][key] = parsed
        return self

    def get(self, dotted):
        section, key = self._split(dotted)
        return self.values[section][key]

    def apply_preset(self, task):
        if task not in PRESETS:
            raise ConfigError(f"run.task: unknown task {task!r}")
        self.set("run.task", task)
        for dotted, value in PRESETS[task].items():
            self.set(dotted, value)
        return self

    def apply_ini(self, text, source="<config>"):
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            parser.read_string(text, source=source)
        except configparser.Error as e:
            raise ConfigError(f"{source}: {e}") from None
        for section in parser.sections():
            for key, value in parser.items(section):
                self.set(f"{section}.{key}", value)
        return self

    @classmethod
    def resolve(cls, text=None, overrides=(), source="<config>"):
        """
        Defaults, then the preset of the task named by *overrides* or the
        file, then the file, then *overrides* (pairs of dotted key and value).
        """
        overrides = list(overrides)
        task = None
        if text:
            probe = cls().apply_ini(text, source)
            task = probe.values["run"]["task"]
        for dotted, value in overrides:
            if dotted == "run.task":
                task = value
        config = cls().apply_preset(task or SCHEMA["run"]["task"].default)
        if text:
            config.apply_ini(text, source)
        for dotted, value in overrides:
            config.set(dotted, value)
        config.validate()
        return config

    @classmethod
    def from_ini(cls, text):
        return cls().apply_ini(text)

    def to_ini(self):
        lines = []
        for section, keys in self.values.items():
            lines.append(f"[{section}]")
            lines.extend(f"{key} = {_format(value)}" for key, value in keys.items())
            lines.append("")
        return "\n".join(lines)

    def as_dict(self):
        return {section: {key: _format(value) for key, value in keys.items()}
                for section, keys in self.values.items()}

    def model_config(self):
        m = self.values["model"]
        return ModelConfig(mode=m["mode"], hidden=m["hidden"], reward_hidden=m["reward_hidden"],
                           init_variance=m["init_variance"], transition_variance=m["transition_variance"],
                           recognition_variance=m["recognition_variance"], K=m["K"],
                           kl_weight=m["kl_weight"], observation_nll=m["observation_nll"])

    def planner_config(self):
        return PlannerConfig(**self.values["planner"])

    def train_config(self):
        return TrainConfig(**self.values["train"])

    def agent_config(self):
        return AgentConfig(kind=self.values["run"]["agent"], noise_variance=self.values["run"]["noise_variance"],
                           planner=self.planner_config(), model=self.model_config())

    def validate(self):
        checks = (("model", self.model_config), ("planner", self.planner_config),
                  ("train", self.train_config), ("run", self.agent_config))
        for section, build in checks:
            try:
                build()
            except ValueError as e:
                raise ConfigError(f"{section}: {e}") from None
        run = self.values["run"]
        if run["epochs"] < 1:
            raise ConfigError("run.epochs: must be at least 1")
        if run["workers"] < 1:
            raise ConfigError("run.workers: must be at least 1")
        if self.values["env"]["action_repeat"] < 1:
            raise ConfigError("env.action_repeat: must be at least 1")
        if self.values["env"]["max_steps"] < 1:
            raise ConfigError("env.max_steps: must be at least 1")
        if self.values["coverage"]["resolution"] < 1:
            raise ConfigError("coverage.resolution: must be at least 1")
        return self

    def make_env(self):
        env = self.values["env"]
        endpoint = self.values["run"]["endpoint"]
        if endpoint:
            return action_repeat(remote_env(endpoint, self.values["run"]["timeout"]), env["action_repeat"])
        return make_env(env["name"], env["action_repeat"], env["max_steps"])

    def coverage_grid(self, state_dim):
        cov = self.values["coverage"]
        if not cov["enabled"] or state_dim != 2:
            return None
        return CoverageGrid(cov["resolution"])

    def output_dir(self):
        run = self.values["run"]
        if run["out"]:
            return run["out"]
        root = os.environ.get("ACTINF_OUT", "runs")
        return os.path.join(root, f"{run['task']}-{run['agent']}")


def versions():
    from actinf import __version__
    return {"actinf": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "pandas": pd.__version__}


@dataclass
class AggregateReport:
    """
    Per-seed curves of one column, their mean and a quantile band per
    epoch. With a single seed the band collapses onto the curve.
    """

    per_seed: pd.DataFrame
    mean: pd.Series
    lower: pd.Series
    upper: pd.Series
    column: str = "return"
    method: str = QUANTILE_METHOD

    def frame(self):
        out = pd.DataFrame({"mean": self.mean, "lower": self.lower, "upper": self.upper})
        for seed in self.per_seed.columns:
            out[f"seed_{seed}"] = self.per_seed[seed]
        return out.reset_index()

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write(f"# column: {self.column}\n# quantiles: {list(BAND_QUANTILES)}\n# method: {self.method}\n")
            self.frame().to_csv(fh, index=False)


def aggregate(frames, column="return"):
    """
    :param frames: mapping seed -> per-epoch DataFrame with an *epoch* column.
    :rtype: AggregateReport
    """
    if not frames:
        raise ValueError("nothing to aggregate")
    per_seed = pd.DataFrame({seed: frame.set_index("epoch")[column] for seed, frame in sorted(frames.items())})
    per_seed.index.name = "epoch"
    values = per_seed.to_numpy(dtype=np.float64)
    mean = per_seed.mean(axis=1)
    lower, upper = np.quantile(values, BAND_QUANTILES, axis=1, method=QUANTILE_METHOD)
    # skewed seeds can push the mean outside the quantiles; the band always holds it
    lower = np.minimum(lower, mean.to_numpy())
    upper = np.maximum(upper, mean.to_numpy())
    return AggregateReport(per_seed=per_seed, mean=mean,
                           lower=pd.Series(lower, index=per_seed.index),
                           upper=pd.Series(upper, index=per_seed.index), column=column)


def _save_svg(fig, path):
    with matplotlib.rc_context({"svg.hashsalt": "actinf"}):
        fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def plot_returns(reports, path, ylabel="return"):
    """Mean curve and quantile band of every labelled report."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, report in reports.items():
        epochs = report.mean.index.to_numpy()
        ax.plot(epochs, report.mean.to_numpy(), label=label)
        ax.fill_between(epochs, report.lower.to_numpy(), report.upper.to_numpy(), alpha=0.25)
    ax.set_xlabel("epoch")
    ax.set_ylabel(ylabel)
    ax.legend()
    fig.tight_layout()
    _save_svg(fig, path)
    return path


def plot_coverage(grids, path):
    """One heatmap per labelled grid (values in [0, 1]), on a shared color scale."""
    fig, axes = plt.subplots(1, len(grids), figsize=(4 * len(grids), 4), squeeze=False)
    image = None
    for ax, (label, grid) in zip(axes[0], grids.items()):
        image = ax.imshow(np.asarray(grid).T, origin="lower", vmin=0.0, vmax=1.0, cmap="viridis",
                          extent=(-1.2, 0.6, -0.07, 0.07), aspect="auto")
        ax.set_title(label)
        ax.set_xlabel("position")
        ax.set_ylabel("velocity")
    fig.colorbar(image, ax=axes[0].tolist())
    _save_svg(fig, path)
    return path


def _coverage_visits(paths):
    """Share of seeds that visited each cell."""
    grids = []
    for path in paths:
        try:
            frame = pd.read_csv(path)
            size = int(frame["i"].max()) + 1
            grid = np.zeros((size, size))
            grid[frame["i"].to_numpy(), frame["j"].to_numpy()] = frame["count"].to_numpy() > 0
        except (OSError, KeyError, ValueError, pd.errors.ParserError) as e:
            raise ValueError(f"{path}: cannot read coverage grid ({e})") from None
        grids.append(grid)
    return np.mean(grids, axis=0)


def _run_seed(config_text, seed, out_dir):
    config = RunConfig.from_ini(config_text)
    env = config.make_env()
    try:
        coverage = config.coverage_grid(env.spec.state_dim)
        record = run_experiment(env, config.agent_config(), config["run"]["epochs"], seed,
                                config.train_config(), coverage, out_dir, f"seed_{seed}",
                                trace=config["run"]["trace"],
                                metadata={"config": config.as_dict(), "versions": versions(),
                                          "band_method": QUANTILE_METHOD},
                                keep_model=config["run"]["checkpoint"])
    finally:
        close = getattr(getattr(env, "env", env), "close", None)
        if close is not None:
            close()
    return record.frame()


def cmd_run(config_path=None, overrides=()):
    """Runs every configured seed and writes records, aggregate and plots."""
    try:
        text = None
        if config_path:
            with open(config_path) as fh:
                text = fh.read()
        config = RunConfig.resolve(text, overrides, source=config_path or "<config>")
    except OSError as e:
        logger.error("cannot read config: %s", e)
        print(f"error: cannot read config: {e}", file=sys.stderr)
        return 2
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2

    out = config.output_dir()
    os.makedirs(out, exist_ok=True)
    config_text = config.to_ini()
    with open(os.path.join(out, "config.ini"), "w") as fh:
        fh.write(config_text)
    seeds = config["run"]["seeds"]
    workers = min(config["run"]["workers"], len(seeds))
    logger.info("running %d seeds of %s/%s into %s", len(seeds), config["run"]["task"],
                config["run"]["agent"], out)

    frames = {}
    try:
        if workers > 1:
            with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
                results = pool.map(_run_seed, [config_text] * len(seeds), seeds, [out] * len(seeds))
                frames = dict(zip(seeds, results))
        else:
            for seed in seeds:
                frames[seed] = _run_seed(config_text, seed, out)
    except Exception as e:
        logger.exception("run failed")
        print(f"error: run failed: {e}", file=sys.stderr)
        return 1

    report = aggregate(frames)
    report.to_csv(os.path.join(out, "aggregate.csv"))
    plot_returns({config["run"]["agent"]: report}, os.path.join(out, "returns.svg"))
    coverage_files = sorted(glob.glob(os.path.join(out, "coverage_seed_*.csv")))
    if coverage_files:
        plot_coverage({config["run"]["agent"]: _coverage_visits(coverage_files)},
                      os.path.join(out, "coverage.svg"))
    print(report.frame().tail(1).to_string(index=False))
    return 0


def _seed_files(directory):
    files = sorted(glob.glob(os.path.join(directory, "seed_*.csv")))
    if not files:
        raise ValueError(f"{directory}: no seed_*.csv experiment records")
    return files


def cmd_plot(dirs, out=None):
    """
    Return curves of every experiment directory in one figure and one
    coverage heatmap per directory that has coverage grids.
    """
    reports = {}
    grids = {}
    try:
        for directory in dirs:
            frames = {}
            label = os.path.basename(os.path.normpath(directory))
            for path in _seed_files(directory):
                metadata, frame = read_record_csv(path)
                frames[metadata.get("seed", path)] = frame
            reports[label] = aggregate(frames)
            coverage_files = sorted(glob.glob(os.path.join(directory, "coverage_seed_*.csv")))
            if coverage_files:
                grids[label] = _coverage_visits(coverage_files)
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    out = out or (dirs[0] if len(dirs) == 1 else os.path.commonpath([os.path.abspath(d) for d in dirs]))
    os.makedirs(out, exist_ok=True)
    written = [plot_returns(reports, os.path.join(out, "returns.svg"))]
    if grids:
        written.append(plot_coverage(grids, os.path.join(out, "coverage.svg")))
    for path in written:
        print(path)
    return 0


def cmd_selftest(entropy_bias=0.0):
    """Runs the numerical oracle suite and prints its table; 1 if any check failed."""
    from actinf.selftest import run_selftest
    report = run_selftest(entropy_bias=entropy_bias)
    print(report.to_string(index=False))
    return 0 if report["passed"].all() else 1


def cmd_env_serve(env_name="mountaincar", host="127.0.0.1", port=5555, action_repeat_k=1, max_steps=None):
    try:
        make_env(env_name, action_repeat_k, max_steps)
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    server = serve_env(lambda: make_env(env_name, action_repeat_k, max_steps), host, port)
    print("serving %s on %s:%d" % (env_name, *server.address), flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return 0


def _config_help():
    lines = ["configuration keys (section.key = default):"]
    for section, keys in SCHEMA.items():
        for key, spec in keys.items():
            lines.append(f"  {section}.{key} = {_format(spec.default)}    {spec.doc}")
    lines.append("presets: " + "; ".join(f"{task}: " + ", ".join(f"{k}={_format(v)}" for k, v in p.items())
                                         for task, p in PRESETS.items()))
    return "\n".join(lines)


def parse_dotted(extra):
    """``['--planner.N', '50', '--model.mode=point']`` -> ``[('planner.N', '50'), ('model.mode', 'point')]``."""
    pairs = []
    i = 0
    while i < len(extra):
        item = extra[i]
        if not item.startswith("--") or "." not in item:
            raise ConfigError(f"unrecognized argument {item!r}")
        name, eq, value = item[2:].partition("=")
        if not eq:
            if i + 1 >= len(extra):
                raise ConfigError(f"{name}: missing value")
            value = extra[i + 1]
            i += 1
        pairs.append((name, value))
        i += 1
    return pairs


def build_parser():
    parser = argparse.ArgumentParser(prog="actinf", description="Scaled active inference agents.")
    parser.add_argument("--log-level", default="WARNING",
                        choices=("DEBUG", "INFO", "WARNING", "ERROR"), help="logging threshold")
    sub = parser.add_subparsers(dest="verb", required=True)

    run = sub.add_parser("run", help="run experiments", epilog=_config_help(),
                         formatter_class=argparse.RawDescriptionHelpFormatter)
    run.add_argument("--config", help="INI configuration file")
    run.add_argument("--task", help="task preset: " + ", ".join(TASKS))
    run.add_argument("--agent", help="agent kind: " + ", ".join(AGENT_KINDS))
    run.add_argument("--seeds", help="comma separated seeds")
    run.add_argument("--epochs", help="epochs per seed")
    run.add_argument("--out", help="output directory")
    run.add_argument("--workers", help="seeds run in parallel processes")
    run.add_argument("--trace", action="store_true", help="write per-step traces")

    plot = sub.add_parser("plot", help="plot experiment directories")
    plot.add_argument("dirs", nargs="+")
    plot.add_argument("--out", help="directory for the SVG files")

    selftest = sub.add_parser("selftest", help="run the numerical oracle suite")
    selftest.add_argument("--inject-entropy-bias", type=float, default=0.0, help=argparse.SUPPRESS)

    serve = sub.add_parser("env-serve", help="host an environment behind the remote protocol")
    serve.add_argument("--env", default="mountaincar", help="environment: " + ", ".join(ENVIRONMENTS))
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--port", type=int, default=5555)
    serve.add_argument("--action-repeat", type=int, default=1)
    serve.add_argument("--max-steps", type=int, default=None)
    return parser


def main(argv=None):
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")

    if args.verb != "run" and extra:
        parser.error(f"unrecognized arguments: {' '.join(extra)}")
    if args.verb == "run":
        try:
            overrides = [(f"run.{name}", getattr(args, name))
                         for name in ("task", "agent", "seeds", "epochs", "out", "workers")
                         if getattr(args, name) is not None]
            if args.trace:
                overrides.append(("run.trace", "true"))
            overrides += parse_dotted(extra)
        except ConfigError as e:
            print(f"error: {e}", file=sys.stderr)
            return 2
        return cmd_run(args.config, overrides)
    if args.verb == "plot":
        return cmd_plot(args.dirs, args.out)
    if args.verb == "selftest":
        return cmd_selftest(args.inject_entropy_bias)
    return cmd_env_serve(args.env, args.host, args.port, args.action_repeat, args.max_steps)


if __name__ == "__main__":
    sys.exit(main())
