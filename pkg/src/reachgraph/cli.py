"""Command-line pipeline over the library modules.

Each subcommand reads its inputs from, and writes its artifacts into, one
output directory. The resolved configuration is stored there as
``config.toml``; ``manifest.txt`` records its hash, the derived seeds and a
sha256 of every artifact.
"""
from __future__ import annotations

import argparse
import hashlib
import logging
import sys
import zlib
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Callable

import numpy as np
import tomli_w

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import gridworld as gw
from .chain_oracle import build_transition, empirical_pairs, load_matrix, pmi_table, reach_approx, reach_full, save_matrix
from .evaluation import rank_fidelity, room_separation
from .model import EncoderParams, Similarity, init_params, load_checkpoint, save_checkpoint
from .pair_sampler import NegativeMode, SamplerConfig
from .planner import NoPath, build_graph, dijkstra
from .projection import TsneConfig, emit_svg, grid_layout, label_colors, position_colors, tsne
from .reach_metric import embed_all, reference_distance
from .subgoals import dbscan, default_eps, subgoals
from .training import TrainConfig, TrainingDiverged, train

log = logging.getLogger("reachgraph")

EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_MISSING = 4
EXIT_EXISTS = 5
EXIT_DIVERGED = 6
EXIT_NO_PATH = 7

STAGE_SEEDS = ("collect", "sampler", "init", "tsne")
CONFIG_FILE = "config.toml"
MANIFEST_FILE = "manifest.txt"


class CliError(Exception):
    def __init__(self, code: int, message: str) -> None:
        super().__init__(message)
        self.code = code


def stage_seed(master: int, stage: str) -> int:
    """Fixed splitting rule: hash of (master seed, crc32 of the stage name)."""
    seq = np.random.SeedSequence([master, zlib.crc32(stage.encode())])
    return int(seq.generate_state(1, np.uint32)[0])


# -- configuration ---------------------------------------------------------

def default_config() -> tuple[dict, dict]:
    """Defaults and the --fast overrides, both read from the shipped example."""
    text = resources.files("reachgraph").joinpath("example.toml").read_text(encoding="utf-8")
    cfg = tomllib.loads(text)
    fast = cfg.pop("fast")
    cfg["run"].pop("out")
    return cfg, fast


def _coerce(key: str, value, default):
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, list):
        ok = isinstance(value, list) and all(isinstance(v, type(default[0])) for v in value)
    else:
        ok = isinstance(value, str)
    if not ok:
        raise CliError(EXIT_CONFIG, f"{key}: expected {type(default).__name__}, got {value!r}")
    return value


def _assign(cfg: dict, dotted: str, value, defaults: dict) -> None:
    section, _, key = dotted.partition(".")
    if section not in defaults or key not in defaults[section]:
        raise CliError(EXIT_CONFIG, f"unknown config key {dotted!r}")
    cfg[section][key] = _coerce(dotted, value, defaults[section][key])


def _parse_value(text: str):
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def _read_toml(path: Path) -> dict:
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except FileNotFoundError:
        raise CliError(EXIT_MISSING, f"config file {path} not found") from None
    except tomllib.TOMLDecodeError as exc:
        raise CliError(EXIT_CONFIG, f"{path}: {exc}") from None


def resolve_config(args: argparse.Namespace) -> tuple[dict, Path]:
    """Defaults < config file < --fast < --set < dedicated flags."""
    defaults, fast = default_config()
    cfg = {section: dict(values) for section, values in defaults.items()}
    out = Path(args.out) if args.out else None
    source = Path(args.config) if args.config else None
    if source is None and out is not None and (out / CONFIG_FILE).exists():
        source = out / CONFIG_FILE
    if source is not None:
        loaded = _read_toml(source)
        if out is None and "out" in loaded.get("run", {}):
            out = Path(loaded["run"]["out"])
        for section, values in loaded.items():
            if not isinstance(values, dict):
                raise CliError(EXIT_CONFIG, f"top-level key {section!r} is not a section")
            for key, value in values.items():
                if section == "run" and key == "out":
                    continue
                _assign(cfg, f"{section}.{key}", value, defaults)
    if args.fast:
        for dotted, value in fast.items():
            _assign(cfg, dotted, value, defaults)
    for item in args.set or []:
        dotted, eq, text = item.partition("=")
        if not eq:
            raise CliError(EXIT_USAGE, f"--set expects section.key=value, got {item!r}")
        _assign(cfg, dotted.strip(), _parse_value(text.strip()), defaults)
    if args.seed is not None:
        cfg["run"]["seed"] = args.seed
    if args.map is not None:
        cfg["run"]["map"] = args.map
    return cfg, out or Path("runs/default")


@dataclass(frozen=True)
class RunConfig:
    """A validated configuration with the module-level objects built."""

    raw: dict
    spec: gw.GridSpec
    episodes: int
    horizon: int
    sampler: SamplerConfig
    sim: Similarity
    hidden: int
    latent_dim: int
    symmetric: bool
    train: TrainConfig
    eps: float | None
    eps_quantile: float
    min_pts: int
    tsne: TsneConfig
    reference: int
    plan_start: int
    plan_goal: int
    k_neighbors: int
    horizons: tuple[int, ...]
    negative_modes: tuple[NegativeMode, ...]
    c_values: tuple[int, ...]
    seeds: dict

    def init_model(self) -> EncoderParams:
        return init_params(self.hidden, self.latent_dim, self.seeds["init"], self.symmetric)


def _cell(spec: gw.GridSpec, text: str, key: str, named: dict[str, int]) -> int:
    if text in named:
        return named[text]
    try:
        r, c = (int(v) for v in text.split(","))
    except ValueError:
        raise CliError(EXIT_CONFIG, f"{key}: expected one of {sorted(named)} or 'row,col', got {text!r}") from None
    if not spec.is_free((r, c)):
        raise CliError(EXIT_CONFIG, f"{key}: ({r}, {c}) is not a free cell of {spec.name}")
    return spec.index((r, c))


def build_run_config(raw: dict) -> RunConfig:
    run, data, samp, model, tr = raw["run"], raw["data"], raw["sampler"], raw["model"], raw["train"]
    try:
        spec = gw.load_map(run["map"])
    except FileNotFoundError as exc:
        raise CliError(EXIT_MISSING, str(exc)) from None
    except gw.MapError as exc:
        raise CliError(EXIT_CONFIG, f"map {run['map']!r}: {exc}") from None
    seeds = {stage: stage_seed(run["seed"], stage) for stage in STAGE_SEEDS}
    if data["episodes"] < 1 or data["horizon"] < 1:
        raise CliError(EXIT_CONFIG, "data.episodes and data.horizon must be >= 1")
    if samp["c_steps"] > data["horizon"]:
        raise CliError(EXIT_CONFIG, f"sampler.c_steps={samp['c_steps']} exceeds data.horizon={data['horizon']}")
    if raw["plan"]["k_neighbors"] < 1 or raw["subgoals"]["min_pts"] < 1 or raw["subgoals"]["eps"] < 0:
        raise CliError(EXIT_CONFIG, "need plan.k_neighbors >= 1, subgoals.min_pts >= 1 and subgoals.eps >= 0")
    ab = raw["ablate"]
    if min(ab["horizons"], default=1) < max(ab["c_values"] + [samp["c_steps"]]):
        raise CliError(EXIT_CONFIG, "every ablate horizon must be at least every C in use")
    named = {"start": spec.start_index}
    try:
        return RunConfig(
            raw=raw,
            spec=spec,
            episodes=data["episodes"],
            horizon=data["horizon"],
            sampler=SamplerConfig(samp["c_steps"], samp["k_ratio"], samp["negative_mode"], seeds["sampler"]),
            sim=Similarity(model["similarity"], model["tau"]),
            hidden=model["hidden"],
            latent_dim=model["latent_dim"],
            symmetric=model["symmetric"],
            train=TrainConfig(
                steps=tr["steps"], batch_size=tr["batch_size"], learning_rate=tr["learning_rate"],
                checkpoint_every=tr["checkpoint_every"], log_every=tr["log_every"],
                seed=seeds["init"], average_tail=tr["average_tail"],
            ),
            eps=raw["subgoals"]["eps"] or None,
            eps_quantile=raw["subgoals"]["eps_quantile"],
            min_pts=raw["subgoals"]["min_pts"],
            tsne=TsneConfig(raw["tsne"]["perplexity"], raw["tsne"]["iterations"], seed=seeds["tsne"]),
            reference=_cell(spec, run["reference"], "run.reference", named),
            plan_start=_cell(spec, raw["plan"]["start"], "plan.start", named),
            plan_goal=_cell(spec, raw["plan"]["goal"], "plan.goal", {**named, "last": spec.n_states - 1}),
            k_neighbors=raw["plan"]["k_neighbors"],
            horizons=tuple(ab["horizons"]),
            negative_modes=tuple(NegativeMode(m) for m in ab["negative_modes"]),
            c_values=tuple(ab["c_values"]),
            seeds=seeds,
        )
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from None


def config_text(raw: dict) -> str:
    return tomli_w.dumps(raw)


# -- run directory ---------------------------------------------------------

def sha256_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def read_manifest(path: Path) -> dict[str, str]:
    if not path.exists():
        return {}
    lines = path.read_text(encoding="utf-8").splitlines()
    return dict(line.split("=", 1) for line in lines if "=" in line)


class RunDir:
    """Output directory bookkeeping: inputs, overwrite guard, manifest."""

    def __init__(self, root: Path, cfg: RunConfig, force: bool) -> None:
        self.root = root
        self.cfg = cfg
        self.force = force
        self.config_text = config_text(cfg.raw)
        self.config_hash = hashlib.sha256(self.config_text.encode()).hexdigest()

    def require(self, name: str) -> Path:
        path = self.root / name
        if not path.exists():
            raise CliError(EXIT_MISSING, f"missing input {path}; run the stage that produces it first")
        return path

    def claim(self, *names: str) -> None:
        """Refuse to proceed if outputs (or a different config) are already present."""
        if self.force:
            return
        existing = [n for n in names if (self.root / n).exists()]
        if existing:
            raise CliError(EXIT_EXISTS, f"{', '.join(existing)} already exist in {self.root}; pass --force to overwrite")
        stored = self.root / CONFIG_FILE
        if stored.exists() and stored.read_text(encoding="utf-8") != self.config_text:
            raise CliError(EXIT_EXISTS, f"{stored} holds a different configuration; pass --force to replace it")

    def path(self, name: str) -> Path:
        self.root.mkdir(parents=True, exist_ok=True)
        return self.root / name

    def record(self, *names: str) -> None:
        (self.path(CONFIG_FILE)).write_text(self.config_text, encoding="utf-8")
        manifest = read_manifest(self.root / MANIFEST_FILE)
        if manifest.get("config_sha256") != self.config_hash:
            manifest = {}
        manifest["config_sha256"] = self.config_hash
        manifest["seed"] = str(self.cfg.raw["run"]["seed"])
        for stage, seed in self.cfg.seeds.items():
            manifest[f"seed.{stage}"] = str(seed)
        for name in names:
            manifest[f"sha256.{name}"] = sha256_file(self.root / name)
        body = "".join(f"{k}={v}\n" for k, v in sorted(manifest.items()))
        (self.root / MANIFEST_FILE).write_text(body, encoding="utf-8")


# -- stages ----------------------------------------------------------------

def load_data(run: RunDir) -> gw.TrajectoryDataset:
    data = gw.load_trajectories(run.require("trajectories.csv"), run.cfg.spec)
    if data.horizon < run.cfg.sampler.c_steps:
        raise CliError(EXIT_CONFIG, f"stored trajectories have T={data.horizon} < C={run.cfg.sampler.c_steps}")
    return data


def load_model(run: RunDir) -> EncoderParams:
    return load_checkpoint(run.require("model.ckpt"))


def fit(cfg: RunConfig, data: gw.TrajectoryDataset, sampler: SamplerConfig, checkpoint: Path | None = None):
    try:
        return train(data, sampler, cfg.init_model(), cfg.train, cfg.sim, checkpoint)
    except TrainingDiverged as exc:
        raise CliError(EXIT_DIVERGED, f"training diverged: {exc}") from None


def cmd_collect(run: RunDir) -> None:
    outputs = ("trajectories.csv", "map.txt")
    run.claim(*outputs)
    cfg = run.cfg
    data = gw.collect(cfg.spec, cfg.episodes, cfg.horizon, cfg.seeds["collect"])
    gw.save_trajectories(data, run.path("trajectories.csv"))
    run.path("map.txt").write_text(gw.render_map(cfg.spec) + "\n", encoding="utf-8")
    run.record(*outputs)
    print(f"collected {cfg.episodes} x {cfg.horizon} steps on {cfg.spec.name}")


def cmd_oracle(run: RunDir) -> None:
    outputs = ("transition.csv", "reach_approx.csv", "joint.csv", "conditional.csv", "pmi.csv", "empirical_joint.csv")
    run.claim(*outputs)
    cfg = run.cfg
    data = load_data(run)
    c = cfg.sampler.c_steps
    tm = build_transition(cfg.spec)
    pd = reach_full(tm, c, data.horizon, cfg.spec.start_index)
    save_matrix(run.path("transition.csv"), tm.p)
    save_matrix(run.path("reach_approx.csv"), reach_approx(tm, c).r, c_steps=c)
    save_matrix(run.path("joint.csv"), pd.joint, c_steps=c, horizon=data.horizon)
    save_matrix(run.path("conditional.csv"), pd.conditional(), c_steps=c, horizon=data.horizon)
    save_matrix(run.path("pmi.csv"), pmi_table(pd, cfg.sampler.k_ratio), k_ratio=cfg.sampler.k_ratio)
    save_matrix(run.path("empirical_joint.csv"), empirical_pairs(data.states, cfg.spec.n_states, c), c_steps=c)
    run.record(*outputs)
    print(f"oracle matrices for {cfg.spec.n_states} states, C={c}, T={data.horizon}")


def cmd_train(run: RunDir) -> None:
    outputs = ("model.ckpt", "train_log.csv")
    run.claim(*outputs)
    cfg = run.cfg
    data = load_data(run)
    ckpt = run.path("model.ckpt") if cfg.train.checkpoint_every else None
    params, history = fit(cfg, data, cfg.sampler, ckpt)
    save_checkpoint(params, run.path("model.ckpt"), step=cfg.train.steps, similarity=cfg.sim)
    history.write_csv(run.path("train_log.csv"))
    run.record(*outputs)
    print(f"trained {cfg.train.steps} steps, final objective {history.objective[-1]:.6f}")


def cmd_embed(run: RunDir) -> None:
    outputs = ("phi.csv", "psi.csv", "scores.csv", "dist_r.csv")
    run.claim(*outputs)
    cfg = run.cfg
    table = embed_all(load_model(run), np.arange(cfg.spec.n_states), cfg.spec.features())
    scores = table.scores(cfg.sim)
    dist = reference_distance(table, cfg.sim, cfg.reference, scores)
    save_matrix(run.path("phi.csv"), table.phi)
    save_matrix(run.path("psi.csv"), table.psi)
    save_matrix(run.path("scores.csv"), scores, similarity=cfg.sim)
    save_matrix(run.path("dist_r.csv"), dist.d, reference=dist.reference)
    run.record(*outputs)
    print(f"embedded {len(table)} states, reference {cfg.spec.coord(cfg.reference)}")


def cmd_subgoals(run: RunDir) -> None:
    outputs = ("subgoals.csv", "subgoals.svg")
    run.claim(*outputs)
    cfg = run.cfg
    dist, meta = load_matrix(run.require("dist_r.csv"))
    eps = cfg.eps or default_eps(dist, cfg.min_pts, cfg.eps_quantile)
    result = dbscan(dist, eps, cfg.min_pts)
    cells = cfg.spec.coords()
    rows = [f"{r},{c},{lab}" for (r, c), lab in zip(cells.tolist(), result.labels.tolist())]
    run.path("subgoals.csv").write_text("row,col,label\n" + "\n".join(rows) + "\n", encoding="utf-8")
    emit_svg(grid_layout(cells), label_colors(result.labels), run.path("subgoals.svg"), star=int(meta["reference"]))
    run.record(*outputs)
    found = [tuple(cells[s].tolist()) for s in subgoals(result)]
    print(f"eps={eps:.6g}: {result.n_clusters} clusters, subgoals {found}")


def cmd_plan(run: RunDir) -> None:
    outputs = ("plan.csv", "plan.svg")
    run.claim(*outputs)
    cfg = run.cfg
    table = embed_all(load_model(run), np.arange(cfg.spec.n_states), cfg.spec.features())
    graph = build_graph(table, cfg.sim, cfg.k_neighbors)
    try:
        res = dijkstra(graph, cfg.plan_start, cfg.plan_goal)
    except NoPath:
        raise CliError(EXIT_NO_PATH, f"goal {cfg.spec.coord(cfg.plan_goal)} is unreachable in the latent graph") from None
    cells = cfg.spec.coords()
    rows = [f"{i},{cells[s, 0]},{cells[s, 1]}" for i, s in enumerate(res.path)]
    run.path("plan.csv").write_text("step,row,col\n" + "\n".join(rows) + "\n", encoding="utf-8")
    emit_svg(grid_layout(cells), position_colors(cells), run.path("plan.svg"), star=cfg.plan_start, polyline=res.path)
    run.record(*outputs)
    print(f"path of {len(res.path) - 1} hops, cost {res.total_cost:.6f}")


def cmd_project(run: RunDir) -> None:
    outputs = ["projection.csv", "projection_position.svg", "grid_position.svg"]
    labelled = (run.root / "subgoals.csv").exists()
    if labelled:
        outputs.append("projection_clusters.svg")
    run.claim(*outputs)
    cfg = run.cfg
    if cfg.spec.n_states < 4:
        raise CliError(EXIT_CONFIG, f"t-SNE needs at least 4 states; {cfg.spec.name} has {cfg.spec.n_states}")
    dist, meta = load_matrix(run.require("dist_r.csv"))
    ref = int(meta["reference"])
    res = tsne(dist, cfg.tsne)
    cells = cfg.spec.coords()
    rows = [f"{i},{x!r},{y!r}" for i, (x, y) in enumerate(res.coords.tolist())]
    run.path("projection.csv").write_text("index,x,y\n" + "\n".join(rows) + "\n", encoding="utf-8")
    colors = position_colors(cells)
    emit_svg(res.coords, colors, run.path("projection_position.svg"), star=ref)
    emit_svg(grid_layout(cells), colors, run.path("grid_position.svg"), star=ref)
    if labelled:
        labels = np.loadtxt(run.root / "subgoals.csv", delimiter=",", skiprows=1, dtype=np.int64, ndmin=2)[:, 2]
        emit_svg(res.coords, label_colors(labels), run.path("projection_clusters.svg"), star=ref)
    run.record(*outputs)
    print(f"t-SNE at perplexity {res.perplexity:g}, final KL {res.final_kl:.4f}")


def cmd_ablate(run: RunDir) -> None:
    outputs = ("ablate_negatives.csv", "ablate_c.csv")
    run.claim(*outputs)
    cfg = run.cfg
    spec, c_base = cfg.spec, cfg.sampler.c_steps
    regions = gw.regions(spec)
    cache: dict[tuple[int, NegativeMode, int], EncoderParams] = {}

    def model_for(horizon: int, mode: NegativeMode, c: int) -> EncoderParams:
        key = (horizon, mode, c)
        if key not in cache:
            log.info("ablate: training T=%d mode=%s C=%d", horizon, mode.value, c)
            data = gw.collect(spec, cfg.episodes, horizon, cfg.seeds["collect"])
            sampler = SamplerConfig(c, cfg.sampler.k_ratio, mode, cfg.seeds["sampler"])
            cache[key] = fit(cfg, data, sampler)[0]
        return cache[key]

    lines = ["horizon," + ",".join(m.value for m in cfg.negative_modes)]
    for horizon in cfg.horizons:
        cells = [rank_fidelity(model_for(horizon, m, c_base), cfg.sim, spec, c_base, horizon,
                               cfg.sampler.k_ratio).mean for m in cfg.negative_modes]
        lines.append(f"{horizon}," + ",".join(repr(v) for v in cells))
    run.path("ablate_negatives.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")

    horizon, mode = max(cfg.horizons), cfg.sampler.negative_mode
    lines = ["c_steps,room_separation,mean_spearman"]
    for c in cfg.c_values:
        params = model_for(horizon, mode, c)
        table = embed_all(params, np.arange(spec.n_states), spec.features())
        sep = room_separation(reference_distance(table, cfg.sim, cfg.reference).d, regions)
        rho = rank_fidelity(params, cfg.sim, spec, c, horizon, cfg.sampler.k_ratio).mean
        lines.append(f"{c},{sep!r},{rho!r}")
    run.path("ablate_c.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    run.record(*outputs)
    print(f"ablation grids written ({len(cache)} models trained)")


COMMANDS: dict[str, Callable[[RunDir], None]] = {
    "collect": cmd_collect,
    "oracle": cmd_oracle,
    "train": cmd_train,
    "embed": cmd_embed,
    "subgoals": cmd_subgoals,
    "plan": cmd_plan,
    "project": cmd_project,
    "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="reachgraph", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="TOML run configuration (default: OUT/config.toml if present)")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--seed", type=int, help="master seed")
    parser.add_argument("--map", help="builtin map name or ASCII map file")
    parser.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one config key")
    parser.add_argument("--fast", action="store_true", help="short-episode CI profile")
    parser.add_argument("--force", action="store_true", help="overwrite existing artifacts")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        raw, out = resolve_config(args)
        run = RunDir(out, build_run_config(raw), args.force)
        COMMANDS[args.command](run)
    except CliError as exc:
        print(f"reachgraph {args.command}: {exc}", file=sys.stderr)
        return exc.code
    return 0


if __name__ == "__main__":
    sys.exit(main())
