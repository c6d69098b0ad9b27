"""Seeded episode batches, summary tables and the per-episode log."""

from __future__ import annotations

import csv
import io
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, Sequence

import yaml

from .fixtures import SCENE_NAMES, fixture, scene_config
from .planner import DEFAULT_RHO, DEFAULT_STEP_BUDGET, EpisodeOptions, run_episode, write_trace
from .safety import ModelParameters, default_model_path, derive_seed, load_model
from .world import generate_scene, tabletop_domain

logger = logging.getLogger(__name__)

MODES = ("easy", "hard")
LOG_FIELDS = ("scene", "mode", "method", "episode", "seed", "collisions", "success", "steps", "wall_time")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Method:
    sm: bool
    backend: str = "search"

    @property
    def label(self) -> str:
        return f"sm-{'on' if self.sm else 'off'}" + ("" if self.backend == "search" else f"/{self.backend}")

    @classmethod
    def parse(cls, text: str) -> Method:
        """`sm-on`, `sm-off`, optionally suffixed with `/llm` or `/stub`."""
        head, _, backend = text.partition("/")
        if head not in ("sm-on", "sm-off"):
            raise ConfigError(f"unknown method {text!r}")
        return cls(head == "sm-on", backend or "search")


@dataclass
class ExperimentConfig:
    scenes: list[tuple[str, str]] = field(default_factory=lambda: [(s, m) for s in SCENE_NAMES for m in MODES])
    methods: list[Method] = field(default_factory=lambda: [Method(True), Method(False)])
    episodes: int = 100
    seed: int = 0
    rho: float = DEFAULT_RHO
    out_dir: str | None = None
    step_budget: int = DEFAULT_STEP_BUDGET
    model: str | None = None  # model file; None -> shipped model, "oracle" -> exact risk
    workers: int = 1
    traces: bool = True

    def validate(self) -> None:
        if self.episodes < 1:
            raise ConfigError("episodes must be >= 1")
        if not self.methods:
            raise ConfigError("method list is empty")
        if not self.scenes:
            raise ConfigError("scene list is empty")
        for scene, mode in self.scenes:
            if mode not in MODES:
                raise ConfigError(f"unknown mode {mode!r}")
            try:
                fixture(scene)
            except ValueError as exc:
                raise ConfigError(str(exc)) from None
        for m in self.methods:
            if m.backend not in ("search", "llm", "stub"):
                raise ConfigError(f"unknown backend {m.backend!r}")

    @classmethod
    def from_dict(cls, data: dict) -> ExperimentConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        data = dict(data)
        if "scenes" in data:
            data["scenes"] = [_scene_entry(s) for s in data["scenes"]]
        if "methods" in data:
            data["methods"] = [m if isinstance(m, Method) else Method.parse(str(m)) for m in data["methods"]]
        return cls(**data)

    @classmethod
    def load(cls, path: str | Path) -> ExperimentConfig:
        data = yaml.safe_load(Path(path).read_text()) or {}
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: expected a mapping")
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return {
            "scenes": [f"{s}:{m}" for s, m in self.scenes],
            "methods": [m.label for m in self.methods],
            "episodes": self.episodes,
            "seed": self.seed,
            "rho": self.rho,
            "out_dir": self.out_dir,
            "step_budget": self.step_budget,
            "model": self.model,
            "workers": self.workers,
            "traces": self.traces,
        }


def _scene_entry(entry) -> tuple[str, str]:
    if isinstance(entry, (list, tuple)) and len(entry) == 2:
        return (str(entry[0]), str(entry[1]))
    if isinstance(entry, str) and ":" in entry:
        scene, mode = entry.split(":", 1)
        return (scene.strip(), mode.strip())
    raise ConfigError(f"scene entry {entry!r} is not scene:mode")


@dataclass(frozen=True)
class EpisodeMetrics:
    scene: str
    mode: str
    method: str
    episode: int
    seed: int
    collisions: float
    success: int
    steps: int
    wall_time: float = 0.0

    def __post_init__(self):
        if self.collisions < 0:
            raise ValueError("collisions must be >= 0")


@dataclass(frozen=True)
class SummaryRow:
    scene: str
    mode: str
    method: str
    mean_collisions: float
    success_rate: float
    episodes: int


@dataclass
class SummaryTable:
    rows: list[SummaryRow]

    def get(self, scene: str, mode: str, method: str) -> SummaryRow:
        for r in self.rows:
            if (r.scene, r.mode, r.method) == (scene, mode, method):
                return r
        raise KeyError((scene, mode, method))


def episode_seed(base: int, scene: str, mode: str, index: int) -> int:
    """Scene seed for one episode; shared by every method in the cell so comparisons are paired."""
    return derive_seed(base, scene, mode, index)


def resolve_model(spec: str | None) -> ModelParameters | None:
    if spec == "oracle":
        return None
    return load_model(spec or default_model_path())


@dataclass(frozen=True)
class _Job:
    scene: str
    mode: str
    index: int
    seed: int
    methods: tuple[Method, ...]
    rho: float
    step_budget: int
    model: str | None
    trace_dir: str | None


_MODEL_CACHE: dict[str | None, ModelParameters | None] = {}


def _cached_model(spec: str | None) -> ModelParameters | None:
    if spec not in _MODEL_CACHE:
        _MODEL_CACHE[spec] = resolve_model(spec)
    return _MODEL_CACHE[spec]


def _run_job(job: _Job) -> list[EpisodeMetrics]:
    domain = tabletop_domain()
    fx = fixture(job.scene)
    base = generate_scene(scene_config(job.scene, job.mode, job.seed))
    model = _cached_model(job.model) if any(m.sm for m in job.methods) else None
    out = []
    for method in job.methods:
        if method.backend != "search":
            raise ConfigError("batch experiments support the search backend only")
        world = generate_scene(scene_config(job.scene, job.mode, job.seed))
        opts = EpisodeOptions(sm=method.sm, rho=job.rho, step_budget=job.step_budget, model=model)
        trace = run_episode(domain, fx.instruction, world, opts)
        if job.trace_dir is not None:
            name = f"{job.scene}_{job.mode}_{method.label.replace('/', '-')}_{job.index:04d}.trace"
            write_trace(Path(job.trace_dir) / name, trace)
        out.append(EpisodeMetrics(
            job.scene, job.mode, method.label, job.index, job.seed,
            trace.total_collisions, int(trace.success), trace.steps_used, trace.wall_time,
        ))
    del base
    return out


def run_experiment(cfg: ExperimentConfig) -> tuple[SummaryTable, list[EpisodeMetrics]]:
    """Run every (scene, mode, episode) cell for all methods; writes outputs when `out_dir` is set."""
    cfg.validate()
    if any(m.sm for m in cfg.methods):
        resolve_model(cfg.model)  # fail on a bad model before any episode runs
    trace_dir = None
    if cfg.out_dir is not None:
        Path(cfg.out_dir).mkdir(parents=True, exist_ok=True)
        if cfg.traces:
            trace_dir = str(Path(cfg.out_dir) / "traces")
            Path(trace_dir).mkdir(exist_ok=True)
    jobs = [
        _Job(scene, mode, k, episode_seed(cfg.seed, scene, mode, k), tuple(cfg.methods),
             cfg.rho, cfg.step_budget, cfg.model, trace_dir)
        for scene, mode in cfg.scenes
        for k in range(cfg.episodes)
    ]
    started = time.perf_counter()
    if cfg.workers > 1:
        with ProcessPoolExecutor(cfg.workers) as pool:
            batches = list(pool.map(_run_job, jobs, chunksize=8))
    else:
        batches = [_run_job(j) for j in jobs]
    rows = [m for batch in batches for m in batch]
    logger.info("%d episodes in %.1fs", len(rows), time.perf_counter() - started)
    table = summarize(rows, expected=cfg.episodes)
    if cfg.out_dir is not None:
        out = Path(cfg.out_dir)
        write_log(out / "episodes.log", rows)
        (out / "summary.csv").write_text(emit_table(table, "csv"))
        (out / "summary.md").write_text(emit_table(table, "markdown"))
    return table, rows


def _order(scene: str, mode: str, method: str) -> tuple:
    s = SCENE_NAMES.index(scene) if scene in SCENE_NAMES else len(SCENE_NAMES)
    m = MODES.index(mode) if mode in MODES else len(MODES)
    return (s, scene, m, mode, method)


def summarize(rows: Iterable[EpisodeMetrics], expected: int | None = None,
              cells: Sequence[tuple[str, str, str]] = ()) -> SummaryTable:
    """Per-(scene, mode, method) means; a requested cell with no rows is an error."""
    groups: dict[tuple[str, str, str], list[EpisodeMetrics]] = {}
    for r in rows:
        groups.setdefault((r.scene, r.mode, r.method), []).append(r)
    for cell in cells:
        if cell not in groups:
            raise ValueError(f"no episodes for cell {cell}")
    if not groups:
        raise ValueError("no episodes to summarize")
    out = []
    for key in sorted(groups, key=lambda k: _order(*k)):
        g = groups[key]
        if expected is not None and len(g) != expected:
            raise ValueError(f"cell {key} has {len(g)} episodes, expected {expected}")
        out.append(SummaryRow(*key, sum(r.collisions for r in g) / len(g), sum(r.success for r in g) / len(g), len(g)))
    return SummaryTable(out)


TABLE_HEADER = ("scene", "mode", "method", "mean_collisions", "success_rate", "episodes")


def _cells(r: SummaryRow) -> list[str]:
    return [r.scene, r.mode, r.method, f"{r.mean_collisions:.2f}", f"{r.success_rate:.2f}", str(r.episodes)]


def emit_table(t: SummaryTable, fmt: str = "csv") -> str:
    rows = [_cells(r) for r in sorted(t.rows, key=lambda r: _order(r.scene, r.mode, r.method))]
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(TABLE_HEADER)
        writer.writerows(rows)
        return buf.getvalue()
    if fmt == "markdown":
        widths = [max(len(h), *(len(r[i]) for r in rows)) if rows else len(h) for i, h in enumerate(TABLE_HEADER)]
        numeric = [False, False, False, True, True, True]

        def line(cells):
            padded = [c.rjust(w) if num else c.ljust(w) for c, w, num in zip(cells, widths, numeric)]
            return "| " + " | ".join(padded) + " |"

        rule = "|" + "|".join(("-" * (w + 1) + ":") if num else ("-" * (w + 2)) for w, num in zip(widths, numeric)) + "|"
        return "\n".join([line(TABLE_HEADER), rule] + [line(r) for r in rows]) + "\n"
    raise ValueError(f"unknown format {fmt!r}")


def parse_markdown_table(text: str) -> SummaryTable:
    lines = [l for l in text.splitlines() if l.strip().startswith("|")]
    rows = []
    for line in lines[2:]:
        cells = [c.strip() for c in line.strip().strip("|").split("|")]
        rows.append(SummaryRow(cells[0], cells[1], cells[2], float(cells[3]), float(cells[4]), int(cells[5])))
    return SummaryTable(rows)


def parse_csv_table(text: str) -> SummaryTable:
    reader = csv.DictReader(io.StringIO(text))
    return SummaryTable([
        SummaryRow(r["scene"], r["mode"], r["method"], float(r["mean_collisions"]), float(r["success_rate"]), int(r["episodes"]))
        for r in reader
    ])


def write_log(path: str | Path, rows: Sequence[EpisodeMetrics]) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
        writer.writerow(LOG_FIELDS)
        for r in rows:
            writer.writerow([r.scene, r.mode, r.method, r.episode, r.seed, repr(r.collisions), r.success, r.steps,
                             f"{r.wall_time:.6f}"])


def read_log(path: str | Path) -> list[EpisodeMetrics]:
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh, delimiter="\t")
        return [
            EpisodeMetrics(r["scene"], r["mode"], r["method"], int(r["episode"]), int(r["seed"]),
                           float(r["collisions"]), int(r["success"]), int(r["steps"]), float(r["wall_time"]))
            for r in reader
        ]


def with_overrides(cfg: ExperimentConfig, **kw) -> ExperimentConfig:
    return replace(cfg, **{k: v for k, v in kw.items() if v is not None})
