"""Command-line entry point: `safeplan <subcommand> ...`."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import pddl
from .experiment import ConfigError, ExperimentConfig, Method, emit_table, run_experiment
from .fixtures import SCENE_NAMES, fig6_world, fixture, scene_config, training_templates
from .llm import BackendError, ChatBackend, ScriptedBackend
from .planner import EpisodeOptions, guidance, run_episode, trace_lines
from .safety import (
    collect_dataset,
    init_params,
    load_dataset,
    load_model,
    save_dataset,
    save_model,
    train,
    default_model_path,
)
from .translate import TranslationError, as_instruction, render_goal_pddl, translate_llm, translate_rule_based
from .world import SKILLS, generate_scene, load_scene, problem_objects, tabletop_domain

logger = logging.getLogger("safeplan")


def _on_off(text: str) -> bool:
    if text not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected on or off")
    return text == "on"


def _world(args):
    if getattr(args, "scene_file", None):
        w, _ = load_scene(args.scene_file)
        return w, None
    if args.scene == "fig6":
        return fig6_world(), None
    return generate_scene(scene_config(args.scene, args.mode, args.seed)), fixture(args.scene)


def _backend(args):
    if args.backend == "stub":
        path = args.stub_replies or os.environ.get("SP_LLM_STUB")
        if not path:
            raise SystemExit("--backend stub needs --stub-replies FILE (or SP_LLM_STUB)")
        return ScriptedBackend.from_file(path, cycle=True)
    if args.backend == "llm":
        return ChatBackend.from_env()
    return None


def _model(spec: str | None):
    return None if spec == "oracle" else load_model(spec or default_model_path())


def _add_world_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--scene", default="table", choices=SCENE_NAMES + ("fig6",))
    p.add_argument("--mode", default="easy", choices=("easy", "hard"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scene-file", help="load a saved scene instead of generating one")


def cmd_plan(args) -> int:
    world, fx = _world(args)
    instruction = args.instruction or (fx.instruction if fx else "Put the strawberry box into the blue box")
    backend = _backend(args)
    opts = EpisodeOptions(
        sm=args.sm,
        backend="search" if backend is None else "llm",
        rho=args.rho,
        step_budget=args.step_budget,
        model=_model(args.model) if args.sm else None,
        llm=backend,
        translate_with_llm=backend is not None,
    )
    trace = run_episode(tabletop_domain(), instruction, world, opts)
    text = "\n".join(trace_lines(trace))
    print(f"goal {render_goal_pddl(trace.goal)} provenance={trace.goal.provenance}")
    print(text)
    if args.trace_out:
        Path(args.trace_out).write_text(text + "\n")
    return 0


def cmd_collect(args) -> int:
    templates = training_templates() if not args.scenes else [
        scene_config(s, m, 0) for s in args.scenes.split(",") for m in ("easy", "hard")
    ]
    skills = tuple(args.skills.split(","))
    records = collect_dataset(templates, args.episodes, args.seed, skills, args.label_repeats, args.max_records)
    save_dataset(args.out, records, skills)
    print(f"wrote {len(records)} records to {args.out}")
    return 0


def cmd_train(args) -> int:
    skills, records = load_dataset(args.data)
    params = init_params(skills, seed=args.seed)
    result = train(params, records, lr=args.lr, batch=args.batch, max_epochs=args.epochs, seed=args.seed)
    save_model(args.out, result.params)
    for k, loss in enumerate(result.losses):
        if k % max(1, len(result.losses) // 10) == 0 or k == len(result.losses) - 1:
            print(f"epoch {k} mse {loss:.6f}")
    print(f"wrote model to {args.out}")
    return 0


def cmd_predict(args) -> int:
    world, _ = _world(args)
    names = [o.name for o in world.objects]
    m, ranking = guidance(world, _model(args.model))
    width = max(len(n) for n in names) if names else 4
    print(" " * 9 + " ".join(n.rjust(width) for n in names))
    for i, skill in enumerate(m.skills):
        print(skill.ljust(9) + " ".join(f"{v:{width}.3f}" for v in m.entries[i]))
    print(ranking.text)
    return 0


def cmd_experiment(args) -> int:
    try:
        cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
        if args.scenes or args.mode:
            scenes = args.scenes.split(",") if args.scenes else sorted({s for s, _ in cfg.scenes}, key=SCENE_NAMES.index)
            modes = [args.mode] if args.mode else sorted({m for _, m in cfg.scenes})
            cfg.scenes = [(s, m) for s in scenes for m in modes]
        if args.sm is not None or args.backend:
            backend = args.backend or "search"
            sms = [args.sm] if args.sm is not None else [True, False]
            cfg.methods = [Method(sm, backend) for sm in sms]
        for key in ("episodes", "seed", "rho", "workers", "model"):
            value = getattr(args, key)
            if value is not None:
                setattr(cfg, key, value)
        if args.out:
            cfg.out_dir = args.out
        table, _ = run_experiment(cfg)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(emit_table(table, args.format), end="")
    return 0


def cmd_validate(args) -> int:
    try:
        domain = pddl.parse_domain(Path(args.domain).read_text())
        problem = pddl.parse_problem(Path(args.problem).read_text(), domain)
        plan = pddl.parse_plan(Path(args.plan).read_text(), domain, problem.objects)
    except pddl.PDDLError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    result = pddl.validate_plan(problem, domain, plan)
    print("valid" if result.valid else f"invalid: {result.reason}")
    return 0 if result.valid else 1


def cmd_translate(args) -> int:
    world, _ = _world(args)
    ins = as_instruction(args.instruction, problem_objects(world))
    try:
        if args.backend == "search":
            goal = translate_rule_based(ins)
        else:
            goal = translate_llm(ins, _backend(args), tabletop_domain())
    except (TranslationError, BackendError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"{render_goal_pddl(goal)}  ; {goal.provenance}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="safeplan", description="Safety-aware tabletop task planning.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("plan", help="run one episode and print its trace")
    _add_world_args(p)
    p.add_argument("--instruction")
    p.add_argument("--sm", type=_on_off, default=True)
    p.add_argument("--backend", choices=("search", "llm", "stub"), default="search")
    p.add_argument("--stub-replies")
    p.add_argument("--rho", type=float, default=0.5)
    p.add_argument("--step-budget", type=int, default=20)
    p.add_argument("--model", help="model file, or 'oracle' for exact risk")
    p.add_argument("--trace-out")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("collect", help="collect a labelled dataset")
    p.add_argument("--episodes", type=int, default=300)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scenes", help="comma-separated fixtures (default: all)")
    p.add_argument("--skills", default=",".join(SKILLS))
    p.add_argument("--label-repeats", type=int, default=1)
    p.add_argument("--max-records", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_collect)

    p = sub.add_parser("train", help="train the safety model")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="print the risk matrix and ranking for a scene")
    _add_world_args(p)
    p.add_argument("--model", help="model file, or 'oracle'")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("experiment", help="run the SM-on/SM-off comparison")
    p.add_argument("--config")
    p.add_argument("--scenes", help="comma-separated fixtures")
    p.add_argument("--mode", choices=("easy", "hard"))
    p.add_argument("--sm", type=_on_off)
    p.add_argument("--backend", choices=("search", "llm", "stub"))
    p.add_argument("--episodes", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--rho", type=float)
    p.add_argument("--workers", type=int)
    p.add_argument("--model")
    p.add_argument("--out")
    p.add_argument("--format", choices=("csv", "markdown"), default="markdown")
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("validate", help="check a plan against a PDDL problem")
    p.add_argument("--domain", required=True)
    p.add_argument("--problem", required=True)
    p.add_argument("--plan", required=True)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("translate", help="translate an instruction to a PDDL goal")
    p.add_argument("instruction")
    _add_world_args(p)
    p.add_argument("--backend", choices=("search", "llm", "stub"), default="search",
                   help="search = rule-based grammar")
    p.add_argument("--stub-replies")
    p.set_defaults(func=cmd_translate)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    np.set_printoptions(precision=3, suppress=True)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
