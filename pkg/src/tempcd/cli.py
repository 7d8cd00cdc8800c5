"""Command-line entry point: ``tempcd {train,eval,gradcheck,export-masks,gen-fixtures}``.

Any ``--section.key=value`` flag overrides the config file, e.g. ``--model.C=16``.
Exit codes: 0 success, 1 invalid input (config, checkpoint, paths), 2 failed check
or non-finite training loss.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

EXIT_OK, EXIT_INVALID, EXIT_CHECK = 0, 1, 2

FIXTURE_OVERRIDES = {
    "model.C": 8, "model.heads": 2, "model.L": 2, "model.N": 2, "model.H_mlp": 16, "model.ffn_hidden": 16,
    "data.n_train": 16, "data.n_val": 4, "optim.steps": 20, "optim.lr": 1e-3,
    "train.log_every": 0, "train.val_every": 0,
}


class UsageError(Exception):
    pass


def split_overrides(extra: Sequence[str]) -> List[Tuple[str, str]]:
    """Turn leftover ``--a.b=v`` / ``--a.b v`` arguments into (key, value) pairs."""
    out, i = [], 0
    extra = list(extra)
    while i < len(extra):
        arg = extra[i]
        body = arg[2:]
        name = body.split("=", 1)[0]
        if not arg.startswith("--") or ("." not in name and name != "ablation"):
            raise UsageError(f"unrecognised argument {arg!r}")
        if "=" in body:
            key, value = body.split("=", 1)
        else:
            if i + 1 >= len(extra):
                raise UsageError(f"missing value for {arg}")
            key, value = body, extra[i + 1]
            i += 1
        out.append((key, value))
        i += 1
    return out


def _precision() -> None:
    from .autodiff import set_precision

    raw = os.environ.get("TEMPCD_PRECISION", "64")
    if raw not in ("32", "64"):
        raise UsageError(f"TEMPCD_PRECISION must be 32 or 64, got {raw!r}")
    set_precision(int(raw))


def _config(args, overrides):
    from .config import load_config

    return load_config(args.config, overrides)


def _emit(args, text: str, payload) -> None:
    print(json.dumps(payload, sort_keys=True) if args.json else text)


# -- subcommands ----------------------------------------------------------------

def cmd_train(args, overrides) -> int:
    from .checkpoint import load_checkpoint, save_checkpoint
    from .train import NonFiniteLoss, init_training, make_datasets, train

    cfg = _config(args, overrides)
    state = load_checkpoint(args.resume, cfg) if args.resume else init_training(cfg)
    out = Path(args.checkpoint)
    out.parent.mkdir(parents=True, exist_ok=True)
    log_file = open(args.log, "w") if args.log else None

    def callback(st, terms):
        if log_file:
            log_file.write(json.dumps(terms, sort_keys=True) + "\n")
        every = cfg.train.checkpoint_every
        if every and st.step % every == 0:
            save_checkpoint(st, out.with_name(f"{out.stem}_step{st.step:06d}{out.suffix}"))

    try:
        state = train(cfg, state, make_datasets(cfg), callback, args.time_budget)
    except NonFiniteLoss as exc:
        dump = {"error": "non-finite loss", "step": exc.step, "seeds": exc.seeds, "terms": exc.terms}
        print(json.dumps(dump, sort_keys=True), file=sys.stderr)
        return EXIT_CHECK
    finally:
        if log_file:
            log_file.close()
    save_checkpoint(state, out)
    last = state.history[-1] if state.history else {}
    _emit(args, f"step={state.step}\ncheckpoint={out}\n" + "".join(f"{k}={v:.6f}\n" for k, v in sorted(last.items()) if k != "step"),
          {"step": state.step, "checkpoint": str(out), "last": last})
    return EXIT_OK


def _episodes(cfg, args):
    from .episodes import generate_episode, episode_difficulty
    from .train import VAL_SEED_OFFSET

    d = cfg.data
    start = d.seed + VAL_SEED_OFFSET if args.seed_start is None else args.seed_start
    count = d.n_val if args.count is None else args.count
    eps = []
    for i in range(count):
        diff = args.difficulty or episode_difficulty(i, d.motion_fraction)
        eps.append(generate_episode(start + i, diff, d.T, d.H, d.W, d.n_objects))
    return eps


def cmd_eval(args, overrides) -> int:
    from .checkpoint import load_checkpoint
    from .train import evaluate, predict

    cfg = _config(args, overrides) if (args.config or overrides) else None
    state = load_checkpoint(args.checkpoint, cfg)
    model = state.model
    episodes = _episodes(model.cfg, args)
    masks = np.stack([ep.gt_masks for ep in episodes]) if args.oracle else predict(model, episodes)
    report = evaluate(model, episodes, masks=masks)
    payload = {k: getattr(report, k) for k in ("j", "f", "jf", "oiou", "miou")}
    payload["episodes"] = len(episodes)
    _emit(args, report.to_text() + f"episodes={len(episodes)}", payload)
    return EXIT_OK


def cmd_gradcheck(args, overrides) -> int:
    from .autodiff import get_dtype
    from .gradcheck_suites import run_suites, select_suites

    # the suites have fixed shapes; a config is accepted only to validate it
    if args.config or overrides:
        _config(args, overrides)
    if get_dtype() != np.float64:
        raise UsageError("gradcheck needs TEMPCD_PRECISION=64")
    if not select_suites(args.ops):
        raise UsageError(f"no gradient suite matches {args.ops}")
    report = run_suites(args.ops)
    payload = {"passed": report.passed, "seconds": report.seconds,
               "suites": [{"name": r.name, "max_rel_error": r.max_rel_error, "n": r.n_checked, "passed": r.passed}
                          for r in report.results]}
    _emit(args, report.table(), payload)
    return EXIT_OK if report.passed else EXIT_CHECK


def cmd_export_masks(args, overrides) -> int:
    from .checkpoint import load_checkpoint
    from .episodes import generate_episode
    from .export import export_masks

    cfg = _config(args, overrides) if (args.config or overrides) else None
    state = load_checkpoint(args.checkpoint, cfg)
    d = state.model.cfg.data
    ep = generate_episode(args.seed, args.difficulty or "appearance", d.T, d.H, d.W, d.n_objects)
    masks = state.model.predict_masks([ep])[0]
    try:
        paths = export_masks(args.out, masks, ep.frames)
    except OSError as exc:
        raise UsageError(f"cannot write to {args.out}: {exc}") from None
    _emit(args, "\n".join(str(p) for p in paths), {"files": [str(p) for p in paths]})
    return EXIT_OK


def generate_fixtures(out_dir) -> List[Path]:
    """Golden files: seed-0 episode, a small trained checkpoint, its outputs and export."""
    from .checkpoint import save_checkpoint
    from .config import load_config
    from .episodes import generate_episode, save_episode
    from .export import export_masks
    from .model import TempCDModel, batch_inputs
    from .train import make_datasets, train

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ep = generate_episode(0)
    save_episode(ep, out / "episode_seed0.tcde")

    cfg = load_config(overrides=FIXTURE_OVERRIDES)
    (out / "fixture.cfg").write_text(cfg.to_text())
    state = train(cfg, datasets=make_datasets(cfg))
    save_checkpoint(state, out / "fixture.tcdc")
    frames, expr = batch_inputs([ep])
    final = state.model(frames, expr).final
    masks = state.model.predict_masks([ep])[0]
    export_masks(out / "export_seed0", masks, ep.frames)

    goldens = {
        "expression_seed0": ep.expression.one_hot().tolist(),
        "slot_embedding_default": TempCDModel(load_config()).slot_embed.data.tolist(),
        "fixture_final_referent_seed0": final.final_referent.data.tolist(),
        "fixture_loss_curve": [h["total"] for h in state.history],
    }
    (out / "goldens.json").write_text(json.dumps(goldens, indent=1) + "\n")
    return sorted(p for p in out.rglob("*") if p.is_file())


def cmd_gen_fixtures(args, overrides) -> int:
    from .autodiff import get_dtype

    if get_dtype() != np.float64:
        raise UsageError("fixtures are defined in 64-bit mode")
    paths = generate_fixtures(args.out)
    _emit(args, "\n".join(str(p) for p in paths), {"files": [str(p) for p in paths]})
    return EXIT_OK


# -- parser ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tempcd", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--json", action="store_true", help="print machine-readable JSON")
        return p

    p = common(sub.add_parser("train", help="train and write a checkpoint"))
    p.add_argument("--checkpoint", default="checkpoint.tcdc", help="output checkpoint path")
    p.add_argument("--resume", help="continue from this checkpoint")
    p.add_argument("--log", help="write per-step loss terms as JSON lines")
    p.add_argument("--time-budget", type=float, help="stop after this many seconds")
    p.set_defaults(run=cmd_train)

    def episode_args(p):
        p.add_argument("--difficulty", choices=("appearance", "motion-discriminative"))

    p = common(sub.add_parser("eval", help="evaluate a checkpoint on generated episodes"))
    p.add_argument("checkpoint")
    p.add_argument("--seed-start", type=int, help="first episode seed (default: held-out seeds)")
    p.add_argument("--count", type=int, help="number of episodes (default: data.n_val)")
    p.add_argument("--oracle", action="store_true", help="score ground-truth masks instead of predictions")
    episode_args(p)
    p.set_defaults(run=cmd_eval)

    p = common(sub.add_parser("gradcheck", help="run finite-difference gradient suites"))
    p.add_argument("--ops", nargs="*", default=[], help="glob or prefix filters on suite names")
    p.set_defaults(run=cmd_gradcheck)

    p = common(sub.add_parser("export-masks", help="write predicted masks as PGM files"))
    p.add_argument("checkpoint")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    episode_args(p)
    p.set_defaults(run=cmd_export_masks)

    p = common(sub.add_parser("gen-fixtures", help="regenerate golden test fixtures"))
    p.add_argument("--out", default="tests/fixtures")
    p.set_defaults(run=cmd_gen_fixtures)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    from .checkpoint import CheckpointError
    from .config import ConfigError
    from .episodes import EpisodeError

    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        _precision()
        return args.run(args, split_overrides(extra))
    except (UsageError, ConfigError, CheckpointError, EpisodeError, FileNotFoundError) as exc:
        print(f"tempcd: error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
