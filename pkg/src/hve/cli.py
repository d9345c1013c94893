"""``hve`` command line: synth, train, eval, gradcheck, inspect-episode.

Exit codes: 0 ok, 1 other failure, 2 config/spec error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys

import numpy as np

from hve import io
from hve.config import FUSION_MODES, load_config
from hve.errors import ConfigError, GenerationError, HVEError, NumericError

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3
GRADCHECK_LIMIT = 1e-4


def _config(args):
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    for name in ("train_manifest", "val_manifest", "test_manifest", "glove", "out_dir"):
        value = getattr(args, name, None)
        if value is not None:
            setattr(cfg.paths, name, value)
    return cfg.validate()


def _table(cfg):
    if cfg.model.fusion_mode == "text_only" and cfg.paths.glove is None:
        return None
    if cfg.paths.glove is None:
        raise ConfigError([f"paths.glove: required for fusion mode {cfg.model.fusion_mode!r}"])
    return io.load_glove(cfg.paths.glove)


def _dataset(cfg, split):
    path = getattr(cfg.paths, f"{split}_manifest")
    if path is None:
        raise ConfigError([f"paths.{split}_manifest: required for this command"])
    return io.open_dataset(path)


def _model(cfg, checkpoint=None):
    from hve.model import MFSHVE, param_shapes

    model = MFSHVE(cfg.model, _table(cfg), seed=cfg.seed)
    if checkpoint is not None:
        ckpt = io.load_checkpoint(checkpoint, expected_shapes=param_shapes(cfg.model))
        model.load_state_dict(ckpt.params)
    return model


# --------------------------------------------------------------------------
# commands


def cmd_synth(args):
    from hve.synth import SynthSpec, generate

    report = generate(SynthSpec.load(args.spec), args.out)
    print(json.dumps(report, indent=1, sort_keys=True))
    return EXIT_OK


def cmd_train(args):
    from hve.train import train

    cfg = _config(args)
    train_data = _dataset(cfg, "train")
    val_data = _dataset(cfg, "val") if cfg.paths.val_manifest else None
    model = _model(cfg)
    report = train(train_data, cfg, model, val_data=val_data, out_dir=cfg.paths.out_dir)
    print(f"best_episode={report.best_episode} best_val_accuracy={report.best_val_accuracy} "
          f"out_dir={cfg.paths.out_dir}")
    return EXIT_OK


def cmd_eval(args):
    from hve.train import evaluate

    cfg = _config(args)
    data = _dataset(cfg, args.split)
    model = _model(cfg, args.checkpoint)
    episodes = args.episodes if args.episodes is not None else cfg.train.val_episodes
    res = evaluate(data, cfg.episode, model, episodes, seed=cfg.seed, workers=cfg.train.workers)
    print(f"correct={res.correct} total={res.total}")
    print(res.line())
    return EXIT_OK


def cmd_gradcheck(args):
    from hve.gradcheck import check_model, tiny_problem

    cfg = _config(args)
    modes = FUSION_MODES if args.all_modes else (cfg.model.fusion_mode,)
    worst = 0.0
    for mode in modes:
        model, episode = tiny_problem(mode, seed=cfg.seed, distance_variant=cfg.model.distance_variant)
        errors, _ = check_model(model, episode)
        for name, err in errors.items():
            print(f"{mode} {name} {err:.3e}")
            worst = max(worst, err)
    status = "ok" if worst <= GRADCHECK_LIMIT else "FAIL"
    print(f"max_relative_error={worst:.3e} limit={GRADCHECK_LIMIT:.0e} {status}")
    return EXIT_OK if worst <= GRADCHECK_LIMIT else EXIT_FAIL


def cmd_inspect_episode(args):
    from hve.fewshot import sample_episode
    from hve.train import EVAL_STREAM, episode_rng

    cfg = _config(args)
    data = _dataset(cfg, args.split)
    rng = episode_rng(cfg.seed, EVAL_STREAM, args.index)
    episode = sample_episode(data.by_relation(), cfg.episode, rng)
    model = _model(cfg, args.checkpoint)
    model.eval()
    from hve import tensor as T

    with T.no_grad():
        dist, targets, info = model.episode_distances(episode)
    np.set_printoptions(precision=4, suppress=True, linewidth=100)
    print(f"episode seed={cfg.seed} index={args.index} mode={cfg.model.fusion_mode} "
          f"N={episode.n_way} K={episode.k_shot} Q={cfg.episode.q_query}")
    for i, (rel, shots) in enumerate(zip(episode.relations, episode.support)):
        print(f"  [{i}] {rel}: support {', '.join(inst.id for inst in shots)}")
    protos = info["prototypes"]
    if cfg.model.fusion_mode == "full":
        for i, rel in enumerate(episode.relations):
            a = protos.A[i].data
            print(f"  [{i}] feature weights: mean={a.mean():.4f} min={a.min():.4f} max={a.max():.4f}")
    for row, ((inst, label), q_info) in enumerate(zip(episode.query, info["queries"])):
        pred = int(np.argmin(dist.data[row]))
        print(f"  query {inst.id} true={label} pred={pred} distances={dist.data[row]}")
        if "token_attention" in q_info:
            print(f"    token attention: {q_info['token_attention'].data}")
        if "object_attention" in q_info:
            labels = list(inst.objects)[: cfg.model.k_obj]
            weights = q_info["object_attention"].data
            pairs = ", ".join(f"{lab}={w:.4f}" for lab, w in zip(labels, weights))
            print(f"    object attention: {pairs or '(no objects)'}")
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(prog="hve", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    def run_args(p):
        p.add_argument("--config", required=True)
        p.add_argument("--seed", type=int)
        p.add_argument("--train-manifest", dest="train_manifest")
        p.add_argument("--val-manifest", dest="val_manifest")
        p.add_argument("--test-manifest", dest="test_manifest")
        p.add_argument("--glove")
        p.add_argument("--out-dir", dest="out_dir")

    p = sub.add_parser("train", help="episodic training")
    run_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="accuracy over seeded episodes")
    run_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--episodes", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check on a tiny model")
    run_args(p)
    p.add_argument("--all-modes", action="store_true", help="check every fusion mode")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("inspect-episode", help="print one sampled episode and its forward pass")
    run_args(p)
    p.add_argument("--checkpoint")
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--index", type=int, default=0, help="episode index within the eval stream")
    p.set_defaults(func=cmd_inspect_episode)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        for problem in exc.problems:
            print(f"config error: {problem}", file=sys.stderr)
        return EXIT_CONFIG
    except GenerationError as exc:
        print(f"spec error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric error at episode {exc.episode}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (HVEError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
