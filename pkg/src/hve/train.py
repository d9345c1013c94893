"""AdamW, the episodic training loop, evaluation and finite-difference gradient checks."""
from __future__ import annotations

import json
import logging
import math
import time
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from hve import io
from hve.errors import ContractError, NumericError
from hve.fewshot import query_nll, sample_episode

log = logging.getLogger(__name__)

TRAIN_STREAM = 10
VAL_STREAM = 11
EVAL_STREAM = 12


class AdamW:
    """Adam with decoupled weight decay and bias-corrected moments."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = OrderedDict((k, np.zeros_like(p.data)) for k, p in params.items())
        self.v = OrderedDict((k, np.zeros_like(p.data)) for k, p in params.items())

    def step(self):
        for name, p in self.params.items():
            if p.grad is None:
                raise ContractError(f"adamw_step: parameter {name!r} has no gradient")
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            denom = np.sqrt(v / c2)
            denom += self.eps
            update = (m / c1) / denom
            update *= self.lr
            p.data = p.data - (self.lr * self.weight_decay) * p.data - update

    def load_state(self, state):
        self.t = int(state["step"])
        for k in self.m:
            self.m[k] = np.array(state["m"][k], dtype=np.float64)
            self.v[k] = np.array(state["v"][k], dtype=np.float64)


def adamw_step(params, state: AdamW):
    """Functional form: apply one AdamW update to ``params`` using their ``.grad``."""
    state.params = params
    state.step()
    return params


# --------------------------------------------------------------------------
# evaluation


@dataclass
class EvalResult:
    accuracy: float
    ci95: float
    episodes: int
    correct: int
    total: int

    def line(self):
        return f"accuracy={self.accuracy:.6f} ci95={self.ci95:.6f} episodes={self.episodes}"


def episode_rng(seed, stream, index):
    return np.random.default_rng([seed, stream, index])


def evaluate(dataset, episode_cfg, model, episodes=200, seed=0, stream=EVAL_STREAM, workers=1):
    """Query accuracy over seeded episodes with dropout off.

    Episode ``i`` is drawn from its own generator, so results do not depend on
    ``workers``; per-episode counts are reduced in index order.
    """
    groups = dataset.by_relation() if hasattr(dataset, "by_relation") else dataset
    was_training = model.training
    model.eval()

    def run(i):
        ep = sample_episode(groups, episode_cfg, episode_rng(seed, stream, i))
        pred, true = model.predict(ep)
        return int(np.sum(pred == true)), len(true)

    try:
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                counts = list(pool.map(run, range(episodes)))
        else:
            counts = [run(i) for i in range(episodes)]
    finally:
        model.train(was_training)
    correct = sum(c for c, _ in counts)
    total = sum(n for _, n in counts)
    acc = correct / total if total else 0.0
    ci = 1.96 * math.sqrt(acc * (1.0 - acc) / total) if total else 0.0
    return EvalResult(acc, ci, episodes, correct, total)


# --------------------------------------------------------------------------
# training


@dataclass
class TrainReport:
    intervals: list = field(default_factory=list)
    best_val_accuracy: float | None = None
    best_episode: int = 0
    seed: int = 0
    config: dict = field(default_factory=dict)
    wall_clock: float = 0.0

    def write_jsonl(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for row in self.intervals:
                fh.write(json.dumps(row, sort_keys=True) + "\n")


def train(train_data, cfg, model, val_data=None, out_dir=None, on_interval=None):
    """Episodic training with AdamW; returns a :class:`TrainReport`.

    With ``out_dir`` the best checkpoint (by validation accuracy, or simply the
    latest without validation data) is written as ``best.ckpt`` together with
    ``report.jsonl``. Wall-clock goes to ``timing.json`` so the report itself
    stays reproducible.
    """
    t0 = time.perf_counter()
    groups = train_data.by_relation() if hasattr(train_data, "by_relation") else train_data
    opt = AdamW(model.params, lr=cfg.optim.lr, beta1=cfg.optim.beta1, beta2=cfg.optim.beta2,
                eps=cfg.optim.eps, weight_decay=cfg.optim.weight_decay)
    report = TrainReport(seed=cfg.seed, config=cfg.to_dict())
    out = Path(out_dir) if out_dir is not None else None
    meta = {"seed": cfg.seed, "model": report.config["model"]}

    def save(optimizer, episode):
        if out is not None:
            io.save_checkpoint(model.params, out / "best.ckpt", optimizer=optimizer,
                               meta=dict(meta, episode=episode))

    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    save(None, 0)

    total = cfg.train.episodes
    best = -math.inf
    losses, accs = [], []
    start = 1
    model.train()
    for ep_idx in range(1, total + 1):
        episode = sample_episode(groups, cfg.episode, episode_rng(cfg.seed, TRAIN_STREAM, ep_idx))
        model.zero_grad()
        dist, targets, _ = model.episode_distances(episode)
        loss = query_nll(dist, targets)
        value = loss.item()
        if not math.isfinite(value):
            raise NumericError(f"non-finite loss {value} at episode {ep_idx}", episode=ep_idx)
        loss.backward()
        model.fill_missing_grads()
        opt.step()
        for name, p in model.params.items():
            if not np.all(np.isfinite(p.data)):
                raise NumericError(f"parameter {name!r} became non-finite at episode {ep_idx}",
                                   episode=ep_idx)
        losses.append(value)
        accs.append(float(np.mean(np.argmin(dist.data, axis=1) == np.asarray(targets))))

        if ep_idx % cfg.train.val_every and ep_idx != total:
            continue
        row = {
            "interval": len(report.intervals),
            "episode_start": start,
            "episode_end": ep_idx,
            "mean_loss": float(np.mean(losses)),
            "mean_accuracy": float(np.mean(accs)),
        }
        score = float(ep_idx)
        if val_data is not None:
            res = evaluate(val_data, cfg.episode, model, cfg.train.val_episodes, cfg.seed,
                           stream=VAL_STREAM, workers=cfg.train.workers)
            model.train()
            row["val_accuracy"] = res.accuracy
            row["val_ci95"] = res.ci95
            score = res.accuracy
        if score > best:
            best = score
            report.best_episode = ep_idx
            if val_data is not None:
                report.best_val_accuracy = score
            save(opt, ep_idx)
        report.intervals.append(row)
        if on_interval is not None:
            on_interval(row)
        log.info("episodes %d-%d loss=%.4f acc=%.3f%s", start, ep_idx, row["mean_loss"],
                 row["mean_accuracy"], f" val={row['val_accuracy']:.3f}" if val_data is not None else "")
        losses, accs = [], []
        start = ep_idx + 1
    model.eval()
    report.wall_clock = time.perf_counter() - t0
    if out is not None:
        report.write_jsonl(out / "report.jsonl")
        (out / "timing.json").write_text(json.dumps({"wall_clock_s": report.wall_clock}) + "\n")
    return report
