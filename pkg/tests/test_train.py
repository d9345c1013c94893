import json
import math

import numpy as np
import pytest

from hve import io
from hve import tensor as T
from hve.config import EpisodeConfig, ModelConfig, OptimConfig, RunConfig, TrainConfig
from hve.errors import ContractError, NumericError
from hve.fewshot import sample_episode
from hve.gradcheck import check_model, tiny_problem
from hve.model import IMAGE_PARAMS, OBJECT_PARAMS, MFSHVE, param_shapes
from hve.synth import SynthSpec, generate
from hve.train import AdamW, adamw_step, episode_rng, evaluate, train

FUSION_MODES = ("text_only", "concat", "image_attention", "object_attention", "image_object", "full")


@pytest.fixture(scope="module")
def small_data(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    spec = SynthSpec(num_relations=8, instances_per_relation=8, n_tokens=3, signal="objects",
                     d_text=16, d_image=12, d_o=8, num_distractors=4, splits={"train": 5, "test": 3}, seed=11)
    generate(spec, out)
    return out


def small_run(data_dir, mode="full", episodes=30, seed=0, **model):
    cfg = RunConfig(model=ModelConfig(d_proj=8, d_o=8, d_text=16, d_image=12, fusion_mode=mode, **model),
                    episode=EpisodeConfig(3, 1, 2), optim=OptimConfig(lr=1e-3),
                    train=TrainConfig(episodes=episodes, val_every=10, val_episodes=10), seed=seed)
    table = io.load_glove(data_dir / "glove.txt")
    return cfg.validate(), MFSHVE(cfg.model, table, seed=seed)


# --- AdamW ----------------------------------------------------------------------


def one_param(value, grad):
    p = T.Tensor(np.array([value]), requires_grad=True)
    p.grad = np.array([grad])
    return {"w": p}


def test_adamw_first_step_closed_form():
    params = one_param(1.0, 0.5)
    AdamW(params, lr=0.1, weight_decay=0.0).step()
    # m_hat = g, v_hat = g^2 -> 1 - 0.1 * 0.5 / (0.5 + 1e-8)
    assert params["w"].data[0] == pytest.approx(0.900000002, abs=1e-15)


def test_adamw_pure_decay():
    params = one_param(3.0, 0.0)
    AdamW(params, lr=0.1, weight_decay=1e-5).step()
    assert params["w"].data[0] == pytest.approx(3.0 * (1 - 1e-6), abs=1e-15)


def test_adamw_zero_decay_is_adam():
    rng = np.random.default_rng(0)
    x = rng.normal(size=5)
    p = {"w": T.Tensor(x.copy(), requires_grad=True)}
    opt = AdamW(p, lr=0.01, weight_decay=0.0)
    m = v = np.zeros(5)
    ref = x.copy()
    for t in range(1, 6):
        g = rng.normal(size=5)
        p["w"].grad = g
        opt.step()
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    assert np.allclose(p["w"].data, ref, rtol=0, atol=1e-15)


def test_adamw_deterministic():
    def run():
        rng = np.random.default_rng(4)
        p = {"a": T.Tensor(rng.normal(size=(2, 3)), requires_grad=True)}
        opt = AdamW(p, lr=0.05, weight_decay=0.01)
        for _ in range(4):
            p["a"].grad = rng.normal(size=(2, 3))
            adamw_step(p, opt)
        return p["a"].data

    assert run().tobytes() == run().tobytes()


def test_adamw_missing_gradient():
    p = {"a": T.Tensor(np.ones(2), requires_grad=True), "b": T.Tensor(np.ones(2), requires_grad=True)}
    p["a"].grad = np.ones(2)
    with pytest.raises(ContractError, match="'b'"):
        AdamW(p).step()


# --- end-to-end gradients -----------------------------------------------------


@pytest.mark.parametrize("mode", FUSION_MODES)
def test_model_gradcheck(mode):
    model, episode = tiny_problem(mode, seed=1)
    errors, grads = check_model(model, episode)
    assert list(errors) == list(param_shapes(model.cfg)), "every parameter reported exactly once"
    assert max(errors.values()) < 1e-5, errors
    if mode == "text_only":
        for name in IMAGE_PARAMS + OBJECT_PARAMS:
            assert not np.any(grads[name]), name


def test_model_gradcheck_seeds_full():
    for seed in range(20):
        model, episode = tiny_problem("full", seed=seed, d_proj=4, n_tokens=2, n_way=2)
        errors, _ = check_model(model, episode, max_coords=24, seed=seed)
        assert max(errors.values()) < 1e-5, (seed, errors)


def test_model_gradcheck_scalar_variant():
    model, episode = tiny_problem("full", seed=2, distance_variant="scalar_mean_alpha")
    errors, _ = check_model(model, episode)
    assert max(errors.values()) < 1e-5


def test_gradcheck_detects_a_wrong_gradient():
    model, episode = tiny_problem("text_only", seed=0)
    errors, grads = check_model(model, episode)
    from hve.gradcheck import numerical_gradient, relative_error

    p = model.params["fuse.b_multi"]
    bad = grads["fuse.b_multi"] * 1.01
    from hve.fewshot import query_nll

    def value():
        with T.no_grad():
            d, t, _ = model.episode_distances(episode)
            return query_nll(d, t).item()

    assert relative_error(bad, numerical_gradient(value, p.data)) > 1e-3


# --- training and evaluation ------------------------------------------------------


def test_initial_loss_near_chance(small_data):
    cfg, model = small_run(small_data)
    data = io.open_dataset(small_data / "train.jsonl")
    losses = []
    for i in range(20):
        ep = sample_episode(data.by_relation(), cfg.episode, episode_rng(0, 10, i))
        model.eval()
        with T.no_grad():
            losses.append(model.loss(ep).item())
    assert abs(np.mean(losses) - math.log(3)) < 0.5


def test_zero_episodes(small_data, tmp_path):
    cfg, model = small_run(small_data, episodes=0)
    report = train(io.open_dataset(small_data / "train.jsonl"), cfg, model, out_dir=tmp_path)
    assert report.intervals == [] and (tmp_path / "best.ckpt").exists()
    ck = io.load_checkpoint(tmp_path / "best.ckpt", param_shapes(cfg.model))
    assert all(np.array_equal(ck.params[k], model.params[k].data) for k in ck.params)


def test_training_determinism(small_data, tmp_path):
    data = io.open_dataset(small_data / "train.jsonl")
    val = io.open_dataset(small_data / "test.jsonl")
    for run in ("a", "b"):
        cfg, model = small_run(small_data, episodes=20)
        train(data, cfg, model, val_data=val, out_dir=tmp_path / run)
    for name in ("best.ckpt", "best.ckpt.json", "report.jsonl"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    rows = [json.loads(l) for l in (tmp_path / "a" / "report.jsonl").read_text().splitlines()]
    assert [r["episode_end"] for r in rows] == [10, 20] and "val_accuracy" in rows[0]


def test_loss_decreases_on_separable_data(small_data):
    cfg, model = small_run(small_data, mode="object_attention", episodes=300)
    cfg.optim.lr = 1e-2
    cfg.train.val_every = 100
    report = train(io.open_dataset(small_data / "train.jsonl"), cfg, model)
    losses = [r["mean_loss"] for r in report.intervals]
    assert all(b <= a for a, b in zip(losses, losses[1:])), losses


def test_nan_guard(small_data):
    cfg, model = small_run(small_data, episodes=5)
    model.params["fuse.b_multi"].data[:] = np.nan
    with pytest.raises(NumericError) as exc:
        train(io.open_dataset(small_data / "train.jsonl"), cfg, model)
    assert exc.value.episode == 1


class ConstantModel:
    """Always predicts episode-local id 0."""

    training = False

    def train(self, mode=True):
        return self

    def eval(self):
        return self

    def predict(self, episode):
        targets = np.array([lab for _, lab in episode.query])
        return np.zeros_like(targets), targets


def test_evaluate_chance_model(small_data):
    data = io.open_dataset(small_data / "test.jsonl")
    res = evaluate(data, EpisodeConfig(3, 1, 2), ConstantModel(), episodes=50, seed=1)
    assert res.accuracy == pytest.approx(1 / 3)
    assert res.ci95 == pytest.approx(1.96 * math.sqrt((1 / 3) * (2 / 3) / res.total))
    assert res.line() == f"accuracy={1/3:.6f} ci95={res.ci95:.6f} episodes=50"


def test_evaluate_deterministic_across_workers(small_data):
    cfg, model = small_run(small_data)
    data = io.open_dataset(small_data / "test.jsonl")
    a = evaluate(data, cfg.episode, model, episodes=12, seed=3, workers=1)
    b = evaluate(data, cfg.episode, model, episodes=12, seed=3, workers=3)
    assert (a.accuracy, a.correct) == (b.accuracy, b.correct)
