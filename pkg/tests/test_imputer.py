import numpy as np
import pytest
import torch

from dedt.channel_sim import EnvConfig, RisGeometry, sample_slots
from dedt.denoiser import Denoiser, denoiser_forward
from dedt.diffusion import Condition, build_schedule, draw_mask, extract_condition, vectorize
from dedt.imputer import (DiffusionImputer, DmConfig, diffusion_loss, dm_train_step, impute_csi,
                          random_conditions, validation_loss)

N, M = 16, 2
SCHED = build_schedule(20, 1e-3, 0.2)


@pytest.fixture(scope="module")
def model():
    torch.manual_seed(0)
    return Denoiser(N, M, width=32, heads=4, layers=1)


def toy_env():
    g = RisGeometry(4, 4, 0.025, 0.025, 0.1)
    return EnvConfig(g, M, (0.5, 0.5), 0.5, 1.0, 1e-5, 20)


def test_output_length_and_determinism(model, rng):
    x = rng.standard_normal(2 * N * M)
    cond = extract_condition(x, draw_mask(N, 0.5, rng), M, 0.0, rng)
    a = denoiser_forward(model, x, cond, 5)
    b = denoiser_forward(model, x, cond, 5)
    assert a.shape == (64,) and np.array_equal(a, b) and np.all(np.isfinite(a))


def test_shape_mismatch_rejected(model, rng):
    cond = extract_condition(rng.standard_normal(64), draw_mask(N, 0.5, rng), M, 0.0, rng)
    with pytest.raises(ValueError):
        denoiser_forward(model, np.zeros(10), cond, 1)
    with pytest.raises(ValueError):
        denoiser_forward(model, np.zeros(64), Condition(8, cond.tokens[:2], np.array([0, 1])), 1)


def test_condition_order_does_not_matter(model, rng):
    x = rng.standard_normal(64)
    cond = extract_condition(x, draw_mask(N, 0.5, rng), M, 0.0, rng)
    perm = rng.permutation(len(cond.indices))
    shuffled = Condition(N, cond.tokens[perm], cond.indices[perm])
    a = denoiser_forward(model, x, cond, 3)
    b = denoiser_forward(model, x, shuffled, 3)
    assert np.max(np.abs(a - b)) < 1e-6


class _Oracle(torch.nn.Module):
    """Returns a fixed tensor regardless of input."""

    def __init__(self, out):
        super().__init__()
        self.out = out
        self.w = torch.nn.Parameter(torch.zeros(()))

    def forward(self, x_k, cond, ind, k):
        return self.out + 0 * self.w


def test_loss_zero_for_exact_prediction(rng):
    x0 = rng.standard_normal((8, 64))
    eps = rng.standard_normal((8, 64))
    k = rng.integers(1, 21, 8)
    cond, ind = random_conditions(x0, N, M, np.full(8, 0.5), np.zeros(8), rng)
    loss = diffusion_loss(_Oracle(torch.as_tensor(eps, dtype=torch.float32)), x0, cond, ind, k, eps, SCHED)
    assert loss.item() == 0.0


def test_zero_predictor_loss_is_dimension(rng):
    B = 4000
    x0 = rng.standard_normal((B, 64))
    cond, ind = random_conditions(x0, N, M, np.full(B, 0.5), np.zeros(B), rng)
    model = _Oracle(torch.zeros(B, 64))
    opt = torch.optim.SGD(model.parameters(), lr=0.0)
    loss = dm_train_step(model, opt, x0, cond, ind, SCHED, rng)
    assert loss == pytest.approx(64, rel=0.02)
    assert loss >= 0


def test_empty_batch_rejected(model, rng):
    opt = torch.optim.AdamW(model.parameters())
    with pytest.raises(ValueError):
        dm_train_step(model, opt, np.zeros((0, 64)), np.zeros((0, N, 4)), np.zeros((0, N)), SCHED, rng)


def test_nonfinite_loss_raises(rng):
    model = _Oracle(torch.full((2, 64), float("nan")))
    opt = torch.optim.SGD(model.parameters(), lr=0.0)
    x0 = rng.standard_normal((2, 64))
    cond, ind = random_conditions(x0, N, M, np.full(2, 0.5), np.zeros(2), rng)
    with pytest.raises(FloatingPointError):
        dm_train_step(model, opt, x0, cond, ind, SCHED, rng)


def test_all_k_mode_runs(rng):
    torch.manual_seed(0)
    model = Denoiser(N, M, width=16, heads=2, layers=1)
    opt = torch.optim.AdamW(model.parameters(), lr=1e-3)
    x0 = rng.standard_normal((2, 64))
    cond, ind = random_conditions(x0, N, M, np.full(2, 0.5), np.zeros(2), rng)
    assert np.isfinite(dm_train_step(model, opt, x0, cond, ind, SCHED, rng, all_k=True))


def test_random_conditions_match_mask_counts(rng):
    x0 = rng.standard_normal((5, 64))
    rhos = np.array([0.0, 0.25, 0.5, 0.75, 1.0])
    cond, ind = random_conditions(x0, N, M, rhos, np.zeros(5), rng)
    assert list(ind.sum(1)) == [16, 12, 8, 4, 0]
    assert np.all(cond[ind == 0] == 0)


@pytest.mark.slow
def test_training_halves_loss_on_toy_set():
    rng = np.random.default_rng(0)
    env = toy_env()
    _, _, H = sample_slots(env, env.correlation(), rng, 256)
    x = vectorize(H)
    x = x / np.sqrt(np.mean(x**2))
    torch.manual_seed(0)
    model = Denoiser(N, M, width=32, heads=4, layers=1)
    opt = torch.optim.AdamW(model.parameters(), lr=1e-3)
    losses = []
    for _ in range(500):
        b = x[rng.integers(0, 256, 64)]
        cond, ind = random_conditions(b, N, M, rng.uniform(0, 1, 64), np.zeros(64), rng)
        losses.append(dm_train_step(model, opt, b, cond, ind, SCHED, rng))
    assert np.mean(losses[-50:]) < 0.5 * np.mean(losses[:10])


def test_impute_is_seeded_and_sized(model, rng):
    x = rng.standard_normal(64)
    cond = extract_condition(x, draw_mask(N, 0.5, rng), M, 0.0, rng)
    full, ind = cond.full(), cond.indicator
    a = impute_csi(model, full, ind, SCHED, np.random.default_rng(3))
    b = impute_csi(model, full, ind, SCHED, np.random.default_rng(3))
    assert a.shape == (64,) and np.array_equal(a, b)


def test_imputer_scale_and_validation_loss():
    rng = np.random.default_rng(1)
    env = toy_env()
    _, _, H = sample_slots(env, env.correlation(), rng, 64)
    x = vectorize(H)
    imp = DiffusionImputer(DmConfig(K=10, width=16, heads=2, layers=1, batch=8), 4, 4, M, seed=0)
    hist = imp.train(x, rng, steps=3)
    assert len(hist) == 3 and imp.meta["steps"] == 3
    assert imp.scale == pytest.approx(np.sqrt(np.mean(x**2)))
    assert validation_loss(imp, x[:16], 5) == validation_loss(imp, x[:16], 5)
    conds = [extract_condition(xi, draw_mask(16, 0.5, rng), M, 0.0, rng) for xi in x[:3]]
    out = imp.impute(conds, np.random.default_rng(0), chunk=2)
    assert out.shape == (3, 64) and np.all(np.isfinite(out))
