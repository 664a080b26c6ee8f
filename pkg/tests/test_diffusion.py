"""Tests for the noise schedule, denoiser, loss, training and checkpoints."""

from __future__ import annotations

import math
from dataclasses import replace

import numpy as np
import pytest
import torch
from torch import nn

from cloudedit.diffusion import (
    Denoiser,
    DenoiserConfig,
    TrainBatch,
    TrainConfig,
    TrainSet,
    gradients,
    inpaint_condition,
    load_checkpoint,
    loss,
    make_schedule,
    q_sample,
    recon_condition,
    save_checkpoint,
    train,
)
from cloudedit.errors import (
    BadStepError,
    DivergedError,
    FormatError,
    InvalidTError,
    ShapeMismatchError,
)
from cloudedit.geometry import PointCloud
from cloudedit.prompts import L_MAX
from cloudedit.synthgen import allowed_factors, edit_options, make_edit_pair, sample_params


def _scalar_schedule_oracle(T: int) -> list[float]:
    """Plain-python recomputation of the clipped cosine alpha_bar."""
    s = 0.008
    f = [math.cos((t / T + s) / (1 + s) * math.pi / 2) ** 2 for t in range(T + 1)]
    ab = [1.0]
    for t in range(1, T + 1):
        beta = min(1.0 - f[t] / f[t - 1], 0.999)
        ab.append(ab[-1] * (1.0 - beta))
    return ab


def _toy_triplets(n=8, k=64):
    out = []
    for i in range(n):
        category = ("chair", "table", "lamp")[i % 3]
        params = sample_params(category, i)
        descriptor = None
        for d in edit_options(params):
            if d.direction == "remove":
                continue
            factors = allowed_factors(params, d.part, d.attribute, d.direction)
            if factors:
                descriptor = replace(d, factor=factors[0])
                break
        out.append(make_edit_pair(params, descriptor, k=k, seed=i))
    return out


@pytest.fixture(scope="module")
def toyset() -> TrainSet:
    return TrainSet.from_triplets(_toy_triplets())


@pytest.fixture(scope="module")
def schedule():
    return make_schedule(64)


class _DiracBatch(nn.Module):
    """Analytic epsilon recovery; has one never-used parameter."""

    dtype = torch.float64

    def __init__(self, x0: np.ndarray, schedule) -> None:
        super().__init__()
        self.unused = nn.Parameter(torch.zeros(3))
        self.x0 = torch.as_tensor(x0, dtype=torch.float64)
        self.ab = torch.as_tensor(schedule.alpha_bar, dtype=torch.float64)

    def forward(self, x_t, t, cond_coords, cond_flags, prompt):
        ab = self.ab[t][:, None, None]
        return (x_t - torch.sqrt(ab) * self.x0) / torch.sqrt(1.0 - ab)


class _SpyDen(nn.Module):
    """Zero predictor that records the condition it was given."""

    dtype = torch.float64

    def __init__(self) -> None:
        super().__init__()
        self.unused = nn.Parameter(torch.zeros(1))
        self.seen = None

    def forward(self, x_t, t, cond_coords, cond_flags, prompt):
        self.seen = (cond_coords, cond_flags, prompt)
        return torch.zeros_like(x_t)


# ----------------------------------------------------------------- schedule


def test_schedule_endpoints_and_monotonicity():
    s = make_schedule(64)
    assert s.alpha_bar[0] == 1.0
    assert np.all(np.diff(s.alpha_bar) < 0.0)
    assert s.alpha_bar[64] < 1e-3


def test_schedule_matches_scalar_oracle():
    for T in (2, 5, 64, 128):
        s = make_schedule(T)
        oracle = _scalar_schedule_oracle(T)
        np.testing.assert_allclose(s.alpha_bar, oracle, rtol=0, atol=1e-14)
        assert s.alpha_bar[T] < 1e-3


def test_schedule_frozen_values():
    s = make_schedule(64)
    assert s.alpha_bar[1] == pytest.approx(0.9988004509, abs=1e-9)
    assert s.alpha_bar[20] == pytest.approx(0.7707380638, abs=1e-9)
    assert s.alpha_bar[64] == pytest.approx(5.928440e-07, rel=1e-5)


def test_schedule_rejects_bad_inputs():
    with pytest.raises(InvalidTError):
        make_schedule(1)
    with pytest.raises(InvalidTError):
        make_schedule(64, kind="linear")


# ----------------------------------------------------------------- q_sample


def test_q_sample_identities(schedule):
    x0 = np.random.default_rng(0).standard_normal((16, 3))
    eps = np.random.default_rng(1).standard_normal((16, 3))
    assert np.array_equal(q_sample(x0, 0, np.zeros_like(x0), schedule), x0)
    expected = schedule.sqrt_ab(9) * x0
    assert np.array_equal(q_sample(x0, 9, np.zeros_like(x0), schedule), expected)
    xt = q_sample(PointCloud(x0), 9, eps, schedule)
    manual = schedule.sqrt_ab(9) * x0 + schedule.sqrt_one_minus_ab(9) * eps
    assert np.array_equal(xt, manual)


def test_q_sample_mean_and_variance(schedule):
    rng = np.random.default_rng(7)
    x0 = rng.standard_normal((4, 3))
    t = 20
    draws = np.stack(
        [q_sample(x0, t, rng.standard_normal((4, 3)), schedule)
         for _ in range(10_000)]
    )
    residual = draws - schedule.sqrt_ab(t) * x0
    target = 1.0 - schedule.alpha_bar[t]
    assert np.all(np.abs(residual.mean(axis=0)) < 4.0 * math.sqrt(target / 10_000))
    var = residual.var(axis=0, ddof=1)
    assert np.all(var > target * 0.95) and np.all(var < target * 1.05)


def test_q_sample_rejects_bad_steps(schedule):
    x0 = np.zeros((4, 3))
    with pytest.raises(BadStepError):
        q_sample(x0, 65, np.zeros((4, 3)), schedule)
    with pytest.raises(BadStepError):
        q_sample(x0, -1, np.zeros((4, 3)), schedule)
    with pytest.raises(ShapeMismatchError):
        q_sample(x0, 5, np.zeros((3, 3)), schedule)


# ----------------------------------------------------------------- denoiser


def test_parameter_count_matches_closed_form():
    for config in (DenoiserConfig(), DenoiserConfig(embed=32, blocks=2, heads=2)):
        den = Denoiser(config, seed=0)
        assert sum(p.numel() for p in den.parameters()) == config.param_count()


def test_denoiser_init_is_seeded():
    a = Denoiser(seed=4)
    b = Denoiser(seed=4)
    c = Denoiser(seed=5)
    for (n1, p1), (_, p2), (_, p3) in zip(
        a.named_parameters(), b.named_parameters(), c.named_parameters()
    ):
        assert torch.equal(p1, p2), n1
    assert any(
        not torch.equal(p1, p3)
        for (_, p1), (_, p3) in zip(a.named_parameters(), c.named_parameters())
    )


def _toy_inputs(k=16, dtype=torch.float64, seed=0):
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(1, k, 3, generator=g, dtype=dtype)
    cc = torch.randn(1, k, 3, generator=g, dtype=dtype)
    cf = torch.zeros(1, k, 3, dtype=dtype)
    pr = torch.zeros(1, L_MAX, dtype=torch.long)
    t = torch.tensor([7])
    return x, t, cc, cf, pr


def test_zero_parameters_give_zero_output():
    den = Denoiser(DenoiserConfig(embed=32, blocks=2, heads=2), seed=0)
    with torch.no_grad():
        for p in den.parameters():
            p.zero_()
    x, t, cc, cf, pr = _toy_inputs(dtype=torch.float32)
    with torch.no_grad():
        assert float(den(x, t, cc, cf, pr).abs().max()) == 0.0


def test_forward_deterministic_and_shaped():
    den = Denoiser(DenoiserConfig(embed=32, blocks=2, heads=2), seed=1)
    for k in (16, 64):
        x, t, cc, cf, pr = _toy_inputs(k=k, dtype=torch.float32)
        with torch.no_grad():
            a = den(x, t, cc, cf, pr)
            b = den(x, t, cc, cf, pr)
        assert a.shape == (1, k, 3)
        assert torch.equal(a, b)
        assert bool(torch.isfinite(a).all())


def test_condition_permutation_leaves_output_unchanged():
    den = Denoiser(
        DenoiserConfig(embed=32, blocks=2, heads=2), seed=2, dtype=torch.float64
    )
    x, t, cc, cf, pr = _toy_inputs(k=24)
    cf = (torch.rand(1, 24, 3, generator=torch.Generator().manual_seed(3)) > 0.5)
    cf = cf.to(torch.float64)
    idx = torch.randperm(24, generator=torch.Generator().manual_seed(4))
    with torch.no_grad():
        a = den(x, t, cc, cf, pr)
        b = den(x, t, cc[:, idx], cf[:, idx], pr)
    assert float((a - b).abs().max()) < 1e-12


def test_noisy_points_carry_positional_identity():
    # index consistency needs output channels tied to input slots, so
    # permuting the noisy entity must not commute with the network
    den = Denoiser(
        DenoiserConfig(embed=32, blocks=2, heads=2), seed=2, dtype=torch.float64
    )
    x, t, cc, cf, pr = _toy_inputs(k=24)
    idx = torch.randperm(24, generator=torch.Generator().manual_seed(5))
    with torch.no_grad():
        a = den(x, t, cc, cf, pr)
        b = den(x[:, idx], t, cc, cf, pr)
    assert float((a - b[:, torch.argsort(idx)]).abs().max()) > 1e-3


def test_forward_rejects_bad_shapes():
    den = Denoiser(DenoiserConfig(embed=32, blocks=2, heads=2), seed=1)
    x, t, cc, cf, pr = _toy_inputs(dtype=torch.float32)
    with pytest.raises(ShapeMismatchError):
        den(x[0], t, cc, cf, pr)
    with pytest.raises(ShapeMismatchError):
        den(x, t, cc, cf[:, :4], pr)


# --------------------------------------------------------------------- loss


def test_loss_zero_for_exact_epsilon_oracle(toyset, schedule):
    batch = toyset.batch(np.arange(4))
    oracle = _DiracBatch(batch.x0, schedule)
    value = float(loss(oracle, batch, schedule, seed=11).detach())
    assert value < 1e-20


def test_loss_untrained_magnitude(toyset, schedule):
    den = Denoiser(seed=0)
    batch = toyset.batch(np.arange(4))
    value = float(loss(den, batch, schedule, seed=3).detach())
    assert value >= 2.0


def test_loss_batch_order_invariance(toyset, schedule):
    den = Denoiser(
        DenoiserConfig(embed=32, blocks=2, heads=2), seed=3, dtype=torch.float64
    )
    rows = np.arange(4)
    a = float(loss(den, toyset.batch(rows), schedule, seed=9).detach())
    b = float(loss(den, toyset.batch(rows[[2, 0, 3, 1]]), schedule, seed=9).detach())
    assert a == b


def test_loss_regime_forcing(toyset, schedule):
    spy = _SpyDen()
    batch = toyset.batch(np.arange(4))
    loss(spy, batch, schedule, seed=1, p_recon=1.0)
    cond_coords, cond_flags, prompts = spy.seen
    assert float(cond_flags.abs().max()) == 0.0
    assert np.array_equal(cond_coords.numpy(), batch.x0)
    assert int(prompts.abs().sum()) == 0

    loss(spy, batch, schedule, seed=1, p_recon=0.0, p_text=0.0)
    cond_coords, cond_flags, prompts = spy.seen
    assert np.array_equal(prompts.numpy(), batch.prompt)
    coords, flags = cond_coords.numpy(), cond_flags.numpy()
    assert np.all(coords[batch.mask] == 0.0)
    assert np.all(flags[batch.mask] == 1.0)
    assert np.all(flags[~batch.mask] == 0.0)
    assert np.array_equal(coords[~batch.mask], batch.x0[~batch.mask])

    loss(spy, batch, schedule, seed=1, p_recon=0.0, p_text=1.0)
    _, _, prompts = spy.seen
    assert int(prompts.abs().sum()) == 0


def test_loss_rejects_empty_batch(toyset, schedule):
    empty = toyset.batch(np.array([], dtype=np.int64))
    with pytest.raises(ShapeMismatchError):
        loss(_SpyDen(), empty, schedule, seed=0)


# ---------------------------------------------------------------- gradients


def test_gradients_zero_loss_and_unused_params(toyset, schedule):
    batch = toyset.batch(np.arange(4))
    oracle = _DiracBatch(batch.x0, schedule)
    grads = gradients(oracle, batch, schedule, seed=2)
    assert set(grads) == {"unused"}
    assert np.array_equal(grads["unused"], np.zeros(3))


def test_gradients_scale_linearly(toyset, schedule):
    den = Denoiser(
        DenoiserConfig(embed=32, blocks=2, heads=2), seed=6, dtype=torch.float64
    )
    batch = toyset.batch(np.arange(4))
    g1 = gradients(den, batch, schedule, seed=4)
    g2 = gradients(den, batch, schedule, seed=4, scale=2.0)
    for name in g1:
        assert np.array_equal(2.0 * g1[name], g2[name]), name


def finite_difference_gradient(den, batch, schedule, seed, name, flat_index,
                               h=1e-3, p_text=0.5, p_recon=0.1):
    """Central-difference derivative of the loss in one parameter."""
    p = dict(den.named_parameters())[name]
    values = []
    for delta in (h, -h):
        with torch.no_grad():
            p.view(-1)[flat_index] += delta
        values.append(float(
            loss(den, batch, schedule, seed, p_text, p_recon).detach()
        ))
        with torch.no_grad():
            p.view(-1)[flat_index] -= delta
    return (values[0] - values[1]) / (2.0 * h)


def assert_gradcheck(den, batch, schedule, seed, n_params, rng,
                     p_text=0.5, p_recon=0.1):
    grads = gradients(den, batch, schedule, seed, p_text, p_recon)
    names = sorted(grads)
    for _ in range(n_params):
        name = names[int(rng.integers(len(names)))]
        flat = int(rng.integers(grads[name].size))
        analytic = float(grads[name].reshape(-1)[flat])
        fd = finite_difference_gradient(
            den, batch, schedule, seed, name, flat,
            p_text=p_text, p_recon=p_recon,
        )
        err = abs(fd - analytic)
        assert err < 1e-3 * max(abs(fd), abs(analytic)) or err < 1e-6, (
            f"{name}[{flat}]: analytic {analytic:.3e} vs fd {fd:.3e}"
        )


def test_gradients_match_finite_differences_small(toyset, schedule):
    den = Denoiser(
        DenoiserConfig(embed=16, blocks=1, heads=2), seed=8, dtype=torch.float64
    )
    batch = toyset.batch(np.arange(2))
    assert_gradcheck(den, batch, schedule, seed=5, n_params=12,
                     rng=np.random.default_rng(0))


# -------------------------------------------------------------------- train


def test_train_zero_steps_returns_init(toyset):
    den = Denoiser(DenoiserConfig(embed=32, blocks=2, heads=2), seed=9)
    before = {n: p.detach().clone() for n, p in den.named_parameters()}
    out, curve = train(toyset, TrainConfig(steps=0, seed=9), den=den)
    assert out is den
    assert curve == []
    for n, p in out.named_parameters():
        assert torch.equal(before[n], p)


def test_train_is_deterministic(toyset):
    config = TrainConfig(steps=25, batch=4, seed=13, log_every=5)
    den_a, curve_a = train(
        toyset, config, den=Denoiser(DenoiserConfig(embed=32, blocks=2, heads=2), seed=13)
    )
    den_b, curve_b = train(
        toyset, config, den=Denoiser(DenoiserConfig(embed=32, blocks=2, heads=2), seed=13)
    )
    assert curve_a == curve_b
    for (n, pa), (_, pb) in zip(den_a.named_parameters(), den_b.named_parameters()):
        assert torch.equal(pa, pb), n


def test_train_loss_decreases(toyset):
    den = Denoiser(DenoiserConfig(embed=32, blocks=2, heads=2), seed=21)
    _, curve = train(
        toyset, TrainConfig(steps=300, batch=4, seed=21, log_every=1), den=den
    )
    values = [v for _, v in curve]
    assert np.mean(values[-50:]) < 0.5 * np.mean(values[:50])


def test_train_raises_on_divergence(toyset):
    den = Denoiser(DenoiserConfig(embed=32, blocks=2, heads=2), seed=2)
    with pytest.raises(DivergedError):
        train(toyset, TrainConfig(steps=40, batch=4, seed=2, lr=1e10), den=den)


def test_train_config_validates_probabilities():
    with pytest.raises(ValueError):
        TrainConfig(p_text=1.5)


# --------------------------------------------------------------- checkpoint


def test_checkpoint_round_trip(tmp_path, toyset, schedule):
    den = Denoiser(DenoiserConfig(embed=32, blocks=2, heads=2), seed=31)
    path = tmp_path / "model.bpm"
    save_checkpoint(path, den, step=123)
    loaded, step = load_checkpoint(path)
    assert step == 123
    assert loaded.config == den.config
    for (n, pa), (_, pb) in zip(den.named_parameters(), loaded.named_parameters()):
        assert torch.equal(pa, pb), n
    x, t, cc, cf, pr = _toy_inputs(dtype=torch.float32)
    with torch.no_grad():
        assert torch.equal(den(x, t, cc, cf, pr), loaded(x, t, cc, cf, pr))


def test_checkpoint_bytes_deterministic(tmp_path):
    den = Denoiser(DenoiserConfig(embed=32, blocks=2, heads=2), seed=7)
    a, b = tmp_path / "a.bpm", tmp_path / "b.bpm"
    save_checkpoint(a, den, step=5)
    save_checkpoint(b, den, step=5)
    assert a.read_bytes() == b.read_bytes()


def test_checkpoint_rejects_corruption(tmp_path):
    den = Denoiser(DenoiserConfig(embed=32, blocks=2, heads=2), seed=7)
    path = tmp_path / "model.bpm"
    save_checkpoint(path, den, step=1)
    blob = path.read_bytes()

    bad_magic = tmp_path / "magic.bpm"
    bad_magic.write_bytes(b"XXXX" + blob[4:])
    with pytest.raises(FormatError):
        load_checkpoint(bad_magic)

    truncated = tmp_path / "short.bpm"
    truncated.write_bytes(blob[:-6])
    with pytest.raises(FormatError):
        load_checkpoint(truncated)

    trailing = tmp_path / "long.bpm"
    trailing.write_bytes(blob + b"\x00")
    with pytest.raises(FormatError):
        load_checkpoint(trailing)
