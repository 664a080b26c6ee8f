"""Noise schedule, conditional denoiser, and the training loop."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import (
    BadStepError,
    DivergedError,
    FormatError,
    InvalidTError,
    ShapeMismatchError,
)
from .geometry import ConditionedCloud, PointCloud, apply_mask
from .prompts import L_MAX, load_vocabulary, null_prompt

DEFAULT_T = 64
_COSINE_S = 0.008
_MAX_BETA = 0.999


@dataclass(frozen=True)
class NoiseSchedule:
    """alpha_bar[t] for t in 0..T; alpha_bar[0] = 1 and the tail is near 0."""

    T: int
    alpha_bar: np.ndarray

    def sqrt_ab(self, t: int) -> float:
        return float(np.sqrt(self.alpha_bar[t]))

    def sqrt_one_minus_ab(self, t: int) -> float:
        return float(np.sqrt(1.0 - self.alpha_bar[t]))


def make_schedule(T: int = DEFAULT_T, kind: str = "cosine") -> NoiseSchedule:
    """Cosine alpha_bar schedule with the usual per-step beta clip.

    The clip caps beta_t at 0.999, which keeps alpha_bar strictly
    decreasing and pushes alpha_bar[T] below 1e-3 for every T >= 2.
    """
    if kind != "cosine":
        raise InvalidTError(f"unknown schedule kind {kind!r}")
    if T < 2:
        raise InvalidTError(f"need T >= 2, got {T}")
    t = np.arange(T + 1, dtype=np.float64)
    f = np.cos((t / T + _COSINE_S) / (1.0 + _COSINE_S) * np.pi / 2.0) ** 2
    f = f / f[0]
    betas = np.clip(1.0 - f[1:] / f[:-1], 0.0, _MAX_BETA)
    alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    return NoiseSchedule(T=T, alpha_bar=alpha_bar)


def q_sample(
    x0: PointCloud | np.ndarray,
    t: int,
    eps: np.ndarray,
    schedule: NoiseSchedule,
) -> np.ndarray:
    """Forward noising x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps."""
    pts = x0.points if isinstance(x0, PointCloud) else np.asarray(x0)
    if not 0 <= t <= schedule.T:
        raise BadStepError(f"t={t} outside [0, {schedule.T}]")
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != pts.shape:
        raise ShapeMismatchError(f"eps shape {eps.shape} != x0 shape {pts.shape}")
    return schedule.sqrt_ab(t) * pts + schedule.sqrt_one_minus_ab(t) * eps


# ------------------------------------------------------------------ denoiser


@dataclass(frozen=True)
class DenoiserConfig:
    vocab_size: int = 0          # 0 means: size of the packaged vocabulary
    embed: int = 64
    blocks: int = 4
    heads: int = 4
    l_max: int = L_MAX

    def resolved(self) -> "DenoiserConfig":
        if self.vocab_size > 0:
            return self
        vocab = load_vocabulary().size
        return DenoiserConfig(vocab, self.embed, self.blocks, self.heads, self.l_max)

    def param_count(self) -> int:
        """Closed form: V*E + (8B+1)*E^2 + (13B+17)*E + 3."""
        c = self.resolved()
        v, e, b = c.vocab_size, c.embed, c.blocks
        return v * e + (8 * b + 1) * e * e + (13 * b + 17) * e + 3


def sinusoidal_embedding(values: torch.Tensor, dim: int) -> torch.Tensor:
    """Interleaved sin/cos features with geometric frequencies."""
    half = dim // 2
    exponent = -math.log(10000.0) / max(half - 1, 1)
    freqs = torch.exp(exponent * torch.arange(half, dtype=values.dtype,
                                              device=values.device))
    angles = values[..., None] * freqs
    return torch.cat([torch.sin(angles), torch.cos(angles)], dim=-1)


class _Block(nn.Module):
    """Pre-norm cross-entity attention plus a pointwise feedforward."""

    def __init__(self, embed: int, heads: int) -> None:
        super().__init__()
        self.heads = heads
        self.ln_q = nn.LayerNorm(embed)
        self.ln_kv = nn.LayerNorm(embed)
        self.ln_ffn = nn.LayerNorm(embed)
        self.proj_q = nn.Linear(embed, embed)
        self.proj_k = nn.Linear(embed, embed)
        self.proj_v = nn.Linear(embed, embed)
        self.proj_o = nn.Linear(embed, embed)
        self.ffn = nn.Sequential(
            nn.Linear(embed, 2 * embed), nn.GELU(), nn.Linear(2 * embed, embed)
        )

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        n, k, e = x.shape
        return x.view(n, k, self.heads, e // self.heads).transpose(1, 2)

    def forward(self, h: torch.Tensor, static: torch.Tensor) -> torch.Tensor:
        memory = torch.cat([h, static], dim=1)
        q = self._split(self.proj_q(self.ln_q(h)))
        kv = self.ln_kv(memory)
        k = self._split(self.proj_k(kv))
        v = self._split(self.proj_v(kv))
        a = F.scaled_dot_product_attention(q, k, v)
        n, _, kq, _ = a.shape
        h = h + self.proj_o(a.transpose(1, 2).reshape(n, kq, -1))
        return h + self.ffn(self.ln_ffn(h))


class Denoiser(nn.Module):
    """Epsilon predictor; noisy points attend over themselves, the
    condition cloud, the prompt tokens, and one time token.

    Only the noisy entity carries a positional encoding, so condition
    and prompt entities stay order-free while output indices keep a
    stable meaning across the generator's canonical point layout.
    """

    # entity slots: 0 noisy, 1 condition, 2 prompt, 3 time
    _N_ENTITIES = 4

    def __init__(self, config: DenoiserConfig | None = None, seed: int = 0,
                 dtype: torch.dtype = torch.float32) -> None:
        super().__init__()
        self.config = (config or DenoiserConfig()).resolved()
        c = self.config
        self.input_proj = nn.Linear(6, c.embed)
        self.token_emb = nn.Embedding(c.vocab_size, c.embed)
        self.type_emb = nn.Embedding(self._N_ENTITIES, c.embed)
        self.time_proj = nn.Linear(c.embed, c.embed)
        self.blocks = nn.ModuleList(
            _Block(c.embed, c.heads) for _ in range(c.blocks)
        )
        self.ln_out = nn.LayerNorm(c.embed)
        self.out_proj = nn.Linear(c.embed, 3)
        self.to(dtype)
        self.init_parameters(seed)

    @property
    def dtype(self) -> torch.dtype:
        return next(self.parameters()).dtype

    def init_parameters(self, seed: int) -> None:
        """Deterministic init: one generator, parameters in module order."""
        g = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for name, p in self.named_parameters():
                if "emb" in name:
                    p.normal_(0.0, 0.02, generator=g)
                elif p.dim() >= 2:
                    bound = 1.0 / math.sqrt(p.shape[1])
                    p.uniform_(-bound, bound, generator=g)
                elif name.endswith("bias"):
                    p.zero_()
                else:
                    p.fill_(1.0)

    def _posenc(self, k: int, dtype: torch.dtype) -> torch.Tensor:
        idx = torch.arange(k, dtype=dtype)
        return sinusoidal_embedding(idx, self.config.embed)

    def forward(
        self,
        x_t: torch.Tensor,
        t: torch.Tensor,
        cond_coords: torch.Tensor,
        cond_flags: torch.Tensor,
        prompt: torch.Tensor,
    ) -> torch.Tensor:
        if x_t.dim() != 3 or x_t.shape[-1] != 3:
            raise ShapeMismatchError(f"x_t shape {tuple(x_t.shape)} is not (N,K,3)")
        if cond_coords.shape != cond_flags.shape:
            raise ShapeMismatchError("condition coords and flags disagree")
        types = self.type_emb.weight
        pad = torch.zeros_like(x_t)
        h = self.input_proj(torch.cat([x_t, pad], dim=-1)) + types[0]
        h = h + self._posenc(x_t.shape[1], x_t.dtype)
        cond = torch.cat([cond_coords, cond_flags], dim=-1)
        c = self.input_proj(cond) + types[1]
        p = self.token_emb(prompt) + types[2]
        tt = self.time_proj(sinusoidal_embedding(t.to(x_t.dtype), self.config.embed))
        static = torch.cat([c, p, (tt + types[3])[:, None, :]], dim=1)
        for block in self.blocks:
            h = block(h, static)
        return self.out_proj(self.ln_out(h))

    def predictor(self):
        """Batched numpy prediction seam used by the samplers."""

        def predict(x_t, t, cond_coords, cond_flags, prompt):
            dtype = self.dtype
            with torch.no_grad():
                out = self(
                    torch.as_tensor(x_t, dtype=dtype),
                    torch.as_tensor(t, dtype=torch.long),
                    torch.as_tensor(cond_coords, dtype=dtype),
                    torch.as_tensor(cond_flags, dtype=dtype),
                    torch.as_tensor(prompt, dtype=torch.long),
                )
            return out.double().numpy()

        return predict


@dataclass(frozen=True)
class GuidanceCondition:
    """One conditioning regime: (x_M, prompt) or (full x, null prompt)."""

    cond: ConditionedCloud
    prompt: np.ndarray


def inpaint_condition(cloud: PointCloud, mask: np.ndarray,
                      prompt: np.ndarray) -> GuidanceCondition:
    return GuidanceCondition(apply_mask(cloud, mask), np.asarray(prompt))


def recon_condition(cloud: PointCloud) -> GuidanceCondition:
    cond = ConditionedCloud(cloud.points.copy(), np.zeros_like(cloud.points))
    return GuidanceCondition(cond, null_prompt())


# ------------------------------------------------------------------ training


@dataclass
class TrainConfig:
    steps: int = 20000
    batch: int = 8
    lr: float = 5e-4
    p_text: float = 0.5
    p_recon: float = 0.1
    seed: int = 0
    log_every: int = 100

    def __post_init__(self) -> None:
        if not (0.0 <= self.p_text <= 1.0 and 0.0 <= self.p_recon <= 1.0):
            raise ValueError("dropout probabilities must lie in [0, 1]")


@dataclass
class TrainBatch:
    """x0 clouds with masks, prompts, and stable per-sample indices."""

    x0: np.ndarray        # (N, K, 3)
    mask: np.ndarray      # (N, K) bool
    prompt: np.ndarray    # (N, L) int64
    index: np.ndarray     # (N,) int64, keys the per-sample rng streams


@dataclass
class TrainSet:
    x0: np.ndarray
    mask: np.ndarray
    prompt: np.ndarray
    index: np.ndarray

    def __len__(self) -> int:
        return self.x0.shape[0]

    def batch(self, rows: np.ndarray) -> TrainBatch:
        return TrainBatch(
            self.x0[rows], self.mask[rows], self.prompt[rows], self.index[rows]
        )

    @classmethod
    def from_triplets(cls, triplets: Sequence) -> "TrainSet":
        x0 = np.stack([t.target.points for t in triplets])
        mask = np.stack([t.mask for t in triplets])
        prompt = np.stack([t.prompt for t in triplets])
        return cls(x0, mask, prompt, np.arange(len(triplets), dtype=np.int64))


_LOSS_SALT = 0x10E5
_BATCH_SALT = 0xBA7C


def _sample_draws(seed: int, index: int, T: int, k: int):
    rng = np.random.default_rng(np.random.SeedSequence([_LOSS_SALT, seed, index]))
    t = int(rng.integers(1, T + 1))
    eps = rng.standard_normal((k, 3))
    use_recon = float(rng.random())
    drop_text = float(rng.random())
    return t, eps, use_recon, drop_text


def loss(
    den,
    batch: TrainBatch,
    schedule: NoiseSchedule,
    seed: int,
    p_text: float = 0.5,
    p_recon: float = 0.1,
) -> torch.Tensor:
    """Mean over batch and points of the squared epsilon residual.

    Every sample draws (t, eps, regime) from its own stream keyed by
    (seed, sample index), and per-sample terms are reduced in index
    order, so the value does not depend on batch order.
    """
    n, k, _ = batch.x0.shape
    if n == 0:
        raise ShapeMismatchError("empty batch")
    dtype = getattr(den, "dtype", torch.float64)
    x_t = np.empty_like(batch.x0)
    eps = np.empty_like(batch.x0)
    t_arr = np.empty(n, dtype=np.int64)
    cond_coords = np.empty_like(batch.x0)
    cond_flags = np.empty_like(batch.x0)
    prompts = np.empty((n, batch.prompt.shape[1]), dtype=np.int64)
    for i in range(n):
        t_i, eps_i, u_recon, u_text = _sample_draws(
            seed, int(batch.index[i]), schedule.T, k
        )
        cloud = PointCloud(batch.x0[i])
        if u_recon < p_recon:
            cond = recon_condition(cloud)
        else:
            prompt = batch.prompt[i]
            if u_text < p_text:
                prompt = null_prompt()
            cond = inpaint_condition(cloud, batch.mask[i], prompt)
        t_arr[i] = t_i
        eps[i] = eps_i
        x_t[i] = q_sample(batch.x0[i], t_i, eps_i, schedule)
        cond_coords[i] = cond.cond.coords
        cond_flags[i] = cond.cond.flags
        prompts[i] = cond.prompt
    eps_hat = den(
        torch.as_tensor(x_t, dtype=dtype),
        torch.as_tensor(t_arr, dtype=torch.long),
        torch.as_tensor(cond_coords, dtype=dtype),
        torch.as_tensor(cond_flags, dtype=dtype),
        torch.as_tensor(prompts, dtype=torch.long),
    )
    residual = (torch.as_tensor(eps, dtype=eps_hat.dtype) - eps_hat) ** 2
    per_sample = residual.sum(dim=-1).mean(dim=-1)
    order = np.argsort(batch.index, kind="stable")
    return per_sample[torch.as_tensor(order.copy())].mean()


def gradients(
    den: Denoiser,
    batch: TrainBatch,
    schedule: NoiseSchedule,
    seed: int,
    p_text: float = 0.5,
    p_recon: float = 0.1,
    scale: float = 1.0,
) -> dict[str, np.ndarray]:
    """Reverse-mode gradients of scale*loss; unused parameters yield zeros."""
    den.zero_grad(set_to_none=True)
    value = loss(den, batch, schedule, seed, p_text, p_recon) * scale
    if value.requires_grad:
        value.backward()
    out = {}
    for name, p in den.named_parameters():
        grad = p.grad
        out[name] = (
            np.zeros(p.shape, dtype=np.float64)
            if grad is None
            else grad.detach().double().numpy().copy()
        )
    den.zero_grad(set_to_none=True)
    return out


def train(
    dataset: TrainSet,
    config: TrainConfig,
    schedule: NoiseSchedule | None = None,
    den: Denoiser | None = None,
) -> tuple[Denoiser, list[tuple[int, float]]]:
    """Adam on the epsilon loss; deterministic given config.seed."""
    if len(dataset) == 0:
        raise ShapeMismatchError("empty dataset")
    schedule = schedule or make_schedule()
    if den is None:
        den = Denoiser(seed=config.seed)
    opt = torch.optim.Adam(den.parameters(), lr=config.lr)
    # linear warmup then cosine decay to a tenth of the peak rate; a pure
    # function of the step index, so reruns stay bit-identical
    warmup = min(500, max(1, config.steps // 10))
    curve: list[tuple[int, float]] = []
    for step in range(1, config.steps + 1):
        if step <= warmup:
            scale = step / warmup
        else:
            frac = (step - warmup) / max(1, config.steps - warmup)
            scale = 0.1 + 0.45 * (1.0 + math.cos(math.pi * frac))
        for group in opt.param_groups:
            group["lr"] = config.lr * scale
        rng = np.random.default_rng(
            np.random.SeedSequence([_BATCH_SALT, config.seed, step])
        )
        rows = rng.integers(0, len(dataset), size=config.batch)
        batch = dataset.batch(rows)
        opt.zero_grad(set_to_none=True)
        value = loss(
            den, batch, schedule, seed=config.seed + step,
            p_text=config.p_text, p_recon=config.p_recon,
        )
        value.backward()
        opt.step()
        scalar = float(value.detach())
        if not math.isfinite(scalar):
            raise DivergedError(f"loss became {scalar} at step {step}")
        if step % config.log_every == 0 or step == config.steps or step == 1:
            curve.append((step, scalar))
    for name, p in den.named_parameters():
        if not bool(torch.isfinite(p).all()):
            raise DivergedError(f"parameter {name} is not finite after training")
    return den, curve


# ---------------------------------------------------------------- checkpoint

_MAGIC = b"BPM1"
_META_NAME = "_meta"


def write_tensor_file(
    path: str | Path, tensors: list[tuple[str, np.ndarray]], step: int = 0
) -> None:
    """BPM1: name/rank/dims/f32 data per tensor, then a u64 step counter."""
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(tensors)))
        for name, data in tensors:
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", data.ndim))
            for dim in data.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(np.ascontiguousarray(data, dtype="<f4").tobytes())
        fh.write(struct.pack("<Q", step))


def save_checkpoint(path: str | Path, den: Denoiser, step: int = 0) -> None:
    c = den.config
    meta = np.array(
        [c.vocab_size, c.embed, c.blocks, c.heads, c.l_max], dtype=np.float32
    )
    tensors: list[tuple[str, np.ndarray]] = [(_META_NAME, meta)]
    for name, p in den.named_parameters():
        tensors.append((name, p.detach().float().numpy()))
    write_tensor_file(path, tensors, step)


def read_tensor_file(path: str | Path) -> tuple[dict[str, np.ndarray], int]:
    blob = Path(path).read_bytes()
    if blob[:4] != _MAGIC:
        raise FormatError(f"bad checkpoint magic {blob[:4]!r}")
    off = 4

    def take(n: int) -> bytes:
        nonlocal off
        if off + n > len(blob):
            raise FormatError("truncated checkpoint")
        out = blob[off:off + n]
        off += n
        return out

    (count,) = struct.unpack("<I", take(4))
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        dims = tuple(
            struct.unpack("<I", take(4))[0] for _ in range(rank)
        )
        n_items = int(np.prod(dims)) if dims else 1
        data = np.frombuffer(take(4 * n_items), dtype="<f4").reshape(dims)
        tensors[name] = data
    (step,) = struct.unpack("<Q", take(8))
    if off != len(blob):
        raise FormatError(f"{len(blob) - off} trailing bytes in checkpoint")
    return tensors, step


def load_checkpoint(path: str | Path) -> tuple[Denoiser, int]:
    tensors, step = read_tensor_file(path)
    if _META_NAME not in tensors:
        raise FormatError("checkpoint is missing its meta tensor")
    meta = tensors.pop(_META_NAME)
    if meta.shape != (5,):
        raise FormatError(f"bad meta tensor shape {meta.shape}")
    config = DenoiserConfig(*(int(v) for v in meta))
    den = Denoiser(config)
    state = den.state_dict()
    if set(state) != set(tensors):
        raise FormatError("checkpoint tensors do not match the architecture")
    for name, data in tensors.items():
        if tuple(state[name].shape) != data.shape:
            raise FormatError(
                f"tensor {name} has shape {data.shape}, "
                f"expected {tuple(state[name].shape)}"
            )
        state[name] = torch.as_tensor(data.copy(), dtype=torch.float32)
    den.load_state_dict(state)
    return den, step
