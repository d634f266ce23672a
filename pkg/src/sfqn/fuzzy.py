"""Trainable fuzzy membership encoding and population decoding.

A `MembershipBank` holds N trainable membership functions for one input
channel.  Triangular banks keep the ordering a < b < c valid under gradient
updates by storing (a, log(b-a), log(c-b)) and reconstructing; Gaussian
banks store (mean, log sigma).

Encoders turn [0,1] images into spike trains: `fuzzy_encode` drives one
integrate-and-fire neuron per membership degree (pure integrator, threshold
1.0, subtractive reset), `rate_encode` draws Bernoulli spikes.  Decoders map
time-accumulated population activations back to continuous action values.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

TRIANGULAR = "triangular"
GAUSSIAN = "gaussian"

# Evenly spread triangles on [0,1] with 50% overlap; for N=3 these are the
# worked-example banks (0,.2,.4), (.3,.5,.7), (.6,.8,1).
def spread_triangles(n: int) -> np.ndarray:
    if n < 1:
        raise ValueError("bank needs at least one membership function")
    width = 1.0 / (1.5 * n + 0.5)          # half-base; peaks step by 1.5*width
    abc = []
    for i in range(n):
        b = width + 1.5 * width * i
        abc.append((b - width, b, b + width))
    return np.asarray(abc)


class MembershipBank:
    """N trainable membership functions over [0,1] for one input channel."""

    def __init__(self, kind: str = TRIANGULAR, n: int = 3,
                 params: np.ndarray | None = None):
        if kind not in (TRIANGULAR, GAUSSIAN):
            raise ValueError(f"unknown membership kind {kind!r}")
        self.kind = kind
        self.n = n
        if kind == TRIANGULAR:
            if params is None:
                params = spread_triangles(n)
            params = np.asarray(params, dtype=np.float64)
            a, b, c = params[:, 0], params[:, 1], params[:, 2]
            if not (np.all(a < b) and np.all(b < c)):
                raise ValueError("triangular bank requires a < b < c")
            self._a = Tensor(a, name="memb_a")
            self._log_ab = Tensor(np.log(b - a), name="memb_log_ab")
            self._log_bc = Tensor(np.log(c - b), name="memb_log_bc")
        else:
            if params is None:
                tri = spread_triangles(n)
                params = np.stack([tri[:, 1], (tri[:, 2] - tri[:, 0]) / 4.0],
                                  axis=1)
            params = np.asarray(params, dtype=np.float64)
            if not np.all(params[:, 1] > 0):
                raise ValueError("gaussian bank requires sigma > 0")
            self._mean = Tensor(params[:, 0], name="memb_mean")
            self._log_sigma = Tensor(np.log(params[:, 1]), name="memb_log_sigma")

    def parameters(self) -> list[Tensor]:
        if self.kind == TRIANGULAR:
            return [self._a, self._log_ab, self._log_bc]
        return [self._mean, self._log_sigma]

    def abc(self) -> tuple[Tensor, Tensor, Tensor]:
        """Reconstructed (a, b, c) tensors; only for triangular banks."""
        a = self._a
        b = a + ad.exp(self._log_ab)
        c = b + ad.exp(self._log_bc)
        return a, b, c

    def abc_values(self) -> np.ndarray:
        a, b, c = self.abc()
        return np.stack([a.value, b.value, c.value], axis=1)

    def mean_sigma_values(self) -> np.ndarray:
        return np.stack([self._mean.value, np.exp(self._log_sigma.value)],
                        axis=1)


def membership_eval(bank: MembershipBank, p) -> Tensor:
    """Membership degrees of `p` (scalar or array, clamped to [0,1]).

    Output shape is (N,) + shape(p); degrees lie in [0,1].
    """
    pv = np.clip(np.asarray(p, dtype=np.float64), 0.0, 1.0)
    pt = Tensor(pv[None, ...])                      # (1, ...) broadcast vs N
    extra = (1,) * pv.ndim
    if bank.kind == TRIANGULAR:
        a, b, c = bank.abc()
        a = ad.reshape(a, (bank.n,) + extra)
        b = ad.reshape(b, (bank.n,) + extra)
        c = ad.reshape(c, (bank.n,) + extra)
        up = (pt - a) / (b - a)
        down = (c - pt) / (c - b)
        # relu(min(up, down)) reproduces the piecewise triangle; ties and
        # kinks take the left-limit subgradient.
        mu = ad.relu(ad.minimum(up, down))
        ad.record_mults(bank.n * pv.size)           # one slope multiply per eval
    else:
        mean = ad.reshape(bank._mean, (bank.n,) + extra)
        sigma = ad.exp(ad.reshape(bank._log_sigma, (bank.n,) + extra))
        z = (pt - mean) / sigma
        mu = ad.exp(z * z * -0.5)
        ad.record_mults(2 * bank.n * pv.size)
    return mu


def if_spike_train(drive: Tensor, t_steps: int, alpha: float = 2.0) -> list[Tensor]:
    """Integrate-and-fire with constant input current `drive` per step.

    Pure integrator, threshold 1.0, subtractive reset; surrogate gradient on
    the threshold crossing keeps the train differentiable w.r.t. the drive.
    """
    if t_steps <= 0:
        raise ValueError("simulation window must be positive")
    v = Tensor(np.zeros(drive.shape))
    spikes = []
    for _ in range(t_steps):
        v = v + drive
        s = ad.surrogate_spike(v, threshold=1.0, alpha=alpha)
        v = v - s
        spikes.append(s)
    return spikes


def fuzzy_encode(banks: list[MembershipBank], image, t_steps: int,
                 alpha: float = 2.0) -> list[Tensor]:
    """Encode a (C,H,W) or (B,C,H,W) image into T steps of (N*C) spike maps.

    Each image channel expands into its bank's N membership channels; the
    degrees drive IF neurons for `t_steps` steps.
    """
    img = np.asarray(image, dtype=np.float64)
    batched = img.ndim == 4
    if not batched:
        img = img[None]
    if img.shape[1] != len(banks):
        raise ad.ShapeError(
            f"{img.shape[1]} image channels but {len(banks)} banks")
    per_channel = []
    for ci, bank in enumerate(banks):
        mu = membership_eval(bank, img[:, ci])      # (N, B, H, W)
        per_channel.append(ad.transpose(mu, (1, 0, 2, 3)))
    drive = ad.concat(per_channel, axis=1)          # (B, N*C, H, W)
    spikes = if_spike_train(drive, t_steps, alpha=alpha)
    if not batched:
        spikes = [ad.reshape(s, s.shape[1:]) for s in spikes]
    return spikes


_rate_clamp_count = 0


def rate_clamp_warnings() -> int:
    """Number of out-of-range pixels clamped by `rate_encode` so far."""
    return _rate_clamp_count


def rate_encode(image, t_steps: int, rng: np.random.Generator) -> list[Tensor]:
    """Bernoulli rate coding: spike probability equals the pixel value."""
    global _rate_clamp_count
    if t_steps <= 0:
        raise ValueError("simulation window must be positive")
    img = np.asarray(image, dtype=np.float64)
    bad = int(np.sum((img < 0.0) | (img > 1.0)))
    if bad:
        _rate_clamp_count += bad
        img = np.clip(img, 0.0, 1.0)
    return [Tensor((rng.random(img.shape) < img).astype(np.float64))
            for _ in range(t_steps)]


def accumulate_population(spikes: list[Tensor], weights: Tensor) -> Tensor:
    """Time-summed weighted spike counts: lambda = sum_t s_t @ W.

    `spikes` are T tensors of shape (H_hidden,) or (B, H_hidden); `weights`
    is (H_hidden, M*|A|).
    """
    total = spikes[0]
    for s in spikes[1:]:
        total = total + s
    squeeze = len(total.shape) == 1
    if squeeze:
        total = ad.reshape(total, (1,) + total.shape)
    if total.shape[-1] != weights.shape[0]:
        raise ad.ShapeError(
            f"spike width {total.shape[-1]} vs weight rows {weights.shape[0]}")
    lam = total @ weights
    return ad.reshape(lam, lam.shape[1:]) if squeeze else lam


class NeuralDecoder:
    """Compact ReLU network mapping population activations to Q-values."""

    def __init__(self, m: int, n_actions: int, hidden: int = 64,
                 rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        d_in = m * n_actions
        scale = 1.0 / np.sqrt(d_in)
        self.m = m
        self.n_actions = n_actions
        self.w1 = Tensor(rng.uniform(-scale, scale, (d_in, hidden)), name="dec_w1")
        self.b1 = Tensor(np.zeros(hidden), name="dec_b1")
        self.w2 = Tensor(rng.uniform(-1.0 / np.sqrt(hidden), 1.0 / np.sqrt(hidden),
                                     (hidden, n_actions)), name="dec_w2")
        self.b2 = Tensor(np.zeros(n_actions), name="dec_b2")

    def parameters(self) -> list[Tensor]:
        return [self.w1, self.b1, self.w2, self.b2]

    def __call__(self, lam: Tensor) -> Tensor:
        squeeze = len(lam.shape) == 1
        if squeeze:
            lam = ad.reshape(lam, (1,) + lam.shape)
        h = ad.relu(lam @ self.w1 + self.b1)
        q = h @ self.w2 + self.b2
        return ad.reshape(q, q.shape[1:]) if squeeze else q


def decode_neural(lam: Tensor, decoder: NeuralDecoder) -> Tensor:
    return decoder(lam)


def centroid_positions(m: int) -> np.ndarray:
    """Fixed uniform defuzzification grid on [-1, 1]."""
    if m == 1:
        return np.zeros(1)
    return np.linspace(-1.0, 1.0, m)


def decode_centroid(lam, positions) -> np.ndarray:
    """Discrete centroid defuzzification per action.

    `lam` has shape (A, M) or flat (A*M,) with per-action blocks; an action
    with zero total mass decodes to the midpoint of the position grid.
    """
    positions = np.asarray(positions, dtype=np.float64)
    if np.any(np.diff(positions) <= 0) and positions.size > 1:
        raise ValueError("positions must be strictly increasing")
    lam = np.asarray(lam.value if isinstance(lam, Tensor) else lam,
                     dtype=np.float64)
    if lam.ndim == 1:
        lam = lam.reshape(-1, positions.size)
    mass = lam.sum(axis=-1)
    midpoint = 0.5 * (positions[0] + positions[-1])
    with np.errstate(invalid="ignore", divide="ignore"):
        q = (lam * positions).sum(axis=-1) / mass
    return np.where(mass == 0.0, midpoint, q)


def decode_weighted_sum(spikes: list[Tensor], weights: Tensor) -> Tensor:
    """Ablation decoder: Q(a) = sum_t sum_i w_i s_it, one output per action."""
    return accumulate_population(spikes, weights)
