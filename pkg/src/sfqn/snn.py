"""Spiking neuron dynamics and layers.

LIF update is the decay-toward-input form v <- v + (x - v)/tau with
subtractive reset.  Binary neurons emit {0,1} above theta_pos; ternary
neurons additionally emit -1 at or below theta_neg (used only inside the
cross-attention Q/K projections).  Every layer is stepped once per
simulation step and carries its membrane state across steps; `reset()`
clears state between network invocations.

Setting `kind="relu"` in a NeuronSpec swaps the spiking nonlinearity for a
stateless ReLU, which turns the same layer stack into the non-spiking
baseline.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass
class NeuronSpec:
    kind: str = "lif"            # "lif" or "relu"
    tau_m: float = 2.0
    theta_pos: float = 1.0
    theta_neg: float | None = None
    alpha: float = 2.0


class Neuron:
    """One population of neurons sharing a NeuronSpec; owns membrane state."""

    def __init__(self, spec: NeuronSpec):
        self.spec = spec
        self.v: Tensor | None = None

    def reset(self) -> None:
        self.v = None

    def step(self, x: Tensor) -> Tensor:
        s = self.spec
        if s.kind == "relu":
            return ad.relu(x)
        v = Tensor(np.zeros(x.shape)) if self.v is None else self.v
        if v.shape != x.shape:      # batch size changed between invocations
            v = Tensor(np.zeros(x.shape))
        v = v + (x - v) * (1.0 / s.tau_m)
        s_pos = ad.surrogate_spike(v, s.theta_pos, s.alpha)
        v = v - s_pos * s.theta_pos
        spike = s_pos
        if s.theta_neg is not None:
            s_neg = ad.surrogate_spike_below(v, s.theta_neg, s.alpha)
            v = v - s_neg * s.theta_neg
            spike = s_pos - s_neg
        self.v = v
        return spike


def _uniform(rng: np.random.Generator, shape, fan_in: int,
             gain: float = 1.0) -> np.ndarray:
    # Spiking layers need inflated weights (gain > 1) so that sparse binary
    # inputs can drive membranes across threshold at initialization.
    bound = gain / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, shape)


class ConvLifBlock:
    """Conv2d followed by a (binary) LIF population; state persists over T."""

    def __init__(self, c_in: int, c_out: int, kernel: int, stride: int,
                 padding: int, neuron: NeuronSpec, rng: np.random.Generator,
                 gain: float = 1.0):
        self.stride = stride
        self.padding = padding
        self.kernels = Tensor(_uniform(rng, (c_out, c_in, kernel, kernel),
                                       c_in * kernel * kernel, gain),
                              name="conv_k")
        self.bias = Tensor(np.zeros(c_out), name="conv_b")
        self.neuron = Neuron(neuron)

    def parameters(self) -> list[Tensor]:
        return [self.kernels, self.bias]

    def reset(self) -> None:
        self.neuron.reset()

    def step(self, x: Tensor) -> Tensor:
        y = ad.conv2d(x, self.kernels, self.stride, self.padding)
        b = ad.reshape(self.bias, (self.bias.shape[0], 1, 1))
        return self.neuron.step(y + b)


class Embedding:
    """Project per-location feature vectors to tokens, add learnable
    positional encoding to the pre-threshold current, then spike."""

    def __init__(self, c_in: int, n_tokens: int, c_emb: int,
                 neuron: NeuronSpec, rng: np.random.Generator,
                 gain: float = 1.0):
        self.c_in = c_in
        self.n_tokens = n_tokens
        self.w = Tensor(_uniform(rng, (c_in, c_emb), c_in, gain), name="emb_w")
        self.b = Tensor(np.zeros(c_emb), name="emb_b")
        self.pos = Tensor(_uniform(rng, (n_tokens, c_emb), c_emb), name="emb_pos")
        self.neuron = Neuron(neuron)

    def parameters(self) -> list[Tensor]:
        return [self.w, self.b, self.pos]

    def reset(self) -> None:
        self.neuron.reset()

    def step(self, x: Tensor) -> Tensor:
        """(B,c,h,w) feature spikes -> (B, h*w, c_emb) token spikes."""
        b, c, h, w = x.shape
        if h * w != self.n_tokens or c != self.c_in:
            raise ad.ShapeError(f"embedding expects {self.c_in}x{self.n_tokens}"
                                f" features, got {c}x{h * w}")
        tokens = ad.transpose(ad.reshape(x, (b, c, h * w)), (0, 2, 1))
        cur = tokens @ self.w + self.b + self.pos
        return self.neuron.step(cur)


def ternary_scores_addonly(q: np.ndarray, k: np.ndarray):
    """Attention scores Q K^T computed with additions only.

    Entries of q (n,d) and k (m,d) must lie in {-1,0,+1}; returns the raw
    integer score matrix and the number of multiplications used (always 0).
    Reference path for the energy argument; tests compare it to the float
    matmul result.
    """
    for arr in (q, k):
        if not np.all(np.isin(arr, (-1.0, 0.0, 1.0))):
            raise ValueError("ternary score path requires entries in {-1,0,1}")
    n, d = q.shape
    m = k.shape[0]
    scores = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            acc = 0
            for t in range(d):
                qe, ke = q[i, t], k[j, t]
                if qe == 0.0 or ke == 0.0:
                    continue
                if qe == ke:
                    acc += 1
                else:
                    acc -= 1
            scores[i, j] = acc
    return scores, 0


class CrossFusionLayer:
    """Bidirectional spiking cross-attention between two token streams.

    Q and K come from ternary LIF projections so raw scores are integer
    accumulations of {-1,0,+1} products; scores are scaled by 1/sqrt(d_head)
    with no softmax.  The two directed attentions are summed with the
    residual, layer-normalized on pre-threshold currents, and passed through
    a shared feed-forward sublayer; the output alphabet is {0,1}.
    """

    def __init__(self, c_emb: int, n_heads: int, d_ff: int,
                 neuron: NeuronSpec, theta_neg: float, rng: np.random.Generator,
                 gain: float = 1.0):
        if c_emb % n_heads:
            raise ValueError("embedding width must divide evenly into heads")
        self.c_emb = c_emb
        self.n_heads = n_heads
        self.d_head = c_emb // n_heads
        qk_spec = replace(neuron, theta_neg=theta_neg)
        self.proj = {}
        self.qk_neurons = {}
        for name in ("q1", "k2", "v2", "q2", "k1", "v1"):
            self.proj[name] = Tensor(_uniform(rng, (c_emb, c_emb), c_emb, gain),
                                     name=f"cfl_{name}")
            if name[0] in "qk":
                self.qk_neurons[name] = Neuron(qk_spec)
        self.w_out = Tensor(_uniform(rng, (c_emb, c_emb), c_emb), name="cfl_wo")
        self.ln1_g = Tensor(np.ones(c_emb), name="cfl_ln1_g")
        self.ln1_b = Tensor(np.zeros(c_emb), name="cfl_ln1_b")
        self.ln2_g = Tensor(np.ones(c_emb), name="cfl_ln2_g")
        self.ln2_b = Tensor(np.zeros(c_emb), name="cfl_ln2_b")
        self.ff_w1 = Tensor(_uniform(rng, (c_emb, d_ff), c_emb, gain),
                            name="cfl_ff_w1")
        self.ff_b1 = Tensor(np.zeros(d_ff), name="cfl_ff_b1")
        self.ff_w2 = Tensor(_uniform(rng, (d_ff, c_emb), d_ff), name="cfl_ff_w2")
        self.ff_b2 = Tensor(np.zeros(c_emb), name="cfl_ff_b2")
        self.att_neuron = Neuron(neuron)
        self.ff_hidden_neuron = Neuron(neuron)
        self.out_neuron = Neuron(neuron)
        self.last_qk: dict[str, np.ndarray] = {}

    def parameters(self) -> list[Tensor]:
        return (list(self.proj.values())
                + [self.w_out, self.ln1_g, self.ln1_b, self.ln2_g, self.ln2_b,
                   self.ff_w1, self.ff_b1, self.ff_w2, self.ff_b2])

    def reset(self) -> None:
        for n in self.qk_neurons.values():
            n.reset()
        self.att_neuron.reset()
        self.ff_hidden_neuron.reset()
        self.out_neuron.reset()
        self.last_qk = {}

    def _split_heads(self, x: Tensor) -> Tensor:
        b, n, c = x.shape
        return ad.transpose(
            ad.reshape(x, (b, n, self.n_heads, self.d_head)), (0, 2, 1, 3))

    def _merge_heads(self, x: Tensor) -> Tensor:
        b, h, n, d = x.shape
        return ad.reshape(ad.transpose(x, (0, 2, 1, 3)), (b, n, h * d))

    def _attend(self, tokens_q: Tensor, tokens_kv: Tensor,
                qn: str, kn: str, vn: str) -> Tensor:
        q = self.qk_neurons[qn].step(tokens_q @ self.proj[qn])
        k = self.qk_neurons[kn].step(tokens_kv @ self.proj[kn])
        self.last_qk[qn] = q.value
        self.last_qk[kn] = k.value
        v = tokens_kv @ self.proj[vn]
        qh, kh, vh = self._split_heads(q), self._split_heads(k), self._split_heads(v)
        scores = (qh @ ad.transpose(kh, (0, 1, 3, 2))) * (1.0 / np.sqrt(self.d_head))
        return self._merge_heads(scores @ vh) @ self.w_out

    def step(self, e1: Tensor, e2: Tensor) -> Tensor:
        if e1.shape != e2.shape:
            raise ad.ShapeError(f"token shapes differ: {e1.shape} vs {e2.shape}")
        att = self._attend(e1, e2, "q1", "k2", "v2") \
            + self._attend(e2, e1, "q2", "k1", "v1")
        res = e1 + e2
        s_att = self.att_neuron.step(ad.layernorm(att + res, self.ln1_g, self.ln1_b))
        hidden = self.ff_hidden_neuron.step(s_att @ self.ff_w1 + self.ff_b1)
        back = hidden @ self.ff_w2 + self.ff_b2
        return self.out_neuron.step(ad.layernorm(s_att + back,
                                                 self.ln2_g, self.ln2_b))


class FcLifHead:
    """Fully connected hidden layer of spiking neurons feeding the
    population output; emits the hidden spike vector per step."""

    def __init__(self, d_in: int, hidden: int, neuron: NeuronSpec,
                 rng: np.random.Generator, gain: float = 1.0):
        self.w = Tensor(_uniform(rng, (d_in, hidden), d_in, gain), name="head_w")
        self.b = Tensor(np.zeros(hidden), name="head_b")
        self.neuron = Neuron(neuron)

    def parameters(self) -> list[Tensor]:
        return [self.w, self.b]

    def reset(self) -> None:
        self.neuron.reset()

    def step(self, fused: Tensor) -> Tensor:
        """(B, n, c) fused tokens -> (B, hidden) spikes."""
        b = fused.shape[0]
        flat = ad.reshape(fused, (b, int(np.prod(fused.shape[1:]))))
        return self.neuron.step(flat @ self.w + self.b)
