"""End-to-end Q-network variants sharing one topology.

Three variants are assembled from the same conv / embedding / cross-fusion /
head stack:

* ``fuzzy`` encoder + ``neural`` decoder  - the population-coded proposal;
* ``rate`` encoder + ``weighted_sum`` decoder - the spiking baseline;
* ``none`` + ``none`` - the non-spiking baseline (ReLU activations, one
  "time step", raw images in).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import fuzzy, snn
from .autodiff import Tensor
from .checkpoint import load_records, save_records

ACTIONS = ("LEFT", "IDLE", "RIGHT", "FASTER", "SLOWER")
N_ACTIONS = len(ACTIONS)

ENCODERS = ("fuzzy", "rate", "none")
DECODERS = ("neural", "weighted_sum", "none")


@dataclass
class NetworkConfig:
    encoder: str = "fuzzy"
    decoder: str = "neural"
    membership_kind: str = fuzzy.TRIANGULAR
    n_membership: int = 3            # N functions per input channel
    m_population: int = 5            # M output neurons per action
    n_actions: int = N_ACTIONS
    t_steps: int = 5
    obs_channels: int = 1
    obs_hw: tuple[int, int] = (32, 32)
    conv_channels: tuple[int, ...] = (8, 16, 16)
    conv_kernel: int = 3
    conv_stride: int = 2
    conv_padding: int = 1
    c_emb: int = 32
    n_heads: int = 8
    d_ff: int = 128
    fc_hidden: int = 512
    dec_hidden: int = 64
    tau_m: float = 2.0
    theta_pos: float = 1.0
    theta_neg: float = -4.0
    surrogate_alpha: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if self.encoder not in ENCODERS:
            raise ValueError(f"unknown encoder {self.encoder!r}")
        if self.decoder not in DECODERS:
            raise ValueError(f"unknown decoder {self.decoder!r}")
        if (self.encoder == "none") != (self.decoder == "none"):
            raise ValueError("'none' encoder and decoder come as a pair")

    @property
    def spiking(self) -> bool:
        return self.encoder != "none"

    @property
    def effective_t(self) -> int:
        return self.t_steps if self.spiking else 1

    def conv_input_channels(self) -> int:
        if self.encoder == "fuzzy":
            return self.n_membership * self.obs_channels
        return self.obs_channels

    def token_grid(self) -> tuple[int, int]:
        h, w = self.obs_hw
        for _ in self.conv_channels:
            h, w = ad.conv2d_extents(h, w, self.conv_kernel, self.conv_stride,
                                     self.conv_padding)
        if h < 1 or w < 1:
            raise ValueError("conv chain collapses the grid below 1x1")
        return h, w


@dataclass
class QVector:
    """Action values plus the population activations they were decoded from."""
    q: np.ndarray
    lam: np.ndarray | None = None


class QNetwork:
    """Two modality branches fused by spiking cross-attention, with the
    encoder/decoder pair selected by the config."""

    def __init__(self, cfg: NetworkConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self._encode_seed = int(rng.integers(2 ** 31))
        neuron = snn.NeuronSpec(
            kind="lif" if cfg.spiking else "relu",
            tau_m=cfg.tau_m, theta_pos=cfg.theta_pos,
            theta_neg=None, alpha=cfg.surrogate_alpha)

        self.banks: dict[str, list[fuzzy.MembershipBank]] = {}
        if cfg.encoder == "fuzzy":
            for mod in ("m1", "m2"):
                self.banks[mod] = [
                    fuzzy.MembershipBank(cfg.membership_kind, cfg.n_membership)
                    for _ in range(cfg.obs_channels)]

        # Spiking layers start with inflated weights so sparse binary inputs
        # can reach threshold; the ReLU baseline keeps the standard scale.
        gain = 10.0 if cfg.spiking else 1.0
        c_in = cfg.conv_input_channels()
        self.convs: dict[str, list[snn.ConvLifBlock]] = {}
        for mod in ("m1", "m2"):
            blocks, prev = [], c_in
            for c_out in cfg.conv_channels:
                blocks.append(snn.ConvLifBlock(
                    prev, c_out, cfg.conv_kernel, cfg.conv_stride,
                    cfg.conv_padding, neuron, rng, gain))
                prev = c_out
            self.convs[mod] = blocks

        th, tw = cfg.token_grid()
        self.n_tokens = th * tw
        self.emb = {mod: snn.Embedding(cfg.conv_channels[-1], self.n_tokens,
                                       cfg.c_emb, neuron, rng, gain)
                    for mod in ("m1", "m2")}
        self.cfl = snn.CrossFusionLayer(cfg.c_emb, cfg.n_heads, cfg.d_ff,
                                        neuron, cfg.theta_neg, rng, gain)
        self.head = snn.FcLifHead(self.n_tokens * cfg.c_emb, cfg.fc_hidden,
                                  neuron, rng, gain)

        pop_width = (cfg.m_population * cfg.n_actions
                     if cfg.decoder == "neural" else cfg.n_actions)
        bound = 1.0 / np.sqrt(cfg.fc_hidden)
        self.w_pop = Tensor(rng.uniform(-bound, bound, (cfg.fc_hidden, pop_width)),
                            name="w_pop")
        self.decoder = (fuzzy.NeuralDecoder(cfg.m_population, cfg.n_actions,
                                            cfg.dec_hidden, rng)
                        if cfg.decoder == "neural" else None)

    # -- parameter plumbing -------------------------------------------------

    def named_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for mod, banks in self.banks.items():
            for ci, bank in enumerate(banks):
                for p in bank.parameters():
                    out[f"{mod}.bank{ci}.{p.name}"] = p
        for mod in ("m1", "m2"):
            for bi, block in enumerate(self.convs[mod]):
                out[f"{mod}.conv{bi}.k"] = block.kernels
                out[f"{mod}.conv{bi}.b"] = block.bias
            emb = self.emb[mod]
            out[f"{mod}.emb.w"] = emb.w
            out[f"{mod}.emb.b"] = emb.b
            out[f"{mod}.emb.pos"] = emb.pos
        for p in self.cfl.parameters():
            out[f"cfl.{p.name}"] = p
        out["head.w"] = self.head.w
        out["head.b"] = self.head.b
        out["w_pop"] = self.w_pop
        if self.decoder is not None:
            for p in self.decoder.parameters():
                out[f"dec.{p.name}"] = p
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def copy_parameters_from(self, other: "QNetwork") -> None:
        mine, theirs = self.named_parameters(), other.named_parameters()
        if mine.keys() != theirs.keys():
            raise ValueError("parameter sets differ; incompatible networks")
        for name, p in mine.items():
            p.value = theirs[name].value.copy()

    def parameter_digest(self) -> str:
        h = hashlib.sha256()
        for name, p in sorted(self.named_parameters().items()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.value).tobytes())
        return h.hexdigest()

    def topology_signature(self) -> str:
        """Digest of the shared layer shapes.  Excludes the encoder banks,
        the decoder/population weights, and the first conv block (whose input
        width is the encoder's channel expansion)."""
        h = hashlib.sha256()
        shared_prefixes = (".conv", ".emb", "cfl.", "head.")
        for name, p in sorted(self.named_parameters().items()):
            if ".conv0." in name:
                continue
            if any(s in name for s in shared_prefixes):
                h.update(f"{name}:{p.value.shape}".encode())
        return h.hexdigest()

    def save(self, path) -> None:
        save_records(path, {n: p.value for n, p in
                            self.named_parameters().items()})

    def load(self, path) -> None:
        records = load_records(path)
        for name, p in self.named_parameters().items():
            if name not in records:
                raise KeyError(f"checkpoint missing record {name!r}")
            if records[name].shape != p.value.shape:
                raise ValueError(f"shape mismatch for {name!r}")
            p.value = records[name]

    # -- forward ------------------------------------------------------------

    def reset_state(self) -> None:
        for mod in ("m1", "m2"):
            for block in self.convs[mod]:
                block.reset()
            self.emb[mod].reset()
        self.cfl.reset()
        self.head.reset()

    def _encode(self, mod: str, image: np.ndarray) -> list[Tensor]:
        cfg = self.cfg
        if cfg.encoder == "fuzzy":
            return fuzzy.fuzzy_encode(self.banks[mod], image, cfg.t_steps,
                                      alpha=cfg.surrogate_alpha)
        if cfg.encoder == "rate":
            rng = np.random.default_rng(self._encode_seed + (mod == "m2"))
            return fuzzy.rate_encode(image, cfg.t_steps, rng)
        return [Tensor(np.asarray(image, dtype=np.float64))]

    def forward(self, bev: np.ndarray, lidar: np.ndarray
                ) -> tuple[Tensor, Tensor | None]:
        """Batched forward: (B,C,H,W) images in [0,1] -> (B,|A|) Q tensor
        and the (B, M*|A|) population activations (None for 'none')."""
        cfg = self.cfg
        self.reset_state()
        x1 = self._encode("m1", bev)
        x2 = self._encode("m2", lidar)
        hidden_steps: list[Tensor] = []
        for t in range(cfg.effective_t):
            f1, f2 = x1[t], x2[t]
            for block in self.convs["m1"]:
                f1 = block.step(f1)
            for block in self.convs["m2"]:
                f2 = block.step(f2)
            e1 = self.emb["m1"].step(f1)
            e2 = self.emb["m2"].step(f2)
            fused = self.cfl.step(e1, e2)
            hidden_steps.append(self.head.step(fused))

        lam = fuzzy.accumulate_population(hidden_steps, self.w_pop)
        if cfg.decoder == "neural":
            return self.decoder(lam), lam
        if cfg.decoder == "weighted_sum":
            return lam, lam
        return lam, None

    def q_values(self, obs: dict) -> QVector:
        """Single-observation convenience around `forward`."""
        bev = np.asarray(obs["bev"])[None]
        lidar = np.asarray(obs["lidar_grid"])[None]
        q, lam = self.forward(bev, lidar)
        return QVector(q.value[0].copy(),
                       None if lam is None else lam.value[0].copy())


# ---------------------------------------------------------------------------
# multiplication accounting
# ---------------------------------------------------------------------------

def analytic_encoder_mults(cfg: NetworkConfig) -> int:
    c, (h, w) = cfg.obs_channels, cfg.obs_hw
    if cfg.encoder == "fuzzy":
        per_eval = 1 if cfg.membership_kind == fuzzy.TRIANGULAR else 2
        return per_eval * c * cfg.n_membership * h * w
    return 0   # rate coding is comparison-only; 'none' has no encoder


def analytic_first_conv_mults(cfg: NetworkConfig) -> int:
    c = cfg.conv_input_channels()
    h, w = cfg.obs_hw
    h_out, w_out = ad.conv2d_extents(h, w, cfg.conv_kernel, cfg.conv_stride,
                                     cfg.conv_padding)
    return cfg.conv_channels[0] * c * cfg.conv_kernel ** 2 * h_out * w_out


def count_multiplications(net: QNetwork, obs: dict | None = None) -> dict:
    """Per-stage multiply counts: analytic closed forms next to counters
    measured on an instrumented single-observation forward of each stage."""
    cfg = net.cfg
    h, w = cfg.obs_hw
    rng = np.random.default_rng(0)
    if obs is None:
        obs = {"bev": rng.random((cfg.obs_channels, h, w)),
               "lidar_grid": rng.random((cfg.obs_channels, h, w))}

    net.reset_state()
    with ad.count_mults() as c:
        spikes = net._encode("m1", np.asarray(obs["bev"]))
    measured_enc = c.mults

    first = net.convs["m1"][0]
    first_in = spikes[0]
    with ad.count_mults() as c:
        ad.conv2d(first_in, first.kernels, first.stride, first.padding)
    measured_conv = c.mults

    return {
        "encoder": {"analytic": analytic_encoder_mults(cfg),
                    "measured": measured_enc},
        "first_conv": {"analytic": analytic_first_conv_mults(cfg),
                       "measured": measured_conv},
        "decoder_overhead": (cfg.m_population * cfg.n_actions
                             if cfg.decoder == "neural" else 0),
    }
