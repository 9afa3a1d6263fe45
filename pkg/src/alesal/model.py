"""The attention-based classifier and its ablation variants.

Data flow for a batch of ``B`` windows with ``P`` antenna pairs:

* amplitude branch: per-pair CNN (two conv-BN-ReLU-maxpool blocks) turns each
  length-200 PCA series into a ``[C, 22]`` feature map; the maps are
  concatenated to ``[N = P*C, 22]``, globally averaged, and a sigmoid-gated
  1-D convolution across the ``N`` channels yields per-channel weights. The
  re-weighted maps are flattened and projected to a latent vector.
* spectrum branch: per-pair GRU over spectrogram frames, followed by
  single-head self-attention with a residual connection, a time mean and a
  linear projection.
* head: concatenated latents -> dense -> ReLU -> dense -> softmax.

Per-pair weights are stored stacked along a leading ``P`` axis.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, Optional

import numpy as np

from .nn import ops
from .nn.checkpoint import dumps as ckpt_dumps
from .nn.checkpoint import loads as ckpt_loads
from .nn.ops import BatchNormState
from .nn.tensor import Tensor


def eca_kernel_size(N: int, gamma: float = 2.0, b: float = 1.0) -> int:
    """Nearest odd integer to ``log2(N) / gamma + b / gamma``; exact ties round up."""
    if N < 2 or gamma <= 0:
        raise ValueError("need N >= 2 and gamma > 0")
    x = math.log2(N) / gamma + b / gamma
    return max(1, 2 * math.floor((x - 1) / 2 + 0.5) + 1)


@dataclass
class ModelConfig:
    P: int = 4
    series_len: int = 200
    n_frames: int = 11
    n_bins: int = 51
    n_classes: int = 3
    me_channels: int = 16
    me_kernel: int = 7
    pool: int = 3
    gru_hidden: int = 32
    d_k: int = 32
    ta_latent: int = 16
    pa_gamma: float = 2.0
    pa_b: float = 1.0
    pa_latent: int = 32
    head_hidden: int = 64
    with_TA: bool = True
    with_PA: bool = True
    amplitude_only: bool = False
    spectrum_only: bool = False
    shared_gru: bool = False
    series_scale: float = 1.0
    spec_scale: float = 1.0

    def __post_init__(self):
        if self.amplitude_only and self.spectrum_only:
            raise ValueError("ablation disables every input branch")
        if self.me_kernel % 2 == 0:
            raise ValueError("me_kernel must be odd")

    @property
    def use_amplitude(self) -> bool:
        return not self.spectrum_only

    @property
    def use_spectrum(self) -> bool:
        return not self.amplitude_only

    @property
    def me_length(self) -> int:
        return (self.series_len // self.pool) // self.pool

    @property
    def N(self) -> int:
        return self.P * self.me_channels

    @property
    def pa_kernel(self) -> int:
        return eca_kernel_size(self.N, self.pa_gamma, self.pa_b)

    def to_dict(self) -> dict:
        return asdict(self)


def ablate(config: ModelConfig, with_TA: bool = True, with_PA: bool = True, amplitude_only: bool = False,
           spectrum_only: bool = False) -> ModelConfig:
    """Config for a model variant; raises when every input branch is disabled."""
    return replace(config, with_TA=with_TA, with_PA=with_PA, amplitude_only=amplitude_only,
                   spectrum_only=spectrum_only)


@dataclass
class ForwardOutput:
    logits: Tensor
    probs: np.ndarray
    ta_weights: Optional[np.ndarray] = None  # [B, P, T, T]
    pa_weights: Optional[np.ndarray] = None  # [B, N]
    extras: Dict[str, np.ndarray] = field(default_factory=dict)


def _uniform(rng, shape, fan_in, dtype):
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


class AlesalModel:
    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.params: Dict[str, Tensor] = {}
        self.bn: Dict[str, BatchNormState] = {}
        self._init_params(np.random.default_rng(seed))

    # -- parameters ---------------------------------------------------------

    def _init_params(self, rng) -> None:
        c, dt, P = self.config, self.dtype, self.config.P
        add = self.params.__setitem__
        if c.use_amplitude:
            C, k = c.me_channels, c.me_kernel
            add("me.conv1.weight", _uniform(rng, (P, C, 1, k), k, dt))
            add("me.conv1.bias", _uniform(rng, (P, C), k, dt))
            add("me.conv2.weight", _uniform(rng, (P, C, C, k), C * k, dt))
            add("me.conv2.bias", _uniform(rng, (P, C), C * k, dt))
            for name in ("me.bn1", "me.bn2"):
                add(f"{name}.gamma", Tensor(np.ones((P, C), dt), requires_grad=True))
                add(f"{name}.beta", Tensor(np.zeros((P, C), dt), requires_grad=True))
                self.bn[name] = BatchNormState.create((P, 1, C, 1), dtype=dt)
            add("pa.conv", _uniform(rng, (c.pa_kernel,), c.pa_kernel, dt))
            flat = c.N * c.me_length
            add("pa.Wd", _uniform(rng, (flat, c.pa_latent), flat, dt))
            add("pa.bd", _uniform(rng, (c.pa_latent,), flat, dt))
        if c.use_spectrum:
            G = 1 if c.shared_gru else P
            H, F = c.gru_hidden, c.n_bins
            add("gru.W", _uniform(rng, (G, F, 3 * H), H, dt))
            add("gru.U", _uniform(rng, (G, H, 3 * H), H, dt))
            add("gru.b", _uniform(rng, (G, 3 * H), H, dt))
            add("ta.Wq", _uniform(rng, (P, H, c.d_k), H, dt))
            add("ta.Wk", _uniform(rng, (P, H, c.d_k), H, dt))
            add("ta.Wv", _uniform(rng, (P, H, H), H, dt))
            add("ta.WD", _uniform(rng, (P, H, c.ta_latent), H, dt))
            add("ta.bD", _uniform(rng, (P, c.ta_latent), H, dt))
        features = (c.P * c.ta_latent if c.use_spectrum else 0) + (c.pa_latent if c.use_amplitude else 0)
        add("head.W1", _uniform(rng, (features, c.head_hidden), features, dt))
        add("head.b1", _uniform(rng, (c.head_hidden,), features, dt))
        add("head.W2", _uniform(rng, (c.head_hidden, c.n_classes), c.head_hidden, dt))
        add("head.b2", _uniform(rng, (c.n_classes,), c.head_hidden, dt))

    def parameters(self) -> Dict[str, Tensor]:
        return self.params

    def set_input_scales(self, series_scale: float, spec_scale: float) -> None:
        self.config = replace(self.config, series_scale=float(series_scale), spec_scale=float(spec_scale))

    def astype(self, dtype) -> "AlesalModel":
        """Copy of the model with parameters and statistics cast to ``dtype``."""
        clone = AlesalModel.__new__(AlesalModel)
        clone.config, clone.dtype = self.config, np.dtype(dtype)
        clone.params = {k: Tensor(v.data.astype(dtype), requires_grad=True) for k, v in self.params.items()}
        clone.bn = {k: BatchNormState(s.mean.astype(dtype), s.var.astype(dtype), s.updates, s.momentum, s.eps)
                    for k, s in self.bn.items()}
        return clone

    # -- branches -----------------------------------------------------------

    def _me_block(self, x: Tensor, idx: int, training: bool) -> Tensor:
        c, p = self.config, self.params
        w = p[f"me.conv{idx}.weight"]
        P, C, Cin, k = w.shape
        w = ops.reshape(w, (P, 1, C, Cin, k))
        b = ops.reshape(p[f"me.conv{idx}.bias"], (P, 1, C))
        y = ops.conv1d(x, w, b, padding="same")
        gamma = ops.reshape(p[f"me.bn{idx}.gamma"], (P, 1, C, 1))
        beta = ops.reshape(p[f"me.bn{idx}.beta"], (P, 1, C, 1))
        y = ops.batchnorm(y, gamma, beta, self.bn[f"me.bn{idx}"], axes=(1, 3), training=training)
        return ops.maxpool1d(ops.relu(y), c.pool)

    def morphology_features(self, series: np.ndarray, training: bool = False) -> Tensor:
        """``[B, P, L]`` amplitude series -> concatenated feature maps ``[B, N, L']``."""
        c = self.config
        B, P, L = series.shape
        if P != c.P or L != c.series_len:
            raise ValueError(f"series shape {series.shape} does not match (B, {c.P}, {c.series_len})")
        x = Tensor(np.ascontiguousarray(np.transpose(series, (1, 0, 2))[:, :, None, :] * c.series_scale,
                                        dtype=self.dtype))
        y = self._me_block(self._me_block(x, 1, training), 2, training)  # [P, B, C, L']
        y = ops.transpose(y, (1, 0, 2, 3))
        return ops.reshape(y, (B, c.N, y.shape[-1]))

    def pair_attention(self, E: Tensor):
        """Channel gating of the concatenated maps; returns ``(u, weights)``."""
        c, p = self.config, self.params
        B = E.shape[0]
        if c.with_PA:
            pooled = ops.global_average_pool(E)  # [B, N]
            kernel = ops.reshape(p["pa.conv"], (1, 1, c.pa_kernel))
            gate = ops.sigmoid(ops.conv1d(ops.reshape(pooled, (B, 1, c.N)), kernel, padding="same"))
            w = ops.reshape(gate, (B, c.N))
            E = ops.mul(E, ops.reshape(w, (B, c.N, 1)))
            weights = w.data
        else:
            weights = None
        flat = ops.reshape(E, (B, -1))
        return ops.dense(flat, p["pa.Wd"], p["pa.bd"]), weights

    def time_attention(self, specs: np.ndarray):
        """``[B, P, T, F]`` spectrograms -> per-pair latents ``[B, P*latent]`` and attention maps."""
        c, p = self.config, self.params
        B, P, T, F = specs.shape
        if P != c.P or F != c.n_bins:
            raise ValueError(f"spectrogram shape {specs.shape} does not match (B, {c.P}, T, {c.n_bins})")
        if T < 1:
            raise ValueError("spectrogram needs at least one frame")
        x = Tensor(np.ascontiguousarray(np.transpose(specs, (1, 2, 0, 3)) * c.spec_scale, dtype=self.dtype))
        R = ops.gru(x, p["gru.W"], p["gru.U"], p["gru.b"])  # [P, T, B, H]
        R = ops.transpose(R, (0, 2, 1, 3))  # [P, B, T, H]
        H = c.gru_hidden

        def per_pair(name, *shape):
            return ops.reshape(p[name], (P, 1) + shape)

        att = ops.self_attention_residual(
            R, per_pair("ta.Wq", H, c.d_k), per_pair("ta.Wk", H, c.d_k), per_pair("ta.Wv", H, H),
            p["ta.WD"], per_pair("ta.bD", c.ta_latent), use_attention=c.with_TA,
        )
        latent = ops.transpose(att.latent, (1, 0, 2))  # [B, P, latent]
        weights = None if att.weights is None else np.transpose(att.weights, (1, 0, 2, 3))
        return ops.reshape(latent, (B, P * c.ta_latent)), weights

    # -- full network -----------------------------------------------------------

    def forward(self, series: np.ndarray, specs: np.ndarray, training: bool = False) -> ForwardOutput:
        c, p = self.config, self.params
        feats, ta_w, pa_w = [], None, None
        if c.use_spectrum:
            r, ta_w = self.time_attention(np.asarray(specs))
            feats.append(r)
        if c.use_amplitude:
            u, pa_w = self.pair_attention(self.morphology_features(np.asarray(series), training))
            feats.append(u)
        z = feats[0] if len(feats) == 1 else ops.concat(feats, axis=-1)
        hidden = ops.relu(ops.dense(z, p["head.W1"], p["head.b1"]))
        logits = ops.dense(hidden, p["head.W2"], p["head.b2"])
        probs = ops._softmax(logits.data.astype(np.float64), axis=-1)
        return ForwardOutput(logits, probs, ta_w, pa_w)

    def predict_proba(self, series: np.ndarray, specs: np.ndarray, batch_size: int = 256) -> np.ndarray:
        out = [self.forward(series[i : i + batch_size], specs[i : i + batch_size]).probs
               for i in range(0, len(series), batch_size)]
        return np.concatenate(out)

    # -- serialization ------------------------------------------------------------

    def state_arrays(self) -> Dict[str, np.ndarray]:
        arrays = {f"param/{k}": v.data for k, v in self.params.items()}
        for k, s in self.bn.items():
            arrays[f"bn/{k}/mean"] = s.mean
            arrays[f"bn/{k}/var"] = s.var
            arrays[f"bn/{k}/updates"] = np.array([s.updates], dtype=np.int64)
        return arrays

    def load_state_arrays(self, arrays: Dict[str, np.ndarray]) -> None:
        for k in self.params:
            self.params[k].data = arrays[f"param/{k}"].astype(self.dtype)
        for k, s in self.bn.items():
            s.mean = arrays[f"bn/{k}/mean"].astype(self.dtype)
            s.var = arrays[f"bn/{k}/var"].astype(self.dtype)
            s.updates = int(arrays[f"bn/{k}/updates"][0])

    def to_bytes(self, extra: Optional[dict] = None) -> bytes:
        meta = {"kind": "alesal", "model": self.config.to_dict(), "dtype": self.dtype.name}
        if extra:
            meta.update(extra)
        return ckpt_dumps(self.state_arrays(), meta)

    @classmethod
    def from_bytes(cls, blob: bytes):
        arrays, meta = ckpt_loads(blob)
        if meta.get("kind") != "alesal":
            raise ValueError(f"checkpoint holds a {meta.get('kind')!r} model")
        model = cls(ModelConfig(**meta["model"]), dtype=meta.get("dtype", "float32"))
        model.load_state_arrays(arrays)
        return model, meta
