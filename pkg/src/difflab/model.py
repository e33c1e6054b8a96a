"""MLP denoiser with a sinusoidal time embedding and one output head per
prediction type."""

from __future__ import annotations

import base64
import hashlib
import json
from dataclasses import asdict, dataclass

import numpy as np

from difflab import tensorcore as tc
from difflab.predictor import PredictionType, parse_pred_type

__all__ = [
    "ModelError",
    "NumericError",
    "ModelConfig",
    "DenoiserModel",
    "embed_time",
    "encode_array",
    "decode_array",
    "config_hash",
]

MAX_FREQUENCY = 1000.0


class ModelError(ValueError):
    pass


class NumericError(FloatingPointError):
    def __init__(self, message: str, layer: int | None = None):
        super().__init__(message)
        self.layer = layer


def embed_time(t, dim: int, T: int) -> np.ndarray:
    """Sinusoidal features of ``t / T``.

    Frequencies are geometrically spaced from 1 to ``MAX_FREQUENCY`` radians
    per unit of ``t / T``.  Returns ``(dim,)`` for a scalar ``t`` and
    ``(n, dim)`` for an array of timesteps; the first half are sines.
    """
    if dim % 2 or dim <= 0:
        raise ModelError(f"time embedding dim must be a positive even number, got {dim}")
    half = dim // 2
    if half == 1:
        freqs = np.ones(1)
    else:
        freqs = MAX_FREQUENCY ** (np.arange(half) / (half - 1))
    u = np.asarray(t, dtype=np.float64) / T
    ang = np.multiply.outer(u, freqs)
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


@dataclass(frozen=True)
class ModelConfig:
    data_dim: int = 2
    time_embed_dim: int = 32
    hidden: tuple[int, ...] = (128, 128, 128)
    heads: tuple[str, ...] = ("a",)
    T: int = 1000
    zero_heads: bool = False

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        heads = tuple(parse_pred_type(h).letter for h in self.heads)
        if not heads:
            raise ModelError("at least one head is required")
        if len(set(heads)) != len(heads):
            raise ModelError(f"duplicate heads: {heads}")
        # canonical d, v, a order
        object.__setattr__(self, "heads", tuple(sorted(heads, key=lambda h: parse_pred_type(h))))
        if self.time_embed_dim % 2:
            raise ModelError("time_embed_dim must be even")

    @property
    def head_types(self) -> tuple[PredictionType, ...]:
        return tuple(parse_pred_type(h) for h in self.heads)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        d["heads"] = list(self.heads)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{**d, "hidden": tuple(d["hidden"]), "heads": tuple(d["heads"])})


def config_hash(doc) -> str:
    blob = json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def encode_array(a: np.ndarray) -> dict:
    data = np.ascontiguousarray(a, dtype="<f8").tobytes()
    return {"shape": list(a.shape), "dtype": "<f8", "data": base64.b64encode(data).decode("ascii")}


def decode_array(doc: dict) -> np.ndarray:
    raw = base64.b64decode(doc["data"])
    return np.frombuffer(raw, dtype="<f8").reshape(doc["shape"]).astype(np.float64)


class DenoiserModel:
    """Shared SiLU trunk over ``[x_t, embed(t)]`` with a linear head per type.

    Parameters live in ``self.params`` (name -> leaf :class:`Tensor`); each
    head owns ``head.<letter>.w`` / ``head.<letter>.b``.
    """

    def __init__(self, config: ModelConfig, init_rng: np.random.Generator | None = None):
        self.config = config
        self.params: dict[str, tc.Tensor] = {}
        if init_rng is None:
            init_rng = np.random.default_rng(0)
        fan_in = config.data_dim + config.time_embed_dim
        for i, width in enumerate(config.hidden):
            w = init_rng.standard_normal((fan_in, width)) * np.sqrt(2.0 / fan_in)
            self._add(f"trunk.{i}.w", w)
            self._add(f"trunk.{i}.b", np.zeros(width))
            fan_in = width
        for pt in config.head_types:
            if config.zero_heads:
                w = np.zeros((fan_in, config.data_dim))
            else:
                w = init_rng.standard_normal((fan_in, config.data_dim)) * np.sqrt(1.0 / fan_in)
            self._add(f"head.{pt.letter}.w", w)
            self._add(f"head.{pt.letter}.b", np.zeros(config.data_dim))

    def _add(self, name: str, value: np.ndarray) -> None:
        self.params[name] = tc.Tensor(value, requires_grad=True)

    @property
    def heads(self) -> tuple[PredictionType, ...]:
        return self.config.head_types

    @property
    def param_count(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def head_param_names(self, pt: PredictionType) -> tuple[str, str]:
        return f"head.{pt.letter}.w", f"head.{pt.letter}.b"

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def forward(self, x_t, t_batch) -> dict[PredictionType, tc.Tensor]:
        """Per-head predictions, recorded on the tape."""
        x_t = np.asarray(x_t, dtype=np.float64)
        t_batch = np.asarray(t_batch)
        if x_t.ndim != 2 or x_t.shape[1] != self.config.data_dim:
            raise ModelError(f"x_t must be (batch, {self.config.data_dim}), got {x_t.shape}")
        if t_batch.shape != (x_t.shape[0],):
            raise ModelError("need exactly one timestep per row")
        emb = embed_time(t_batch, self.config.time_embed_dim, self.config.T)
        h = tc.Tensor(np.concatenate([x_t, emb], axis=1))
        p = self.params
        layer = 0
        try:
            for layer in range(len(self.config.hidden)):
                h = tc.silu(tc.add(tc.matmul(h, p[f"trunk.{layer}.w"]), p[f"trunk.{layer}.b"]))
            layer = len(self.config.hidden)
            out = {}
            for pt in self.heads:
                wn, bn = self.head_param_names(pt)
                out[pt] = tc.add(tc.matmul(h, p[wn]), p[bn])
        except tc.NonFiniteError as exc:
            raise NumericError(f"non-finite activation in layer {layer}: {exc}", layer) from exc
        return out

    def predict(self, x_t, t_batch, chunk: int = 32768) -> dict[PredictionType, np.ndarray]:
        """Tape-free forward pass returning plain arrays."""
        x_t = np.asarray(x_t, dtype=np.float64)
        t_batch = np.broadcast_to(np.asarray(t_batch), (x_t.shape[0],))
        parts: dict[PredictionType, list[np.ndarray]] = {pt: [] for pt in self.heads}
        with tc.no_grad():
            for start in range(0, x_t.shape[0], chunk):
                out = self.forward(x_t[start:start + chunk], t_batch[start:start + chunk])
                for pt, v in out.items():
                    parts[pt].append(v.data)
        return {pt: (np.concatenate(v, axis=0) if v else np.zeros((0, self.config.data_dim)))
                for pt, v in parts.items()}

    # -- serialization -------------------------------------------------

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self.params):
            raise ModelError("parameter names do not match the model architecture")
        for k, v in state.items():
            if v.shape != self.params[k].shape:
                raise ModelError(f"shape mismatch for {k}: {v.shape} vs {self.params[k].shape}")
            self.params[k].data = np.array(v, dtype=np.float64)

    def arch_hash(self) -> str:
        return config_hash(self.config.to_dict())

    def encode_params(self) -> dict:
        return {k: encode_array(v.data) for k, v in sorted(self.params.items())}

    @classmethod
    def from_encoded(cls, config: ModelConfig, doc: dict) -> "DenoiserModel":
        m = cls(config)
        m.load_state_dict({k: decode_array(v) for k, v in doc.items()})
        return m
