"""Bidirectional selective state-space encoder with think tokens.

Each direction runs a gated block: input projection splits into a main and a
gate branch; the main branch goes through a causal depthwise convolution,
SiLU, input-dependent discretization and the selective scan; the gate branch
modulates the scan output through SiLU before the output projection and a
residual connection.  Per layer the two directions are concatenated and
projected back to d_model.  Learnable "think" embeddings are appended after
the real phone positions and dropped again after the final layer.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .errors import ConfigError, ContractError
from .scan import selective_scan


@dataclass
class EncoderConfig:
    d_model: int = 64
    d_state: int = 16
    expand: int = 2
    n_layers: int = 2
    conv_width: int = 4
    n_think: int = 4
    d_attn: int = 0  # 0 -> d_model // 2, resolved by the model assembly
    scan_impl: str = "sequential"

    @property
    def d_inner(self) -> int:
        return self.d_model * self.expand

    def validate(self):
        if min(self.d_model, self.d_state, self.expand, self.n_layers, self.conv_width) < 1:
            raise ConfigError("encoder dimensions must all be >= 1")
        if self.n_think < 0:
            raise ConfigError("think token count must be >= 0")
        if self.scan_impl not in ("sequential", "parallel"):
            raise ConfigError(f"unknown scan_impl {self.scan_impl!r}")


class ParamStore:
    """Flat name -> Tensor registry for every learnable parameter."""

    def __init__(self):
        self._params: dict[str, dc.Tensor] = {}

    def add(self, name: str, value: np.ndarray) -> dc.Tensor:
        if name in self._params:
            raise ContractError(f"duplicate parameter {name!r}")
        t = dc.Tensor(np.asarray(value, dtype=np.float64), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> dc.Tensor:
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def names(self):
        return list(self._params)

    def tensors(self):
        return list(self._params.values())

    def items(self):
        return self._params.items()

    def zero_grad(self):
        for t in self._params.values():
            t.zero_grad()

    def n_scalars(self) -> int:
        return sum(t.data.size for t in self._params.values())


def he_uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = np.sqrt(6.0 / max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    bound = np.sqrt(6.0 / max(fan_in + fan_out, 1))
    return rng.uniform(-bound, bound, size=shape)


def init_encoder_params(cfg: EncoderConfig, rng: np.random.Generator, store: ParamStore,
                        prefix: str = "enc") -> None:
    cfg.validate()
    dm, di, ds, w = cfg.d_model, cfg.d_inner, cfg.d_state, cfg.conv_width
    if cfg.n_think > 0:
        store.add(f"{prefix}.think", rng.normal(0.0, 0.02, size=(cfg.n_think, dm)))
    for layer in range(cfg.n_layers):
        for direction in ("fwd", "bwd"):
            p = f"{prefix}.l{layer}.{direction}"
            store.add(f"{p}.in_proj.w", xavier_uniform(rng, dm, 2 * di, (dm, 2 * di)))
            store.add(f"{p}.in_proj.b", np.zeros(2 * di))
            store.add(f"{p}.conv.k", he_uniform(rng, w, (w, di)))
            store.add(f"{p}.conv.b", np.zeros(di))
            store.add(f"{p}.delta_proj.w", xavier_uniform(rng, di, di, (di, di)))
            # softplus(0.54) ~ 1.0: start with a mid-range step size
            store.add(f"{p}.delta_proj.b", np.full(di, 0.54))
            store.add(f"{p}.b_proj.w", xavier_uniform(rng, di, ds, (di, ds)))
            store.add(f"{p}.c_proj.w", xavier_uniform(rng, di, ds, (di, ds)))
            # A = -exp(raw); raw 0 gives A = -1
            store.add(f"{p}.a_raw", np.zeros((di, ds)))
            store.add(f"{p}.d_skip", np.ones(di))
            # small output projection: blocks start near the identity map
            store.add(f"{p}.out_proj.w", 0.1 * xavier_uniform(rng, di, dm, (di, dm)))
            store.add(f"{p}.out_proj.b", np.zeros(dm))
        store.add(f"{prefix}.l{layer}.comb.w",
                  xavier_uniform(rng, 2 * dm, dm, (2 * dm, dm)))
        store.add(f"{prefix}.l{layer}.comb.b", np.zeros(dm))


def discretize(delta: dc.Tensor, a: dc.Tensor, b_t: dc.Tensor):
    """Zero-order hold on the state path, Euler on the input path.

    delta (T, C) must be strictly positive; a (C, S) is the diagonal state
    matrix; b_t (T, S) the per-step input projection.  Returns
    A_bar = exp(delta * a) and B_bar = delta * b_t, both (T, C, S).
    """
    delta = dc.as_tensor(delta)
    if np.any(delta.data <= 0.0):
        raise ContractError("discretize: delta must be strictly positive")
    a_bar = dc.exp(dc.outer_time_channel(delta, a))
    b_bar = dc.outer_time_state(delta, b_t)
    return a_bar, b_bar


def mamba_block(x: dc.Tensor, params: ParamStore, prefix: str,
                cfg: EncoderConfig) -> dc.Tensor:
    """One gated selective-SSM block with residual connection; x is (T, d_model)."""
    if x.data.shape[0] < 1:
        raise ContractError("mamba_block: empty sequence")
    di = cfg.d_inner
    xz = dc.linear(x, params[f"{prefix}.in_proj.w"], params[f"{prefix}.in_proj.b"])
    main = dc.slice_cols(xz, 0, di)
    gate = dc.slice_cols(xz, di, 2 * di)

    u = dc.silu(dc.conv1d_causal(main, params[f"{prefix}.conv.k"], params[f"{prefix}.conv.b"]))
    delta = dc.softplus(dc.linear(u, params[f"{prefix}.delta_proj.w"],
                                  params[f"{prefix}.delta_proj.b"]))
    b_t = dc.matmul(u, params[f"{prefix}.b_proj.w"])
    c_t = dc.matmul(u, params[f"{prefix}.c_proj.w"])
    a = dc.scale(dc.exp(params[f"{prefix}.a_raw"]), -1.0)
    a_bar, b_bar = discretize(delta, a, b_t)
    y = selective_scan(u, a_bar, b_bar, c_t, params[f"{prefix}.d_skip"], impl=cfg.scan_impl)

    gated = dc.mul(y, dc.silu(gate))
    out = dc.linear(gated, params[f"{prefix}.out_proj.w"], params[f"{prefix}.out_proj.b"])
    return dc.add(out, x)


def append_think_tokens(x_hat: dc.Tensor, think: dc.Tensor | None) -> dc.Tensor:
    """Postpend the K think embeddings after the N real positions."""
    if think is None or think.data.shape[0] == 0:
        return x_hat
    return dc.concat_rows([x_hat, think])


def bimamba_encode(x_ext: dc.Tensor, n_phones: int, params: ParamStore,
                   cfg: EncoderConfig, prefix: str = "enc") -> dc.Tensor:
    """Run the bidirectional stack over (N+K, d_model); return the N phone rows."""
    if n_phones < 1:
        raise ContractError("bimamba_encode: utterance has no phones")
    h = x_ext
    for layer in range(cfg.n_layers):
        p = f"{prefix}.l{layer}"
        f = mamba_block(h, params, f"{p}.fwd", cfg)
        b = dc.reverse_rows(mamba_block(dc.reverse_rows(h), params, f"{p}.bwd", cfg))
        h = dc.linear(dc.concat_cols(f, b), params[f"{p}.comb.w"], params[f"{p}.comb.b"])
    return dc.slice_rows(h, 0, n_phones)
