"""Positional encoding and the deformation MLP.

The network maps the encoded reference-frame positions of a Gaussian and the
encoded query time to blend weights over the B reference frames plus
per-frame offsets of position, rotation (quaternion increment) and scale.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray

from .autodiff import Node, Tape, TapeStateError

HEADS = ("w_logits", "dx", "dr", "ds")
_HEAD_WIDTH = {"w_logits": 1, "dx": 3, "dr": 4, "ds": 3}

__all__ = ["EncodingConfig", "DeformNetParams", "DeformOutput", "encode", "init_params", "forward", "backward",
           "TapeStateError"]


@dataclass(frozen=True)
class EncodingConfig:
    L_pos: int = 10
    L_time: int = 10

    def __post_init__(self) -> None:
        if self.L_pos < 1 or self.L_time < 1:
            raise ValueError("encoding frequency counts must be >= 1")


def encode(r, L: int) -> NDArray:
    """(sin(2^k pi r), cos(2^k pi r)) for k < L, componentwise along the last axis.

    A scalar yields a 2L-vector; an (..., D) array yields (..., 2 L D).
    """
    r = np.asarray(r, dtype=np.float64)
    scalar = r.ndim == 0
    r = np.atleast_1d(r)
    freqs = (2.0 ** np.arange(L)) * np.pi
    ang = r[..., None] * freqs  # (..., D, L)
    out = np.stack([np.sin(ang), np.cos(ang)], axis=-1)  # (..., D, L, 2)
    out = out.reshape(r.shape[:-1] + (-1,))
    return out if not scalar else out.reshape(-1)


@dataclass
class DeformNetParams:
    B: int
    encoding: EncodingConfig
    depth: int
    width: int
    skips: tuple[int, ...]
    hidden: list[tuple[NDArray, NDArray]]
    heads: dict[str, tuple[NDArray, NDArray]]
    version: int = field(default=0, compare=False)

    @property
    def input_dim(self) -> int:
        return self.B * 3 * 2 * self.encoding.L_pos + 2 * self.encoding.L_time

    def named_arrays(self) -> list[tuple[str, NDArray]]:
        out = []
        for i, (W, b) in enumerate(self.hidden):
            out += [(f"hidden.{i}.W", W), (f"hidden.{i}.b", b)]
        for name in HEADS:
            W, b = self.heads[name]
            out += [(f"{name}.W", W), (f"{name}.b", b)]
        return out

    def set_named(self, name: str, value: NDArray) -> None:
        parts = name.split(".")
        pos = 0 if parts[-1] == "W" else 1
        if parts[0] == "hidden":
            pair = list(self.hidden[int(parts[1])])
            pair[pos] = value
            self.hidden[int(parts[1])] = tuple(pair)
        else:
            pair = list(self.heads[parts[0]])
            pair[pos] = value
            self.heads[parts[0]] = tuple(pair)

    def bump(self) -> None:
        self.version += 1

    def copy(self) -> DeformNetParams:
        return DeformNetParams(self.B, self.encoding, self.depth, self.width, tuple(self.skips),
                               [(W.copy(), b.copy()) for W, b in self.hidden],
                               {k: (W.copy(), b.copy()) for k, (W, b) in self.heads.items()})

    def check_shapes(self) -> None:
        width_in = self.input_dim
        for i, (W, b) in enumerate(self.hidden):
            expect = (width_in + (self.input_dim if i in self.skips and i > 0 else 0), self.width)
            if W.shape != expect or b.shape != (self.width,):
                raise ValueError(f"hidden layer {i}: weight shape {W.shape}, expected {expect}")
            width_in = self.width
        for name in HEADS:
            W, b = self.heads[name]
            n_out = self.B * _HEAD_WIDTH[name]
            if W.shape != (self.width, n_out) or b.shape != (n_out,):
                raise ValueError(f"head '{name}': weight shape {W.shape}, expected {(self.width, n_out)} "
                                 f"for B={self.B}")


def init_params(B: int, encoding: EncodingConfig = EncodingConfig(), depth: int = 8, width: int = 256,
                skips: tuple[int, ...] = (4,), seed: int = 0) -> DeformNetParams:
    """Hidden layers use uniform fan-in scaling; all heads start at zero (identity deformation)."""
    rng = np.random.default_rng(seed)
    p = DeformNetParams(B, encoding, depth, width, tuple(skips), [], {})
    width_in = p.input_dim
    for i in range(depth):
        fan_in = width_in + (p.input_dim if i in p.skips and i > 0 else 0)
        bound = 1.0 / np.sqrt(fan_in)
        p.hidden.append((rng.uniform(-bound, bound, (fan_in, width)), rng.uniform(-bound, bound, width)))
        width_in = width
    for name in HEADS:
        n_out = B * _HEAD_WIDTH[name]
        p.heads[name] = (np.zeros((width, n_out)), np.zeros(n_out))
    return p


@dataclass
class DeformOutput:
    w: NDArray  # (N, B), rows sum to 1
    dx: NDArray  # (N, B, 3)
    dr: NDArray  # (N, B, 4)
    ds: NDArray  # (N, B, 3)
    tape: Tape | None = field(default=None, repr=False)
    _nodes: dict = field(default=None, repr=False)
    _leaves: dict = field(default=None, repr=False)


def network_input(params: DeformNetParams, xbar: NDArray, t) -> NDArray:
    xbar = np.asarray(xbar, dtype=np.float64)
    N = xbar.shape[0]
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (N,))
    return np.concatenate([encode(xbar.reshape(N, -1), params.encoding.L_pos),
                           encode(t[:, None], params.encoding.L_time)], axis=1)


def forward(params: DeformNetParams, xbar: NDArray, t, record: bool = True) -> DeformOutput:
    """Evaluate the network for N Gaussians with reference positions ``xbar`` (N, B, 3) at time ``t``.

    ``xbar`` is encoded as a constant, so no gradient reaches it through the network.
    """
    xbar = np.asarray(xbar, dtype=np.float64)
    if xbar.ndim != 3 or xbar.shape[2] != 3:
        raise ValueError(f"xbar must be (N, B, 3), got {xbar.shape}")
    if xbar.shape[1] != params.B:
        raise ValueError(f"xbar has {xbar.shape[1]} reference frames but head 'w_logits' is sized for "
                         f"B={params.B}")
    params.check_shapes()
    version = params.version
    tape = Tape(guard=lambda: params.version == version)
    inp = tape.constant(network_input(params, xbar, t))
    leaves: dict[str, Node] = {}
    h = inp
    for i, (W, b) in enumerate(params.hidden):
        if i in params.skips and i > 0:
            h = tape.concat([inp, h])
        Wn, bn = tape.leaf(W, f"hidden.{i}.W"), tape.leaf(b, f"hidden.{i}.b")
        leaves[Wn.name], leaves[bn.name] = Wn, bn
        h = tape.relu(tape.linear(h, Wn, bn))
    nodes = {}
    for name in HEADS:
        W, b = params.heads[name]
        Wn, bn = tape.leaf(W, f"{name}.W"), tape.leaf(b, f"{name}.b")
        leaves[Wn.name], leaves[bn.name] = Wn, bn
        nodes[name] = tape.linear(h, Wn, bn)
    nodes["w"] = tape.softmax(nodes["w_logits"])
    N, B = xbar.shape[:2]
    return DeformOutput(
        w=nodes["w"].value, dx=nodes["dx"].value.reshape(N, B, 3), dr=nodes["dr"].value.reshape(N, B, 4),
        ds=nodes["ds"].value.reshape(N, B, 3), tape=tape if record else None, _nodes=nodes, _leaves=leaves)


def backward(out: DeformOutput, g_w=None, g_dx=None, g_dr=None, g_ds=None) -> dict[str, NDArray]:
    """Parameter gradients given upstream gradients on the four outputs."""
    if out.tape is None:
        raise TapeStateError("forward pass was not recorded")
    N = out.w.shape[0]
    seeds = {}
    for key, g in (("w", g_w), ("dx", g_dx), ("dr", g_dr), ("ds", g_ds)):
        if g is not None:
            seeds[out._nodes[key]] = np.asarray(g, dtype=np.float64).reshape(N, -1)
    out.tape.backward(seeds)
    return {name: (leaf.grad if leaf.grad is not None else np.zeros_like(leaf.value))
            for name, leaf in out._leaves.items()}
