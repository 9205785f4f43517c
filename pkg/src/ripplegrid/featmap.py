"""Trigonometric feature maps over token vectors, with exact reverse-mode gradients.

The adaptive map passes sin/cos projections of the input through a learned
affine layer and a ReLU, so downstream dot products stay non-negative. The
random-trig map keeps the classical frozen random-feature form and exists as
a baseline; its projection matrix receives no gradient by contract.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np


class FeatureMapKind(Enum):
    DETERMINISTIC_ADAPTIVE = "deterministic-adaptive"
    RANDOM_TRIG = "random-trig"


@dataclass(frozen=True)
class FeatureMapParams:
    kind: FeatureMapKind
    w1: np.ndarray              # (freq_dim, in_dim)
    w2: np.ndarray | None       # (out_dim, 2*freq_dim), adaptive only
    b2: np.ndarray | None       # (out_dim,), adaptive only
    exp_norm_scale: bool = False  # random-trig: multiply by exp(|x|^2 / 2)

    def __post_init__(self):
        if self.w1.ndim != 2:
            raise ValueError("w1 must be a matrix")
        if self.kind is FeatureMapKind.DETERMINISTIC_ADAPTIVE:
            if self.w2 is None or self.b2 is None:
                raise ValueError("adaptive map needs w2 and b2")
            if self.w2.shape[1] != 2 * self.w1.shape[0]:
                raise ValueError("w2 columns must equal twice the frequency count")
            if self.b2.shape != (self.w2.shape[0],):
                raise ValueError("b2 must match w2 rows")
            if self.exp_norm_scale:
                raise ValueError("exp_norm_scale applies to the random-trig map only")
        else:
            if self.w2 is not None or self.b2 is not None:
                raise ValueError("random-trig map has no second layer")

    @property
    def in_dim(self) -> int:
        return self.w1.shape[1]

    @property
    def out_dim(self) -> int:
        if self.kind is FeatureMapKind.DETERMINISTIC_ADAPTIVE:
            return self.w2.shape[0]
        return 2 * self.w1.shape[0]


@dataclass
class FeatureMapGrads:
    grad_x: np.ndarray
    grad_w1: np.ndarray
    grad_w2: np.ndarray | None
    grad_b2: np.ndarray | None


def init_feature_map(kind: FeatureMapKind, in_dim: int, rng: np.random.Generator,
                     freq_dim: int | None = None, out_dim: int | None = None,
                     exp_norm_scale: bool = False) -> FeatureMapParams:
    """Fresh parameters; frequency and output widths default to the input width."""
    freq_dim = in_dim if freq_dim is None else freq_dim
    out_dim = in_dim if out_dim is None else out_dim
    w1 = rng.standard_normal((freq_dim, in_dim))
    if kind is FeatureMapKind.RANDOM_TRIG:
        return FeatureMapParams(kind=kind, w1=w1, w2=None, b2=None,
                                exp_norm_scale=exp_norm_scale)
    w2 = rng.standard_normal((out_dim, 2 * freq_dim)) / np.sqrt(2.0 * freq_dim)
    b2 = np.zeros(out_dim)
    return FeatureMapParams(kind=kind, w1=w1, w2=w2, b2=b2)


def feature_forward(x: np.ndarray, params: FeatureMapParams) -> np.ndarray:
    """Map (..., in_dim) vectors to (..., out_dim) features."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.in_dim:
        raise ValueError(f"input width {x.shape[-1]} does not match map width {params.in_dim}")
    z = x @ params.w1.T
    u = np.concatenate((np.sin(z), np.cos(z)), axis=-1)
    if params.kind is FeatureMapKind.DETERMINISTIC_ADAPTIVE:
        return np.maximum(u @ params.w2.T + params.b2, 0.0)
    out = u / np.sqrt(params.w1.shape[0])
    if params.exp_norm_scale:
        out = out * np.exp(0.5 * np.sum(x * x, axis=-1, keepdims=True))
    return out


def feature_vjp(x: np.ndarray, params: FeatureMapParams,
                upstream: np.ndarray) -> FeatureMapGrads:
    """Pull an (..., out_dim) cotangent back to the input and the parameters.

    Parameter gradients are summed over all leading axes. The ReLU uses the
    zero subgradient at its kink, and the frozen random-trig w1 reports an
    exactly zero gradient while the input gradient still flows.
    """
    x = np.asarray(x, dtype=np.float64)
    g = np.asarray(upstream, dtype=np.float64)
    if g.shape != x.shape[:-1] + (params.out_dim,):
        raise ValueError("upstream shape does not match the forward output")
    freq = params.w1.shape[0]
    z = x @ params.w1.T
    sin_z, cos_z = np.sin(z), np.cos(z)
    u = np.concatenate((sin_z, cos_z), axis=-1)
    batch_axes = tuple(range(x.ndim - 1))

    if params.kind is FeatureMapKind.DETERMINISTIC_ADAPTIVE:
        a = u @ params.w2.T + params.b2
        ga = np.where(a > 0.0, g, 0.0)
        grad_b2 = ga.sum(axis=batch_axes) if batch_axes else ga.copy()
        grad_w2 = np.tensordot(ga, u, axes=(batch_axes, batch_axes)) if batch_axes \
            else np.outer(ga, u)
        gu = ga @ params.w2
        gz = gu[..., :freq] * cos_z - gu[..., freq:] * sin_z
        grad_w1 = np.tensordot(gz, x, axes=(batch_axes, batch_axes)) if batch_axes \
            else np.outer(gz, x)
        return FeatureMapGrads(grad_x=gz @ params.w1, grad_w1=grad_w1,
                               grad_w2=grad_w2, grad_b2=grad_b2)

    scale = 1.0 / np.sqrt(freq)
    if params.exp_norm_scale:
        norm_half = 0.5 * np.sum(x * x, axis=-1, keepdims=True)
        prefac = np.exp(norm_half)
        gu = g * (scale * prefac)
        base = u * scale
        # d prefac / dx = prefac * x, applied to the full feature dot product
        extra = np.sum(g * base, axis=-1, keepdims=True) * prefac * x
    else:
        gu = g * scale
        extra = 0.0
    gz = gu[..., :freq] * cos_z - gu[..., freq:] * sin_z
    grad_x = gz @ params.w1 + extra
    return FeatureMapGrads(grad_x=grad_x, grad_w1=np.zeros_like(params.w1),
                           grad_w2=None, grad_b2=None)
