"""Dense reference forward pass for the quantized networks.

Ideal arithmetic with the same conventions the array routines use:
top-left anchored +-1 correlation with zero padding at each block's
right/bottom edge, ReLU, aligned max-pooling, optional 3-bit inter-layer
quantization, ternary FC sums, no biases.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .netplan import DigitalSum, NetworkSpec, Preset, QuantizedWeights


@dataclass(frozen=True)
class OracleConfig:
    preset: Preset
    model_interlayer_quantization: bool = True
    # quantize FC inputs like the digital stack-count summation does
    model_fc_quantization: bool = True

    @classmethod
    def for_weights(cls, weights: QuantizedWeights, **kw) -> "OracleConfig":
        return cls(weights.preset, **kw)


def correlate(maps: np.ndarray, signs: np.ndarray) -> np.ndarray:
    """out[..., y, x] = sum_{i,j} signs[..., i, j] * maps[..., y+i, x+j], zero padded.

    ``maps`` (..., H, W) and ``signs`` (..., k, k) broadcast against each other.
    """
    k = signs.shape[-1]
    h, w = maps.shape[-2:]
    pad = [(0, 0)] * (maps.ndim - 2) + [(0, k - 1), (0, k - 1)]
    padded = np.pad(maps, pad)
    out = 0.0
    for i in range(k):
        for j in range(k):
            out = out + signs[..., i, j, None, None] * padded[..., i:i + h, j:j + w]
    return out


def conv_bank(maps: np.ndarray, signs: np.ndarray) -> np.ndarray:
    """Multi-channel correlation summed over input maps.

    ``maps`` (N, C, H, W), ``signs`` (C, O, k, k) -> (N, O, H, W); same
    anchoring and padding as :func:`correlate`.
    """
    k = signs.shape[-1]
    padded = np.pad(maps, [(0, 0), (0, 0), (0, k - 1), (0, k - 1)])
    win = np.lib.stride_tricks.sliding_window_view(padded, (k, k), axis=(2, 3))
    n, c, h, w = maps.shape
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * h * w, c * k * k)
    out = cols @ signs.transpose(0, 2, 3, 1).reshape(c * k * k, -1)      # (N*H*W, O)
    return np.ascontiguousarray(out.reshape(n, h, w, -1).transpose(0, 3, 1, 2))


def maxpool(maps: np.ndarray, pool: int) -> np.ndarray:
    # elementwise maxima of strided slices; numpy reductions over a
    # length-4 axis are an order of magnitude slower
    cols = maps[..., 0::pool]
    for j in range(1, pool):
        cols = np.maximum(cols, maps[..., j::pool])
    out = cols[..., 0::pool, :]
    for i in range(1, pool):
        out = np.maximum(out, cols[..., i::pool, :])
    return out


def quantize(values: np.ndarray, bits: int, range_max: float) -> np.ndarray:
    """code * q with code = number of thresholds (c - 1/2) q that the value reaches."""
    q = range_max / (2 ** bits - 1)
    code = np.zeros(values.shape)
    for c in range(1, 2 ** bits):
        code += values >= (c - 0.5) * q
    return code * q


def signs_of(bits: np.ndarray) -> np.ndarray:
    return 2.0 * np.asarray(bits, dtype=float) - 1.0


def dense_forward_batch(weights: QuantizedWeights, images, config: OracleConfig | None = None,
                        spec: NetworkSpec | None = None, keep_stages: bool = False):
    """Forward pass for a batch of binary images (N, side, side).

    Returns ``(activations (N, 10), stages)``; stages is a dict of
    intermediate tensors when ``keep_stages`` is set.
    """
    config = config or OracleConfig.for_weights(weights)
    spec = spec or NetworkSpec.for_preset(weights.preset)
    x = np.asarray(images, dtype=float)
    if x.ndim != 3 or x.shape[1:] != (spec.input_side, spec.input_side):
        raise ValueError(f"expected images of shape (N, {spec.input_side}, {spec.input_side}), got {x.shape}")
    stages = {}
    s1 = signs_of(weights.conv[0])                                  # (M, k, k)
    conv1 = conv_bank(x[:, None], s1[None])                         # (N, M, H, W)
    act = np.maximum(conv1, 0.0)
    pooled = maxpool(act, spec.pool)
    if keep_stages:
        stages.update(conv1=conv1, pooled=pooled)
    if weights.preset is Preset.TWO_LAYER:
        feats = pooled
    else:
        if config.model_interlayer_quantization:
            pooled = quantize(pooled, spec.interlayer_bits, spec.interlayer_range)
        n_in = pooled.shape[1]
        n_out = len(weights.conv[1]) // n_in
        s2 = signs_of(weights.conv[1]).reshape(n_in, n_out, spec.k, spec.k)
        conv2 = conv_bank(pooled, s2)
        feats = np.maximum(conv2, 0.0)
        if keep_stages:
            stages.update(pooled_q=pooled, conv2=conv2)
        summ = spec.summation
        if config.model_fc_quantization and isinstance(summ, DigitalSum):
            feats = quantize(feats, summ.bits, summ.range_max)
    flat = feats.reshape(x.shape[0], -1)
    if flat.shape[1] != weights.fc.shape[1]:
        raise ValueError(f"{flat.shape[1]} activations but fc expects {weights.fc.shape[1]}")
    acts = flat @ weights.fc.T.astype(float)
    if keep_stages:
        stages["features"] = flat
    return acts, stages


def dense_forward(weights: QuantizedWeights, image, config: OracleConfig | None = None,
                  spec: NetworkSpec | None = None):
    """Single-image forward pass: ``(activations (10,), per-stage tensors)``."""
    acts, stages = dense_forward_batch(weights, np.asarray(image)[None], config, spec, keep_stages=True)
    return acts[0], {k: v[0] for k, v in stages.items()}


def predict(weights: QuantizedWeights, images, config=None, spec=None, batch: int = 100) -> np.ndarray:
    out = []
    for s in range(0, len(images), batch):
        acts, _ = dense_forward_batch(weights, images[s:s + batch], config, spec)
        out.append(np.argmax(acts, axis=1))  # argmax picks the lowest index on ties
    return np.concatenate(out) if out else np.zeros(0, int)


def score(weights: QuantizedWeights, images, labels, config=None, spec=None) -> float:
    """Fraction of images whose argmax neuron matches the label."""
    if len(images) == 0:
        raise ValueError("cannot score an empty dataset")
    preds = predict(weights, images, config, spec)
    return float(np.mean(preds == np.asarray(labels)))
