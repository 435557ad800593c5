"""Training with stochastically quantized weights and straight-through gradients.

Real-valued weights live in [-1, 1]. Every training forward pass samples
binary conv weights (+1 with probability (w+1)/2) and ternary FC weights
(sign(w) with probability |w|), so the sampled weight is unbiased. The
backward pass treats the sampler as identity inside [-1, 1].

The forward pass follows the dense reference exactly: top-left anchored
correlation with zero padding on the right/bottom, ReLU, 4x4 max-pool,
the thermometer quantizers used between layers, and no biases. A learned
positive scale on the logits only sets the softmax temperature; argmax is
unaffected, so it is not part of the exported network.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .netplan import DigitalSum, NetworkSpec, Preset, QuantizedWeights


class _Straight(torch.autograd.Function):
    """Apply a sampled/rounded replacement, pass gradients straight through within [-1, 1]."""

    @staticmethod
    def forward(ctx, w, q):
        ctx.save_for_backward(w)
        return q

    @staticmethod
    def backward(ctx, g):
        (w,) = ctx.saved_tensors
        return g * (w.abs() <= 1).to(g.dtype), None


def stochastic_binarize(w: torch.Tensor, generator: torch.Generator | None = None) -> torch.Tensor:
    """+1 with probability (w+1)/2, else -1."""
    u = torch.rand(w.shape, generator=generator, dtype=w.dtype, device=w.device)
    return torch.where(u < (w.detach() + 1) / 2, 1.0, -1.0).to(w.dtype)


def stochastic_ternarize(w: torch.Tensor, generator: torch.Generator | None = None) -> torch.Tensor:
    """sign(w) with probability |w|, else 0."""
    u = torch.rand(w.shape, generator=generator, dtype=w.dtype, device=w.device)
    wd = w.detach()
    return torch.where(u < wd.abs(), torch.sign(wd), torch.zeros_like(wd))


def deterministic_binarize(w: torch.Tensor) -> torch.Tensor:
    return torch.where(w.detach() >= 0, 1.0, -1.0).to(w.dtype)


def deterministic_ternarize(w: torch.Tensor) -> torch.Tensor:
    wd = w.detach()
    return torch.where(wd.abs() <= 1 / 3, torch.zeros_like(wd), torch.sign(wd))


class _Thermometer(torch.autograd.Function):
    """code * q with code counting thresholds (c - 1/2) q reached; identity gradient on [0, range]."""

    @staticmethod
    def forward(ctx, x, bits, range_max):
        ctx.save_for_backward(x)
        ctx.range_max = range_max
        q = range_max / (2 ** bits - 1)
        code = torch.zeros_like(x)
        for c in range(1, 2 ** bits):
            code += (x >= (c - 0.5) * q).to(x.dtype)
        return code * q

    @staticmethod
    def backward(ctx, g):
        (x,) = ctx.saved_tensors
        inside = (x >= 0) & (x <= ctx.range_max)
        return g * inside.to(g.dtype), None, None


def thermometer(x, bits: int, range_max: float):
    return _Thermometer.apply(x, bits, range_max)


def correlate(x: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
    """Top-left anchored correlation with zero padding on the right/bottom."""
    k = w.shape[-1]
    return F.conv2d(F.pad(x, (0, k - 1, 0, k - 1)), w)


class RealValuedNet(nn.Module):
    """Real weights for one preset; ``conv2`` is (n_out, n_in, k, k)."""

    def __init__(self, spec: NetworkSpec, seed: int = 0, init_scale: float = 0.02):
        super().__init__()
        self.spec = spec
        g = torch.Generator().manual_seed(seed)
        k = spec.k

        def uni(*shape):
            return nn.Parameter(torch.rand(*shape, generator=g) * 2 - 1)

        self.conv1 = uni(spec.conv_filters[0], 1, k, k)
        if spec.preset is Preset.THREE_LAYER:
            self.conv2 = uni(spec.conv_filters[1], spec.conv_filters[0], k, k)
        else:
            self.conv2 = None
        self.fc = uni(spec.n_neurons, spec.fc_inputs)
        self.log_scale = nn.Parameter(torch.tensor(math.log(init_scale)))

    def quantized_params(self):
        return [p for p in (self.conv1, self.conv2, self.fc) if p is not None]

    @torch.no_grad()
    def clip_(self):
        for p in self.quantized_params():
            p.clamp_(-1, 1)

    def _weights(self, mode: str, generator):
        if mode == "stochastic":
            b = lambda w: _Straight.apply(w, stochastic_binarize(w, generator))
            t = lambda w: _Straight.apply(w, stochastic_ternarize(w, generator))
        elif mode == "deterministic":
            b = lambda w: _Straight.apply(w, deterministic_binarize(w))
            t = lambda w: _Straight.apply(w, deterministic_ternarize(w))
        else:
            raise ValueError(f"mode must be 'stochastic' or 'deterministic', got {mode!r}")
        return b(self.conv1), (b(self.conv2) if self.conv2 is not None else None), t(self.fc)

    def activations(self, x: torch.Tensor, mode: str = "deterministic", generator=None) -> torch.Tensor:
        """Un-scaled neuron sums for binary images ``x`` of shape (N, side, side)."""
        spec = self.spec
        if x.ndim != 3 or x.shape[1:] != (spec.input_side, spec.input_side):
            raise ValueError(f"expected (N, {spec.input_side}, {spec.input_side}) inputs, got {tuple(x.shape)}")
        w1, w2, wf = self._weights(mode, generator)
        h = F.relu(correlate(x[:, None].to(w1.dtype), w1))
        h = F.max_pool2d(h, spec.pool)
        if w2 is not None:
            h = thermometer(h, spec.interlayer_bits, spec.interlayer_range)
            h = F.relu(correlate(h, w2))
            if isinstance(spec.summation, DigitalSum):
                h = thermometer(h, spec.summation.bits, spec.summation.range_max)
        return h.flatten(1) @ wf.t()

    def forward(self, x, mode: str = "stochastic", generator=None):
        return self.activations(x, mode, generator) * self.log_scale.exp()


def export_quantized(net: RealValuedNet) -> QuantizedWeights:
    """Deterministic weights: conv bit = [w >= 0], FC = 0 when |w| <= 1/3 else sign(w)."""
    with torch.no_grad():
        conv = [(net.conv1[:, 0] >= 0).numpy().astype(np.uint8)]
        if net.conv2 is not None:
            # stored filter i * n_out + o connects input map i to output map o
            w2 = net.conv2.permute(1, 0, 2, 3).reshape(-1, net.spec.k, net.spec.k)
            conv.append((w2 >= 0).numpy().astype(np.uint8))
        fc = deterministic_ternarize(net.fc).numpy().astype(np.int8)
    return QuantizedWeights(net.spec.preset, conv, fc)


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 100
    lr: float = 0.01
    momentum: float = 0.9
    optimizer: str = "sgd"   # or "adam"
    lr_drop_at: float = 2 / 3
    lr_drop: float = 0.1
    seed: int = 0
    # lr of the logit scale (its gradient scale is unrelated to the weights')
    scale_lr: float = 0.001
    dtype: torch.dtype = torch.float32
    log_every: int = 0


@dataclass
class History:
    epoch_loss: list = field(default_factory=list)
    epoch_time: list = field(default_factory=list)
    test_accuracy: list = field(default_factory=list)


def _batches(images, labels, order, size, dtype):
    for s in range(0, len(order), size):
        idx = order[s:s + size]
        yield torch.from_numpy(images[idx]).to(dtype), torch.from_numpy(labels[idx].astype(np.int64))


def fit(net: RealValuedNet, images, labels, config: TrainConfig = TrainConfig(),
        eval_set=None, log=print) -> History:
    """Minibatch SGD on binary images (N, side, side); deterministic given the seed.

    ``eval_set`` is an optional (images, labels) pair scored with exported
    deterministic weights after every epoch.
    """
    torch.manual_seed(config.seed)
    torch.use_deterministic_algorithms(True)
    net.to(config.dtype)
    images = np.asarray(images)
    labels = np.asarray(labels)
    rng = np.random.default_rng(config.seed)
    gen = torch.Generator().manual_seed(config.seed)
    groups = [{"params": net.quantized_params(), "lr": config.lr},
              {"params": [net.log_scale], "lr": config.scale_lr}]
    if config.optimizer == "sgd":
        opt = torch.optim.SGD(groups, lr=config.lr, momentum=config.momentum)
    elif config.optimizer == "adam":
        opt = torch.optim.Adam(groups, lr=config.lr)
    else:
        raise ValueError(f"unknown optimizer {config.optimizer!r}")
    drop_epoch = int(round(config.epochs * config.lr_drop_at))
    hist = History()
    for epoch in range(config.epochs):
        if epoch == drop_epoch and epoch > 0:
            for grp in opt.param_groups:
                grp["lr"] *= config.lr_drop
        t0 = time.time()
        order = rng.permutation(len(images))
        total, n = 0.0, 0
        net.train()
        for bi, (x, y) in enumerate(_batches(images, labels, order, config.batch_size, config.dtype)):
            loss = F.cross_entropy(net(x, "stochastic", gen), y)
            opt.zero_grad()
            loss.backward()
            opt.step()
            net.clip_()
            total += loss.item() * len(y)
            n += len(y)
            if config.log_every and log and bi % config.log_every == 0:
                log(f"  epoch {epoch} batch {bi} loss {loss.item():.4f}")
        hist.epoch_loss.append(total / max(n, 1))
        hist.epoch_time.append(time.time() - t0)
        msg = f"epoch {epoch + 1}/{config.epochs} loss {hist.epoch_loss[-1]:.4f} ({hist.epoch_time[-1]:.0f}s)"
        if eval_set is not None:
            acc = accuracy(net, *eval_set)
            hist.test_accuracy.append(acc)
            msg += f" deterministic test acc {acc:.4f}"
        if log:
            log(msg)
    return hist


@torch.no_grad()
def mean_loss(net: RealValuedNet, images, labels, mode="deterministic", batch=500, seed=0) -> float:
    gen = torch.Generator().manual_seed(seed)
    dtype = net.fc.dtype
    tot = 0.0
    for s in range(0, len(images), batch):
        x = torch.from_numpy(np.asarray(images[s:s + batch])).to(dtype)
        y = torch.from_numpy(np.asarray(labels[s:s + batch]).astype(np.int64))
        tot += F.cross_entropy(net(x, mode, gen), y, reduction="sum").item()
    return tot / len(images)


@torch.no_grad()
def accuracy(net: RealValuedNet, images, labels, batch=500) -> float:
    """Accuracy of the deterministic (exported) weights."""
    dtype = net.fc.dtype
    hits = 0
    for s in range(0, len(images), batch):
        x = torch.from_numpy(np.asarray(images[s:s + batch])).to(dtype)
        a = net.activations(x, "deterministic")
        hits += int((a.argmax(1).numpy() == np.asarray(labels[s:s + batch])).sum())
    return hits / len(images)
