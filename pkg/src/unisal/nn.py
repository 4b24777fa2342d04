"""Layers and parameter containers.

A Module tracks three kinds of state: shared parameters, per-domain private
parameters (DomainParams), and normalization statistics (BNStats /
StatsList).  named_parameters() walks the tree and yields
(path, tag, tensor) triples where tag is "shared" or "domainN"; checkpoints
and the optimizer key everything by that pair.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as te
from .tensor import BNStats, Tensor, dropout_key


@dataclass
class ForwardCtx:
    """Everything a forward pass needs besides the input itself."""
    domain: int
    training: bool = False
    step: int = 0           # optimizer step; keys feedforward dropout masks
    clip_tag: int = 0       # clip identity; keys the recurrent dropout mask
    rng_seed: int = 0
    bn_training: bool | None = None  # override for shared (encoder) BN layers


class DomainParams:
    """One logical parameter, with a private copy per domain."""

    def __init__(self, tensors):
        self.tensors = list(tensors)

    def __getitem__(self, d):
        return self.tensors[d]

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self):
        return len(self.tensors)


class StatsList:
    """Per-domain running statistics for a domain-adaptive BN layer."""

    def __init__(self, items):
        self.items = list(items)

    def __getitem__(self, d):
        return self.items[d]

    def __iter__(self):
        return iter(self.items)

    def __len__(self):
        return len(self.items)


class Module:
    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_dparams", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_dbuffers", {})
        object.__setattr__(self, "_children", {})

    def __setattr__(self, name, value):
        if isinstance(value, Tensor):
            self._params[name] = value
        elif isinstance(value, DomainParams):
            self._dparams[name] = value
        elif isinstance(value, BNStats):
            self._buffers[name] = value
        elif isinstance(value, StatsList):
            self._dbuffers[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix=""):
        for name, t in self._params.items():
            yield prefix + name, "shared", t
        for name, dp in self._dparams.items():
            for d, t in enumerate(dp):
                yield prefix + name, f"domain{d}", t
        for name, child in self._children.items():
            yield from child.named_parameters(prefix + name + ".")

    def named_stats(self, prefix=""):
        for name, st in self._buffers.items():
            yield prefix + name + ".running_mean", "shared", st.mean
            yield prefix + name + ".running_var", "shared", st.var
        for name, sl in self._dbuffers.items():
            for d, st in enumerate(sl):
                yield prefix + name + ".running_mean", f"domain{d}", st.mean
                yield prefix + name + ".running_var", f"domain{d}", st.var
        for name, child in self._children.items():
            yield from child.named_stats(prefix + name + ".")

    def zero_grad(self):
        for _, _, t in self.named_parameters():
            t.grad = None


class ModuleList(Module):
    def __init__(self, mods=()):
        super().__init__()
        self._count = 0
        for m in mods:
            self.append(m)

    def append(self, mod):
        setattr(self, str(self._count), mod)
        object.__setattr__(self, "_count", self._count + 1)

    def __getitem__(self, i):
        return self._children[str(i)]

    def __iter__(self):
        return (self._children[str(i)] for i in range(self._count))

    def __len__(self):
        return self._count


# ------------------------------------------------------------------ conv/bn

class Conv2d(Module):
    def __init__(self, c_in, c_out, kernel_size, *, stride=1, padding=None,
                 groups=1, bias=True, rng):
        super().__init__()
        k = kernel_size
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        self.groups = groups
        fan_in = (c_in // groups) * k * k
        self.weight = Tensor(rng.standard_normal((c_out, c_in // groups, k, k))
                             * np.sqrt(2.0 / fan_in), requires_grad=True)
        self.bias = Tensor(np.zeros(c_out), requires_grad=True) if bias else None

    def forward(self, x):
        return te.conv2d(x, self.weight, self.bias, stride=self.stride,
                         padding=self.padding, groups=self.groups)


class BatchNorm(Module):
    """Shared-statistics BN. ctx.bn_training overrides the mode so the
    encoder's stats can be held frozen while the rest of the net trains."""

    def __init__(self, channels, *, momentum=0.1, eps=1e-5):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.stats = BNStats.create(channels)

    def forward(self, x, ctx):
        training = ctx.training if ctx.bn_training is None else ctx.bn_training
        out, _ = te.batch_stats_normalize(x, self.gamma, self.beta, self.stats,
                                          momentum=self.momentum, eps=self.eps,
                                          training=training)
        return out


class DomainAdaptiveBatchNorm(Module):
    """BN with statistics and affine parameters both private per domain."""

    def __init__(self, channels, n_domains, *, momentum=0.1, eps=1e-5):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.gamma = DomainParams(Tensor(np.ones(channels), requires_grad=True)
                                  for _ in range(n_domains))
        self.beta = DomainParams(Tensor(np.zeros(channels), requires_grad=True)
                                 for _ in range(n_domains))
        self.stats = StatsList(BNStats.create(channels) for _ in range(n_domains))

    def forward(self, x, ctx):
        d = ctx.domain
        out, _ = te.batch_stats_normalize(x, self.gamma[d], self.beta[d],
                                          self.stats[d], momentum=self.momentum,
                                          eps=self.eps, training=ctx.training)
        return out


def _make_bn(channels, n_domains, momentum, eps):
    if n_domains is None:
        return BatchNorm(channels, momentum=momentum, eps=eps)
    return DomainAdaptiveBatchNorm(channels, n_domains, momentum=momentum, eps=eps)


class ConvPW(Module):
    """Pointwise 1x1 conv + BN; ReLU6 only when it does not compress
    (c_in <= c_out), so projection layers stay linear."""

    def __init__(self, c_in, c_out, *, n_domains=None, rng, activate=None,
                 momentum=0.1, eps=1e-5):
        super().__init__()
        self.conv = Conv2d(c_in, c_out, 1, bias=False, rng=rng)
        self.bn = _make_bn(c_out, n_domains, momentum, eps)
        self.activate = (c_in <= c_out) if activate is None else activate

    def forward(self, x, ctx):
        out = self.bn.forward(self.conv.forward(x), ctx)
        return out.relu6() if self.activate else out


class ConvDW(Module):
    """Depthwise 3x3 conv + BN + ReLU6."""

    def __init__(self, channels, *, stride=1, n_domains=None, rng,
                 momentum=0.1, eps=1e-5):
        super().__init__()
        self.conv = Conv2d(channels, channels, 3, stride=stride,
                           groups=channels, bias=False, rng=rng)
        self.bn = _make_bn(channels, n_domains, momentum, eps)

    def forward(self, x, ctx):
        return self.bn.forward(self.conv.forward(x), ctx).relu6()


class Dropout2d(Module):
    """Channel dropout whose mask is keyed by (run seed, layer tag, step)."""

    def __init__(self, p, tag):
        super().__init__()
        self.p = p
        self.tag = tag

    def forward(self, x, ctx):
        key = dropout_key(ctx.rng_seed, self.tag, ctx.step)
        return te.dropout2d(x, self.p, training=ctx.training, rng_seed=key)


# ------------------------------------------------------------------ priors

def _prior_template():
    # (mu_x, mu_y, sigma_x, sigma_y): one broad center map, a 3x3 grid of
    # tight maps, three horizontal bands, three vertical bands
    rows = [(0.5, 0.5, 0.5, 0.5)]
    for y in (0.25, 0.5, 0.75):
        for x in (0.25, 0.5, 0.75):
            rows.append((x, y, 0.15, 0.15))
    for y in (0.25, 0.5, 0.75):
        rows.append((0.5, y, 0.6, 0.1))
    for x in (0.25, 0.5, 0.75):
        rows.append((x, 0.5, 0.1, 0.6))
    return np.array(rows)


class GaussianPriorBank(Module):
    """Learnable axis-aligned Gaussian prior maps, private per domain.

    g(x, y) = gamma * exp(-(x - mu_x)^2 / sigma_x^2 - (y - mu_y)^2 / sigma_y^2)

    with sigma = exp(lambda), so the optimized parameters (mu, lambda) range
    over all reals while sigma stays positive.  gamma is a fixed amplitude.
    The grid spans [0, 1] inclusive in both axes.
    """

    def __init__(self, n_maps=16, n_domains=1, *, gamma=6.0, rng_seed=0):
        super().__init__()
        self.n_maps = n_maps
        self.gamma = gamma
        base = _prior_template()
        if n_maps <= len(base):
            rows = base[:n_maps]
        else:
            reps = -(-n_maps // len(base))
            rows = np.tile(base, (reps, 1))[:n_maps]
            jitter = np.random.default_rng(rng_seed).uniform(
                -0.05, 0.05, size=(n_maps, 2))
            jitter[:len(base)] = 0.0
            rows = rows.copy()
            rows[:, :2] = np.clip(rows[:, :2] + jitter, 0.05, 0.95)

        def per_domain(col, transform=lambda v: v):
            return DomainParams(Tensor(transform(rows[:, col]).copy(),
                                       requires_grad=True)
                                for _ in range(n_domains))

        self.mu_x = per_domain(0)
        self.mu_y = per_domain(1)
        self.lam_x = per_domain(2, np.log)
        self.lam_y = per_domain(3, np.log)

    def render(self, hw, domain):
        """Evaluate the maps on an (h, w) grid; returns (1, n_maps, h, w)."""
        h, w = hw
        n = self.n_maps
        xs = Tensor(np.linspace(0.0, 1.0, w).reshape(1, 1, 1, w))
        ys = Tensor(np.linspace(0.0, 1.0, h).reshape(1, 1, h, 1))
        mx = self.mu_x[domain].reshape((1, n, 1, 1))
        my = self.mu_y[domain].reshape((1, n, 1, 1))
        inv_sx2 = (self.lam_x[domain].reshape((1, n, 1, 1)) * -2.0).exp()
        inv_sy2 = (self.lam_y[domain].reshape((1, n, 1, 1)) * -2.0).exp()
        ex = ((xs - mx) ** 2) * inv_sx2
        ey = ((ys - my) ** 2) * inv_sy2
        return (-(ex + ey)).exp() * self.gamma


# ------------------------------------------------------------------ recurrence

class SepConv(Module):
    """Depthwise 3x3 followed by a pointwise conv, as the recurrent gates use."""

    def __init__(self, c_in, c_out, *, bias=True, rng):
        super().__init__()
        self.dw = Conv2d(c_in, c_in, 3, groups=c_in, bias=False, rng=rng)
        self.pw = Conv2d(c_in, c_out, 1, bias=bias, rng=rng)

    def forward(self, x):
        return self.pw.forward(self.dw.forward(x))


class ConvGRUCell(Module):
    """Convolutional GRU.  Hidden update:

        z = sigmoid(Wz*x + Uz*h)
        r = sigmoid(Wr*x + Ur*h)
        h~ = tanh(Wh*x + Uh*(r . h_drop))
        h' = (1 - z) . h + z . h~

    where the dropout mask, when given, touches only the hidden state
    entering the candidate path.
    """

    def __init__(self, channels, *, rng):
        super().__init__()
        self.wz = SepConv(channels, channels, bias=True, rng=rng)
        self.uz = SepConv(channels, channels, bias=False, rng=rng)
        self.wr = SepConv(channels, channels, bias=True, rng=rng)
        self.ur = SepConv(channels, channels, bias=False, rng=rng)
        self.wh = SepConv(channels, channels, bias=True, rng=rng)
        self.uh = SepConv(channels, channels, bias=False, rng=rng)

    def step(self, x, h, drop_mask=None):
        z = (self.wz.forward(x) + self.uz.forward(h)).sigmoid()
        r = (self.wr.forward(x) + self.ur.forward(h)).sigmoid()
        hd = h * drop_mask if drop_mask is not None else h
        hh = (self.wh.forward(x) + self.uh.forward(r * hd)).tanh()
        return (1.0 - z) * h + z * hh


class BypassRNN(Module):
    """Recurrent residual over a frame sequence; static domains route around
    it entirely, so the recurrent subgraph is never executed for them."""

    def __init__(self, channels, *, rng, p_drop=0.2, tag="rnn"):
        super().__init__()
        self.channels = channels
        self.p_drop = p_drop
        self.tag = tag
        self.cell = ConvGRUCell(channels, rng=rng)
        self.out_pw = Conv2d(channels, channels, 1, bias=True, rng=rng)

    def forward(self, frames, ctx, *, dynamic):
        if not dynamic:
            return frames
        n, c = frames[0].shape[0], frames[0].shape[1]
        h = Tensor(np.zeros(frames[0].shape))
        mask = None
        if ctx.training and self.p_drop > 0.0:
            key = dropout_key(ctx.rng_seed, self.tag + ".recurrent", ctx.clip_tag)
            gen = np.random.Generator(np.random.Philox(key=key))
            keep = (gen.random((n, c)) >= self.p_drop).astype(np.float64)
            mask = Tensor(keep.reshape(n, c, 1, 1) / (1.0 - self.p_drop))
        outs = []
        for f in frames:
            h = self.cell.step(f, h, mask)
            outs.append(f + self.out_pw.forward(h))
        return outs


# ------------------------------------------------------------------ output head

class DomainFusion(Module):
    """Per-domain 1x1 convolution collapsing features to a single map."""

    def __init__(self, c_in, n_domains, *, rng):
        super().__init__()
        w0 = rng.standard_normal((1, c_in, 1, 1)) * np.sqrt(1.0 / c_in)
        self.weight = DomainParams(Tensor(w0.copy(), requires_grad=True)
                                   for _ in range(n_domains))
        self.bias = DomainParams(Tensor(np.zeros(1), requires_grad=True)
                                 for _ in range(n_domains))

    def forward(self, x, ctx):
        d = ctx.domain
        return te.conv2d(x, self.weight[d], self.bias[d])


def gaussian_kernel_2d(size, sigma):
    grid = np.arange(size) - size // 2
    k = np.exp(-(grid[None, :] ** 2 + grid[:, None] ** 2) / (2.0 * sigma ** 2))
    return k / k.sum()


class DomainSmoothing(Module):
    """Per-domain learned smoothing kernel applied to the fused map at the
    output resolution.  Initialized to a unit-mass Gaussian."""

    def __init__(self, n_domains, *, kernel_size=41, sigma=6.0, rng):
        super().__init__()
        self.kernel_size = kernel_size
        k0 = gaussian_kernel_2d(kernel_size, sigma).reshape(1, 1, kernel_size,
                                                            kernel_size)
        self.kernel = DomainParams(Tensor(k0.copy(), requires_grad=True)
                                   for _ in range(n_domains))

    def forward(self, x, ctx):
        return te.conv2d(x, self.kernel[ctx.domain],
                         padding=self.kernel_size // 2)


# ------------------------------------------------------------------ encoder

class InvertedResidual(Module):
    """Expand (1x1) -> depthwise 3x3 (stride) -> linear project (1x1),
    with a residual connection when the shape is preserved."""

    def __init__(self, c_in, c_out, stride, expansion, *, rng,
                 momentum=0.1, eps=1e-5):
        super().__init__()
        mid = c_in * expansion
        self.expand = (ConvPW(c_in, mid, rng=rng, momentum=momentum, eps=eps)
                       if expansion != 1 else None)
        self.dw = ConvDW(mid, stride=stride, rng=rng, momentum=momentum, eps=eps)
        self.project = ConvPW(mid, c_out, rng=rng, activate=False,
                              momentum=momentum, eps=eps)
        self.residual = stride == 1 and c_in == c_out

    def forward(self, x, ctx):
        h = self.expand.forward(x, ctx) if self.expand is not None else x
        h = self.project.forward(self.dw.forward(h, ctx), ctx)
        return x + h if self.residual else h


class Encoder(Module):
    """Inverted-residual stack with shared BN.  stages entries are
    (expansion, out_channels, repeats, stride); tap names map to stage
    indices whose output feeds the decoder skips."""

    def __init__(self, *, stem, stages, out_channels, taps, rng,
                 momentum=0.1, eps=1e-5):
        super().__init__()
        self.stem_conv = Conv2d(3, stem, 3, stride=2, bias=False, rng=rng)
        self.stem_bn = BatchNorm(stem, momentum=momentum, eps=eps)
        self.blocks = ModuleList()
        stage_last = []
        stage_alphas = []
        stage_channels = []
        c, alpha = stem, 1
        for (t, c_out, n, s) in stages:
            for i in range(n):
                stride = s if i == 0 else 1
                if stride == 2:
                    alpha += 1
                self.blocks.append(InvertedResidual(c, c_out, stride, t, rng=rng,
                                                    momentum=momentum, eps=eps))
                c = c_out
            stage_last.append(len(self.blocks) - 1)
            stage_alphas.append(alpha)
            stage_channels.append(c)
        self.head = ConvPW(c, out_channels, rng=rng, momentum=momentum, eps=eps)
        self.out_channels = out_channels
        self.stage_alphas = tuple(stage_alphas)
        self.stage_channels = tuple(stage_channels)
        self.alpha_out = alpha
        self._stage_last = tuple(stage_last)
        for name, idx in taps.items():
            if not 0 <= idx < len(stage_last):
                raise ValueError(f"tap {name} points at stage {idx}, "
                                 f"but only {len(stage_last)} stages exist")
        self.taps = dict(taps)

    def forward(self, x, ctx):
        h = self.stem_bn.forward(self.stem_conv.forward(x), ctx).relu6()
        stage_out = []
        ends = set(self._stage_last)
        for i, blk in enumerate(self.blocks):
            h = blk.forward(h, ctx)
            if i in ends:
                stage_out.append(h)
        out = self.head.forward(h, ctx)
        tap_tensors = {name: stage_out[idx] for name, idx in self.taps.items()}
        return out, tap_tensors
