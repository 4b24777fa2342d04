"""Full saliency network: encoder, prior maps, bypass recurrence, decoder
with skips, per-domain fusion and smoothing, spatial softmax.

Wiring notes.  The published layer table declares the first decoder stage as
ConvDW(1280), ConvPW(1280, 256) and the post-upsample stage input as 200,
but the actual concatenations are 1280 + 16 prior maps and 128 + 64 skip
channels.  The builder treats the table numbers as nominal: the first layer
of each consumer adapts to the true concatenation width, and the build
report logs both numbers.

Scale accounting: the encoder output sits at alpha_out (resolution divided
by 2**alpha_out); the two bilinear x2 stages bring the decoder to
alpha_out - 2, where fusion and smoothing run; nearest upsampling by
2**(alpha_out - 2) restores the input resolution.  Skip taps must therefore
sit at alpha_out - 1 and alpha_out - 2, and every domain resolution must be
divisible by 2**alpha_out.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as te
from .domains import DomainRegistry
from .tensor import Tensor


@dataclass
class ModelConfig:
    """Widths and wiring knobs.  Channel counts are nominal; they are scaled
    by width_multiplier (floored at 1) when the model is built."""

    stem: int
    stages: tuple
    encoder_out: int
    taps: dict
    n_prior_maps: int = 16
    prior_gamma: float = 6.0
    rnn_channels: int = 256
    rnn_dropout: float = 0.2
    skip_4x: tuple = (128, 64)
    skip_2x: tuple = (256, 128)
    us2: tuple = (768, 128)
    post_us2: tuple = (400, 64)
    post_us2_nominal_in: int = 200
    skip_dropout: float = 0.6
    smoothing_kernel: int = 41
    smoothing_sigma: float = 6.0
    width_multiplier: float = 1.0
    shared_domain_params: bool = False

    @staticmethod
    def full_size():
        """Benchmark-scale profile reproducing the published layer table.

        The inverted-residual strides are arranged so the 64-channel stage
        lands at alpha 3 and the 160-channel stage at alpha 4, where the
        skip connections expect them; total downsampling is 32x.
        """
        return ModelConfig(
            stem=32,
            stages=((1, 16, 1, 1), (6, 24, 2, 2), (6, 32, 3, 2),
                    (6, 64, 4, 1), (6, 96, 3, 2), (6, 160, 3, 1),
                    (6, 320, 1, 2)),
            encoder_out=1280,
            taps={"skip_4x": 3, "skip_2x": 5},
        )

    @staticmethod
    def desk(width_multiplier=0.125):
        """Small profile for CPU-scale experiments: three downsampling
        stages (8x total), so 24x32 inputs are valid, scaled thin."""
        return ModelConfig(
            stem=64,
            stages=((1, 64, 1, 1), (6, 128, 2, 2), (6, 192, 2, 2)),
            encoder_out=512,
            taps={"skip_4x": 0, "skip_2x": 1},
            width_multiplier=width_multiplier,
        )

    def width(self, c):
        return max(1, int(round(c * self.width_multiplier)))

    def to_dict(self):
        return {
            "stem": self.stem,
            "stages": [list(s) for s in self.stages],
            "encoder_out": self.encoder_out,
            "taps": dict(self.taps),
            "n_prior_maps": self.n_prior_maps,
            "prior_gamma": self.prior_gamma,
            "rnn_channels": self.rnn_channels,
            "rnn_dropout": self.rnn_dropout,
            "skip_4x": list(self.skip_4x),
            "skip_2x": list(self.skip_2x),
            "us2": list(self.us2),
            "post_us2": list(self.post_us2),
            "post_us2_nominal_in": self.post_us2_nominal_in,
            "skip_dropout": self.skip_dropout,
            "smoothing_kernel": self.smoothing_kernel,
            "smoothing_sigma": self.smoothing_sigma,
            "width_multiplier": self.width_multiplier,
            "shared_domain_params": self.shared_domain_params,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["stages"] = tuple(tuple(s) for s in d["stages"])
        d["taps"] = {k: int(v) for k, v in d["taps"].items()}
        for key in ("skip_4x", "skip_2x", "us2", "post_us2"):
            d[key] = tuple(d[key])
        return cls(**d)


class _Skip(nn.Module):
    """ConvPW, DO(p), ConvPW side branch from an encoder tap."""

    def __init__(self, c_in, c_mid, c_out, p, tag, n_domains, rng):
        super().__init__()
        self.pw1 = nn.ConvPW(c_in, c_mid, n_domains=n_domains, rng=rng)
        self.drop = nn.Dropout2d(p, tag)
        self.pw2 = nn.ConvPW(c_mid, c_out, n_domains=n_domains, rng=rng)

    def forward(self, x, ctx):
        h = self.pw1.forward(x, ctx)
        h = self.drop.forward(h, ctx)
        return self.pw2.forward(h, ctx)


class _Bottleneck(nn.Module):
    """ConvPW expand, ConvDW, ConvPW project; used by both decoder stages."""

    def __init__(self, c_in, c_mid, c_out, n_domains, rng):
        super().__init__()
        self.pw1 = nn.ConvPW(c_in, c_mid, n_domains=n_domains, rng=rng)
        self.dw = nn.ConvDW(c_mid, n_domains=n_domains, rng=rng)
        self.pw2 = nn.ConvPW(c_mid, c_out, n_domains=n_domains, rng=rng)

    def forward(self, x, ctx):
        h = self.pw1.forward(x, ctx)
        h = self.dw.forward(h, ctx)
        return self.pw2.forward(h, ctx)


class UnisalModel(nn.Module):
    """The assembled network.  Encoder batch norm is shared across domains;
    all decoder batch norms, the priors, fusion, and smoothing are
    domain-private unless config.shared_domain_params collapses every
    domain onto one parameter slot."""

    def __init__(self, config: ModelConfig, registry: DomainRegistry,
                 rng_seed: int = 0):
        super().__init__()
        self.config = config
        self.registry = registry
        self.rng_seed = rng_seed
        self.n_slots = 1 if config.shared_domain_params else max(1, len(registry))
        nd = self.n_slots
        w = config.width
        rng = np.random.default_rng(rng_seed)

        missing = {"skip_4x", "skip_2x"} - set(config.taps)
        if missing:
            raise ValueError(f"config.taps must name {sorted(missing)}")
        if config.smoothing_kernel % 2 != 1:
            raise ValueError("smoothing kernel size must be odd")

        stages = tuple((t, w(c), n, s) for (t, c, n, s) in config.stages)
        self.encoder = nn.Encoder(stem=w(config.stem), stages=stages,
                                  out_channels=w(config.encoder_out),
                                  taps=dict(config.taps), rng=rng)
        a_out = self.encoder.alpha_out
        if a_out < 2:
            raise ValueError(f"encoder must downsample at least 4x for the "
                             f"two decoder upsampling stages, got alpha {a_out}")
        a2 = self.encoder.stage_alphas[config.taps["skip_2x"]]
        if a2 != a_out - 1:
            raise ValueError(f"US1+Skip-2x junction: tap at alpha {a2}, "
                             f"US1 output at alpha {a_out - 1}")
        a4 = self.encoder.stage_alphas[config.taps["skip_4x"]]
        if a4 != a_out - 2:
            raise ValueError(f"US2+Skip-4x junction: tap at alpha {a4}, "
                             f"US2 output at alpha {a_out - 2}")
        self.final_factor = 2 ** (a_out - 2)
        for dom in registry:
            h, wd = dom.input_resolution
            div = 2 ** a_out
            if h % div or wd % div:
                raise ValueError(f"domain {dom.name}: resolution ({h}, {wd}) "
                                 f"is not divisible by {div}")

        self.priors = nn.GaussianPriorBank(config.n_prior_maps, nd,
                                           gamma=config.prior_gamma,
                                           rng_seed=rng_seed)
        enc_c = self.encoder.out_channels
        post_in = enc_c + config.n_prior_maps
        rnn_c = w(config.rnn_channels)
        self.post_cnn_dw = nn.ConvDW(post_in, n_domains=nd, rng=rng)
        self.post_cnn_pw = nn.ConvPW(post_in, rnn_c, n_domains=nd, rng=rng)
        self.rnn = nn.BypassRNN(rnn_c, rng=rng, p_drop=config.rnn_dropout)

        c2_in = self.encoder.stage_channels[config.taps["skip_2x"]]
        c4_in = self.encoder.stage_channels[config.taps["skip_4x"]]
        s2_mid, s2_out = w(config.skip_2x[0]), w(config.skip_2x[1])
        s4_mid, s4_out = w(config.skip_4x[0]), w(config.skip_4x[1])
        self.skip_2x = _Skip(c2_in, s2_mid, s2_out, config.skip_dropout,
                             "skip_2x.drop", nd, rng)
        self.skip_4x = _Skip(c4_in, s4_mid, s4_out, config.skip_dropout,
                             "skip_4x.drop", nd, rng)
        us2_in = rnn_c + s2_out
        us2_mid, us2_out = w(config.us2[0]), w(config.us2[1])
        self.us2 = _Bottleneck(us2_in, us2_mid, us2_out, nd, rng)
        pu_in = us2_out + s4_out
        pu_mid, pu_out = w(config.post_us2[0]), w(config.post_us2[1])
        self.post_us2 = _Bottleneck(pu_in, pu_mid, pu_out, nd, rng)
        self.fusion = nn.DomainFusion(pu_out, nd, rng=rng)
        self.smoothing = nn.DomainSmoothing(nd,
                                            kernel_size=config.smoothing_kernel,
                                            sigma=config.smoothing_sigma,
                                            rng=rng)

        do = f"DO({config.skip_dropout:g})"
        stage_desc = " | ".join(f"t{t} {c}x{n} s{s}" for (t, c, n, s) in stages)
        lines = [
            f"encoder: stem {w(config.stem)}, stages {stage_desc}, "
            f"head {enc_c} @ alpha {a_out}",
            f"tap skip_4x: stage {config.taps['skip_4x']}, {c4_in} ch @ alpha {a4}",
            f"tap skip_2x: stage {config.taps['skip_2x']}, {c2_in} ch @ alpha {a2}",
            f"priors: {config.n_prior_maps} maps, gamma {config.prior_gamma:g}",
            f"post_cnn: ConvDW({post_in}), ConvPW({post_in}, {rnn_c}) "
            f"[nominal in {enc_c}; +{config.n_prior_maps} prior channels]",
            f"rnn: bypass cGRU, {rnn_c} ch, recurrent dropout {config.rnn_dropout:g}",
            f"us1: Up({rnn_c}, 2)",
            f"skip_2x: ConvPW({c2_in}, {s2_mid}), {do}, ConvPW({s2_mid}, {s2_out})",
            f"us2: ConvPW({us2_in}, {us2_mid}), ConvDW({us2_mid}), "
            f"ConvPW({us2_mid}, {us2_out}), Up({us2_out}, 2)",
            f"skip_4x: ConvPW({c4_in}, {s4_mid}), {do}, ConvPW({s4_mid}, {s4_out})",
            f"post_us2: ConvPW({pu_in}, {pu_mid}), ConvDW({pu_mid}), "
            f"ConvPW({pu_mid}, {pu_out}) [nominal in {w(config.post_us2_nominal_in)}]",
            f"fusion: ConvPW({pu_out}, 1) per domain x{nd}",
            f"smoothing: {config.smoothing_kernel}x{config.smoothing_kernel} "
            f"per domain x{nd}",
            f"output: nearest up x{self.final_factor}, spatial softmax",
            "domains: " + (" | ".join(
                f"{d.name} {d.modality} ({d.input_resolution[0]}, "
                f"{d.input_resolution[1]})" for d in registry) or "none"),
        ]
        self.build_report = tuple(lines)

    # ------------------------------------------------------------- forward

    def slot(self, domain):
        return 0 if self.config.shared_domain_params else domain.index

    def _contexts(self, domain, training, step, clip_tag, rng_seed,
                  encoder_bn_frozen):
        s = self.slot(domain)
        ctx = nn.ForwardCtx(domain=s, training=training, step=step,
                            clip_tag=clip_tag, rng_seed=rng_seed)
        if encoder_bn_frozen:
            enc_ctx = nn.ForwardCtx(domain=s, training=training, step=step,
                                    clip_tag=clip_tag, rng_seed=rng_seed,
                                    bn_training=False)
        else:
            enc_ctx = ctx
        return ctx, enc_ctx

    def _as_frame(self, x, domain):
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=np.float64))
        h, w = domain.input_resolution
        if x.ndim != 4 or x.shape[1] != 3:
            raise ValueError(f"expected an (n, 3, h, w) frame, got {x.shape}")
        if (x.shape[2], x.shape[3]) != (h, w):
            raise ValueError(f"domain {domain.name} expects {h}x{w} input, "
                             f"got {x.shape[2]}x{x.shape[3]}")
        return x

    def _encode_frame(self, x, ctx, enc_ctx):
        feats, taps = self.encoder.forward(x, enc_ctx)
        n, _, h, w = feats.shape
        pri = self.priors.render((h, w), ctx.domain)
        pri = pri.broadcast_to((n, pri.shape[1], h, w))
        cat = te.concat([feats, pri], axis=1)
        out = self.post_cnn_dw.forward(cat, ctx)
        return self.post_cnn_pw.forward(out, ctx), taps

    def _decode_frame(self, feats, taps, ctx):
        x = te.upsample(feats, 2, mode="bilinear")
        x = te.concat([x, self.skip_2x.forward(taps["skip_2x"], ctx)], axis=1)
        x = self.us2.forward(x, ctx)
        x = te.upsample(x, 2, mode="bilinear")
        x = te.concat([x, self.skip_4x.forward(taps["skip_4x"], ctx)], axis=1)
        x = self.post_us2.forward(x, ctx)
        x = self.fusion.forward(x, ctx)
        if self.final_factor > 1:
            x = te.upsample(x, self.final_factor, mode="nearest")
        x = self.smoothing.forward(x, ctx)
        return te.softmax_spatial(x)

    def forward_image(self, image, domain, *, training=False, step=0,
                      rng_seed=0, encoder_bn_frozen=False):
        """One static batch (n, 3, h, w) -> per-image probability maps
        (n, 1, h, w).  The recurrent subgraph is never entered."""
        if domain.dynamic:
            raise ValueError(f"domain {domain.name} is dynamic; "
                             f"use forward_clip")
        x = self._as_frame(image, domain)
        ctx, enc_ctx = self._contexts(domain, training, step, 0, rng_seed,
                                      encoder_bn_frozen)
        feats, taps = self._encode_frame(x, ctx, enc_ctx)
        (feats,) = self.rnn.forward([feats], ctx, dynamic=False)
        return self._decode_frame(feats, taps, ctx)

    def forward_clip(self, frames, domain, *, training=False, step=0,
                     clip_tag=0, rng_seed=0, encoder_bn_frozen=False):
        """A clip as a list of (n, 3, h, w) frames -> list of per-frame
        probability maps, with one recurrent state threaded through."""
        if not domain.dynamic:
            raise ValueError(f"domain {domain.name} is static; "
                             f"use forward_image")
        if len(frames) < 1:
            raise ValueError("a clip needs at least one frame")
        ctx, enc_ctx = self._contexts(domain, training, step, clip_tag,
                                      rng_seed, encoder_bn_frozen)
        encoded = [self._encode_frame(self._as_frame(f, domain), ctx, enc_ctx)
                   for f in frames]
        feats = self.rnn.forward([f for f, _ in encoded], ctx, dynamic=True)
        return [self._decode_frame(f, taps, ctx)
                for f, (_, taps) in zip(feats, encoded)]

    def bias_map(self, domain):
        """Prediction for an all-zero input: the domain's learned spatial
        bias, as a plain (h, w) array summing to 1."""
        h, w = domain.input_resolution
        x = Tensor(np.zeros((1, 3, h, w)))
        with te.no_grad():
            if domain.dynamic:
                out = self.forward_clip([x], domain)[0]
            else:
                out = self.forward_image(x, domain)
        return out.data[0, 0].copy()

    # ------------------------------------------------------------ reporting

    def param_report(self):
        """Learnable parameter counts per top-level module, split into
        shared and domain-private, plus 32-bit storage equivalence."""
        per_module = {}
        shared = private = 0
        for path, tag, t in self.named_parameters():
            top = path.split(".", 1)[0]
            entry = per_module.setdefault(top, {"shared": 0, "domain": 0})
            if tag == "shared":
                entry["shared"] += t.size
                shared += t.size
            else:
                entry["domain"] += t.size
                private += t.size
        stat_values = sum(arr.size for _, _, arr in self.named_stats())
        return {
            "per_module": per_module,
            "shared": shared,
            "domain": private,
            "total": shared + private,
            "stat_values": stat_values,
            "bytes_fp32": 4 * (shared + private),
        }


# ------------------------------------------------------------- checkpoints

_MAGIC = b"USAL"
_VERSION = 1


def _records(model):
    for name, tag, t in model.named_parameters():
        yield name, tag, t.data, ("param", t)
    for name, tag, arr in model.named_stats():
        yield name, tag, arr, ("stat", arr)


def save_checkpoint(model, path):
    """Write magic, version, a JSON manifest (config echo, domain echo,
    named records), then length-prefixed little-endian float64 blobs."""
    records = []
    blobs = []
    for name, tag, arr, _ in _records(model):
        a = np.ascontiguousarray(arr, dtype="<f8")
        records.append({"name": name, "tag": tag, "shape": list(a.shape)})
        blobs.append(a.tobytes())
    manifest = {
        "format": "unisal-checkpoint",
        "version": _VERSION,
        "config": model.config.to_dict(),
        "domains": model.registry.to_list(),
        "rng_seed": model.rng_seed,
        "records": records,
    }
    payload = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", _VERSION))
        f.write(struct.pack("<Q", len(payload)))
        f.write(payload)
        for blob in blobs:
            f.write(struct.pack("<Q", len(blob)))
            f.write(blob)


def load_checkpoint(path):
    """Rebuild the model from the manifest echo and fill every parameter
    and running statistic bit-exactly from the blobs."""
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != _MAGIC:
        raise ValueError(f"{path}: not a saliency checkpoint")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    (mlen,) = struct.unpack_from("<Q", raw, 8)
    manifest = json.loads(raw[16:16 + mlen].decode("utf-8"))
    config = ModelConfig.from_dict(manifest["config"])
    registry = DomainRegistry.from_list(manifest["domains"])
    model = UnisalModel(config, registry, rng_seed=manifest["rng_seed"])

    targets = list(_records(model))
    records = manifest["records"]
    if len(records) != len(targets):
        raise ValueError(f"{path}: {len(records)} records in manifest, "
                         f"model has {len(targets)}")
    offset = 16 + mlen
    for rec, (name, tag, arr, (kind, dest)) in zip(records, targets):
        shape = tuple(rec["shape"])
        if rec["name"] != name or rec["tag"] != tag or shape != arr.shape:
            raise ValueError(
                f"{path}: record {rec['name']!r} ({rec['tag']}, "
                f"shape {tuple(rec['shape'])}) does not match model "
                f"{name!r} ({tag}, shape {arr.shape})")
        (blen,) = struct.unpack_from("<Q", raw, offset)
        offset += 8
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        if blen != 8 * count:
            raise ValueError(f"{path}: blob for {name!r} has {blen} bytes, "
                             f"expected {8 * count}")
        values = np.frombuffer(raw, dtype="<f8", count=count,
                               offset=offset).reshape(shape)
        values = np.asarray(values, dtype=np.float64).copy()
        offset += blen
        if kind == "param":
            dest.data = values
            dest.grad = None
        else:
            dest[...] = values
    if offset != len(raw):
        raise ValueError(f"{path}: {len(raw) - offset} trailing bytes "
                         f"after the last blob")
    return model
