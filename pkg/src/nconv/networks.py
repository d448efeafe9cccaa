"""Three-stage densification pipeline.

Stage 1 estimates a per-pixel confidence for the sparse input with a small
encoder-decoder network (the input itself is the only cue; a SoftPlus head
keeps confidences in [0, inf[). Stage 2 densifies the signal with a stack
of normalized-convolution layers, propagating confidence alongside the
signal. Stage 3 estimates the observation noise variance from the
propagated confidence (never from the prediction, unless the optional
depth-input ablation flag is set) and combines it with the accumulated
weight of the last layer into the predictive variance

    s = sigma^2 / <a|c>,

clamped below at ``s_min``.

Variants: ``ncnn-binary`` uses a binary input confidence and no estimator
networks; ``ncnn-conf`` adds the confidence estimator; ``pncnn`` and
``pncnn-exp`` add the variance estimator (they differ only in the training
loss).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Array, DiffTensor, Tape
from .core import Applicability, conf_pool_pair, conf_unpool_pair, nconv_layer
from .seeding import derive_rng

VARIANTS = ("ncnn-binary", "ncnn-conf", "pncnn", "pncnn-exp")

DEFAULT_NCNN_LAYERS = ((5, "pool"), (5, ""), (3, ""), (3, "unpool"))


class PipelineError(Exception):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    variant: str = "pncnn"
    unet_channels: tuple[int, ...] = (8, 16, 32)
    # (kernel size, flag) per layer; "pool" halves resolution after the
    # layer, "unpool" restores the matching resolution before it.
    ncnn_layers: tuple[tuple[int, str], ...] = DEFAULT_NCNN_LAYERS
    eps: float = 1e-8
    s_min: float = 1e-6
    a_min: float = 1e-4
    with_depth_pred: bool = False
    # fixed gain normalizing estimator-network inputs to order one
    # (signal units vary by dataset; the densification path is unaffected)
    input_scale: float = 0.1

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise PipelineError(f"unknown variant '{self.variant}'")
        if len(self.unet_channels) != 3 or any(c < 1 for c in self.unet_channels):
            raise PipelineError(
                f"unet_channels must be three positive counts, got {self.unet_channels}")
        depth = 0
        for k, flag in self.ncnn_layers:
            if k % 2 == 0 or k < 1:
                raise PipelineError(f"ncnn kernel size must be odd, got {k}")
            if flag not in ("", "pool", "unpool"):
                raise PipelineError(f"unknown ncnn layer flag '{flag}'")
            if flag == "unpool":
                depth -= 1
                if depth < 0:
                    raise PipelineError("unpool without a matching pool")
            if flag == "pool":
                depth += 1
        if depth != 0:
            raise PipelineError("pool/unpool flags do not balance")

    @property
    def has_conf_net(self) -> bool:
        return self.variant != "ncnn-binary"

    @property
    def has_var_net(self) -> bool:
        return self.variant in ("pncnn", "pncnn-exp")


@dataclass
class PipelineOutput:
    prediction: DiffTensor
    out_conf: DiffTensor
    ac_raw: DiffTensor
    sigma2: DiffTensor | None = None
    s: DiffTensor | None = None
    param_leaves: dict[str, DiffTensor] = field(default_factory=dict)


def _conv_spec(name: str, c_out: int, c_in: int, k: int):
    return (name, c_out, c_in, k)


def _unet_specs(prefix: str, in_ch: int, channels: tuple[int, ...]):
    c1, c2, c3 = channels
    specs = [
        _conv_spec(f"{prefix}.enc1a", c1, in_ch, 3),
        _conv_spec(f"{prefix}.enc1b", c1, c1, 3),
        _conv_spec(f"{prefix}.enc2a", c2, c1, 3),
        _conv_spec(f"{prefix}.enc2b", c2, c2, 3),
        _conv_spec(f"{prefix}.mid_a", c3, c2, 3),
        _conv_spec(f"{prefix}.mid_b", c3, c3, 3),
        _conv_spec(f"{prefix}.dec2a", c2, c3 + c2, 3),
        _conv_spec(f"{prefix}.dec2b", c2, c2, 3),
        _conv_spec(f"{prefix}.dec1a", c1, c2 + c1, 3),
        _conv_spec(f"{prefix}.dec1b", c1, c1, 3),
        _conv_spec(f"{prefix}.head", 1, c1, 1),
    ]
    return specs


def _init_unet(params: dict[str, Array], specs, rng: np.random.Generator) -> None:
    for name, c_out, c_in, k in specs:
        std = np.sqrt(2.0 / (c_in * k * k))
        params[f"{name}.w"] = std * rng.standard_normal((c_out, c_in, k, k))
        # small positive bias: all-zero regions of sparse inputs would
        # otherwise sit exactly on the relu kink
        params[f"{name}.b"] = np.full((c_out, 1, 1), 0.01)


def _unet_forward(prefix: str, leaves: dict[str, DiffTensor],
                  x: DiffTensor) -> DiffTensor:
    """Encoder-decoder with skip connections; input/output (C,H,W)/(1,H,W)."""

    def block(name, t):
        return ad.relu(ad.add(ad.conv2d(t, leaves[f"{prefix}.{name}.w"]),
                              leaves[f"{prefix}.{name}.b"]))

    e1 = block("enc1b", block("enc1a", x))
    e2 = block("enc2b", block("enc2a", ad.maxpool2(e1)[0]))
    m = block("mid_b", block("mid_a", ad.maxpool2(e2)[0]))
    u2 = block("dec2b", block("dec2a",
                              ad.concat_channels([ad.upsample2_nearest(m), e2])))
    u1 = block("dec1b", block("dec1a",
                              ad.concat_channels([ad.upsample2_nearest(u2), e1])))
    return ad.add(ad.conv2d(u1, leaves[f"{prefix}.head.w"]),
                  leaves[f"{prefix}.head.b"])


class Pipeline:
    """Owns the parameter arrays; exclusively owned by one training loop.

    Forward passes on a snapshot of the parameters are read-only and safe
    to run concurrently.
    """

    def __init__(self, cfg: PipelineConfig, params: dict[str, Array]):
        self.cfg = cfg
        self.params = params

    @property
    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def param_names(self) -> list[str]:
        return sorted(self.params)

    def bind(self, tape: Tape | None) -> dict[str, DiffTensor]:
        """Wrap each parameter as a tape leaf (or constant when tape is None).

        A batch shares one binding so leaf gradients accumulate over it.
        """
        if tape is None:
            return {name: ad.const(arr) for name, arr in self.params.items()}
        return {name: tape.leaf(self.params[name]) for name in self.param_names()}

    def forward(self, x: Array, tape: Tape | None = None) -> PipelineOutput:
        return pipeline_forward(self, x, tape)


def build_pipeline(cfg: PipelineConfig, seed: int) -> Pipeline:
    """Deterministically initialize all stages for the given config."""
    params: dict[str, Array] = {}
    if cfg.has_conf_net:
        _init_unet(params, _unet_specs("h", 1, cfg.unet_channels),
                   derive_rng(seed, "conf-net"))
    if cfg.has_var_net:
        in_ch = 2 if cfg.with_depth_pred else 1
        _init_unet(params, _unet_specs("g", in_ch, cfg.unet_channels),
                   derive_rng(seed, "var-net"))
    for i, (k, _flag) in enumerate(cfg.ncnn_layers):
        app = Applicability.gaussian(k, a_min=cfg.a_min,
                                     rng=derive_rng(seed, "applicability", i))
        params[f"f.layer{i}.raw"] = app.raw
    return Pipeline(cfg, params)


def _check_stage(stage: str, t: DiffTensor) -> DiffTensor:
    if not np.all(np.isfinite(t.data)):
        raise PipelineError(f"non-finite values after stage '{stage}'")
    return t


def _ncnn_stack(cfg: PipelineConfig, leaves, v: DiffTensor, c: DiffTensor):
    shapes: list[tuple[int, int]] = []
    ac = None
    for i, (k, flag) in enumerate(cfg.ncnn_layers):
        if flag == "unpool":
            v, c = conf_unpool_pair(v, c, shapes.pop())
        v, c, ac = nconv_layer(v, c, leaves[f"f.layer{i}.raw"],
                               eps=cfg.eps, a_min=cfg.a_min)
        if flag == "pool":
            shapes.append(v.shape)
            v, c = conf_pool_pair(v, c)
    return v, c, ac


def pipeline_forward(p: Pipeline, x: Array, tape: Tape | None = None,
                     input_conf: Array | None = None,
                     leaves: dict[str, DiffTensor] | None = None) -> PipelineOutput:
    """Run the full pipeline on a sparse (H, W) signal.

    Missing points are encoded as 0; for learned-confidence variants the
    estimator decides their weight, for ncnn-binary the nonzero mask does.
    ``input_conf`` overrides stage 1 (used by invariance tests); ``leaves``
    reuses an existing parameter binding.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise PipelineError(f"expected (H, W) input, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise PipelineError("non-finite values in input signal")
    cfg = p.cfg
    h, w = x.shape
    ph, pw = (-h) % 4, (-w) % 4
    xp = np.pad(x, ((0, ph), (0, pw))) if (ph or pw) else x
    if leaves is None:
        leaves = p.bind(tape)
    xt = ad.const(xp)

    if input_conf is not None:
        c0 = ad.const(np.pad(np.asarray(input_conf, dtype=np.float64),
                             ((0, ph), (0, pw))) if (ph or pw) else input_conf)
    elif cfg.has_conf_net:
        hin = ad.reshape(ad.smul(xt, cfg.input_scale), (1, *xp.shape))
        c0 = ad.reshape(ad.softplus(_unet_forward("h", leaves, hin)), xp.shape)
    else:
        c0 = ad.const((xp != 0.0).astype(np.float64))
    _check_stage("confidence-estimator", c0)

    pred, out_conf, ac_raw = _ncnn_stack(cfg, leaves, xt, c0)
    _check_stage("normalized-convolution-stack", pred)

    sigma2 = s = None
    if cfg.has_var_net:
        gin = ad.reshape(out_conf, (1, *out_conf.shape))
        if cfg.with_depth_pred:
            gin = ad.concat_channels([gin, ad.reshape(pred, (1, *pred.shape))])
        sigma2 = ad.add(ad.softplus(_unet_forward("g", leaves, gin)),
                        ad.const(1e-6))
        sigma2 = ad.reshape(sigma2, out_conf.shape)
        _check_stage("variance-estimator", sigma2)
        s_free = ad.div(sigma2, ac_raw, eps=cfg.eps)
        # clamp below at s_min: relu(s - s_min) + s_min
        s = ad.add(ad.relu(ad.sub(s_free, ad.const(cfg.s_min))),
                   ad.const(cfg.s_min))

    if ph or pw:
        pred = ad.crop2(pred, h, w)
        out_conf = ad.crop2(out_conf, h, w)
        ac_raw = ad.crop2(ac_raw, h, w)
        if s is not None:
            sigma2 = ad.crop2(sigma2, h, w)
            s = ad.crop2(s, h, w)
    return PipelineOutput(prediction=pred, out_conf=out_conf, ac_raw=ac_raw,
                          sigma2=sigma2, s=s, param_leaves=leaves)


def eval_uncertainty(out: PipelineOutput) -> Array:
    """Per-pixel uncertainty for ranking: the predictive variance when the
    pipeline provides one, otherwise the inverted output confidence."""
    if out.s is not None:
        return np.array(out.s.data)
    return -np.array(out.out_conf.data)


def input_confidence(p: Pipeline, x: Array) -> Array:
    """Stage-1 estimated input confidence for a sparse signal (no tape)."""
    if not p.cfg.has_conf_net:
        return (np.asarray(x, dtype=np.float64) != 0.0).astype(np.float64)
    x = np.asarray(x, dtype=np.float64)
    h, w = x.shape
    ph, pw = (-h) % 4, (-w) % 4
    xp = np.pad(x, ((0, ph), (0, pw))) if (ph or pw) else x
    leaves = p.bind(None)
    hin = ad.reshape(ad.smul(ad.const(xp), p.cfg.input_scale), (1, *xp.shape))
    c0 = ad.reshape(ad.softplus(_unet_forward("h", leaves, hin)), xp.shape)
    return np.asarray(c0.data)[:h, :w]
