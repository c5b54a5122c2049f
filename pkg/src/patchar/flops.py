"""Analytic FLOPs for convolutions, transformers and KV-cached causal decoding.

Only matrix products are counted (two FLOPs per multiply-add); biases,
norms and embedding lookups are ignored. The ``measure_*`` functions run
real forward passes under :func:`numerics.count_flops` and serve as the
ground truth the closed forms must match exactly.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics as nx


@dataclass(frozen=True)
class ArchSpec:
    kind: str  # "conv1d" | "transformer" | "causal_transformer"
    n_layers: int
    hidden: int
    length: int
    ffn_dim: int = 0
    kernel: int = 1
    prefix_length: int = 0
    n_heads: int = 1

    def __post_init__(self):
        if self.kind not in ("conv1d", "transformer", "causal_transformer"):
            raise ValueError(f"unknown architecture kind {self.kind!r}")
        if self.n_layers < 1 or self.hidden < 1 or self.kernel < 1:
            raise ValueError("layers, hidden size and kernel must be positive")
        if self.length < 0 or self.prefix_length < 0:
            raise ValueError("lengths must be non-negative")
        if self.kind != "conv1d" and self.ffn_dim < 1:
            raise ValueError("transformers need a positive FFN width")


def _expect(spec: ArchSpec, kind: str) -> None:
    if spec.kind != kind:
        raise ValueError(f"expected a {kind} spec, got {spec.kind}")


def conv_flops(spec: ArchSpec) -> int:
    _expect(spec, "conv1d")
    c = spec.hidden
    return 2 * c * c * spec.kernel * spec.length * spec.n_layers


def _dense_layer(t: int, c: int, c_mid: int) -> int:
    qkv = 6 * t * c * c
    scores = 2 * t * t * c
    values = 2 * t * t * c
    out = 2 * t * c * c
    ffn = 2 * t * c * c_mid + 2 * t * c * c_mid
    return qkv + scores + values + out + ffn


def transformer_flops(spec: ArchSpec) -> int:
    _expect(spec, "transformer")
    return _dense_layer(spec.length, spec.hidden, spec.ffn_dim) * spec.n_layers


def causal_transformer_flops(spec: ArchSpec, quadratic_attention: bool = False) -> int:
    """Prefix pass plus one cached decode step per new token.

    A decode step at attended length ``t`` costs ``2tC`` for scores and
    again for values. ``quadratic_attention=True`` uses ``2t^2 C`` for both, the
    form printed in the original derivation, which overcounts.
    """
    _expect(spec, "causal_transformer")
    c, c_mid = spec.hidden, spec.ffn_dim
    prefix = _dense_layer(spec.prefix_length, c, c_mid) * spec.n_layers
    per_token = 6 * c * c + 2 * c * c + 4 * c * c_mid
    decode = 0
    for t in range(1 + spec.prefix_length, spec.length + spec.prefix_length + 1):
        attn = 2 * t * t * c if quadratic_attention else 2 * t * c
        decode += per_token + 2 * attn
    return prefix + decode * spec.n_layers


def flops(spec: ArchSpec) -> int:
    return {
        "conv1d": conv_flops,
        "transformer": transformer_flops,
        "causal_transformer": causal_transformer_flops,
    }[spec.kind](spec)


# -- instrumented oracles ------------------------------------------------------

def _random_transformer(spec: ArchSpec, seed: int) -> nx.Transformer:
    rng = np.random.default_rng(seed)
    return nx.Transformer(spec.n_layers, spec.hidden, spec.ffn_dim, spec.n_heads, rng)


def measure_conv_flops(spec: ArchSpec, seed: int = 0) -> int:
    """Run an im2col 1-d convolution stack ('same' padding) and count its matmuls."""
    _expect(spec, "conv1d")
    rng = np.random.default_rng(seed)
    c, k, t = spec.hidden, spec.kernel, spec.length
    weights = [nx.Tensor(rng.normal(size=(k * c, c)) / math.sqrt(k * c)) for _ in range(spec.n_layers)]
    x = rng.normal(size=(t, c))
    left = (k - 1) // 2
    with nx.no_grad(), nx.count_flops() as counter:
        for w in weights:
            padded = np.pad(x, ((left, k - 1 - left), (0, 0)))
            cols = np.stack([padded[i : i + k].reshape(-1) for i in range(t)])
            x = np.tanh(nx.matmul(nx.Tensor(cols), w).data)
    return counter.total


def measure_transformer_flops(spec: ArchSpec, seed: int = 0) -> int:
    _expect(spec, "transformer")
    model = _random_transformer(spec, seed)
    x = nx.Tensor(np.random.default_rng(seed + 1).normal(size=(spec.length, spec.hidden)))
    with nx.no_grad(), nx.count_flops() as counter:
        model(x, "bidirectional")
    return counter.total


def measure_causal_flops(spec: ArchSpec, seed: int = 0) -> int:
    """Prefix forward with a KV cache, then token-by-token cached decoding."""
    _expect(spec, "causal_transformer")
    model = _random_transformer(spec, seed)
    rng = np.random.default_rng(seed + 1)
    cache = nx.KVCache()
    with nx.no_grad(), nx.count_flops() as counter:
        if spec.prefix_length:
            model(nx.Tensor(rng.normal(size=(spec.prefix_length, spec.hidden))), "causal", cache=cache)
        for _ in range(spec.length):
            model(nx.Tensor(rng.normal(size=(1, spec.hidden))), "causal", cache=cache)
    return counter.total


def measure_flops(spec: ArchSpec, seed: int = 0) -> int:
    return {
        "conv1d": measure_conv_flops,
        "transformer": measure_transformer_flops,
        "causal_transformer": measure_causal_flops,
    }[spec.kind](spec, seed)


# -- composite inference cost -----------------------------------------------------

@dataclass(frozen=True)
class StackDims:
    n_layers: int
    hidden: int
    ffn_dim: int


@dataclass(frozen=True)
class CostModel:
    """Layer dimensions of the three stacks plus patching geometry."""

    encoder: StackDims
    lm: StackDims
    locdit: StackDims
    patch_size: int = 4
    history: int = 1


# ~0.6B configuration (encoder / LM / decoder layers, width, FFN width)
REFERENCE_06B = CostModel(
    encoder=StackDims(6, 1024, 4096),
    lm=StackDims(36, 1024, 4096),
    locdit=StackDims(6, 1024, 4096),
    patch_size=4,
    history=1,
)


@dataclass
class CostComponent:
    name: str
    flops: int
    multiplier: int = 1

    @property
    def total(self) -> int:
        return self.flops * self.multiplier


@dataclass
class CostReport:
    components: list[CostComponent]
    nfe: int
    guidance: bool
    settings: dict = field(default_factory=dict)

    @property
    def total(self) -> int:
        return sum(c.total for c in self.components)

    def component(self, name: str) -> CostComponent:
        return next(c for c in self.components if c.name == name)

    def to_record(self) -> dict:
        return {
            "components": [asdict(c) | {"total": c.total} for c in self.components],
            "nfe": self.nfe,
            "guidance": self.guidance,
            "settings": self.settings,
            "total": self.total,
            "tflops": self.total / 1e12,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_record(), sort_keys=True)

    def table(self) -> str:
        lines = [f"{'component':<10} {'flops':>18} {'mult':>6} {'total':>18}"]
        for c in self.components:
            lines.append(f"{c.name:<10} {c.flops:>18,d} {c.multiplier:>6d} {c.total:>18,d}")
        lines.append(f"{'TOTAL':<10} {'':>18} {'':>6} {self.total:>18,d}")
        lines.append(f"= {self.total / 1e12:.3f} TFLOPs (nfe={self.nfe}, guidance={'on' if self.guidance else 'off'})")
        return "\n".join(lines)


def composite_report(
    model: CostModel,
    prompt_tokens: int,
    target_tokens: int,
    nfe: int,
    guidance: bool,
    text_tokens: int = 0,
    quadratic_attention: bool = False,
) -> CostReport:
    """Inference cost of continuing ``prompt_tokens`` frames by ``target_tokens`` frames.

    Every prompt and generated patch passes the encoder once; the LM runs
    a prefix over text plus prompt patches, then one cached step per
    generated patch; the decoder runs ``nfe`` times per generated patch
    (twice as often with guidance) over ``1 + history*P + P`` positions.
    """
    if nfe < 1:
        raise ValueError("nfe must be positive")
    p = model.patch_size
    prompt_patches = math.ceil(prompt_tokens / p)
    target_patches = math.ceil(target_tokens / p)
    enc = model.encoder
    enc_per_patch = transformer_flops(ArchSpec("transformer", enc.n_layers, enc.hidden, 1 + p, enc.ffn_dim))
    lm = model.lm
    lm_cost = causal_transformer_flops(
        ArchSpec(
            "causal_transformer",
            lm.n_layers,
            lm.hidden,
            target_patches,
            lm.ffn_dim,
            prefix_length=text_tokens + prompt_patches,
        ),
        quadratic_attention=quadratic_attention,
    )
    dit = model.locdit
    dit_len = 1 + model.history * p + p
    dit_per_call = transformer_flops(ArchSpec("transformer", dit.n_layers, dit.hidden, dit_len, dit.ffn_dim))
    components = [
        CostComponent("encoder", enc_per_patch * (prompt_patches + target_patches)),
        CostComponent("lm", lm_cost),
        CostComponent("locdit", dit_per_call * target_patches, nfe * (2 if guidance else 1)),
    ]
    settings = {
        "prompt_tokens": prompt_tokens,
        "target_tokens": target_tokens,
        "text_tokens": text_tokens,
        "patch_size": p,
        "history": model.history,
        "quadratic_attention": quadratic_attention,
    }
    return CostReport(components, nfe, guidance, settings)


def reference_report(nfe: int = 10, guidance: bool = True, quadratic_attention: bool = False) -> CostReport:
    """3 s prompt, 10 s target at 40 Hz; 21 + 70 text tokens at 7 Hz."""
    return composite_report(
        REFERENCE_06B,
        prompt_tokens=3 * 40,
        target_tokens=10 * 40,
        nfe=nfe,
        guidance=guidance,
        text_tokens=21 + 70,
        quadratic_attention=quadratic_attention,
    )
