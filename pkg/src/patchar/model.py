"""Patch-level autoregressive model with a local diffusion decoder.

Continuous tokens are grouped into patches. An aggregation encoder turns
each patch into one vector, a causal LM runs over text embeddings followed
by patch vectors, and the LM output at each step conditions a small
bidirectional diffusion transformer (LocDiT) that predicts the velocity of
the next patch given the most recent clean patches as context.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import io
from . import numerics as nx
from .diffusion import schedule_eval
from .numerics import Linear, Module, Parameter, Tensor, Transformer
from .sampler import GuidedScore, SamplerConfig, temperature_sample

STOP_THRESHOLD = 0.5


@dataclass(frozen=True)
class ModelConfig:
    token_dim: int = 8
    patch_size: int = 4
    history: int = 1
    text_vocab: int = 16
    lm_dim: int = 128
    lm_layers: int = 4
    lm_ffn: int = 128
    lm_heads: int = 2
    enc_dim: int = 64
    enc_layers: int = 2
    enc_ffn: int = 128
    enc_heads: int = 2
    dit_dim: int = 64
    dit_layers: int = 2
    dit_ffn: int = 128
    dit_heads: int = 2
    time_features: int = 32
    precision: str = "float64"

    def __post_init__(self):
        if self.patch_size < 1 or self.token_dim < 1:
            raise ValueError("patch size and token dim must be positive")
        if self.history < 0:
            raise ValueError("history must be non-negative")
        if self.precision not in ("float64", "float32"):
            raise ValueError("precision must be float64 or float32")

    @property
    def dtype(self):
        return np.dtype(self.precision)

    @property
    def dit_length(self) -> int:
        return 1 + self.history * self.patch_size + self.patch_size


# -- data containers -------------------------------------------------------------

@dataclass
class Patch:
    tokens: np.ndarray  # (P, D), zero padded
    mask: np.ndarray  # (P,), True where a real token sits

    @property
    def n_valid(self) -> int:
        return int(self.mask.sum())


@dataclass
class ConditionVector:
    h: np.ndarray
    is_null: bool = False

    @classmethod
    def null(cls, dim: int) -> "ConditionVector":
        return cls(np.zeros(dim), True)


@dataclass
class GenerationResult:
    tokens: np.ndarray  # (n_patches * P, D)
    n_patches: int
    stopped: bool

    @property
    def runaway(self) -> bool:
        return not self.stopped


def patchify_array(tokens: np.ndarray, patch_size: int) -> tuple[np.ndarray, np.ndarray]:
    """(N, D) -> (ceil(N/P), P, D) zero-padded patches plus a (K, P) validity mask."""
    tokens = np.asarray(tokens)
    if patch_size < 1:
        raise ValueError("patch size must be positive")
    if tokens.ndim != 2 or tokens.shape[0] == 0:
        raise ValueError("patchify needs a non-empty (N, D) sequence")
    n, d = tokens.shape
    k = math.ceil(n / patch_size)
    out = np.zeros((k * patch_size, d), dtype=tokens.dtype)
    out[:n] = tokens
    mask = np.zeros(k * patch_size, dtype=bool)
    mask[:n] = True
    return out.reshape(k, patch_size, d), mask.reshape(k, patch_size)


def patchify(tokens: np.ndarray, patch_size: int) -> list[Patch]:
    patches, mask = patchify_array(tokens, patch_size)
    return [Patch(p, m) for p, m in zip(patches, mask)]


def unpatchify(patches: list[Patch]) -> np.ndarray:
    return np.concatenate([p.tokens[p.mask] for p in patches], axis=0)


def time_features(t: np.ndarray, n: int) -> np.ndarray:
    """Sinusoidal features of diffusion time, shape (..., n)."""
    t = np.asarray(t, dtype=np.float64)
    freqs = np.exp(np.linspace(0.0, math.log(1000.0), n // 2))
    ang = t[..., None] * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


# -- components ----------------------------------------------------------------------

class AggregationEncoder(Module):
    """Bidirectional encoder; a learned token in front of the patch is read out."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        dt = cfg.dtype
        self.inp = Linear(cfg.token_dim, cfg.enc_dim, rng, dtype=dt)
        self.special = Parameter(rng.normal(0.0, 1.0, (1, cfg.enc_dim)), dtype=dt)
        self.body = Transformer(cfg.enc_layers, cfg.enc_dim, cfg.enc_ffn, cfg.enc_heads, rng, dt)
        self.out = Linear(cfg.enc_dim, cfg.lm_dim, rng, dtype=dt)

    def __call__(self, patches: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
        """(M, P, D) patches -> (M, C_lm) embeddings."""
        m, p, _ = patches.shape
        x = self.inp(Tensor(np.asarray(patches, dtype=self.special.dtype)))
        special = self.special.reshape(1, 1, -1) * Tensor(np.ones((m, 1, 1), dtype=x.dtype))
        seq = nx.concat([special, x], axis=1)
        key_mask = None
        if mask is not None and not mask.all():
            key_mask = np.concatenate([np.ones((m, 1), dtype=bool), mask], axis=1)
        y = self.body(seq, "bidirectional", key_mask=key_mask)
        return self.out(y[:, 0, :])


class LocDiT(Module):
    """Bidirectional decoder over [condition, history tokens, noisy tokens]."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        dt = cfg.dtype
        self.cfg = cfg
        self.cond = Linear(cfg.lm_dim, cfg.dit_dim, rng, dtype=dt)
        self.time = Linear(cfg.time_features, cfg.dit_dim, rng, dtype=dt)
        self.hist = Linear(cfg.token_dim, cfg.dit_dim, rng, dtype=dt)
        self.noisy = Linear(cfg.token_dim, cfg.dit_dim, rng, dtype=dt)
        self.begin = Parameter(rng.normal(0.0, 0.5, (max(cfg.history, 1) * cfg.patch_size, cfg.dit_dim)), dtype=dt)
        self.body = Transformer(cfg.dit_layers, cfg.dit_dim, cfg.dit_ffn, cfg.dit_heads, rng, dt)
        self.out = Linear(cfg.dit_dim, cfg.token_dim, rng, scale=0.5, dtype=dt)

    def __call__(
        self,
        h: Tensor | np.ndarray,
        t: np.ndarray,
        history: np.ndarray,
        history_present: np.ndarray,
        noisy: np.ndarray,
        history_mask: np.ndarray | None = None,
        noisy_mask: np.ndarray | None = None,
    ) -> Tensor:
        """Velocity for ``noisy``.

        h: (M, C_lm); t: (M,); history: (M, H, P, D); history_present: (M, H)
        flags (absent slots use the learned begin patch); noisy: (M, P, D).
        """
        cfg = self.cfg
        m = noisy.shape[0]
        p, d = cfg.patch_size, cfg.token_dim
        if noisy.shape[1:] != (p, d):
            raise ValueError(f"noisy patch must be ({p}, {d}), got {noisy.shape[1:]}")
        h = h if isinstance(h, Tensor) else Tensor(np.asarray(h, dtype=cfg.dtype))
        if h.shape != (m, cfg.lm_dim):
            raise ValueError(f"condition must be ({m}, {cfg.lm_dim}), got {h.shape}")
        tf = Tensor(time_features(np.broadcast_to(t, (m,)), cfg.time_features).astype(cfg.dtype))
        cond = (self.cond(h) + self.time(tf)).reshape(m, 1, cfg.dit_dim)
        parts = [cond]
        key_mask = [np.ones((m, 1), dtype=bool)]
        if cfg.history:
            hp = cfg.history * p
            if history.shape[1:] != (cfg.history, p, d):
                raise ValueError("history has the wrong shape")
            present = np.repeat(np.asarray(history_present, dtype=cfg.dtype), p, axis=1)[..., None]
            hx = self.hist(Tensor(history.reshape(m, hp, d).astype(cfg.dtype)))
            parts.append(hx * present + self.begin.reshape(1, hp, -1) * (1.0 - present))
            hm = np.ones((m, hp), dtype=bool) if history_mask is None else history_mask.reshape(m, hp)
            key_mask.append(hm | ~np.repeat(np.asarray(history_present, bool), p, axis=1))
        parts.append(self.noisy(Tensor(noisy.astype(cfg.dtype))))
        key_mask.append(np.ones((m, p), dtype=bool) if noisy_mask is None else noisy_mask)
        seq = nx.concat(parts, axis=1)
        km = np.concatenate(key_mask, axis=1)
        y = self.body(seq, "bidirectional", key_mask=None if km.all() else km)
        return self.out(y[:, -p:, :])


class StopHead(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.proj = Linear(cfg.lm_dim, 1, rng, dtype=cfg.dtype)
        self.bias = Parameter(np.zeros(1), dtype=cfg.dtype)

    def __call__(self, h: Tensor) -> Tensor:
        return (self.proj(h) + self.bias)[..., 0]


class Embeddings(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.text = Parameter(rng.normal(0.0, 1.0, (cfg.text_vocab, cfg.lm_dim)), dtype=cfg.dtype)

    def __call__(self, ids: np.ndarray) -> Tensor:
        return self.text[np.asarray(ids, dtype=np.int64)]


class PatchARModel(Module):
    """Encoder + causal LM + LocDiT + stop head."""

    groups = ("embeddings", "encoder", "lm", "locdit", "stop_head")

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.embeddings = Embeddings(cfg, rng)
        self.encoder = AggregationEncoder(cfg, rng)
        self.lm = Transformer(cfg.lm_layers, cfg.lm_dim, cfg.lm_ffn, cfg.lm_heads, rng, cfg.dtype)
        self.locdit = LocDiT(cfg, rng)
        self.stop_head = StopHead(cfg, rng)

    def parameter_groups(self) -> dict[str, list[str]]:
        return {g: [f"{g}.{n}" for n, _ in getattr(self, g).named_parameters()] for g in self.groups}

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
        for name, p in params.items():
            if state[name].shape != p.data.shape:
                raise ValueError(f"shape mismatch for {name}")
            p.data[...] = state[name]

    # -- single-item API ---------------------------------------------------------
    def aggregate_encode(self, patch: Patch) -> np.ndarray:
        with nx.no_grad():
            return self.encoder(patch.tokens[None], patch.mask[None]).data[0]

    def lm_forward(self, prefix: np.ndarray, cache: nx.KVCache | None = None) -> np.ndarray:
        """Causal LM outputs for a (T, C_lm) or (B, T, C_lm) prefix."""
        prefix = np.asarray(prefix, dtype=self.cfg.dtype)
        with nx.no_grad():
            return self.lm(Tensor(prefix), "causal", cache=cache).data

    def locdit_denoise(self, h: ConditionVector | np.ndarray, t: float, history: list[Patch], noisy: Patch | np.ndarray) -> np.ndarray:
        cfg = self.cfg
        if len(history) != cfg.history:
            raise ValueError(f"expected {cfg.history} history patches, got {len(history)}")
        hv = h.h if isinstance(h, ConditionVector) else np.asarray(h)
        z = noisy.tokens if isinstance(noisy, Patch) else np.asarray(noisy)
        hist = np.zeros((1, cfg.history, cfg.patch_size, cfg.token_dim))
        hmask = np.ones((1, cfg.history, cfg.patch_size), dtype=bool)
        for i, p in enumerate(history):
            hist[0, i], hmask[0, i] = p.tokens, p.mask
        with nx.no_grad():
            v = self.locdit(hv[None], np.array([t]), hist, np.ones((1, cfg.history), bool), z[None], hmask)
        return v.data[0]

    def stop_probability(self, h: ConditionVector) -> float:
        if h.is_null:
            raise ValueError("stop decision needs a real condition, got the null vector")
        with nx.no_grad():
            logit = self.stop_head(Tensor(np.asarray(h.h, dtype=self.cfg.dtype)[None])).data[0]
        return float(1.0 / (1.0 + math.exp(-logit)))


# -- generation ----------------------------------------------------------------------

def _history_window(patches: list[np.ndarray], masks: list[np.ndarray], cfg: ModelConfig, batch: int):
    hh = cfg.history
    hist = np.zeros((batch, max(hh, 1), cfg.patch_size, cfg.token_dim))
    hmask = np.ones((batch, max(hh, 1), cfg.patch_size), dtype=bool)
    present = np.zeros((batch, max(hh, 1)), dtype=bool)
    recent = list(zip(patches, masks))[-hh:] if hh else []
    offset = hh - len(recent)
    for i, (p, m) in enumerate(recent):
        hist[:, offset + i], hmask[:, offset + i], present[:, offset + i] = p, m, True
    return hist[:, :hh], hmask[:, :hh], present[:, :hh]


def generate_batch(
    model: PatchARModel,
    text_ids: np.ndarray,
    prompts: np.ndarray | None,
    sampler_cfg: SamplerConfig,
    max_patches: int,
    rng: np.random.Generator,
    stop_threshold: float = STOP_THRESHOLD,
) -> list[GenerationResult]:
    """Continue a batch of equally long prompts patch by patch.

    text_ids: (B, L) ints; prompts: (B, N0, D) tokens or None.
    """
    cfg = model.cfg
    text_ids = np.atleast_2d(np.asarray(text_ids, dtype=np.int64))
    b = text_ids.shape[0]
    p, d = cfg.patch_size, cfg.token_dim
    patches: list[np.ndarray] = []
    masks: list[np.ndarray] = []
    if prompts is not None and np.asarray(prompts).shape[1] > 0:
        prompts = np.asarray(prompts, dtype=cfg.dtype)
        per = [patchify_array(x, p) for x in prompts]
        for k in range(per[0][0].shape[0]):
            patches.append(np.stack([x[0][k] for x in per]))
            masks.append(np.stack([x[1][k] for x in per]))

    generated: list[np.ndarray] = []
    stopped = np.zeros(b, dtype=bool)
    n_done = np.full(b, -1)
    if max_patches <= 0:
        empty = np.zeros((0, d))
        return [GenerationResult(empty, 0, False) for _ in range(b)]

    cache = nx.KVCache()
    with nx.no_grad():
        prefix = model.embeddings(text_ids)
        if patches:
            emb = model.encoder(np.stack(patches, 1).reshape(-1, p, d), np.stack(masks, 1).reshape(-1, p))
            prefix = nx.concat([prefix, emb.reshape(b, len(patches), -1)], axis=1)
        h_all = model.lm(prefix, "causal", cache=cache).data
        h = h_all[:, -1]
        if patches:
            stopped |= _stop(model, h) > stop_threshold
            n_done[stopped] = 0

        for k in range(max_patches):
            if stopped.all():
                break
            hist, hmask, present = _history_window(patches, masks, cfg, b)
            net = _velocity_net(model, h, hist, hmask, present, sampler_cfg.w)
            x = temperature_sample(net, sampler_cfg, (b, p, d), rng)
            full = np.ones((b, p), dtype=bool)
            patches.append(x)
            masks.append(full)
            generated.append(x)
            emb = model.encoder(x, None).reshape(b, 1, -1)
            h = model.lm(emb, "causal", cache=cache).data[:, -1]
            newly = (_stop(model, h) > stop_threshold) & ~stopped
            n_done[newly] = k + 1
            stopped |= newly

    out = []
    gen = np.stack(generated, 1) if generated else np.zeros((b, 0, p, d))
    for i in range(b):
        n = n_done[i] if stopped[i] else gen.shape[1]
        out.append(GenerationResult(gen[i, :n].reshape(-1, d), int(n), bool(stopped[i])))
    return out


def generate(
    model: PatchARModel,
    text_prompt: np.ndarray,
    audio_prompt: np.ndarray | None,
    sampler_cfg: SamplerConfig,
    max_patches: int,
    rng: np.random.Generator | int = 0,
) -> GenerationResult:
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    prompts = None if audio_prompt is None else np.asarray(audio_prompt)[None]
    return generate_batch(model, np.asarray(text_prompt)[None], prompts, sampler_cfg, max_patches, rng)[0]


def _stop(model: PatchARModel, h: np.ndarray) -> np.ndarray:
    logits = model.stop_head(Tensor(h)).data
    return 1.0 / (1.0 + np.exp(-logits))


def _velocity_net(model, h, hist, hmask, present, w):
    b = h.shape[0]

    def net(z, t):
        if w == 0:
            return model.locdit(h, np.full(b, t), hist, present, z, hmask).data
        both = model.locdit(
            np.concatenate([h, np.zeros_like(h)]),
            np.full(2 * b, t),
            np.concatenate([hist, hist]),
            np.concatenate([present, present]),
            np.concatenate([z, z]),
            np.concatenate([hmask, hmask]),
        ).data
        return GuidedScore(both[:b], both[b:])

    return net


# -- checkpoints ------------------------------------------------------------------------

def save_checkpoint(path, model: PatchARModel, extra: dict[str, np.ndarray] | None = None, meta: dict | None = None) -> None:
    arrays = {f"param/{k}": v.astype(np.float64) for k, v in model.state_dict().items()}
    for k, v in (extra or {}).items():
        arrays[f"extra/{k}"] = v
    header = {"model_config": asdict(model.cfg)} | (meta or {})
    io.write_container(path, "checkpoint", arrays, header)


def load_checkpoint(path) -> tuple[PatchARModel, dict[str, np.ndarray], dict]:
    arrays, meta = io.read_container(path, "checkpoint")
    cfg = ModelConfig(**meta["model_config"])
    model = PatchARModel(cfg)
    model.load_state_dict({k[6:]: v for k, v in arrays.items() if k.startswith("param/")})
    extra = {k[6:]: v for k, v in arrays.items() if k.startswith("extra/")}
    return model, extra, meta
