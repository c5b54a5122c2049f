"""Synthetic continuation task, training loop and evaluation.

Each example is a sinusoid ``a * sin(2 pi f n + phi)`` folded into
``token_dim``-sample tokens. The text prompt names the frequency,
amplitude and length classes; the phase is random, so a continuation has
to pick it up from the audio prompt.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import io
from . import numerics as nx
from .diffusion import DiffusionPoint, schedule_arrays, schedule_eval
from .model import ModelConfig, PatchARModel, generate_batch
from .numerics import Tensor
from .sampler import SamplerConfig

log = logging.getLogger(__name__)


class NumericAbort(FloatingPointError):
    """Raised when a training step produces a non-finite value."""

    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics


# -- data -----------------------------------------------------------------------------

@dataclass(frozen=True)
class TaskClasses:
    freqs: tuple[float, ...] = (0.02, 0.045, 0.07, 0.095)
    amps: tuple[float, ...] = (0.5, 1.0, 1.5)
    lengths: tuple[int, ...] = (6, 8, 10)  # in patches
    token_dim: int = 8
    patch_size: int = 4

    def __post_init__(self):
        if not self.freqs or not self.amps or not self.lengths:
            raise ValueError("every class list needs at least one entry")
        if any(not 0 < f < 0.5 for f in self.freqs):
            raise ValueError("frequencies must lie in (0, 0.5) cycles per sample")
        if any(a <= 0 for a in self.amps) or any(n < 1 for n in self.lengths):
            raise ValueError("amplitudes and lengths must be positive")
        if self.token_dim < 1 or self.patch_size < 1:
            raise ValueError("token_dim and patch_size must be positive")

    @property
    def vocab_size(self) -> int:
        return len(self.freqs) + len(self.amps) + len(self.lengths)

    def text_ids(self, fc: int, ac: int, lc: int) -> np.ndarray:
        nf, na = len(self.freqs), len(self.amps)
        return np.array([fc, nf + ac, nf + na + lc], dtype=np.int64)

    def samples_per_patch(self) -> int:
        return self.token_dim * self.patch_size


@dataclass
class ToyExample:
    text_ids: np.ndarray
    tokens: np.ndarray  # (N, D)
    freq_class: int
    amp_class: int
    len_class: int
    phase: float


def waveform(freq: float, amp: float, phase: float, n_samples: int, start: int = 0) -> np.ndarray:
    n = np.arange(start, start + n_samples)
    return amp * np.sin(2 * np.pi * freq * n + phase)


def make_dataset(seed: int, count: int, classes: TaskClasses = TaskClasses()) -> list[ToyExample]:
    if count <= 0:
        raise ValueError("dataset needs a positive count")
    rng = np.random.default_rng(seed)
    d = classes.token_dim
    out = []
    for _ in range(count):
        fc = int(rng.integers(len(classes.freqs)))
        ac = int(rng.integers(len(classes.amps)))
        lc = int(rng.integers(len(classes.lengths)))
        phase = float(rng.uniform(0.0, 2 * np.pi))
        n_tok = classes.lengths[lc] * classes.patch_size
        x = waveform(classes.freqs[fc], classes.amps[ac], phase, n_tok * d)
        out.append(ToyExample(classes.text_ids(fc, ac, lc), x.reshape(n_tok, d), fc, ac, lc, phase))
    return out


def save_dataset(path, examples: list[ToyExample], seed: int, classes: TaskClasses, extra_meta: dict | None = None) -> None:
    n = len(examples)
    max_tok = max(e.tokens.shape[0] for e in examples)
    d = classes.token_dim
    tokens = np.zeros((n, max_tok, d))
    lengths = np.zeros(n, dtype=np.int64)
    for i, e in enumerate(examples):
        tokens[i, : e.tokens.shape[0]] = e.tokens
        lengths[i] = e.tokens.shape[0]
    arrays = {
        "text_ids": np.stack([e.text_ids for e in examples]),
        "tokens": tokens,
        "lengths": lengths,
        "labels": np.array([[e.freq_class, e.amp_class, e.len_class] for e in examples], dtype=np.int64),
        "phase": np.array([e.phase for e in examples]),
    }
    meta = {"seed": seed, "count": n, "classes": _classes_record(classes), "token_shape": [max_tok, d]}
    meta.update(extra_meta or {})
    io.write_container(path, "dataset", arrays, meta)


def load_dataset(path) -> tuple[list[ToyExample], dict]:
    arrays, meta = io.read_container(path, "dataset")
    out = []
    for i in range(meta["count"]):
        fc, ac, lc = (int(v) for v in arrays["labels"][i])
        n = int(arrays["lengths"][i])
        out.append(ToyExample(arrays["text_ids"][i].copy(), arrays["tokens"][i, :n].copy(), fc, ac, lc, float(arrays["phase"][i])))
    return out, meta


def _classes_record(c: TaskClasses) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(c).items()}


def classes_from_record(rec: dict) -> TaskClasses:
    return TaskClasses(**{k: tuple(v) if isinstance(v, list) else v for k, v in rec.items()})


@dataclass
class Batch:
    text_ids: np.ndarray  # (B, L)
    patches: np.ndarray  # (B, K, P, D)
    token_valid: np.ndarray  # (B, K, P)
    patch_valid: np.ndarray  # (B, K)
    n_patches: np.ndarray  # (B,)


def make_batch(examples: list[ToyExample], patch_size: int) -> Batch:
    from .model import patchify_array

    per = [patchify_array(e.tokens, patch_size) for e in examples]
    kmax = max(p.shape[0] for p, _ in per)
    b = len(examples)
    d = examples[0].tokens.shape[1]
    patches = np.zeros((b, kmax, patch_size, d))
    tvalid = np.zeros((b, kmax, patch_size), dtype=bool)
    for i, (p, m) in enumerate(per):
        patches[i, : p.shape[0]] = p
        tvalid[i, : p.shape[0]] = m
    counts = np.array([p.shape[0] for p, _ in per])
    pvalid = np.arange(kmax)[None, :] < counts[:, None]
    return Batch(np.stack([e.text_ids for e in examples]), patches, tvalid, pvalid, counts)


# -- optimisation -----------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    steps: int = 2000
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.99)
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    cond_dropout: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.cond_dropout <= 1.0:
            raise ValueError("condition dropout must be a probability")
        if self.batch_size < 1 or self.steps < 0:
            raise ValueError("batch size must be positive and steps non-negative")


class AdamW:
    """Adam with decoupled weight decay (applied to matrices only)."""

    def __init__(self, named_params, lr: float, betas=(0.9, 0.99), eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = list(named_params)
        self.lr, self.betas, self.eps, self.wd = lr, betas, eps, weight_decay
        self.step_count = 0
        self.m = {n: np.zeros_like(p.data) for n, p in self.params}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params}

    def step(self, clip: float | None = None) -> float:
        norm = math.sqrt(sum(float(np.sum(p.grad * p.grad)) for _, p in self.params))
        scale = clip / norm if clip and norm > clip else 1.0
        self.step_count += 1
        b1, b2 = self.betas
        c1 = 1 - b1**self.step_count
        c2 = 1 - b2**self.step_count
        for n, p in self.params:
            g = p.grad * scale
            self.m[n] = b1 * self.m[n] + (1 - b1) * g
            self.v[n] = b2 * self.v[n] + (1 - b2) * g * g
            if self.wd and p.data.ndim >= 2:
                p.data *= 1 - self.lr * self.wd
            p.data -= self.lr * (self.m[n] / c1) / (np.sqrt(self.v[n] / c2) + self.eps)
        return norm

    def state(self) -> dict[str, np.ndarray]:
        out = {"step": np.array([self.step_count], dtype=np.int64)}
        for n in self.m:
            out[f"m/{n}"] = self.m[n]
            out[f"v/{n}"] = self.v[n]
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        self.step_count = int(state["step"][0])
        for n in self.m:
            self.m[n] = state[f"m/{n}"].copy()
            self.v[n] = state[f"v/{n}"].copy()


@dataclass
class TrainingLosses:
    l_diff: float
    l_stop: float
    dropped: int = 0
    n_conditions: int = 0

    @property
    def total(self) -> float:
        return self.l_diff + self.l_stop


def compute_losses(model: PatchARModel, batch: Batch, cond_dropout: float, rng: np.random.Generator):
    """Forward pass; returns (total Tensor, l_diff Tensor, l_stop Tensor, drop mask)."""
    cfg = model.cfg
    b, k, p, d = batch.patches.shape
    hh = cfg.history
    dt = cfg.dtype
    n_text = batch.text_ids.shape[1]

    emb = model.encoder(batch.patches.reshape(b * k, p, d).astype(dt), batch.token_valid.reshape(b * k, p))
    seq = nx.concat([model.embeddings(batch.text_ids), emb.reshape(b, k, -1)], axis=1)
    h = model.lm(seq, "causal")

    # output at position n_text-1+j conditions patch j; output at n_text+j decides stop after patch j
    bi, ji = np.nonzero(batch.patch_valid)
    cond = h[bi, n_text - 1 + ji]
    drop = rng.random(len(bi)) < cond_dropout
    if drop.any():
        cond = cond * Tensor((~drop).astype(dt)[:, None])

    m = len(bi)
    x0 = batch.patches[bi, ji]
    t = rng.random(m)
    eps = rng.standard_normal(x0.shape)
    a, s, da, ds = schedule_arrays(t)
    z = a[:, None, None] * x0 + s[:, None, None] * eps
    v_target = da[:, None, None] * x0 + ds[:, None, None] * eps

    hist = np.zeros((m, hh, p, d))
    hmask = np.ones((m, hh, p), dtype=bool)
    present = np.zeros((m, hh), dtype=bool)
    for slot in range(hh):
        src = ji - hh + slot
        ok = src >= 0
        hist[ok, slot] = batch.patches[bi[ok], src[ok]]
        hmask[ok, slot] = batch.token_valid[bi[ok], src[ok]]
        present[ok, slot] = True
    tmask = batch.token_valid[bi, ji]
    v_pred = model.locdit(cond, t, hist, present, z, hmask, tmask)

    w = np.broadcast_to(tmask[..., None], v_pred.shape).astype(dt)
    r = v_pred - Tensor(v_target.astype(dt))
    l_diff = (r * r * Tensor(w)).sum() * (1.0 / w.sum())

    stop_logits = model.stop_head(h[:, n_text : n_text + k])
    labels = np.arange(k)[None, :] == (batch.n_patches[:, None] - 1)
    l_stop = nx.bce_with_logits(stop_logits, labels, batch.patch_valid)
    return l_diff + l_stop, l_diff, l_stop, drop


def train_step(model: PatchARModel, opt: AdamW, batch: Batch, cfg: TrainConfig, rng: np.random.Generator) -> TrainingLosses:
    model.zero_grad()
    try:
        total, l_diff, l_stop, drop = compute_losses(model, batch, cfg.cond_dropout, rng)
        nx.backward(total)
        for name, p in model.named_parameters():
            if not np.isfinite(p.grad).all():
                raise FloatingPointError(f"non-finite gradient in {name}")
    except FloatingPointError as exc:
        raise NumericAbort(f"training step {opt.step_count} aborted: {exc}", {"step": opt.step_count}) from exc
    opt.step(cfg.grad_clip)
    return TrainingLosses(float(l_diff.data), float(l_stop.data), int(drop.sum()), len(drop))


def step_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng([seed, step])


def make_optimizer(model: PatchARModel, cfg: TrainConfig) -> AdamW:
    return AdamW(model.named_parameters(), cfg.lr, cfg.betas, weight_decay=cfg.weight_decay)


def train(
    model: PatchARModel,
    data: list[ToyExample],
    cfg: TrainConfig,
    opt: AdamW | None = None,
    start_step: int = 0,
    callback=None,
) -> list[TrainingLosses]:
    """Run ``cfg.steps - start_step`` steps; step ``i`` draws from ``step_rng(seed, i)``."""
    opt = opt or make_optimizer(model, cfg)
    history = []
    for i in range(start_step, cfg.steps):
        rng = step_rng(cfg.seed, i)
        idx = rng.choice(len(data), size=cfg.batch_size, replace=False)
        batch = make_batch([data[j] for j in idx], model.cfg.patch_size)
        losses = train_step(model, opt, batch, cfg, rng)
        history.append(losses)
        if callback is not None:
            callback(i, losses)
        if i % 200 == 0:
            log.info("step %d  l_diff %.4f  l_stop %.4f", i, losses.l_diff, losses.l_stop)
    return history


# -- analytic oracle -------------------------------------------------------------------------

def gaussian_oracle_velocity(point: DiffusionPoint, mu, s) -> np.ndarray:
    """Exact posterior-mean velocity when the data are N(mu, s^2 I)."""
    a, sig, da, ds = schedule_eval(point.t)
    z = np.asarray(point.z, dtype=np.float64)
    if sig == 0.0:
        return da * z / a
    denom = a * a * s * s + sig * sig
    x0 = (a * s * s * z + sig * sig * mu) / denom
    return da * x0 + ds * (z - a * x0) / sig


def gaussian_oracle_x0(point: DiffusionPoint, mu, s) -> np.ndarray:
    a, sig, _, _ = schedule_eval(point.t)
    return (a * s * s * np.asarray(point.z) + sig * sig * mu) / (a * a * s * s + sig * sig)


# -- evaluation -----------------------------------------------------------------------------

def estimate_frequency(x: np.ndarray, n_fft: int = 8192) -> float:
    """Peak frequency (cycles/sample) of a Hann-windowed, mean-removed signal."""
    x = np.asarray(x, dtype=np.float64).ravel()
    if x.size < 4:
        return float("nan")
    x = (x - x.mean()) * np.hanning(x.size)
    spec = np.abs(np.fft.rfft(x, n=max(n_fft, x.size)))
    return float(np.argmax(spec) / max(n_fft, x.size))


def classify_frequency(x: np.ndarray, freqs) -> int:
    f = estimate_frequency(x)
    if not np.isfinite(f):
        return -1
    return int(np.argmin(np.abs(np.asarray(freqs) - f)))


@dataclass
class EvalMetrics:
    freq_accuracy: float
    stop_accuracy: float
    boundary_discontinuity: float
    continuation_error: float
    runaway_rate: float
    n: int
    extra: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return asdict(self)


def continuation_metrics(examples: list[ToyExample], results, classes: TaskClasses, prompt_tokens: int) -> EvalMetrics:
    """Score continuations of the first ``prompt_tokens`` tokens of each example.

    A stop counts as correct only when generation halted on its own with the
    total length equal to the true one.
    """
    d = classes.token_dim
    hits = stops = runaway = 0
    disc, err = [], []
    for ex, res in zip(examples, results):
        f = classes.freqs[ex.freq_class]
        amp = classes.amps[ex.amp_class]
        prompt = ex.tokens.ravel()[: prompt_tokens * d]
        gen = res.tokens.ravel()
        stops += int(res.stopped and prompt_tokens + res.tokens.shape[0] == ex.tokens.shape[0])
        runaway += int(res.runaway)
        # a pure tone obeys x[n] = 2 cos(2 pi f) x[n-1] - x[n-2]
        expected = 2 * math.cos(2 * math.pi * f) * prompt[-1] - prompt[-2]
        if gen.size == 0:
            disc.append(abs(expected) / amp)
            err.append(1.0)
            continue
        hits += int(classify_frequency(gen, classes.freqs) == ex.freq_class)
        disc.append(abs(gen[0] - expected) / amp)
        truth = waveform(f, amp, ex.phase, gen.size, start=prompt.size)
        err.append(float(np.mean((gen - truth) ** 2)) / amp**2)
    n = len(examples)
    return EvalMetrics(hits / n, stops / n, float(np.mean(disc)), float(np.mean(err)), runaway / n, n)


def evaluate(
    model: PatchARModel,
    heldout: list[ToyExample],
    classes: TaskClasses,
    sampler_cfg: SamplerConfig,
    seed: int = 0,
    prompt_tokens: int | None = None,
    max_patches: int | None = None,
    batch_size: int = 50,
) -> EvalMetrics:
    """Continue a fixed-length token prompt of every held-out example.

    ``prompt_tokens`` defaults to two task patches; it is counted in tokens
    so that models with different patch sizes see the same prompt.
    """
    p = model.cfg.patch_size
    prompt_tokens = 2 * classes.patch_size if prompt_tokens is None else prompt_tokens
    longest = max(e.tokens.shape[0] for e in heldout)
    max_patches = max_patches or math.ceil((longest - prompt_tokens) / p) + 2
    rng = np.random.default_rng(seed)
    results = []
    for lo in range(0, len(heldout), batch_size):
        chunk = heldout[lo : lo + batch_size]
        text = np.stack([e.text_ids for e in chunk])
        prompts = np.stack([e.tokens[:prompt_tokens] for e in chunk])
        results += generate_batch(model, text, prompts, sampler_cfg, max_patches, rng)
    return continuation_metrics(heldout, results, classes, prompt_tokens)


def diversity_table(
    model: PatchARModel,
    example: ToyExample,
    taus=(0.0, 0.25, 0.5, 0.75, 1.0),
    repeats: int = 100,
    nfe: int = 10,
    w: float = 1.0,
    n_patches: int = 2,
    seed: int = 0,
    prompt_tokens: int = 0,
    solver: str = "ddim",
) -> list[dict]:
    """Per-coordinate std across ``repeats`` generations of the same prompt, per temperature."""
    rows = []
    for tau in taus:
        rng = np.random.default_rng(seed)
        text = np.repeat(example.text_ids[None], repeats, axis=0)
        prompts = np.repeat(example.tokens[None, :prompt_tokens], repeats, axis=0) if prompt_tokens else None
        res = generate_batch(
            model,
            text,
            prompts,
            SamplerConfig(tau=tau, nfe=nfe, w=w, solver=solver),
            n_patches,
            rng,
            stop_threshold=2.0,  # never stop, so every draw has the same length
        )
        gen = np.stack([r.tokens for r in res])
        rows.append({"tau": float(tau), "std": float(gen.std(axis=0).mean()), "mean_abs": float(np.abs(gen).mean())})
    return rows


def default_model_config(classes: TaskClasses, **overrides) -> ModelConfig:
    base = dict(token_dim=classes.token_dim, patch_size=classes.patch_size, text_vocab=classes.vocab_size)
    base.update(overrides)
    return ModelConfig(**base)
