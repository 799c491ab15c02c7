"""Generator, feature-quantized discriminator, losses and the training step."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .datasets import MixtureSpec, draw, make_spec
from .quantizer import Codebook, QuantizeResult, ema_update, init_codebook, quantize_map
from .rng import SplitMix64

# RNG stream ids derived from the run seed.
STREAM_GEN_INIT = 1
STREAM_DISC_INIT = 2
STREAM_CODEBOOK = 3
STREAM_DATA = 4
STREAM_LATENT = 5
STREAM_EVAL = 6


class DivergenceError(RuntimeError):
    def __init__(self, iteration: int, what: str):
        super().__init__(f"non-finite {what} at iteration {iteration}")
        self.iteration = iteration
        self.what = what


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    # data
    dataset: str = "ring"
    modes: int = 8
    radius: float = 2.0
    std: float = 0.02
    # networks
    latent_dim: int = 2
    data_dim: int = 2
    g_hidden: tuple[int, ...] = (128, 128, 128)
    d_hidden: tuple[int, ...] = (128, 128, 128)
    slope: float = 0.2
    # optimization
    batch_size: int = 64
    g_lr: float = 2e-4
    d_lr: float = 2e-4
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    d_steps: int = 1
    g_steps: int = 1
    g_loss: str = "non-saturating"
    # feature quantization
    fq_layers: tuple[int, ...] = ()
    fq_dim: int = 0  # 0: one position per sample, D = layer width
    P: int = 1
    decay: float = 0.9
    beta: float = 0.25
    alpha: float = 1.0
    warmup_iters: int = -1  # -1: 10% of iterations
    fq_mode: str = "ema"
    g_commit: bool = True
    codebook_scale: float = 1.0
    # schedule
    iterations: int = 20000
    eval_interval: int = 500
    checkpoint_interval: int = 1000
    eval_samples: int = 2500
    mmd_batch: int = 64
    probe_layer: int = 0  # feature-MMD layer; 0: first FQ layer, else 2
    last_k: int = 10
    seed: int = 0

    def __post_init__(self):
        self.g_hidden = tuple(int(v) for v in self.g_hidden)
        self.d_hidden = tuple(int(v) for v in self.d_hidden)
        self.fq_layers = tuple(sorted({int(v) for v in self.fq_layers}))

    @property
    def K(self) -> int:
        return 2**self.P

    @property
    def warmup(self) -> int:
        if self.warmup_iters >= 0:
            return self.warmup_iters
        return self.iterations // 10

    def validate(self) -> "TrainConfig":
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        need(self.batch_size >= 1, "batch_size must be >= 1")
        need(self.d_steps >= 1 and self.g_steps >= 1, "d_steps and g_steps must be >= 1")
        need(self.alpha >= 0, "alpha must be >= 0")
        need(0.0 <= self.decay < 1.0, "decay must lie in [0, 1)")
        need(self.beta >= 0, "beta must be >= 0")
        need(self.P >= 0, "P must be >= 0")
        need(self.g_loss in ("non-saturating", "minimax"), f"unknown g_loss {self.g_loss!r}")
        need(self.fq_mode in ("ema", "loss"), f"unknown fq_mode {self.fq_mode!r}")
        need(all(w >= 1 for w in self.g_hidden + self.d_hidden), "hidden widths must be positive")
        for layer in self.fq_layers:
            need(1 <= layer <= len(self.d_hidden), f"fq layer {layer} outside 1..{len(self.d_hidden)}")
            need(self.fq_dim >= 0, "fq_dim must be >= 0")
            need(self.d_hidden[layer - 1] % self.code_dim(layer) == 0,
                 f"hidden width {self.d_hidden[layer - 1]} not divisible by fq_dim {self.fq_dim}")
        need(0 <= self.probe_layer <= len(self.d_hidden), f"probe_layer outside 0..{len(self.d_hidden)}")
        need(self.d_hidden[self.mmd_layer - 1] % self.code_dim(self.mmd_layer) == 0,
             f"probe layer width not divisible by fq_dim {self.fq_dim}")
        need(self.iterations >= 0, "iterations must be >= 0")
        need(self.eval_interval >= 1 and self.checkpoint_interval >= 1, "intervals must be >= 1")
        need(self.std > 0 and self.radius > 0 and self.modes >= 1, "invalid dataset parameters")
        return self

    @property
    def mmd_layer(self) -> int:
        if self.probe_layer:
            return self.probe_layer
        return self.fq_layers[0] if self.fq_layers else min(2, len(self.d_hidden))

    def code_dim(self, layer: int) -> int:
        """Codebook item width at ``layer``."""
        return self.fq_dim or self.d_hidden[layer - 1]

    def spec(self) -> MixtureSpec:
        return make_spec(self.dataset, self.modes, self.radius, self.std)

    def replace(self, **changes) -> "TrainConfig":
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        values.update(changes)
        return TrainConfig(**values)


# --- networks -----------------------------------------------------------


class Mlp:
    """Fully connected stack; leaky-ReLU on hidden layers, linear output."""

    def __init__(self, widths: Sequence[int], slope: float = 0.2, seed: int = 0, stream: int = 0):
        widths = [int(w) for w in widths]
        if len(widths) < 2 or any(w < 1 for w in widths):
            raise ValueError(f"invalid layer widths {widths}")
        self.widths = widths
        self.slope = slope
        rng = SplitMix64(seed, stream)
        self.weights: list[Tensor] = []
        self.biases: list[Tensor] = []
        for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
            bound = 1.0 / math.sqrt(fan_in)
            w = bound * (2.0 * rng.uniform(fan_in * fan_out) - 1.0)
            b = bound * (2.0 * rng.uniform(fan_out) - 1.0)
            self.weights.append(Tensor(w.reshape(fan_in, fan_out), requires_grad=True, name=f"W{i}"))
            self.biases.append(Tensor(b, requires_grad=True, name=f"b{i}"))

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def parameters(self) -> list[Tensor]:
        return [t for pair in zip(self.weights, self.biases) for t in pair]

    def layer(self, i: int, x: Tensor) -> Tensor:
        h = ad.add_bias(ad.matmul(x, self.weights[i]), self.biases[i])
        if i < self.n_layers - 1:
            h = ad.leaky_relu(h, self.slope)
        return h

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.widths[0]:
            raise ad.ShapeError(f"input width {x.shape[-1]} != {self.widths[0]}")
        for i in range(self.n_layers):
            x = self.layer(i, x)
        return x

    def copy(self) -> "Mlp":
        other = Mlp.__new__(Mlp)
        other.widths = list(self.widths)
        other.slope = self.slope
        other.weights = [Tensor(w.data.copy(), requires_grad=True, name=w.name) for w in self.weights]
        other.biases = [Tensor(b.data.copy(), requires_grad=True, name=b.name) for b in self.biases]
        return other


def generate(g: Mlp, z: Tensor) -> Tensor:
    return g(z)


class FqDiscriminator:
    """Mlp discriminator with codebooks after selected hidden layers (1-based)."""

    def __init__(self, net: Mlp, codebooks: dict[int, Codebook] | None = None):
        self.net = net
        self.codebooks: dict[int, Codebook] = dict(sorted((codebooks or {}).items()))
        for layer, cb in self.codebooks.items():
            if not 1 <= layer < net.n_layers:
                raise ValueError(f"fq layer {layer} is not a hidden layer")
            width = net.widths[layer]
            if width % cb.D:
                raise ValueError(f"layer {layer} width {width} not divisible by codebook D={cb.D}")

    @property
    def fq_layers(self) -> tuple[int, ...]:
        return tuple(self.codebooks)

    def parameters(self) -> list[Tensor]:
        params = self.net.parameters()
        params += [cb.param for cb in self.codebooks.values() if cb.param is not None]
        return params

    def bottom(self, x: Tensor, layer: int) -> Tensor:
        """Hidden features after ``layer`` (no quantization)."""
        for i in range(layer):
            x = self.net.layer(i, x)
        return x

    def top(self, h: Tensor, layer: int) -> Tensor:
        """Remaining layers from hidden ``layer`` to the logit (no quantization)."""
        for i in range(layer, self.net.n_layers):
            h = self.net.layer(i, h)
        return h

    def __call__(self, x: Tensor, bypass: bool = False, events: list | None = None):
        return discriminate(self, x, bypass, events)


def discriminate(
    d: FqDiscriminator, x: Tensor, bypass: bool = False, events: list | None = None
) -> tuple[Tensor, dict[int, QuantizeResult]]:
    """Logits plus one ``QuantizeResult`` per FQ layer."""
    if x.shape[-1] != d.net.widths[0]:
        raise ad.ShapeError(f"input width {x.shape[-1]} != {d.net.widths[0]}")
    results: dict[int, QuantizeResult] = {}
    h = x
    for i in range(d.net.n_layers):
        h = d.net.layer(i, h)
        cb = d.codebooks.get(i + 1)
        if cb is not None:
            if events is not None:
                events.append("quantize")
            q = quantize_map(h, cb, bypass=bypass)
            results[i + 1] = q
            h = q.quantized
    return h, results


def build_models(cfg: TrainConfig) -> tuple[Mlp, FqDiscriminator]:
    gen = Mlp([cfg.latent_dim, *cfg.g_hidden, cfg.data_dim], cfg.slope, cfg.seed, STREAM_GEN_INIT)
    net = Mlp([cfg.data_dim, *cfg.d_hidden, 1], cfg.slope, cfg.seed, STREAM_DISC_INIT)
    books = {}
    for j, layer in enumerate(cfg.fq_layers):
        cb = init_codebook(cfg.K, cfg.code_dim(layer), cfg.seed, scale=cfg.codebook_scale,
                           decay=cfg.decay, beta=cfg.beta, stream=STREAM_CODEBOOK + 100 * (j + 1))
        if cfg.fq_mode == "loss":
            cb.make_trainable()
        books[layer] = cb
    return gen, FqDiscriminator(net, books)


# --- losses -------------------------------------------------------------


def _check_finite(t: Tensor, what: str, iteration: int) -> None:
    if not np.all(np.isfinite(t.data)):
        raise DivergenceError(iteration, what)


def gan_losses(real_logits: Tensor, fake_logits: Tensor, g_mode: str = "non-saturating",
               iteration: int = -1) -> tuple[Tensor, Tensor]:
    """Discriminator and generator losses from raw logits.

    ``d_loss = -[mean log s(real) + mean log(1 - s(fake))]``, written with
    softplus so that both terms stay finite for large logits.
    """
    _check_finite(real_logits, "real logits", iteration)
    _check_finite(fake_logits, "fake logits", iteration)
    d_loss = ad.add(ad.mean(ad.softplus(ad.scale(real_logits, -1.0))),
                    ad.mean(ad.softplus(fake_logits)))
    if g_mode == "non-saturating":
        g_loss = ad.mean(ad.softplus(ad.scale(fake_logits, -1.0)))
    elif g_mode == "minimax":
        g_loss = ad.scale(ad.mean(ad.softplus(fake_logits)), -1.0)
    else:
        raise ValueError(f"unknown generator loss {g_mode!r}")
    return d_loss, g_loss


def fqgan_objective(gan_loss: Tensor, quant_losses: Sequence[Tensor], alpha: float) -> Tensor:
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    if not quant_losses:
        return gan_loss
    total = quant_losses[0]
    for q in quant_losses[1:]:
        total = ad.add(total, q)
    return ad.add(gan_loss, ad.scale(total, alpha))


def anneal_alpha(iteration: int, cfg: TrainConfig) -> float:
    """Linear ramp from 0 to ``cfg.alpha`` over the warmup, constant after."""
    warm = cfg.warmup
    if warm <= 0 or iteration >= warm:
        return cfg.alpha
    return cfg.alpha * iteration / warm


def in_warmup(iteration: int, cfg: TrainConfig) -> bool:
    return iteration < cfg.warmup


# --- optimizer ----------------------------------------------------------


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float, betas=(0.5, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads: Sequence[np.ndarray]) -> None:
        self.t += 1
        step_size = self.lr / (1.0 - self.b1**self.t)
        root_c2 = math.sqrt(1.0 - self.b2**self.t)
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * (g * g)
            denom = np.sqrt(v)
            denom /= root_c2
            denom += self.eps
            p.data -= step_size * (m / denom)


# --- training -----------------------------------------------------------


@dataclass
class GanState:
    config: TrainConfig
    gen: Mlp
    disc: FqDiscriminator
    opt_g: Adam
    opt_d: Adam
    data_rng: SplitMix64
    latent_rng: SplitMix64
    iteration: int = 0

    @property
    def spec(self) -> MixtureSpec:
        return self.config.spec()


def init_state(cfg: TrainConfig) -> GanState:
    cfg.validate()
    gen, disc = build_models(cfg)
    betas = (cfg.adam_beta1, cfg.adam_beta2)
    return GanState(
        config=cfg,
        gen=gen,
        disc=disc,
        opt_g=Adam(gen.parameters(), cfg.g_lr, betas, cfg.adam_eps),
        opt_d=Adam(disc.parameters(), cfg.d_lr, betas, cfg.adam_eps),
        data_rng=SplitMix64(cfg.seed, STREAM_DATA),
        latent_rng=SplitMix64(cfg.seed, STREAM_LATENT),
    )


@dataclass
class StepMetrics:
    iteration: int
    d_loss: float
    g_loss: float
    alpha: float
    bypass: bool
    commit: dict[int, float] = field(default_factory=dict)
    dict_loss: dict[int, float] = field(default_factory=dict)
    counts: dict[int, np.ndarray] = field(default_factory=dict)


def _phase(state: GanState, spec: MixtureSpec, alpha: float, bypass: bool,
           update_d: bool, update_g: bool, events: list | None, skip_ema: bool = False) -> StepMetrics:
    cfg = state.config
    B = cfg.batch_size
    it = state.iteration

    def emit(name):
        if events is not None:
            events.append(name)

    emit("sample")
    z = Tensor(state.latent_rng.normal((B, cfg.latent_dim)))
    x = Tensor(draw(spec, B, state.data_rng))
    with Tape() as tape:
        emit("generate")
        fake = generate(state.gen, z)
        emit("forward")
        logits, quant = discriminate(state.disc, ad.concat_rows(x, fake), bypass, events)
        if update_d and cfg.fq_mode == "ema" and not skip_ema:
            emit("ema")
            for layer, q in quant.items():
                ema_update(state.disc.codebooks[layer], q.features, q.indices)
        real_l = ad.rows(logits, 0, B)
        fake_l = ad.rows(logits, B, 2 * B)
        d_loss, g_loss = gan_losses(real_l, fake_l, cfg.g_loss, it)
        losses = []
        if update_d:
            lq = []
            for q in quant.values():
                term = q.commit_loss
                if cfg.fq_mode == "loss":
                    term = ad.add(q.dict_loss, term)
                lq.append(term)
            d_total = fqgan_objective(d_loss, lq, alpha)
            _check_finite(d_total, "discriminator loss", it)
            losses.append(d_total)
        if update_g:
            lq_fake = []
            if cfg.g_commit:
                for layer, q in quant.items():
                    lq_fake.append(q.commit_rows(B, 2 * B, state.disc.codebooks[layer].beta))
            g_total = fqgan_objective(g_loss, lq_fake, alpha)
            _check_finite(g_total, "generator loss", it)
            losses.append(g_total)
        wrt = []
        if update_d:
            wrt.append(state.opt_d.params)
        if update_g:
            wrt.append(state.opt_g.params)
        grads = tape.backward_many(losses, wrt)
    k = 0
    if update_d:
        emit("d-update")
        gd = grads[k]
        k += 1
        state.opt_d.step([gd[p] for p in state.opt_d.params])
    if update_g:
        emit("g-update")
        gg = grads[k]
        state.opt_g.step([gg[p] for p in state.opt_g.params])
    return StepMetrics(
        iteration=it,
        d_loss=float(d_loss.data),
        g_loss=float(g_loss.data),
        alpha=alpha,
        bypass=bypass,
        commit={l: float(q.commit_loss.data) for l, q in quant.items()},
        dict_loss={l: float(q.dict_loss.data) for l, q in quant.items()},
        counts={l: q.counts for l, q in quant.items()},
    )


def train_step(state: GanState, events: list | None = None, skip_ema: bool = False) -> StepMetrics:
    """One iteration: ``d_steps - 1`` discriminator-only phases, then a joint phase.

    The joint phase follows the FQ-GAN loop literally: one forward of real
    and fake samples, momentum update of the codebooks, then discriminator
    and generator gradients from that same forward. ``g_steps - 1`` extra
    generator-only phases follow. ``skip_ema`` exists for instrumentation.
    """
    cfg = state.config
    spec = state.spec
    alpha = anneal_alpha(state.iteration, cfg)
    bypass = in_warmup(state.iteration, cfg)
    for _ in range(cfg.d_steps - 1):
        _phase(state, spec, alpha, bypass, True, False, events, skip_ema)
    metrics = _phase(state, spec, alpha, bypass, True, True, events, skip_ema)
    for _ in range(cfg.g_steps - 1):
        _phase(state, spec, alpha, bypass, False, True, events, skip_ema)
    state.iteration += 1
    return metrics
