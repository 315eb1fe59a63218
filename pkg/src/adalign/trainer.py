"""Alternating minimax training.

Each epoch runs Step A (descend on the GNN parameters for source loss plus
lambda times the alignment loss, sampler frozen) followed by Step B (ascend on
the sampler parameters for the alignment loss, GNN frozen). Both steps draw a
fresh frequency batch from their own random stream, and full graphs are used
in every step.
"""

from __future__ import annotations

import dataclasses
import logging
import math
import time
import weakref
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .encoder import (
    EncoderParams,
    classify,
    encode,
    load_checkpoint,
    params_from_arrays,
    predict,
    save_checkpoint,
    source_loss,
)
from .errors import ConfigError, ContractError, FormatError, TrainingAborted
from .graph import DomainGraph, NormalizedAdjacency, normalize_adjacency
from .metrics import macro_f1, micro_f1
from .rng import substream
from .sampler import (
    DEFAULT_BANDS,
    SAMPLER_KINDS,
    FrequencyBatch,
    SamplerParams,
    fixed_band_frequencies,
    sample_frequencies,
    sampler_ascent_objective,
)
from .spectral import alignment_loss

log = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class TrainConfig:
    lam: float = 1.0
    kappa: float = 0.7
    num_freqs: int = 2048
    num_components: int = 4
    lr_model: float = 3e-3
    lr_sampler: float = 3e-3
    epochs: int = 150
    grad_clip_norm: float = 5.0
    seed: int = 0
    sampler: str = "adaptive"
    target_prop_steps: int = 0
    eval_every: int = 10
    sampler_steps: int = 1
    hidden_dim: int = 64
    emb_dim: int = 64
    num_layers: int = 2
    band_lo: float | None = None
    band_hi: float | None = None

    def validate(self) -> None:
        if not (self.lam >= 0 and math.isfinite(self.lam)):
            raise ConfigError("lam: must be a finite value >= 0")
        if not 0 <= self.kappa <= 1:
            raise ConfigError("kappa: must lie in [0, 1]")
        if self.lr_model <= 0 or self.lr_sampler <= 0:
            raise ConfigError("lr_model/lr_sampler: learning rates must be > 0")
        if self.epochs < 1:
            raise ConfigError("epochs: must be >= 1")
        if self.grad_clip_norm <= 0:
            raise ConfigError("grad_clip_norm: must be > 0")
        if self.sampler not in SAMPLER_KINDS:
            raise ConfigError(f"sampler: must be one of {', '.join(SAMPLER_KINDS)}")
        if self.num_components < 1 or self.num_freqs < self.num_components:
            raise ConfigError("num_freqs/num_components: need num_freqs >= num_components >= 1")
        if min(self.hidden_dim, self.emb_dim, self.num_layers, self.eval_every) < 1:
            raise ConfigError("hidden_dim/emb_dim/num_layers/eval_every: must be >= 1")
        if self.target_prop_steps < 0 or self.sampler_steps < 0:
            raise ConfigError("target_prop_steps/sampler_steps: must be >= 0")
        if (self.band_lo is None) != (self.band_hi is None):
            raise ConfigError("band_lo/band_hi: set both or neither")
        if self.band_lo is not None and not 0 <= self.band_lo < self.band_hi:
            raise ConfigError("band_lo/band_hi: need 0 <= band_lo < band_hi")

    def band(self) -> tuple[float, float] | None:
        if self.band_lo is not None:
            return (self.band_lo, self.band_hi)
        return DEFAULT_BANDS.get(self.sampler)

    def to_mapping(self) -> dict[str, object]:
        return dataclasses.asdict(self)

    @classmethod
    def from_mapping(cls, values: dict[str, object]) -> TrainConfig:
        kinds = {f.name: f.type for f in dataclasses.fields(cls)}
        kwargs = {}
        for raw_key, raw in values.items():
            key = CONFIG_ALIASES.get(raw_key, raw_key).replace("-", "_")
            key = CONFIG_ALIASES.get(key, key)
            if key not in kinds:
                raise ConfigError(f"{raw_key}: unknown config field")
            kwargs[key] = _coerce(key, kinds[key], raw)
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg


CONFIG_ALIASES = {"lambda": "lam"}


def _coerce(key: str, kind: str, raw):
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    try:
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind.startswith("float"):
            return None if text.lower() in ("", "none") else float(text)
        return text
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r}") from None


def parse_config_text(text: str) -> dict[str, str]:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def config_to_text(cfg: TrainConfig) -> str:
    return "".join(f"{k}={'none' if v is None else v}\n" for k, v in cfg.to_mapping().items())


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamSlot:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def like(cls, param: np.ndarray) -> AdamSlot:
        return cls(np.zeros_like(param), np.zeros_like(param))


def adam_update(param: np.ndarray, grad: np.ndarray, slot: AdamSlot, lr: float) -> np.ndarray:
    """One bias-corrected Adam step; advances ``slot`` and returns the new value."""
    if param.shape != grad.shape or slot.m.shape != param.shape:
        raise ContractError(f"adam_update: shapes {param.shape}, {grad.shape}, {slot.m.shape}")
    slot.step += 1
    slot.m = ADAM_BETA1 * slot.m + (1 - ADAM_BETA1) * grad
    slot.v = ADAM_BETA2 * slot.v + (1 - ADAM_BETA2) * grad * grad
    m_hat = slot.m / (1 - ADAM_BETA1**slot.step)
    v_hat = slot.v / (1 - ADAM_BETA2**slot.step)
    return param - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)


def clip_global_norm(grads: list[np.ndarray], max_norm: float) -> tuple[list[np.ndarray], float]:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if norm > max_norm:
        scale = max_norm / norm
        grads = [g * scale for g in grads]
    return grads, norm


# ---------------------------------------------------------------------------
# state and records


@dataclass
class TrainState:
    encoder: EncoderParams
    sampler: SamplerParams
    adam_model: list[AdamSlot]
    adam_sampler: list[AdamSlot]
    rng_model: np.random.Generator
    rng_sampler: np.random.Generator
    epoch: int = 0
    clamp_active: int = 0

    @classmethod
    def init(cls, in_dim: int, num_classes: int, cfg: TrainConfig) -> TrainState:
        encoder = EncoderParams.init(
            in_dim,
            num_classes,
            substream(cfg.seed, "init"),
            hidden_dim=cfg.hidden_dim,
            emb_dim=cfg.emb_dim,
            num_layers=cfg.num_layers,
        )
        sampler = SamplerParams.init(cfg.num_components, cfg.emb_dim)
        return cls(
            encoder=encoder,
            sampler=sampler,
            adam_model=[AdamSlot.like(t.values) for t in encoder.tensors()],
            adam_sampler=[AdamSlot.like(t.values) for t in sampler.tensors()],
            rng_model=substream(cfg.seed, "freq_model"),
            rng_sampler=substream(cfg.seed, "freq_sampler"),
        )


RECORD_FIELDS = ("epoch", "loss_source", "loss_align", "micro_f1", "macro_f1", "clamp_active", "wall_ms")


@dataclass
class MetricsRecord:
    """One evaluation point. F1 fields are None when the target is unlabelled.

    ``wall_ms`` is the only field that varies between identical runs; it is
    None when read back from a log written without timings.
    """

    epoch: int
    loss_source: float
    loss_align: float
    micro_f1: float | None
    macro_f1: float | None
    clamp_active: int
    wall_ms: float | None

    def deterministic(self) -> tuple:
        return tuple(getattr(self, f) for f in RECORD_FIELDS if f != "wall_ms")


def format_record(rec: MetricsRecord) -> str:
    parts = []
    for name in RECORD_FIELDS:
        value = getattr(rec, name)
        if value is None:
            text = "na"
        elif isinstance(value, float):
            text = repr(value)
        else:
            text = str(value)
        parts.append(f"{name}:{text}")
    return " ".join(parts)


def parse_record(line: str, lineno: int | None = None) -> MetricsRecord:
    try:
        pairs = dict(p.split(":", 1) for p in line.split())
        values = {}
        for name in RECORD_FIELDS:
            text = pairs[name]
            if name in ("epoch", "clamp_active"):
                values[name] = int(text)
            else:
                values[name] = None if text == "na" else float(text)
    except (KeyError, ValueError) as exc:
        raise FormatError(f"malformed metrics record ({exc})", lineno) from None
    return MetricsRecord(**values)


def write_metrics_log(path, records: list[MetricsRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.writelines(format_record(r) + "\n" for r in records)


def read_metrics_log(path) -> list[MetricsRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if line.strip():
                records.append(parse_record(line, lineno))
    return records


# ---------------------------------------------------------------------------
# steps

_adj_cache: "weakref.WeakKeyDictionary[DomainGraph, NormalizedAdjacency]" = weakref.WeakKeyDictionary()


def adjacency(graph: DomainGraph) -> NormalizedAdjacency:
    adj = _adj_cache.get(graph)
    if adj is None:
        adj = normalize_adjacency(graph)
        _adj_cache[graph] = adj
    return adj


@dataclass
class StepLosses:
    loss_source: float
    loss_align: float
    loss_total: float
    grad_norm: float = 0.0


def _draw(state: TrainState, cfg: TrainConfig, rng, differentiable: bool) -> FrequencyBatch:
    if cfg.sampler == "adaptive":
        return sample_frequencies(state.sampler, cfg.num_freqs, rng, cfg.emb_dim, differentiable)
    return fixed_band_frequencies(cfg.sampler, cfg.band(), cfg.num_freqs, cfg.emb_dim, rng)


def embed_both(state: TrainState, source: DomainGraph, target: DomainGraph, cfg: TrainConfig):
    z_s = encode(adjacency(source), source.features, state.encoder)
    z_t = encode(adjacency(target), target.features, state.encoder, cfg.target_prop_steps)
    return z_s, z_t


def _abort(what: str, epoch: int, **values) -> TrainingAborted:
    record = {"epoch": epoch, "step": what, **values}
    return TrainingAborted(f"non-finite loss in {what} at epoch {epoch}: {values}", record)


def train_step_model(state: TrainState, source: DomainGraph, target: DomainGraph, cfg: TrainConfig) -> StepLosses:
    """Step A: one Adam step on the GNN parameters with the sampler frozen."""
    if source.labels is None:
        raise ContractError("source graph must carry labels")
    batch = _draw(state, cfg, state.rng_model, differentiable=False)
    params = state.encoder.tensors()
    with Tape() as tape:
        z_s, z_t = embed_both(state, source, target, cfg)
        l_src = source_loss(classify(z_s, state.encoder), source.labels)
        if cfg.lam > 0:
            l_align = alignment_loss(z_s, z_t, batch.T, batch.weights, cfg.kappa)
            total = ad.add(l_src, ad.scalar_mul(l_align, cfg.lam))
        else:
            total = l_src
    if cfg.lam == 0:
        # logged only; computed off the tape so it cannot influence the update
        l_align = alignment_loss(z_s.detach(), z_t.detach(), batch.T, batch.weights, cfg.kappa)
    losses = StepLosses(l_src.item(), l_align.item(), total.item())
    if not all(map(math.isfinite, (losses.loss_source, losses.loss_align, losses.loss_total))):
        raise _abort("step_a", state.epoch, **dataclasses.asdict(losses))

    with np.errstate(over="ignore", invalid="ignore"):
        grads = backward_grads(tape, total, params)
        grads, losses.grad_norm = clip_global_norm(grads, cfg.grad_clip_norm)
    if not math.isfinite(losses.grad_norm):
        raise _abort("step_a", state.epoch, **dataclasses.asdict(losses))
    for p, g, slot in zip(params, grads, state.adam_model):
        p.values = adam_update(p.values, g, slot, cfg.lr_model)
    return losses


def backward_grads(tape: Tape, loss: Tensor, params: list[Tensor]) -> list[np.ndarray]:
    grads = ad.backward(tape, loss)
    return [grads[p] for p in params]


def train_step_sampler(state: TrainState, source: DomainGraph, target: DomainGraph, cfg: TrainConfig) -> float | None:
    """Step B: one Adam ascent step on the sampler with the GNN frozen.

    Returns the alignment loss before the update, or None for fixed samplers.
    """
    if cfg.sampler != "adaptive":
        return None
    # no tape active: encoder outputs are plain values
    z_s, z_t = embed_both(state, source, target, cfg)
    params = state.sampler.tensors()
    with Tape() as tape:
        batch = sample_frequencies(state.sampler, cfg.num_freqs, state.rng_sampler, cfg.emb_dim)
        l_align = sampler_ascent_objective(batch, z_s, z_t, cfg.kappa)
    value = l_align.item()
    if not math.isfinite(value):
        raise _abort("step_b", state.epoch, loss_align=value)
    grads = backward_grads(tape, l_align, params)
    if not all(np.isfinite(g).all() for g in grads):
        raise _abort("step_b", state.epoch, loss_align=value, grad="non-finite")
    for p, g, slot in zip(params, grads, state.adam_sampler):
        p.values = adam_update(p.values, -g, slot, cfg.lr_sampler)
    state.clamp_active = state.sampler.clamp_()
    return value


# ---------------------------------------------------------------------------
# evaluation and fit


def evaluate_target(state: TrainState, target: DomainGraph, cfg: TrainConfig) -> tuple[float | None, float | None]:
    if target.labels is None:
        return None, None
    z_t = encode(adjacency(target), target.features, state.encoder, cfg.target_prop_steps)
    pred = predict(classify(z_t, state.encoder))
    c = state.encoder.num_classes
    return micro_f1(target.labels, pred, c), macro_f1(target.labels, pred, c)


def _initial_record(state, source, target, cfg) -> MetricsRecord:
    t0 = time.perf_counter()
    z_s, z_t = embed_both(state, source, target, cfg)
    l_src = source_loss(classify(z_s, state.encoder), source.labels).item()
    batch = _draw(state, cfg, substream(cfg.seed, "eval"), differentiable=False)
    l_align = alignment_loss(z_s, z_t, batch.T, batch.weights, cfg.kappa).item()
    mi, ma = evaluate_target(state, target, cfg)
    return MetricsRecord(0, l_src, l_align, mi, ma, 0, (time.perf_counter() - t0) * 1e3)


def fit(
    source: DomainGraph,
    target: DomainGraph,
    cfg: TrainConfig,
    eval_only: bool = False,
    on_record=None,
) -> tuple[TrainState, list[MetricsRecord]]:
    """Run the alternating minimax procedure.

    A pre-training record (epoch 0) is always produced; with ``eval_only``
    it is the only one. Target labels are read only by the evaluation.
    """
    cfg.validate()
    if source.labels is None:
        raise ContractError("source graph must carry labels")
    if source.feature_dim != target.feature_dim:
        raise ContractError("source and target feature dimensions differ")
    num_classes = max(source.num_classes, target.num_classes)
    state = TrainState.init(source.feature_dim, num_classes, cfg)
    records = [_initial_record(state, source, target, cfg)]
    if on_record:
        on_record(records[-1])
    if eval_only:
        return state, records

    for epoch in range(1, cfg.epochs + 1):
        state.epoch = epoch
        t0 = time.perf_counter()
        losses = train_step_model(state, source, target, cfg)
        for _ in range(cfg.sampler_steps):
            train_step_sampler(state, source, target, cfg)
        wall = (time.perf_counter() - t0) * 1e3
        if epoch % cfg.eval_every == 0 or epoch == cfg.epochs:
            mi, ma = evaluate_target(state, target, cfg)
            rec = MetricsRecord(epoch, losses.loss_source, losses.loss_align, mi, ma, state.clamp_active, wall)
            records.append(rec)
            if on_record:
                on_record(rec)
    return state, records


# ---------------------------------------------------------------------------
# checkpoints


def save_state(path, state: TrainState, cfg: TrainConfig) -> None:
    tensors = [(name, t.values) for name, t in state.encoder.named_tensors()]
    tensors += [(name, t.values) for name, t in state.sampler.named_tensors()]
    meta = {f"config.{k}": ("none" if v is None else str(v)) for k, v in cfg.to_mapping().items()}
    meta["epoch"] = str(state.epoch)
    save_checkpoint(path, tensors, meta)


def load_state(path) -> tuple[EncoderParams, SamplerParams, TrainConfig]:
    arrays, meta = load_checkpoint(path)
    cfg = TrainConfig.from_mapping({k[len("config."):]: v for k, v in meta.items() if k.startswith("config.")})
    encoder = params_from_arrays(arrays)
    sampler = SamplerParams(
        Tensor(arrays["sampler.log_scales"], requires_grad=True),
        Tensor(arrays["sampler.mixture_logits"], requires_grad=True),
    )
    return encoder, sampler, cfg
