"""Toy MoE denoising model: deterministic weights, routing, and layer math.

Every operation is float64 with a fixed evaluation order so that two code
paths computing the same quantity produce bit-identical results.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from .errors import ConfigurationError, ContractError, NumericsError

# splitmix64 constants (Steele, Lea, Flood; public domain reference stream).
SPLITMIX_GAMMA = 0x9E3779B97F4A7C15
SPLITMIX_MIX1 = 0xBF58476D1CE4E5B9
SPLITMIX_MIX2 = 0x94D049BB133111EB
_U64 = 0xFFFFFFFFFFFFFFFF

# Stream tag so that x0 samples never reuse the weight stream.
_X0_STREAM_TAG = 0xD1CE0B5E55ED5EED

SQRT2 = float(np.sqrt(2.0))


def splitmix64(seed: int, count: int) -> np.ndarray:
    """Return `count` splitmix64 outputs for `seed` as a uint64 array."""
    if count < 0:
        raise ConfigurationError(f"count must be >= 0, got {count}")
    steps = np.arange(1, count + 1, dtype=np.uint64)
    z = (np.uint64(seed & _U64) + steps * np.uint64(SPLITMIX_GAMMA))
    z = (z ^ (z >> np.uint64(30))) * np.uint64(SPLITMIX_MIX1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(SPLITMIX_MIX2)
    return z ^ (z >> np.uint64(31))


def mix64(value: int) -> int:
    """Single splitmix64 output for an integer key (used to derive stream seeds)."""
    z = (value + SPLITMIX_GAMMA) & _U64
    z = ((z ^ (z >> 30)) * SPLITMIX_MIX1) & _U64
    z = ((z ^ (z >> 27)) * SPLITMIX_MIX2) & _U64
    return z ^ (z >> 31)


def bits_to_uniform(bits: np.ndarray, halfwidth: float) -> np.ndarray:
    """Map uint64 bits to float64 uniform values in [-halfwidth, halfwidth)."""
    unit = (bits >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)
    return halfwidth * (2.0 * unit - 1.0)


def gelu(x: np.ndarray) -> np.ndarray:
    """Exact gelu, x * Phi(x), evaluated via erf."""
    return 0.5 * x * (1.0 + erf(x / SQRT2))


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 28
    num_experts: int = 8
    num_shared: int = 2
    top_k: int = 2
    hidden_dim: int = 32
    expert_dim: int = 64
    num_tokens: int = 16
    batch: int = 4
    num_steps: int = 50
    step_size: float = 2e-4

    def __post_init__(self):
        if self.num_layers < 1:
            raise ConfigurationError(f"num_layers must be >= 1, got {self.num_layers}")
        if self.num_experts < 1:
            raise ConfigurationError(f"num_experts must be >= 1, got {self.num_experts}")
        if self.num_shared < 0:
            raise ConfigurationError(f"num_shared must be >= 0, got {self.num_shared}")
        if not 1 <= self.top_k <= self.num_experts:
            raise ConfigurationError(
                f"top_k must be in [1, num_experts={self.num_experts}], got {self.top_k}")
        for name in ("hidden_dim", "expert_dim", "num_tokens", "batch", "num_steps"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not (self.step_size > 0 and np.isfinite(self.step_size)):
            raise ConfigurationError(f"step_size must be finite and > 0, got {self.step_size}")

    @property
    def total_rows(self) -> int:
        """Token rows processed per step (all samples in the batch)."""
        return self.num_tokens * self.batch


PRESETS = {
    # 28 layers / 8 routed experts mirrors the larger of the two toy geometries.
    "xl-toy": dict(num_layers=28, num_experts=8, num_shared=2, step_size=2e-4),
    # 40 layers / 16 routed experts mirrors the giant geometry. The deeper
    # stack amplifies activations more per step, so it needs a smaller step.
    "g-toy": dict(num_layers=40, num_experts=16, num_shared=2, step_size=2e-6),
}


def preset(name: str, **overrides) -> ModelConfig:
    key = name.lower()
    if key not in PRESETS:
        raise ConfigurationError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    fields = dict(PRESETS[key])
    fields.update(overrides)
    return ModelConfig(**fields)


@dataclass
class LayerWeights:
    w_mix: np.ndarray            # [hidden, hidden]
    w_gate: np.ndarray           # [hidden, num_experts]
    experts: list                # num_experts pairs of (w1 [hidden, expert], w2 [expert, hidden])
    shared: list                 # num_shared pairs of the same shapes


@dataclass
class ToyModel:
    config: ModelConfig
    seed: int
    layers: list = field(default_factory=list)


def _layer_value_count(cfg: ModelConfig) -> int:
    per_expert = cfg.hidden_dim * cfg.expert_dim * 2
    return (cfg.hidden_dim * cfg.hidden_dim
            + cfg.hidden_dim * cfg.num_experts
            + per_expert * (cfg.num_experts + cfg.num_shared))


def init_model(config: ModelConfig, seed: int) -> ToyModel:
    """Materialize all weights from one splitmix64 stream.

    Consumption order is fixed: layer-major, then W_mix, W_gate, routed
    experts 0..E-1 (W1 then W2), shared experts (W1 then W2); each matrix
    fills row-major. Entries are uniform in [-a, a) with a = sqrt(1/fan_in).
    """
    total = config.num_layers * _layer_value_count(config)
    bits = splitmix64(seed, total)
    h, e = config.hidden_dim, config.expert_dim
    a_h = float(np.sqrt(1.0 / h))
    a_e = float(np.sqrt(1.0 / e))
    pos = 0

    def take(rows: int, cols: int, halfwidth: float) -> np.ndarray:
        nonlocal pos
        n = rows * cols
        block = bits_to_uniform(bits[pos:pos + n], halfwidth).reshape(rows, cols)
        pos += n
        return block

    layers = []
    for _ in range(config.num_layers):
        w_mix = take(h, h, a_h)
        w_gate = take(h, config.num_experts, a_h)
        experts = [(take(h, e, a_h), take(e, h, a_e)) for _ in range(config.num_experts)]
        shared = [(take(h, e, a_h), take(e, h, a_e)) for _ in range(config.num_shared)]
        layers.append(LayerWeights(w_mix, w_gate, experts, shared))
    assert pos == total
    return ToyModel(config=config, seed=seed, layers=layers)


def model_hash(model: ToyModel) -> str:
    """Content hash over the config and every weight matrix, in init order."""
    digest = hashlib.sha256()
    digest.update(repr(model.config).encode())
    for lw in model.layers:
        digest.update(lw.w_mix.tobytes())
        digest.update(lw.w_gate.tobytes())
        for w1, w2 in lw.experts:
            digest.update(w1.tobytes())
            digest.update(w2.tobytes())
        for w1, w2 in lw.shared:
            digest.update(w1.tobytes())
            digest.update(w2.tobytes())
    return digest.hexdigest()


def sample_x0(config: ModelConfig, seed: int) -> "ActivationBlock":
    """Deterministic initial sample, uniform in [-1, 1), from a tagged stream."""
    n = config.total_rows * config.hidden_dim
    bits = splitmix64(mix64(seed ^ _X0_STREAM_TAG), n)
    values = bits_to_uniform(bits, 1.0).reshape(config.total_rows, config.hidden_dim)
    return ActivationBlock(values=values, generated_step=0)


@dataclass
class ActivationBlock:
    """A token-row matrix plus provenance tags."""
    values: np.ndarray           # [rows, hidden] float64
    generated_step: int
    layer: int = -1


@dataclass
class RouteDecision:
    """Top-k routing for one activation block at one layer."""
    expert_ids: np.ndarray       # [rows, k] int64, descending score, ties to lower id
    gates: np.ndarray            # [rows, k] float64, renormalized over the k slots
    scores: np.ndarray           # [rows, num_experts] float64 full softmax

    @property
    def top_k(self) -> int:
        return self.expert_ids.shape[1]


def gate(model: ToyModel, layer: int, x: ActivationBlock) -> RouteDecision:
    """Softmax routing over experts, keeping the top_k slots renormalized."""
    values = x.values
    if not np.all(np.isfinite(values)):
        raise NumericsError(f"non-finite activations entering gate at layer {layer}")
    k = model.config.top_k
    logits = values @ model.layers[layer].w_gate
    shifted = logits - logits.max(axis=1, keepdims=True)
    expo = np.exp(shifted)
    scores = expo / expo.sum(axis=1, keepdims=True)
    # Stable sort on negated scores: descending score, ties to the lower index.
    order = np.argsort(-scores, axis=1, kind="stable")[:, :k]
    picked = np.take_along_axis(scores, order, axis=1)
    gates = picked / picked.sum(axis=1, keepdims=True)
    return RouteDecision(expert_ids=order.astype(np.int64), gates=gates, scores=scores)


def expert_forward(model: ToyModel, layer: int, expert_id: int, tokens: np.ndarray) -> np.ndarray:
    """One routed expert MLP: gelu(tokens @ W1) @ W2."""
    w1, w2 = model.layers[layer].experts[expert_id]
    if tokens.ndim != 2 or tokens.shape[1] != w1.shape[0]:
        raise ContractError(
            f"expert_forward expects [n, {w1.shape[0]}] tokens, got {tokens.shape}")
    return gelu(tokens @ w1) @ w2


def shared_forward(model: ToyModel, layer: int, x: ActivationBlock) -> np.ndarray:
    """Sum of the shared-expert MLPs, always on fresh local activations."""
    values = x.values
    out = np.zeros_like(values)
    for w1, w2 in model.layers[layer].shared:
        out += gelu(values @ w1) @ w2
    return out


def local_block(model: ToyModel, layer: int, x: ActivationBlock) -> ActivationBlock:
    """Residual mixing block, gelu(x W_mix) + x; keeps the block's generated_step."""
    values = x.values
    w_mix = model.layers[layer].w_mix
    if values.shape[1] != w_mix.shape[0]:
        raise ContractError(
            f"local_block expects [n, {w_mix.shape[0]}] values, got {values.shape}")
    out = gelu(values @ w_mix) + values
    return ActivationBlock(values=out, generated_step=x.generated_step, layer=layer)


def routed_rows(model: ToyModel, layer: int, tokens: np.ndarray, route: RouteDecision,
                active: np.ndarray | None = None) -> np.ndarray:
    """Per-slot routed expert outputs with a canonical grouping.

    Groups tokens per (slot, expert) in ascending token order so any two
    callers with equal inputs get bit-identical rows. Rows for inactive
    pairs are left zero for the caller to fill.
    """
    n, k = route.expert_ids.shape
    if tokens.shape[0] != n:
        raise ContractError(f"routed_rows: {tokens.shape[0]} token rows vs {n} routed rows")
    rows = np.zeros((k, n, model.config.hidden_dim))
    for slot in range(k):
        ids = route.expert_ids[:, slot]
        for expert_id in range(model.config.num_experts):
            mask = ids == expert_id
            if active is not None:
                mask = mask & active[:, slot]
            idx = np.nonzero(mask)[0]
            if idx.size:
                rows[slot, idx] = expert_forward(model, layer, expert_id, tokens[idx])
    return rows


def combine_outputs(route: RouteDecision, expert_outs: np.ndarray, shared_out: np.ndarray,
                    scale_route: RouteDecision) -> np.ndarray:
    """shared_out + sum_s scale_route.gates[s] * expert_outs[s], slots left to right.

    `scale_route` is the decision that produced expert_outs; its gate scores
    scale the (possibly stale) rows. `route` is the consuming-side decision
    and must agree on the slot count.
    """
    if expert_outs.shape[0] != route.top_k or expert_outs.shape[0] != scale_route.top_k:
        raise ContractError(
            f"combine_outputs: {expert_outs.shape[0]} slots vs route k={route.top_k}, "
            f"scale k={scale_route.top_k}")
    if expert_outs.shape[1] != shared_out.shape[0]:
        raise ContractError(
            f"combine_outputs: {expert_outs.shape[1]} routed rows vs "
            f"{shared_out.shape[0]} shared rows")
    out = shared_out.copy()
    for slot in range(expert_outs.shape[0]):
        out += scale_route.gates[:, slot:slot + 1] * expert_outs[slot]
    return out


def denoise_update(x: ActivationBlock, y: np.ndarray, eta: float, step: int) -> ActivationBlock:
    """Explicit denoising update x_{s+1} = x_s - eta * y_s."""
    if y.shape != x.values.shape:
        raise ContractError(f"denoise_update: y shape {y.shape} vs x shape {x.values.shape}")
    return ActivationBlock(values=x.values - eta * y, generated_step=step + 1)


@dataclass
class StepSimilarity:
    per_layer_cosine: np.ndarray     # [layers] mean over adjacent step pairs
    per_layer_agreement: np.ndarray  # [layers] mean top-1 routing agreement
    mean_cosine: float
    mean_agreement: float


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 1.0 if na == nb else 0.0
    return float(np.dot(a.ravel(), b.ravel()) / (na * nb))


def step_similarity(inputs: list, routes: list) -> StepSimilarity:
    """Adjacent-step drift of the per-layer MoE inputs and their routing.

    `inputs[s][l]` is the layer-l MoE input matrix at step s; `routes[s][l]`
    the matching RouteDecision. Needs at least two recorded steps.
    """
    steps = len(inputs)
    if steps < 2:
        raise ContractError("step_similarity needs at least two recorded steps")
    layers = len(inputs[0])
    cos = np.zeros(layers)
    agree = np.zeros(layers)
    for layer in range(layers):
        c_vals = []
        a_vals = []
        for s in range(steps - 1):
            c_vals.append(_cosine(inputs[s][layer], inputs[s + 1][layer]))
            top_now = routes[s][layer].expert_ids[:, 0]
            top_next = routes[s + 1][layer].expert_ids[:, 0]
            a_vals.append(float(np.mean(top_now == top_next)))
        cos[layer] = np.mean(c_vals)
        agree[layer] = np.mean(a_vals)
    return StepSimilarity(per_layer_cosine=cos, per_layer_agreement=agree,
                          mean_cosine=float(np.mean(cos)), mean_agreement=float(np.mean(agree)))
