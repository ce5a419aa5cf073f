"""
Reverse-mode gradients for the fixed QRNN graph
(embedding -> masked conv -> fo-pooling -> tied projection -> cross-entropy),
an Adam optimizer and a finite-difference checker.

Three parameter sets are trainable: every weight (baseline training), the
hard concrete log alphas (weights frozen) and the rank-one update factors
(weights frozen). Gate and update objects are used through their attributes
only, so ``src.gates`` and ``src.sru`` can build on this module.
"""
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import TYPE_CHECKING, Dict, List, Optional

import numpy as np
from tqdm import tqdm

from src import data, model as qrnn, tensor
from src.errors import ConfigError, DataError, DivergenceError, ShapeError
from src.model import GATE_NAMES, QrnnLayerWeights, QrnnModel

if TYPE_CHECKING:
    from src.gates import HardConcreteGates
    from src.sru import SruUpdate

logger = logging.getLogger(__name__)


class Selector(Enum):
    ALL_WEIGHTS = "all-weights"
    GATE_LOG_ALPHAS = "gate-log-alphas"
    SRU_FACTORS = "sru-factors"


@dataclass
class ParamSet:
    """Named handles to the arrays a backward pass may write gradients for."""

    selector: Selector
    tensors: Dict[str, np.ndarray]

    @classmethod
    def all_weights(cls, model: QrnnModel) -> "ParamSet":
        tensors = {"embedding": model.embedding}
        for index, layer in enumerate(model.layers):
            for g in GATE_NAMES:
                tensors[f"layers.{index}.w_{g}"] = layer.gate(g)
        return cls(Selector.ALL_WEIGHTS, tensors)

    @classmethod
    def gate_log_alphas(cls, gates: "HardConcreteGates") -> "ParamSet":
        return cls(
            Selector.GATE_LOG_ALPHAS,
            {f"gates.{index}": la for index, la in enumerate(gates.log_alphas)},
        )

    @classmethod
    def sru_factors(cls, sru: "SruUpdate") -> "ParamSet":
        tensors = {}
        for index, layer in enumerate(sru.factors):
            for g in GATE_NAMES:
                u, v = layer[g]
                tensors[f"sru.{index}.{g}.u"] = u
                tensors[f"sru.{index}.{g}.v"] = v
        return cls(Selector.SRU_FACTORS, tensors)


@dataclass
class Extras:
    gates: Optional["HardConcreteGates"] = None
    # uniform samples per prunable layer; None selects the test-time estimator
    gate_noise: Optional[List[np.ndarray]] = None
    sru: Optional["SruUpdate"] = None


@dataclass
class Tape:
    model: QrnnModel
    extras: Extras
    tokens: np.ndarray
    targets: np.ndarray
    inputs: np.ndarray
    caches: list
    log_probs: np.ndarray
    gate_values: Optional[List[np.ndarray]]
    states: list
    cross_entropy: float
    penalty: float


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


@dataclass
class FiniteDiffReport:
    max_rel_error: float
    coordinates: int
    worst: str

    def passed(self, tolerance: float) -> bool:
        return self.max_rel_error <= tolerance


def effective_model(model: QrnnModel, sru: Optional["SruUpdate"]) -> QrnnModel:
    """Model with W + u·vᵀ substituted; the base arrays are never written."""
    if sru is None:
        return model
    layers = []
    for layer, factors in zip(model.layers, sru.factors):
        layers.append(
            QrnnLayerWeights(
                *(layer.gate(g) + np.outer(*factors[g]).astype(layer.gate(g).dtype) for g in GATE_NAMES)
            )
        )
    return QrnnModel(model.config, model.embedding, layers, model.kept_filters)


def _gate_list(model, gate_values):
    if gate_values is None:
        return None
    if len(gate_values) != len(model.config.prunable_layers):
        raise ShapeError(
            f"{len(gate_values)} gate vectors for {len(model.config.prunable_layers)} prunable layers"
        )
    for index, z in enumerate(gate_values):
        if z.shape != (model.config.hidden_sizes[index],):
            raise ShapeError(
                f"gate vector {z.shape} does not match layer {index} "
                f"with {model.config.hidden_sizes[index]} filters"
            )
    return list(gate_values) + [None]


def mean_cross_entropy(logits: np.ndarray, targets: np.ndarray):
    """Mean token cross-entropy for (B, V, n) logits; returns (loss, log_probs)."""
    log_probs = tensor.log_softmax(logits, axis=-2)
    picked = np.take_along_axis(log_probs, targets[:, None, :], axis=-2)
    return float(-np.mean(picked)), log_probs


def forward_with_tape(
    model: QrnnModel,
    tokens,
    targets,
    extras: Optional[Extras] = None,
    states=None,
):
    extras = extras or Extras()
    tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
    targets = np.atleast_2d(np.asarray(targets, dtype=np.int64))
    if tokens.size == 0:
        raise DataError("forward_with_tape needs a non-empty batch")
    if tokens.shape != targets.shape:
        raise ShapeError(f"tokens {tokens.shape} and targets {targets.shape} differ")
    if targets.min() < 0 or targets.max() >= model.config.vocab_size:
        raise DataError(f"target id out of range [0, {model.config.vocab_size})")

    eff = effective_model(model, extras.sru)
    gate_values = None
    penalty = 0.0
    if extras.gates is not None:
        gate_values = extras.gates.values(extras.gate_noise)
        penalty = extras.gates.lam * extras.gates.penalty()
    logits, new_states, caches, inputs = qrnn.run(
        eff, tokens, states, gates=_gate_list(eff, gate_values)
    )
    cross_entropy, log_probs = mean_cross_entropy(logits, targets)
    tape = Tape(
        model=eff,
        extras=extras,
        tokens=tokens,
        targets=targets,
        inputs=inputs,
        caches=caches,
        log_probs=log_probs,
        gate_values=gate_values,
        states=new_states,
        cross_entropy=cross_entropy,
        penalty=penalty,
    )
    return cross_entropy + penalty, tape


def _unstack(d_stacked, channels, window):
    n = d_stacked.shape[-1]
    d_full = np.zeros(d_stacked.shape[:-2] + (channels, window - 1 + n), dtype=d_stacked.dtype)
    for j in range(window):
        d_full[..., j:j + n] += d_stacked[..., j * channels:(j + 1) * channels, :]
    return d_full[..., window - 1:]


def _layer_backward(layer: QrnnLayerWeights, cache, d_hidden, channels, want_weights):
    z, f, o, cells = cache.z, cache.f, cache.o, cache.cells
    d_o = d_hidden * cells
    d_z = np.empty_like(z)
    d_f = np.empty_like(f)
    carry = np.zeros_like(cache.c0)
    for t in range(z.shape[-1] - 1, -1, -1):
        dc = d_hidden[..., t] * o[..., t] + carry
        c_prev = cells[..., t - 1] if t > 0 else cache.c0
        d_f[..., t] = dc * (c_prev - z[..., t])
        d_z[..., t] = dc * (1 - f[..., t])
        carry = dc * f[..., t]

    d_gated = d_z * (1 - z * z)
    d_gate = None
    if cache.gate is not None:
        d_gate = np.sum(d_gated * cache.a_z, axis=(0, 2))
        d_az = d_gated * cache.gate[:, None]
    else:
        d_az = d_gated
    d_pre = {"z": d_az, "f": d_f * f * (1 - f), "o": d_o * o * (1 - o)}

    d_weights = {}
    if want_weights:
        for g in GATE_NAMES:
            d_weights[g] = np.einsum("bmn,bsn->ms", d_pre[g], cache.stacked)
    d_stacked = sum(np.matmul(layer.gate(g).T, d_pre[g]) for g in GATE_NAMES)
    window = layer.columns // channels
    return _unstack(d_stacked, channels, window), d_weights, d_gate


def backward(tape: Tape, params: ParamSet) -> Dict[str, np.ndarray]:
    selector = params.selector
    extras = tape.extras
    if selector is Selector.GATE_LOG_ALPHAS and extras.gates is None:
        raise ConfigError("gate log-alpha gradients requested from a tape without gates")
    if selector is Selector.SRU_FACTORS and extras.sru is None:
        raise ConfigError("update-factor gradients requested from a tape without an update")

    model = tape.model
    cfg = model.config
    batch, n = tape.tokens.shape
    d_logits = np.exp(tape.log_probs)
    rows = np.arange(batch)[:, None]
    cols = np.arange(n)[None, :]
    d_logits[rows, tape.targets, cols] -= 1
    d_logits /= batch * n

    last = tape.caches[-1]
    want_weights = selector is not Selector.GATE_LOG_ALPHAS
    grads: Dict[str, np.ndarray] = {}
    if selector is Selector.ALL_WEIGHTS:
        hidden_last = last.o * last.cells
        grads["embedding"] = np.einsum("bvn,bdn->vd", d_logits, hidden_last)
    d_hidden = np.matmul(model.output_projection.T, d_logits)

    gate_grads = {}
    for index in range(cfg.num_layers - 1, -1, -1):
        layer = model.layers[index]
        d_hidden, d_weights, d_gate = _layer_backward(
            layer, tape.caches[index], d_hidden, cfg.input_channels(index), want_weights
        )
        if d_gate is not None:
            gate_grads[index] = d_gate
        if selector is Selector.ALL_WEIGHTS:
            for g in GATE_NAMES:
                grads[f"layers.{index}.w_{g}"] = d_weights[g]
        elif selector is Selector.SRU_FACTORS:
            for g in GATE_NAMES:
                u, v = extras.sru.factors[index][g]
                grads[f"sru.{index}.{g}.u"] = d_weights[g] @ v
                grads[f"sru.{index}.{g}.v"] = d_weights[g].T @ u

    if selector is Selector.ALL_WEIGHTS:
        # tied embedding: the lookup side adds into the same rows
        d_rows = np.swapaxes(d_hidden, -1, -2).reshape(-1, cfg.embed_dim)
        np.add.at(grads["embedding"], tape.tokens.reshape(-1), d_rows)
    elif selector is Selector.GATE_LOG_ALPHAS:
        gates = extras.gates
        slopes = gates.value_grads(extras.gate_noise)
        penalty_slopes = gates.penalty_grads()
        for index in range(len(gates.log_alphas)):
            grads[f"gates.{index}"] = gate_grads[index] * slopes[index] + gates.lam * penalty_slopes[index]

    for name, grad in grads.items():
        grads[name] = grad.astype(params.tensors[name].dtype, copy=False)
    return grads


def global_norm(grads: Dict[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values())))


def clip_by_global_norm(grads, max_norm):
    norm = global_norm(grads)
    if max_norm and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        grads = {name: g * scale for name, g in grads.items()}
    return grads, norm


def adam_step(state: AdamState, params: ParamSet, grads: Dict[str, np.ndarray]) -> ParamSet:
    """Bias-corrected Adam, no weight decay; parameters are updated in place."""
    state.step += 1
    correction1 = 1 - state.beta1 ** state.step
    correction2 = 1 - state.beta2 ** state.step
    for name, param in params.tensors.items():
        grad = grads.get(name)
        if grad is None:
            continue
        if grad.shape != param.shape:
            raise ShapeError(f"gradient for {name} has shape {grad.shape}, parameter {param.shape}")
        m = state.m.setdefault(name, np.zeros_like(param))
        v = state.v.setdefault(name, np.zeros_like(param))
        m *= state.beta1
        m += (1 - state.beta1) * grad
        v *= state.beta2
        v += (1 - state.beta2) * grad * grad
        m_hat = m / correction1
        v_hat = v / correction2
        param -= (state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(param.dtype)
    return params


def finite_diff_check(
    model: QrnnModel,
    extras: Optional[Extras],
    params: ParamSet,
    tokens,
    targets,
    h: float = 1e-4,
    tolerance: float = 1e-4,
    max_coordinates: int = 60,
    seed: int = 0,
    floor: float = 1e-5,
) -> FiniteDiffReport:
    """
    Compare analytic gradients against central differences.

    Relative error is |a - n| / max(|a|, |n|, floor); ``floor`` keeps
    vanishing gradients from turning rounding noise into huge ratios.
    """
    for array in params.tensors.values():
        if array.dtype != tensor.CHECK_DTYPE:
            raise ConfigError("finite-difference checks need 64-bit parameters")
    _, tape = forward_with_tape(model, tokens, targets, extras)
    analytic = backward(tape, params)

    coordinates = [(name, idx) for name, array in params.tensors.items() for idx in np.ndindex(array.shape)]
    rng = tensor.rng_for(seed, "finite-diff")
    if len(coordinates) > max_coordinates:
        picks = rng.choice(len(coordinates), size=max_coordinates, replace=False)
        coordinates = [coordinates[i] for i in sorted(picks)]

    worst, worst_at = 0.0, ""
    for name, idx in coordinates:
        array = params.tensors[name]
        original = array[idx]
        array[idx] = original + h
        plus, _ = forward_with_tape(model, tokens, targets, extras)
        array[idx] = original - h
        minus, _ = forward_with_tape(model, tokens, targets, extras)
        array[idx] = original
        numeric = (plus - minus) / (2 * h)
        exact = float(analytic[name][idx])
        error = abs(exact - numeric) / max(abs(exact), abs(numeric), floor)
        if error > worst:
            worst, worst_at = error, f"{name}{list(idx)}"
    report = FiniteDiffReport(worst, len(coordinates), worst_at)
    level = logging.INFO if report.passed(tolerance) else logging.WARNING
    logger.log(level, "finite differences: max rel err %.3e over %d coords (%s)", worst, len(coordinates), worst_at)
    return report


def training_blocks(stream: data.TokenStream, batch_size: int, bptt: int):
    """Endless (new_epoch, tokens, targets) blocks in (B, n) layout."""
    while True:
        first = True
        emitted = False
        for inputs, targets in data.bptt_batches(stream, batch_size, bptt):
            yield first, inputs.T, targets.T
            first = False
            emitted = True
        if not emitted:
            raise DataError(f"stream '{stream.split}' yields no full block of {bptt} tokens")


def stream_cross_entropy(model: QrnnModel, stream: data.TokenStream, extras: Optional[Extras] = None, chunk=256):
    """Mean next-token cross-entropy over a whole stream, batch 1, state carried."""
    ids = stream.ids
    if len(ids) < 2:
        raise DataError(f"stream '{stream.split}' is too short to evaluate")
    eff = effective_model(model, extras.sru if extras else None)
    gates = None
    if extras is not None and extras.gates is not None:
        gates = _gate_list(eff, extras.gates.values(None))
    states = qrnn.init_states(eff)
    total = 0.0
    for start in range(0, len(ids) - 1, chunk):
        inputs = ids[start:start + chunk]
        targets = ids[start + 1:start + 1 + chunk]
        inputs = inputs[: len(targets)]
        logits, states, _, _ = qrnn.run(eff, inputs, states, gates=gates)
        log_probs = tensor.log_softmax(logits.astype(np.float64), axis=0)
        total -= float(np.sum(log_probs[targets, np.arange(len(targets))]))
    return total / (len(ids) - 1)


def train_loop(
    model: QrnnModel,
    params: ParamSet,
    stream: data.TokenStream,
    steps: int,
    lr: float,
    batch_size: int,
    bptt: int,
    extras_for_step=None,
    clip_norm: float = 0.0,
    log_every: int = 100,
    progress: bool = True,
    label: str = "train",
    on_log=None,
) -> List[float]:
    """Shared Adam loop: truncated BPTT over contiguous blocks, state carried within an epoch."""
    adam = AdamState(lr=lr)
    blocks = training_blocks(stream, batch_size, bptt)
    history: List[float] = []
    states = None
    for step_index in tqdm(range(steps), desc=label, disable=not progress, leave=False):
        new_epoch, inputs, targets = next(blocks)
        if new_epoch:
            states = None
        extras = extras_for_step(step_index) if extras_for_step else None
        loss, tape = forward_with_tape(model, inputs, targets, extras, states)
        if not np.isfinite(loss):
            raise DivergenceError(step_index, loss)
        states = tape.states
        grads = backward(tape, params)
        grads, _ = clip_by_global_norm(grads, clip_norm)
        adam_step(adam, params, grads)
        history.append(loss)
        if log_every and (step_index + 1) % log_every == 0:
            recent = float(np.mean(history[-log_every:]))
            message = f"{label} step {step_index + 1}/{steps}: loss {recent:.4f}"
            if on_log is not None:
                message += on_log(step_index + 1)
            logger.info(message)
    return history


def train_baseline(
    model: QrnnModel,
    train: data.TokenStream,
    steps: int,
    lr: float = 2e-3,
    batch_size: int = 16,
    bptt: int = 35,
    clip_norm: float = 0.25,
    valid: Optional[data.TokenStream] = None,
    log_every: int = 200,
    progress: bool = True,
):
    """Desk-scale baseline training of every weight; returns (trained copy, loss history)."""
    trained = model.copy()

    def report(_step):
        if valid is None:
            return ""
        return f", valid ppl {np.exp(stream_cross_entropy(trained, valid)):.2f}"

    history = train_loop(
        trained,
        ParamSet.all_weights(trained),
        train,
        steps,
        lr,
        batch_size,
        bptt,
        clip_norm=clip_norm,
        log_every=log_every,
        progress=progress,
        label="baseline",
        on_log=report,
    )
    return trained, history
