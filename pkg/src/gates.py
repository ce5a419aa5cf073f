"""
L0 feature-map sparsity with hard concrete gates.

One gate per filter of every prunable layer scales that filter's row of W_z,
so Z := tanh(diag(z)·W_z·X). With c0 = 0 a closed gate makes the whole
hidden channel zero, which is what lets trained gates turn into a hard mask.
"""
import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from src import grad, pruning, tensor
from src.data import TokenStream
from src.errors import ConfigError
from src.model import ModelConfig, QrnnModel
from src.pruning import PruneMask

logger = logging.getLogger(__name__)

GAMMA = -0.1
ZETA = 1.1
BETA = 2.0 / 3.0
INIT_LOG_ALPHA = 2.0
NOISE_EPS = 1e-6


def _stretched(log_alpha, u, beta=BETA, gamma=GAMMA, zeta=ZETA):
    s = tensor.sigmoid((np.log(u) - np.log(1 - u) + log_alpha) / beta)
    return (zeta - gamma) * s + gamma, s


def sample_gate(log_alpha, u, beta=BETA, gamma=GAMMA, zeta=ZETA):
    """z = min(1, max(0, (ζ-γ)·s + γ)) for a given uniform sample ``u`` (or a Generator)."""
    log_alpha = np.asarray(log_alpha, dtype=np.float64)
    if isinstance(u, np.random.Generator):
        u = u.uniform(NOISE_EPS, 1 - NOISE_EPS, log_alpha.shape)
    pre, _ = _stretched(log_alpha, u, beta, gamma, zeta)
    return np.clip(pre, 0.0, 1.0)


def sample_gate_grad(log_alpha, u, beta=BETA, gamma=GAMMA, zeta=ZETA):
    """dz/dlog_alpha with the clamp's subgradient (zero outside 0 < pre < 1)."""
    pre, s = _stretched(np.asarray(log_alpha, dtype=np.float64), u, beta, gamma, zeta)
    active = (pre > 0) & (pre < 1)
    return np.where(active, (zeta - gamma) * s * (1 - s) / beta, 0.0)


def penalty_shift(beta=BETA, gamma=GAMMA, zeta=ZETA) -> float:
    return beta * np.log(-gamma / zeta)


def expected_l0_penalty(log_alpha, beta=BETA, gamma=GAMMA, zeta=ZETA) -> float:
    return float(np.sum(tensor.sigmoid(np.asarray(log_alpha, dtype=np.float64) - penalty_shift(beta, gamma, zeta))))


def expected_l0_penalty_grad(log_alpha, beta=BETA, gamma=GAMMA, zeta=ZETA):
    p = tensor.sigmoid(np.asarray(log_alpha, dtype=np.float64) - penalty_shift(beta, gamma, zeta))
    return p * (1 - p)


def test_gate(log_alpha, gamma=GAMMA, zeta=ZETA):
    return np.clip(tensor.sigmoid(np.asarray(log_alpha, dtype=np.float64)) * (zeta - gamma) + gamma, 0.0, 1.0)


def test_gate_grad(log_alpha, gamma=GAMMA, zeta=ZETA):
    s = tensor.sigmoid(np.asarray(log_alpha, dtype=np.float64))
    pre = s * (zeta - gamma) + gamma
    return np.where((pre > 0) & (pre < 1), (zeta - gamma) * s * (1 - s), 0.0)


@dataclass
class HardConcreteGates:
    log_alphas: List[np.ndarray]
    lam: float = 0.0
    gamma: float = GAMMA
    zeta: float = ZETA
    beta: float = BETA
    tag: str = ""
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.gamma < 0 < 1 < self.zeta:
            raise ConfigError(f"stretch interval ({self.gamma}, {self.zeta}) must strictly contain [0, 1]")

    @classmethod
    def init(
        cls, config: ModelConfig, lam: float, init_log_alpha: float = INIT_LOG_ALPHA, tag: str = "", dtype=np.float32
    ):
        log_alphas = [np.full(config.hidden_sizes[i], init_log_alpha, dtype=dtype) for i in config.prunable_layers]
        return cls(log_alphas, lam=lam, tag=tag)

    def draw_noise(self, rng: np.random.Generator) -> List[np.ndarray]:
        return [rng.uniform(NOISE_EPS, 1 - NOISE_EPS, la.shape) for la in self.log_alphas]

    def values(self, noise: Optional[Sequence[np.ndarray]] = None) -> List[np.ndarray]:
        if noise is None:
            return self.test_values()
        return [sample_gate(la, u, self.beta, self.gamma, self.zeta) for la, u in zip(self.log_alphas, noise)]

    def value_grads(self, noise: Optional[Sequence[np.ndarray]] = None) -> List[np.ndarray]:
        if noise is None:
            return [test_gate_grad(la, self.gamma, self.zeta) for la in self.log_alphas]
        return [sample_gate_grad(la, u, self.beta, self.gamma, self.zeta) for la, u in zip(self.log_alphas, noise)]

    def test_values(self) -> List[np.ndarray]:
        return [test_gate(la, self.gamma, self.zeta) for la in self.log_alphas]

    def penalty(self) -> float:
        return sum(expected_l0_penalty(la, self.beta, self.gamma, self.zeta) for la in self.log_alphas)

    def penalty_grads(self) -> List[np.ndarray]:
        return [expected_l0_penalty_grad(la, self.beta, self.gamma, self.zeta) for la in self.log_alphas]

    def zero_counts(self) -> List[int]:
        return [int(np.sum(z == 0)) for z in self.test_values()]

    def storage_bytes(self) -> int:
        return gate_storage_bytes(self)

    def copy(self) -> "HardConcreteGates":
        return HardConcreteGates(
            [la.copy() for la in self.log_alphas], self.lam, self.gamma, self.zeta, self.beta, self.tag, dict(self.extra)
        )


def gate_storage_bytes(gates: HardConcreteGates) -> int:
    return 4 * sum(len(la) for la in gates.log_alphas)


def gated_forward(model: QrnnModel, gates: HardConcreteGates, rng: Optional[np.random.Generator], batch, states=None):
    """Loss (cross-entropy + λ·expected L0) with sampled gates, or test gates when ``rng`` is None."""
    tokens, targets = batch
    noise = gates.draw_noise(rng) if rng is not None else None
    return grad.forward_with_tape(model, tokens, targets, grad.Extras(gates=gates, gate_noise=noise), states)


def train_gates(
    model: QrnnModel,
    stream: TokenStream,
    lam: float,
    steps: int = 5000,
    lr: float = 5e-3,
    seed: int = 0,
    batch_size: int = 16,
    bptt: int = 35,
    init_log_alpha: float = INIT_LOG_ALPHA,
    log_every: int = 200,
    progress: bool = True,
    tag: str = "",
) -> HardConcreteGates:
    """Learn the gate parameters only; the model's weights stay frozen."""
    before = model.checksum()
    gates = HardConcreteGates.init(model.config, lam, init_log_alpha, tag, dtype=model.dtype)
    rng = tensor.rng_for(seed, "gate-noise")

    def extras_for_step(_step):
        return grad.Extras(gates=gates, gate_noise=gates.draw_noise(rng))

    def report(_step):
        return f", penalty {gates.penalty():.2f}, closed gates {sum(gates.zero_counts())}"

    grad.train_loop(
        model,
        grad.ParamSet.gate_log_alphas(gates),
        stream,
        steps,
        lr,
        batch_size,
        bptt,
        extras_for_step=extras_for_step,
        log_every=log_every,
        progress=progress,
        label=f"gates λ={lam:g}",
        on_log=report,
    )
    if model.checksum() != before:
        raise RuntimeError("gate training modified frozen model weights")
    try:
        mask, _ = gates_to_mask_and_scale(model, gates)
    except ConfigError as e:
        logger.warning("gates λ=%g cannot be turned into a mask: %s", lam, e)
        return gates
    gates.extra["flops_fraction"] = pruning.flops_fraction(model.config, mask)
    logger.info(
        "gates λ=%g: %d of %d filters closed, %.1f%% FLOPs",
        lam, sum(gates.zero_counts()), sum(len(la) for la in gates.log_alphas), 100 * gates.extra["flops_fraction"],
    )
    return gates


def gates_to_mask_and_scale(model: QrnnModel, gates: HardConcreteGates):
    """Drop filters whose test gate is 0 and fold the remaining gate values into W_z."""
    cfg = model.config
    values = gates.test_values()
    if len(values) != len(cfg.prunable_layers):
        raise ConfigError(f"{len(values)} gate vectors for {len(cfg.prunable_layers)} prunable layers")
    kept = []
    for index, z in enumerate(values):
        if len(z) != cfg.hidden_sizes[index]:
            raise ConfigError(f"gate vector of layer {index} has {len(z)} entries for {cfg.hidden_sizes[index]} filters")
        survivors = tuple(int(i) for i in np.flatnonzero(z > 0))
        if not survivors:
            raise ConfigError(f"every gate of layer {index} is closed; the layer would be empty")
        kept.append(survivors)
    kept.append(tuple(range(cfg.hidden_sizes[-1])))
    mask = PruneMask(tuple(kept))
    pruned = pruning.apply_mask(model, mask)
    for index, z in enumerate(values):
        layer = pruned.layers[index]
        layer.w_z *= z[list(mask.kept[index])].astype(layer.w_z.dtype)[:, None]
    return mask, pruned


def lambda_sweep(model: QrnnModel, stream: TokenStream, lambdas: Sequence[float], **train_kwargs):
    """Train one gate set per λ; returns (λ, gates, achieved FLOPs fraction) rows."""
    rows = []
    for lam in lambdas:
        gates = train_gates(model, stream, lam, tag=f"l0-{lam:g}", **train_kwargs)
        rows.append((lam, gates, gates.extra.get("flops_fraction")))
    return rows
