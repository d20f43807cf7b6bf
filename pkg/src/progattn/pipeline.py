"""
Progressive chain of experts, gated fusion of their feature maps, the combined
training objective and the Adam training/evaluation loops.

Expert i+1 sees the graph pruned by the keep mask of expert i. Gradients flow
through the fused prediction, every expert head and (through the closed-form
attention maps of the first two experts) the diversity term. Masks are treated
as constants, so everything is first-order reverse mode on a per-sample basis;
a mini-batch is a loop over samples sharing one differentiation record.
"""

import concurrent.futures
import dataclasses
import importlib.resources
import json
import logging
import math
import time
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy

from .data_ingest import (
    Dataset,
    Sample,
    apply_standardizer,
    fit_standardizer,
    split,
)
from .errors import (
    ConfigError,
    ContractError,
    LoadError,
    ShapeError,
    TrainingError,
    _collapse_str_,
)
from .expert import ExpertOutput, ExpertParams, expert_loss, run_expert
from .graph_spectral import (
    AdjacencyRule,
    EegGraph,
    build_adjacency,
    keep_mask_from_names,
)
from .tensor_core import (
    DiffRecord,
    Tensor,
    add,
    backward,
    concat_cols,
    log_clamped,
    matmul,
    mul,
    reduce_mean,
    reduce_sum,
    reshape,
    scalar_op,
    scale,
    softmax_row,
    sub,
    submatrix,
)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
CHECKPOINT_FORMAT = "progattn-checkpoint"
CHECKPOINT_VERSION = 1
MAX_EXPERTS = 3


"""
Configuration
"""


@dataclass
class TrainConfig:
    cheb_order: int = 3
    filters: int = 32
    eta: float = 0.5
    num_classes: int = 3
    lr: float = 1e-3
    batch_size: int = 64
    epochs: int = 100
    lam: float = 1.0
    beta: float = 0.1
    diversity_sign: str = "maximize"
    expert_count: int = 3
    attention_mode: str = "dynamic"
    static_channels: Optional[str] = None
    adjacency_rule: str = "knn"
    adjacency_k: int = 4
    adjacency_radius: float = 0.5
    standardize: bool = True
    eval_workers: int = 1
    seed: int = 42

    @classmethod
    def from_dict(cls, raw: Dict[str, Any]) -> "TrainConfig":
        if not isinstance(raw, dict):
            raise ConfigError("Training configuration must be a JSON object")
        known = {f.name: f for f in dataclasses.fields(cls)}
        unknown = sorted(set(raw) - set(known))
        if unknown:
            raise ConfigError(f"Unknown configuration keys {unknown}")
        values = {key: _coerce(key, known[key].default, value) for key, value in raw.items()}
        cfg = cls(**values)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str) -> "TrainConfig":
        try:
            with open(path, "r") as f:
                raw = json.load(f)
        except (OSError, json.JSONDecodeError) as err:
            raise ConfigError(f"Cannot read configuration [{path}]: {err}") from err
        return cls.from_dict(raw)

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)

    def merged(self, overrides: Dict[str, Any]) -> "TrainConfig":
        """New configuration with every non-None override applied on top"""
        raw = self.to_dict()
        raw.update({k: v for k, v in overrides.items() if v is not None})
        return TrainConfig.from_dict(raw)

    def adjacency(self) -> AdjacencyRule:
        return AdjacencyRule(self.adjacency_rule, self.adjacency_k, self.adjacency_radius)

    @property
    def diversity_factor(self) -> float:
        """Signed weight of the diversity term in the minimized objective"""
        return -self.beta if self.diversity_sign == "maximize" else self.beta

    def validate(self) -> None:
        checks = [
            (0.0 < self.eta < 1.0, f"eta must lie in (0, 1), got {self.eta}"),
            (self.batch_size >= 1, f"batch_size must be >= 1, got {self.batch_size}"),
            (self.expert_count in (2, 3), f"expert_count must be 2 or 3, got {self.expert_count}"),
            (self.cheb_order >= 1, f"cheb_order must be >= 1, got {self.cheb_order}"),
            (self.filters >= 1, f"filters must be >= 1, got {self.filters}"),
            (self.num_classes >= 2, f"num_classes must be >= 2, got {self.num_classes}"),
            (self.lr > 0, f"lr must be positive, got {self.lr}"),
            (self.epochs >= 0, f"epochs must be >= 0, got {self.epochs}"),
            (self.lam >= 0, f"lam must be >= 0, got {self.lam}"),
            (self.beta >= 0, f"beta must be >= 0, got {self.beta}"),
            (
                self.diversity_sign in ("maximize", "literal"),
                f"Unknown diversity_sign [{self.diversity_sign}]",
            ),
            (
                self.attention_mode in ("dynamic", "static"),
                f"Unknown attention_mode [{self.attention_mode}]",
            ),
            (
                self.attention_mode != "static" or bool(self.static_channels),
                "Static attention mode requires static_channels",
            ),
            (
                self.adjacency_rule in ("knn", "radius"),
                f"Unknown adjacency_rule [{self.adjacency_rule}]",
            ),
            (self.adjacency_k >= 1, f"adjacency_k must be >= 1, got {self.adjacency_k}"),
            (
                self.adjacency_radius > 0,
                f"adjacency_radius must be positive, got {self.adjacency_radius}",
            ),
            (self.eval_workers >= 1, f"eval_workers must be >= 1, got {self.eval_workers}"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigError(message)


def _coerce(key: str, default, value):
    if key == "static_channels":
        return None if value is None else str(value)
    try:
        if isinstance(default, bool):
            if not isinstance(value, bool):
                raise TypeError("expected true or false")
            return value
        if isinstance(default, int):
            if isinstance(value, bool) or int(value) != value:
                raise TypeError("expected an integer")
            return int(value)
        if isinstance(default, float):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise TypeError("expected a number")
            return float(value)
        if isinstance(default, str):
            if not isinstance(value, str):
                raise TypeError("expected a string")
            return value
    except (TypeError, ValueError) as err:
        raise ConfigError(f"Configuration key [{key}] has invalid value {value!r}: {err}")
    return value


class StaticChannelSets(object):
    """
    Fixed per-expert channel lists replacing the attention-derived keep masks
    of the first two experts. Bundled sets are addressed as "v1"/"v2", any
    other reference is read as a JSON file path.
    """

    BUNDLED = ("v1", "v2")

    def __init__(self, name: str, expert_channels: List[List[str]]):
        if len(expert_channels) != 2:
            raise ConfigError(
                f"Static channel set [{name}] must list channels for 2 experts, "
                f"got {len(expert_channels)}"
            )
        self.name = name
        self.expert_channels = expert_channels

    @classmethod
    def load(cls, ref: str) -> "StaticChannelSets":
        try:
            if ref in cls.BUNDLED:
                resource = importlib.resources.files("progattn") / "channel_sets" / f"{ref}.json"
                raw = json.loads(resource.read_text())
            else:
                with open(ref, "r") as f:
                    raw = json.load(f)
        except (OSError, json.JSONDecodeError) as err:
            raise ConfigError(f"Cannot read static channel set [{ref}]: {err}") from err
        try:
            lists = [[str(name) for name in group] for group in raw["experts"]]
        except (KeyError, TypeError) as err:
            raise ConfigError(f"Static channel set [{ref}] is malformed: {err}") from err
        return cls(str(raw.get("name", ref)), lists)

    def masks(self, channel_names: Sequence[str]) -> List[numpy.ndarray]:
        return [
            keep_mask_from_names(channel_names, group, source=f"channel set {self.name}")
            for group in self.expert_channels
        ]


def resolve_static_masks(
    cfg: TrainConfig, channel_names: Sequence[str]
) -> Optional[List[numpy.ndarray]]:
    if cfg.attention_mode != "static":
        return None
    return StaticChannelSets.load(cfg.static_channels).masks(channel_names)


"""
Model state
"""


@dataclass
class ModelView:
    """Parameter tensors as seen by one forward pass (possibly record-bound)"""

    experts: List[ExpertParams]
    gate_weights: Tensor
    gate_bias: Tensor
    final_weights: Tensor
    final_bias: Tensor


class ModelState(object):
    """
    All trainable tensors (three experts, the fusion gate and the final head),
    the Adam moments keyed by parameter name, the optimizer step counter and
    the input standardization statistics of the training split.
    """

    def __init__(
        self,
        experts: List[ExpertParams],
        gate_weights: Tensor,
        gate_bias: Tensor,
        final_weights: Tensor,
        final_bias: Tensor,
        channel_names: Sequence[str],
        bands: int,
    ):
        if len(experts) != MAX_EXPERTS:
            raise ContractError(f"Model state holds {MAX_EXPERTS} experts, got {len(experts)}")
        self.experts = experts
        self.gate_weights = gate_weights
        self.gate_bias = gate_bias
        self.final_weights = final_weights
        self.final_bias = final_bias
        self.channel_names = list(channel_names)
        self.bands = bands
        self.adam_m: Dict[str, numpy.ndarray] = {}
        self.adam_v: Dict[str, numpy.ndarray] = {}
        self.step = 0
        self.feature_mean: Optional[numpy.ndarray] = None
        self.feature_std: Optional[numpy.ndarray] = None

    @property
    def channels(self) -> int:
        return len(self.channel_names)

    @classmethod
    def initialize(
        cls,
        cfg: TrainConfig,
        channel_names: Sequence[str],
        bands: int,
        rng: Optional[numpy.random.Generator] = None,
    ) -> "ModelState":
        """
        Glorot-uniform expert and head weights, zero biases. The gate starts at
        zero, so every expert initially receives the same fusion weight.
        """
        if rng is None:
            rng = numpy.random.default_rng(cfg.seed)
        C, D, E = len(channel_names), cfg.filters, cfg.num_classes
        experts = [
            ExpertParams.initialize(rng, C, bands, D, cfg.cheb_order, E, prefix=f"expert{i + 1}")
            for i in range(MAX_EXPERTS)
        ]
        limit = math.sqrt(6.0 / (C * D + E))
        return cls(
            experts,
            Tensor(numpy.zeros((MAX_EXPERTS * D, MAX_EXPERTS)), requires_grad=True, name="gate.w"),
            Tensor(numpy.zeros((1, MAX_EXPERTS)), requires_grad=True, name="gate.b"),
            Tensor(rng.uniform(-limit, limit, size=(C * D, E)), requires_grad=True, name="final.w"),
            Tensor(numpy.zeros((1, E)), requires_grad=True, name="final.b"),
            channel_names,
            bands,
        )

    def parameters(self) -> "OrderedDict[str, Tensor]":
        params = OrderedDict()
        for expert in self.experts:
            params.update(expert.tensors())
        for t in (self.gate_weights, self.gate_bias, self.final_weights, self.final_bias):
            params[t.name] = t
        return params

    def zero_grad(self) -> None:
        for t in self.parameters().values():
            t.zero_grad()

    def view(self, record: Optional[DiffRecord] = None) -> ModelView:
        if record is None:
            return ModelView(
                self.experts,
                self.gate_weights,
                self.gate_bias,
                self.final_weights,
                self.final_bias,
            )
        return ModelView(
            [e.bind(record) for e in self.experts],
            record.watch(self.gate_weights),
            record.watch(self.gate_bias),
            record.watch(self.final_weights),
            record.watch(self.final_bias),
        )

    def expected_shapes(self, cfg: TrainConfig) -> Dict[str, Tuple[int, int]]:
        C, F, D, K, E = self.channels, self.bands, cfg.filters, cfg.cheb_order, cfg.num_classes
        shapes = {}
        for i in range(MAX_EXPERTS):
            shapes[f"expert{i + 1}.cheb"] = (K * F, D)
            shapes[f"expert{i + 1}.head_w"] = (C * D, E)
            shapes[f"expert{i + 1}.head_b"] = (1, E)
        shapes["gate.w"] = (MAX_EXPERTS * D, MAX_EXPERTS)
        shapes["gate.b"] = (1, MAX_EXPERTS)
        shapes["final.w"] = (C * D, E)
        shapes["final.b"] = (1, E)
        return shapes

    def check_finite(self) -> None:
        for name, t in self.parameters().items():
            if not numpy.isfinite(t.data).all():
                raise TrainingError(f"Parameter [{name}] is non-finite after step {self.step}")

    def standardize(self, features: numpy.ndarray) -> numpy.ndarray:
        if self.feature_mean is None:
            return features
        return apply_standardizer(features, self.feature_mean, self.feature_std)


"""
Forward pass, fusion and losses
"""


@dataclass
class SampleForward:
    experts: List[ExpertOutput]
    xi: Tensor  # 1 x expert_count
    fused: Tensor  # C x D
    logits: Tensor  # 1 x E
    probs: Tensor  # 1 x E
    loss_parts: Dict[str, float] = field(default_factory=dict)

    @property
    def prediction(self) -> int:
        return int(numpy.argmax(self.probs.data))


def fuse(maps: Sequence[Tensor], gate_weights: Tensor, gate_bias: Tensor) -> Tuple[Tensor, Tensor]:
    """
    xi = softmax([mean_c H_1, ..., mean_c H_n] W_g + b_g), H_o = sum_i xi_i H_i.
    With fewer than three maps only the leading block of the gate is used.
    """
    n = len(maps)
    if not 1 <= n <= MAX_EXPERTS:
        raise ContractError(f"Fusion over {n} feature maps")
    shape = maps[0].shape
    if any(m.shape != shape for m in maps):
        raise ShapeError(f"Fusion inputs disagree: {[m.shape for m in maps]}")
    D = shape[1]
    if gate_weights.shape != (MAX_EXPERTS * D, MAX_EXPERTS) or gate_bias.shape != (1, MAX_EXPERTS):
        raise ShapeError(
            f"Gate {gate_weights.shape}/{gate_bias.shape} does not match feature width {D}"
        )
    W, b = gate_weights, gate_bias
    if n < MAX_EXPERTS:
        W = submatrix(gate_weights, 0, n * D, 0, n)
        b = submatrix(gate_bias, 0, 1, 0, n)

    pooled = concat_cols([reduce_mean(m, "rows") for m in maps])
    xi = softmax_row(add(matmul(pooled, W), b))
    fused = None
    for i, m in enumerate(maps):
        term = scalar_op(m, submatrix(xi, 0, 1, i, i + 1), "mul")
        fused = term if fused is None else add(fused, term)
    return xi, fused


def progressive_forward(
    graph: EegGraph,
    state: ModelState,
    cfg: TrainConfig,
    target_class: Optional[int] = None,
    record: Optional[DiffRecord] = None,
    static_masks: Optional[Sequence[numpy.ndarray]] = None,
) -> SampleForward:
    """
    Expert 1 on the full graph, expert i+1 on the graph pruned by the keep mask
    of expert i. The last expert's mask is exported only. With `record` the
    parameters are bound to it and the pass is differentiable.
    """
    if graph.channel_count != state.channels or graph.band_count != state.bands:
        raise ShapeError(
            f"Graph of {graph.channel_count}x{graph.band_count} features for a model "
            f"trained on {state.channels}x{state.bands}"
        )
    view = state.view(record)
    keep = numpy.ones(graph.channel_count)
    outputs = []
    for i in range(cfg.expert_count):
        fixed = static_masks[i] if static_masks is not None and i < len(static_masks) else None
        out = run_expert(
            graph,
            keep,
            view.experts[i],
            cfg.cheb_order,
            cfg.eta,
            target=target_class,
            static_keep=fixed,
        )
        outputs.append(out)
        keep = out.keep_mask

    xi, fused = fuse([o.H for o in outputs], view.gate_weights, view.gate_bias)
    flat = reshape(fused, 1, fused.rows * fused.cols)
    logits = add(matmul(flat, view.final_weights), view.final_bias)
    return SampleForward(outputs, xi, fused, logits, softmax_row(logits))


def js_divergence(P: Tensor, Q: Tensor, floor: float = 1e-12) -> Tensor:
    """0.5 KL(P||M) + 0.5 KL(Q||M), M = (P + Q) / 2, for 1 x n distributions"""
    if P.shape != Q.shape or P.rows != 1:
        raise ShapeError(f"JS divergence of {P.shape} and {Q.shape}")
    M = scale(add(P, Q), 0.5)
    log_m = log_clamped(M, floor)

    def kl(A):
        return reduce_sum(mul(A, sub(log_clamped(A, floor), log_m)))

    return scale(add(kl(P), kl(Q)), 0.5)


def diversity_loss(phi1, phi2) -> Tensor:
    """JS divergence between the channel softmax distributions of two attention maps"""
    if not isinstance(phi1, Tensor):
        phi1 = Tensor(phi1)
    if not isinstance(phi2, Tensor):
        phi2 = Tensor(phi2)
    return js_divergence(softmax_row(phi1), softmax_row(phi2))


def sample_loss(fwd: SampleForward, label: int, cfg: TrainConfig) -> Tensor:
    """
    L_c + lam * sum_i L_ei + sign * beta * L_d for one sample; the components
    are stored in `fwd.loss_parts`.
    """
    L_c = expert_loss(fwd.probs, label)
    expert_terms = [expert_loss(o.probs, label) for o in fwd.experts]
    L_e = expert_terms[0]
    for term in expert_terms[1:]:
        L_e = add(L_e, term)
    L_d = diversity_loss(fwd.experts[0].masked_attention, fwd.experts[1].masked_attention)
    total = add(add(L_c, scale(L_e, cfg.lam)), scale(L_d, cfg.diversity_factor))
    fwd.loss_parts = {
        "classification": L_c.item(),
        "experts": [t.item() for t in expert_terms],
        "diversity": L_d.item(),
        "total": total.item(),
    }
    return total


def total_loss(
    forwards: Sequence[SampleForward],
    labels: Sequence[int],
    cfg: TrainConfig,
    breakdown: Optional[Dict[str, float]] = None,
) -> Tensor:
    """Mean of the per-sample objectives over the batch"""
    if len(forwards) == 0:
        raise ContractError("Total loss of an empty batch")
    if len(forwards) != len(labels):
        raise ContractError(f"{len(forwards)} forward passes for {len(labels)} labels")
    total = None
    for fwd, label in zip(forwards, labels):
        term = sample_loss(fwd, label, cfg)
        total = term if total is None else add(total, term)
    total = scale(total, 1.0 / len(forwards))
    if breakdown is not None:
        n = len(forwards)
        breakdown["classification"] = sum(f.loss_parts["classification"] for f in forwards) / n
        breakdown["experts"] = sum(sum(f.loss_parts["experts"]) for f in forwards) / n
        breakdown["diversity"] = sum(f.loss_parts["diversity"] for f in forwards) / n
        breakdown["total"] = total.item()
    return total


"""
Optimizer
"""


def adam_step(
    state: ModelState,
    gradients: Optional[Dict[str, numpy.ndarray]] = None,
    lr: float = 1e-3,
) -> ModelState:
    """
    One bias-corrected Adam update of every parameter, in place. Without an
    explicit gradient table the accumulated `.grad` of each parameter is used;
    parameters absent from the table receive a zero gradient.
    """
    params = state.parameters()
    if gradients is None:
        gradients = {name: t.grad for name, t in params.items()}
    grads = {}
    for name, t in params.items():
        g = gradients.get(name)
        g = numpy.zeros_like(t.data) if g is None else numpy.asarray(g, dtype=numpy.float64)
        if g.shape != t.shape:
            raise ShapeError(f"Gradient of [{name}] has shape {g.shape}, expected {t.shape}")
        if not numpy.isfinite(g).all():
            raise TrainingError(
                f"Non-finite gradient for parameter [{name}] at step {state.step + 1}"
            )
        grads[name] = g

    step = state.step + 1
    correction1 = 1.0 - ADAM_BETA1**step
    correction2 = 1.0 - ADAM_BETA2**step
    updates = {}
    with numpy.errstate(over="ignore", invalid="ignore"):
        for name, param in params.items():
            g = grads[name]
            m = state.adam_m.get(name, numpy.zeros_like(g))
            v = state.adam_v.get(name, numpy.zeros_like(g))
            m = ADAM_BETA1 * m + (1 - ADAM_BETA1) * g
            v = ADAM_BETA2 * v + (1 - ADAM_BETA2) * g * g
            data = param.data - lr * (m / correction1) / (numpy.sqrt(v / correction2) + ADAM_EPS)
            for kind, arr in (("moment", m), ("moment", v), ("value", data)):
                if not numpy.isfinite(arr).all():
                    raise TrainingError(
                        f"Adam update of [{name}] gives a non-finite {kind} at step {step}"
                    )
            updates[name] = (m, v, data)

    # Committed only once every parameter has a finite update
    for name, (m, v, data) in updates.items():
        state.adam_m[name], state.adam_v[name] = m, v
        params[name].data[...] = data
    state.step = step
    return state


"""
Training and evaluation
"""


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    test_acc: Optional[float]
    mean_js: float

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)


@dataclass
class TrainResult:
    state: ModelState
    history: List[EpochRecord]
    train_samples: List[Sample]
    test_samples: List[Sample]
    adjacency: Tensor
    static_masks: Optional[List[numpy.ndarray]]
    seconds: float


def prepare_graphs(
    samples: Sequence[Sample], state: ModelState, adjacency: Tensor
) -> List[EegGraph]:
    """Standardized per-sample graphs over a shared adjacency"""
    graphs = []
    for s in samples:
        if s.features.shape != (state.channels, state.bands):
            raise ShapeError(
                f"Sample of shape {s.features.shape} for a model of "
                f"{state.channels}x{state.bands} features"
            )
        graphs.append(EegGraph(Tensor(state.standardize(s.features.data)), adjacency, state.channel_names))
    return graphs


def _check_dataset(dataset: Dataset, cfg: TrainConfig) -> None:
    if len(dataset.samples) == 0:
        raise ConfigError("Cannot train on an empty dataset")
    if dataset.num_classes != cfg.num_classes:
        raise ConfigError(
            f"Dataset declares {dataset.num_classes} classes, configuration "
            f"num_classes is {cfg.num_classes}"
        )
    bad = [s.label for s in dataset.samples if not 0 <= s.label < cfg.num_classes]
    if bad:
        raise ConfigError(f"Labels {sorted(set(bad))} outside of [0, {cfg.num_classes})")


def train(
    dataset: Dataset,
    cfg: TrainConfig,
    logger: Optional[logging.Logger] = None,
    on_epoch: Optional[Callable[[EpochRecord], None]] = None,
) -> TrainResult:
    """
    Seeded mini-batch Adam training on the training split of `dataset`. The
    attention maps of every expert are driven by the sample's label.
    """
    logger = logger or logging.getLogger("progattn")
    cfg.validate()
    _check_dataset(dataset, cfg)
    start = time.perf_counter()

    train_samples, test_samples = split(dataset)
    if len(train_samples) == 0:
        raise ConfigError("Training split is empty")
    names = dataset.manifest.channel_names
    rng = numpy.random.default_rng(cfg.seed)
    state = ModelState.initialize(cfg, names, dataset.band_count, rng=rng)
    if cfg.standardize:
        state.feature_mean, state.feature_std = fit_standardizer(train_samples)
    adjacency = build_adjacency(dataset.manifest.montage, cfg.adjacency())
    static_masks = resolve_static_masks(cfg, names)

    train_graphs = prepare_graphs(train_samples, state, adjacency)
    test_graphs = prepare_graphs(test_samples, state, adjacency)
    train_labels = [s.label for s in train_samples]
    test_labels = [s.label for s in test_samples]
    logger.info(
        _collapse_str_(
            f"""
            Training on {len(train_samples)} samples, testing on
            {len(test_samples)}: C={state.channels} F={state.bands}
            experts={cfg.expert_count} attention={cfg.attention_mode}
            adjacency={cfg.adjacency().describe()} seed={cfg.seed}
            """
        )
    )

    history = []
    n = len(train_graphs)
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        loss_sum, js_sum, correct = 0.0, 0.0, 0
        for b, first in enumerate(range(0, n, cfg.batch_size)):
            batch = order[first : first + cfg.batch_size]
            labels = [train_labels[i] for i in batch]
            record = DiffRecord()
            state.zero_grad()
            forwards = [
                progressive_forward(
                    train_graphs[i],
                    state,
                    cfg,
                    target_class=train_labels[i],
                    record=record,
                    static_masks=static_masks,
                )
                for i in batch
            ]
            parts = {}
            loss = total_loss(forwards, labels, cfg, breakdown=parts)
            backward(loss)
            adam_step(state, lr=cfg.lr)

            loss_sum += parts["total"] * len(batch)
            js_sum += parts["diversity"] * len(batch)
            correct += sum(f.prediction == y for f, y in zip(forwards, labels))
            logger.debug(
                f"epoch {epoch} batch {b}: loss={parts['total']:.6f} "
                f"cls={parts['classification']:.6f} js={parts['diversity']:.6f}"
            )

        test_acc = None
        if len(test_graphs):
            predictions = [f.prediction for f in forward_all(test_graphs, state, cfg, static_masks)]
            test_acc = float(numpy.mean(numpy.asarray(predictions) == numpy.asarray(test_labels)))
        rec = EpochRecord(epoch, loss_sum / n, correct / n, test_acc, js_sum / n)
        history.append(rec)
        test_str = "n/a" if test_acc is None else f"{test_acc:.4f}"
        logger.info(
            f"epoch {epoch}/{cfg.epochs}: loss={rec.train_loss:.6f} "
            f"train_acc={rec.train_acc:.4f} test_acc={test_str} mean_js={rec.mean_js:.6f}"
        )
        if on_epoch is not None:
            on_epoch(rec)

    return TrainResult(
        state,
        history,
        train_samples,
        test_samples,
        adjacency,
        static_masks,
        time.perf_counter() - start,
    )


def batch_loss(
    graphs: Sequence[EegGraph],
    labels: Sequence[int],
    state: ModelState,
    cfg: TrainConfig,
    static_masks: Optional[Sequence[numpy.ndarray]] = None,
) -> float:
    """Training objective of a batch with label-driven attention, not recorded"""
    forwards = [
        progressive_forward(g, state, cfg, target_class=y, static_masks=static_masks)
        for g, y in zip(graphs, labels)
    ]
    return total_loss(forwards, labels, cfg).item()


def forward_all(
    graphs: Sequence[EegGraph],
    state: ModelState,
    cfg: TrainConfig,
    static_masks: Optional[Sequence[numpy.ndarray]] = None,
) -> List[SampleForward]:
    """Inference passes (argmax driven attention), in sample order"""

    def run(graph):
        return progressive_forward(graph, state, cfg, static_masks=static_masks)

    if cfg.eval_workers <= 1 or len(graphs) < 2:
        return [run(g) for g in graphs]
    with concurrent.futures.ThreadPoolExecutor(max_workers=cfg.eval_workers) as pool:
        return list(pool.map(run, graphs))


def format_mean_std(mean: float, std: float) -> str:
    """Percentages with two decimals, zero padded, e.g. '96.38 ± 04.19'"""
    return f"{mean * 100:05.2f} ± {std * 100:05.2f}"


@dataclass
class EvalResult:
    accuracy: float
    confusion: numpy.ndarray  # rows true class, columns predicted class
    labels: List[int]
    predictions: List[int]
    probabilities: List[List[float]]
    subjects: List[str]
    subject_accuracy: Dict[str, float]
    mean_js: float
    forwards: Optional[List[SampleForward]] = None

    @property
    def aggregate(self) -> Tuple[float, float]:
        values = list(self.subject_accuracy.values())
        if not values:
            return 0.0, 0.0
        return float(numpy.mean(values)), float(numpy.std(values))

    def summary(self) -> str:
        return format_mean_std(*self.aggregate)

    def to_dict(self) -> Dict[str, Any]:
        mean, std = self.aggregate
        return {
            "accuracy": self.accuracy,
            "confusion": self.confusion.tolist(),
            "subject_accuracy": self.subject_accuracy,
            "mean_accuracy": mean,
            "std_accuracy": std,
            "aggregate": self.summary(),
            "mean_js": self.mean_js,
            "samples": len(self.labels),
        }


def evaluate(
    samples: Sequence[Sample],
    state: ModelState,
    cfg: TrainConfig,
    adjacency: Tensor,
    static_masks: Optional[Sequence[numpy.ndarray]] = None,
    keep_forwards: bool = False,
) -> EvalResult:
    """
    Argmax of the fused prediction for every sample, the confusion matrix and
    accuracies per subject. The worker pool only changes scheduling, results
    are merged in sample order.
    """
    graphs = prepare_graphs(samples, state, adjacency)
    forwards = forward_all(graphs, state, cfg, static_masks)
    E = cfg.num_classes
    labels = [s.label for s in samples]
    predictions = [f.prediction for f in forwards]
    confusion = numpy.zeros((E, E), dtype=numpy.int64)
    for y, p in zip(labels, predictions):
        confusion[y, p] += 1

    subjects = [s.subject for s in samples]
    subject_accuracy = {}
    for subject in sorted(set(subjects)):
        hits = [y == p for y, p, s in zip(labels, predictions, subjects) if s == subject]
        subject_accuracy[subject] = float(numpy.mean(hits))

    js_values = [
        diversity_loss(f.experts[0].masked_attention, f.experts[1].masked_attention).item()
        for f in forwards
    ]
    return EvalResult(
        accuracy=float(numpy.trace(confusion) / len(labels)) if labels else 0.0,
        confusion=confusion,
        labels=labels,
        predictions=predictions,
        probabilities=[f.probs.data.reshape(-1).tolist() for f in forwards],
        subjects=subjects,
        subject_accuracy=subject_accuracy,
        mean_js=float(numpy.mean(js_values)) if js_values else 0.0,
        forwards=forwards if keep_forwards else None,
    )


"""
Checkpoints
"""


def _pack(arr: numpy.ndarray) -> Dict[str, Any]:
    return {"shape": list(arr.shape), "data": arr.reshape(-1).tolist()}


def _unpack(raw: Dict[str, Any], name: str) -> numpy.ndarray:
    try:
        shape = tuple(int(x) for x in raw["shape"])
        return numpy.asarray(raw["data"], dtype=numpy.float64).reshape(shape)
    except (KeyError, TypeError, ValueError) as err:
        raise LoadError(f"Checkpoint entry [{name}] is malformed: {err}") from err


def save_checkpoint(path: str, state: ModelState, cfg: TrainConfig) -> None:
    standardization = None
    if state.feature_mean is not None:
        standardization = {"mean": _pack(state.feature_mean), "std": _pack(state.feature_std)}
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": cfg.to_dict(),
        "step": state.step,
        "channels": state.channel_names,
        "bands": state.bands,
        "tensors": {name: _pack(t.data) for name, t in state.parameters().items()},
        "adam_m": {name: _pack(m) for name, m in state.adam_m.items()},
        "adam_v": {name: _pack(v) for name, v in state.adam_v.items()},
        "standardization": standardization,
    }
    with open(path, "w") as f:
        json.dump(payload, f)


def load_checkpoint(path: str) -> Tuple[ModelState, TrainConfig]:
    """Restoring a model state; every tensor shape is checked against the stored config"""
    try:
        with open(path, "r") as f:
            raw = json.load(f)
    except (OSError, json.JSONDecodeError) as err:
        raise LoadError(f"Cannot read checkpoint [{path}]: {err}") from err
    if not isinstance(raw, dict) or raw.get("format") != CHECKPOINT_FORMAT:
        raise LoadError(f"[{path}] is not a progattn checkpoint")
    if raw.get("version") != CHECKPOINT_VERSION:
        raise LoadError(f"Unsupported checkpoint version {raw.get('version')}")
    try:
        cfg = TrainConfig.from_dict(raw["config"])
        channel_names = [str(c) for c in raw["channels"]]
        bands = int(raw["bands"])
        tensors = dict(raw["tensors"])
        step = int(raw.get("step", 0))
        standardization = raw.get("standardization")
        if standardization is not None:
            standardization = (standardization["mean"], standardization["std"])
    except ConfigError as err:
        raise LoadError(f"Checkpoint [{path}] holds an invalid configuration: {err}") from err
    except (KeyError, TypeError, ValueError) as err:
        raise LoadError(f"Checkpoint [{path}] is missing fields: {err}") from err

    # Shapes come from the stored configuration, values from the file
    state = ModelState.initialize(cfg, channel_names, bands)
    expected = state.expected_shapes(cfg)
    params = state.parameters()
    if set(tensors) != set(expected):
        raise LoadError(
            f"Checkpoint tensors {sorted(tensors)} do not match the model {sorted(expected)}"
        )
    for name, shape in expected.items():
        arr = _unpack(tensors[name], name)
        if arr.shape != shape:
            raise ShapeError(f"Checkpoint tensor [{name}] has shape {arr.shape}, expected {shape}")
        params[name].data[...] = arr
    for table, key in ((state.adam_m, "adam_m"), (state.adam_v, "adam_v")):
        for name, entry in raw.get(key, {}).items():
            if name not in expected:
                raise LoadError(f"Checkpoint [{key}] refers to unknown tensor [{name}]")
            table[name] = _unpack(entry, name)
    state.step = step
    if standardization is not None:
        mean = _unpack(standardization[0], "mean")
        std = _unpack(standardization[1], "std")
        for key, arr in (("mean", mean), ("std", std)):
            if arr.shape != (len(channel_names), bands):
                raise ShapeError(
                    f"Checkpoint standardization [{key}] has shape {arr.shape}, "
                    f"expected {(len(channel_names), bands)}"
                )
        state.feature_mean, state.feature_std = mean, std
    state.check_finite()
    return state, cfg
