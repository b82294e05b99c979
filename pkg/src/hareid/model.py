"""Full pipeline assembly: backbone -> GAP -> two-step hierarchy -> heads.

Three variants share the surrounding plumbing:

* ``rnn_ha``             full model: shared-weight GRU plus attention.
* ``rnn_h_no_attention`` hierarchy kept, attention removed (x2 = x1).
* ``fc_ha``              GRU replaced by two independent two-layer
                         transforms; attention kept.

Parameter registration order is fixed (conv stack, recurrent or fc block,
model head, vehicle head, attention net) so that, for one seed, variants
sharing a prefix draw identical initial values for it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import attention as att
from .autodiff import Tensor, global_average_pool, matmul, parameter, relu
from .backbone import ActivationMap, ConvStackConfig, ConvStackParams, conv_forward
from .errors import ConfigError, ShapeError
from .gru import (DEFAULT_INPUT_GAIN, ClassifierHead, GruParams, LossReport, classify,
                  hierarchical_loss, unroll)

VARIANTS = ("rnn_ha", "fc_ha", "rnn_h_no_attention")


@dataclass
class ModelConfig:
    num_models: int
    num_vehicles: int
    variant: str = "rnn_ha"
    d: int = 16
    hidden: int = 1024
    attn_hidden: int = 0  # 0 means hidden // 2
    backbone: str = "ingested"  # ingested | conv
    epsilon: float = att.DEFAULT_EPSILON
    input_gain: float = DEFAULT_INPUT_GAIN
    seed: int = 0
    conv: ConvStackConfig | None = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}, expected one of {VARIANTS}")
        if self.backbone not in ("ingested", "conv"):
            raise ConfigError(f"unknown backbone {self.backbone!r}")
        if min(self.num_models, self.num_vehicles, self.d, self.hidden) < 1:
            raise ConfigError("class counts and dimensions must be positive")
        if self.backbone == "conv":
            if self.conv is None:
                self.conv = ConvStackConfig(channels=self.d)
            if self.conv.channels != self.d:
                raise ConfigError(f"conv stack emits {self.conv.channels} channels "
                                  f"but config.d = {self.d}")

    @property
    def resolved_attn_hidden(self) -> int:
        return self.attn_hidden if self.attn_hidden > 0 else max(1, self.hidden // 2)

    def to_text(self) -> str:
        lines = [f"variant={self.variant}", f"num_models={self.num_models}",
                 f"num_vehicles={self.num_vehicles}", f"d={self.d}",
                 f"hidden={self.hidden}", f"attn_hidden={self.attn_hidden}",
                 f"backbone={self.backbone}", f"epsilon={self.epsilon!r}",
                 f"input_gain={self.input_gain!r}", f"seed={self.seed}"]
        if self.conv is not None:
            lines.append(f"conv={self.conv.layers},{self.conv.kernel},{self.conv.channels},"
                         f"{self.conv.in_channels},{self.conv.stride},{int(self.conv.pool)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        kv: dict[str, str] = {}
        for line in text.splitlines():
            line = line.strip()
            if not line:
                continue
            key, _, value = line.partition("=")
            kv[key] = value
        conv = None
        if "conv" in kv:
            layers, kernel, channels, in_channels, stride, pool = (int(v) for v in
                                                                   kv["conv"].split(","))
            conv = ConvStackConfig(layers=layers, kernel=kernel, channels=channels,
                                   in_channels=in_channels, stride=stride, pool=bool(pool))
        return cls(num_models=int(kv["num_models"]), num_vehicles=int(kv["num_vehicles"]),
                   variant=kv["variant"], d=int(kv["d"]), hidden=int(kv["hidden"]),
                   attn_hidden=int(kv["attn_hidden"]), backbone=kv["backbone"],
                   epsilon=float(kv["epsilon"]), input_gain=float(kv["input_gain"]),
                   seed=int(kv["seed"]), conv=conv)


@dataclass
class TwoLayerParams:
    """One hidden ReLU layer of width H then a linear map to H; the
    fully connected stand-in for a recurrent step in the fc_ha ablation.
    The embedding-facing layer gets the same input gain as the GRU's
    input-side matrices so the ablation is compared on equal footing."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @classmethod
    def init(cls, input_dim: int, hidden: int, rng: np.random.Generator,
             input_gain: float = DEFAULT_INPUT_GAIN) -> "TwoLayerParams":
        def weight(rows, cols, gain=1.0):
            bound = gain / np.sqrt(cols)
            return parameter(rng.uniform(-bound, bound, size=(rows, cols)))

        return cls(w1=weight(hidden, input_dim, input_gain), b1=parameter(np.zeros(hidden)),
                   w2=weight(hidden, hidden), b2=parameter(np.zeros(hidden)))

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.w1": self.w1, f"{prefix}.b1": self.b1,
                f"{prefix}.w2": self.w2, f"{prefix}.b2": self.b2}

    def apply(self, x: Tensor) -> Tensor:
        return matmul(self.w2, relu(matmul(self.w1, x) + self.b1)) + self.b2


@dataclass
class FeatureVector:
    """An evaluation feature; normalized means unit l2 norm (a zero o2 is
    passed through as zero and flagged)."""

    values: np.ndarray
    normalized: bool


@dataclass
class ForwardResult:
    x1: Tensor
    o1: Tensor
    o2: Tensor
    logits_model: Tensor
    logits_vehicle: Tensor
    attention: att.AttentionWeights | None


class Model:
    """One trainable instance of a variant, with a stable parameter registry."""

    def __init__(self, config: ModelConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        self.conv_params: ConvStackParams | None = None
        if config.backbone == "conv":
            self.conv_params = ConvStackParams.init(config.conv, rng)
        if config.variant == "fc_ha":
            self.fc1 = TwoLayerParams.init(config.d, config.hidden, rng, config.input_gain)
            self.fc2 = TwoLayerParams.init(config.d, config.hidden, rng, config.input_gain)
            self.gru: GruParams | None = None
        else:
            self.gru = GruParams.init(config.d, config.hidden, rng, config.input_gain)
        self.head_model = ClassifierHead.init(config.num_models, config.hidden, rng)
        self.head_vehicle = ClassifierHead.init(config.num_vehicles, config.hidden, rng)
        self.attn: att.TransformerNetParams | None = None
        if config.variant != "rnn_h_no_attention":
            self.attn = att.TransformerNetParams.init(
                config.hidden, config.resolved_attn_hidden, config.d, rng)

    def params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        if self.conv_params is not None:
            out.update(self.conv_params.named())
        if self.gru is not None:
            out.update(self.gru.named())
        else:
            out.update(self.fc1.named("fc1"))
            out.update(self.fc2.named("fc2"))
        out.update(self.head_model.named("head_model"))
        out.update(self.head_vehicle.named("head_vehicle"))
        if self.attn is not None:
            out.update(self.attn.named())
        return out

    def parameter_count(self) -> int:
        return sum(t.data.size for t in self.params().values())

    def _activation_map(self, inp) -> ActivationMap:
        if isinstance(inp, ActivationMap):
            amap = inp
        elif self.conv_params is not None:
            amap = conv_forward(inp, self.conv_params)
        else:
            amap = ActivationMap(Tensor(np.asarray(inp, dtype=np.float64)),
                                 provenance="ingested")
        if amap.shape[2] != self.config.d:
            raise ShapeError(f"activation map depth {amap.shape[2]} does not match "
                             f"config.d = {self.config.d}")
        return amap

    def forward(self, inp) -> ForwardResult:
        cfg = self.config
        amap = self._activation_map(inp)
        x1 = global_average_pool(amap.tensor)
        weights_out: list[att.AttentionWeights | None] = [None]

        if cfg.variant == "fc_ha":
            o1 = self.fc1.apply(x1)
            x2, weights = att.attention_pipeline(o1, amap, self.attn, cfg.epsilon)
            weights_out[0] = weights
            o2 = self.fc2.apply(x2)
        else:
            def provider(o1: Tensor) -> Tensor:
                if cfg.variant == "rnn_h_no_attention":
                    return x1
                x2, weights = att.attention_pipeline(o1, amap, self.attn, cfg.epsilon)
                weights_out[0] = weights
                return x2

            o1, o2, _ = unroll(x1, self.gru, provider)

        return ForwardResult(
            x1=x1, o1=o1, o2=o2,
            logits_model=classify(o1, self.head_model),
            logits_vehicle=classify(o2, self.head_vehicle),
            attention=weights_out[0],
        )

    def loss(self, inp, y_model: int, y_vehicle: int) -> tuple[Tensor, LossReport, ForwardResult]:
        result = self.forward(inp)
        total, report = hierarchical_loss(result.logits_model, y_model,
                                          result.logits_vehicle, y_vehicle)
        return total, report, result

    def extract_feature(self, inp) -> FeatureVector:
        o2 = self.forward(inp).o2.data
        norm = float(np.linalg.norm(o2))
        if norm == 0.0:
            return FeatureVector(values=o2.copy(), normalized=False)
        return FeatureVector(values=o2 / norm, normalized=True)

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        params = self.params()
        if set(state) != set(params):
            missing = sorted(set(params) - set(state))
            extra = sorted(set(state) - set(params))
            raise ConfigError(f"parameter names disagree with checkpoint "
                              f"(missing {missing}, unexpected {extra})")
        for name, tensor in params.items():
            if state[name].shape != tensor.data.shape:
                raise ConfigError(f"{name}: checkpoint shape {state[name].shape} != "
                                  f"model shape {tensor.data.shape}")
            tensor.data[...] = state[name]


def normalize_feature(values: np.ndarray) -> FeatureVector:
    """l2-normalize an arbitrary vector with the zero-vector convention."""
    values = np.asarray(values, dtype=np.float64)
    norm = float(np.linalg.norm(values))
    if norm == 0.0:
        return FeatureVector(values=values.copy(), normalized=False)
    return FeatureVector(values=values / norm, normalized=True)
