"""
Towers and model assembly.

An image tower f and a text tower g are small GELU MLPs. The third tower h is
a frozen table of pretrained embeddings p(I) followed by a trainable
projection W_h. Adaptor heads are biasless D x D maps followed by L2
normalisation. ``Model`` ties the pieces together for one of three modes:

    baseline      both main towers trained from scratch, loss L_{f<->g}
    lit           the tower on the frozen side is replaced by W_h p(.)
    three_towers  both main towers trained, plus transfer terms toward h
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from src.backend.config import TAU_INIT
from src.backend.errors import (
    ConfigError,
    DimMismatch,
    LengthMismatch,
    MissingFrozenTower,
    ShapeMismatch,
    UnknownId,
)
from src.backend.model.losses import (
    HeadOutputs,
    LossBreakdown,
    LossVariant,
    Temperature,
    bidirectional_loss,
    contrastive_term_with_grads,
    objective_with_grads,
    variant_loss,
)
from src.backend.numerics import (
    Matrix,
    RngStream,
    Vector,
    as_matrix,
    gelu,
    gelu_grad,
    l2_normalize_rows,
    l2_normalize_rows_backward,
)

logger = logging.getLogger(__name__)

MODES = ("baseline", "lit", "three_towers")
MODALITIES = ("image", "text")
HEAD_VARIANTS = ("default", "third_only", "main_only", "fully_independent", "headless")
HEAD_NAMES = ("f_h", "g_h", "h_f", "h_g", "f_g", "g_f")
PROJECTION_KINDS = ("linear", "mlp")

_LEARNED_HEADS = {
    "default": ("f_h", "g_h", "h_f", "h_g"),
    "third_only": ("h_f", "h_g"),
    "main_only": ("f_h", "g_h"),
    "fully_independent": ("f_h", "g_h", "h_f", "h_g", "f_g", "g_f"),
    "headless": (),
}

# (loss input, head applied, tower feeding it)
_HEAD_FEEDS = (
    ("f", "f_g", "f"),
    ("g", "g_f", "g"),
    ("f_h", "f_h", "f"),
    ("h_f", "h_f", "h"),
    ("g_h", "g_h", "g"),
    ("h_g", "h_g", "h"),
)


# ---------------------------------------------------------------------------
# Encoders
# ---------------------------------------------------------------------------

@dataclass
class Layer:
    weight: Matrix
    bias: Vector | None = None

    def __post_init__(self) -> None:
        self.weight = as_matrix(self.weight)
        if self.bias is not None:
            self.bias = np.asarray(self.bias, dtype=np.float64).reshape(-1)
            if self.bias.size != self.weight.shape[1]:
                raise DimMismatch(
                    f"bias length {self.bias.size} does not match layer width {self.weight.shape[1]}"
                )

    def copy(self) -> "Layer":
        return Layer(self.weight.copy(), None if self.bias is None else self.bias.copy())


@dataclass
class _ForwardCache:
    inputs: list[Matrix]
    pre_activations: list[Matrix]


@dataclass
class MlpEncoder:
    """Linear layers with GELU between them (none after the last)."""

    layers: list[Layer]

    def __post_init__(self) -> None:
        if not self.layers:
            raise ConfigError("an encoder needs at least one layer")
        for idx in range(1, len(self.layers)):
            prev, cur = self.layers[idx - 1], self.layers[idx]
            if prev.weight.shape[1] != cur.weight.shape[0]:
                raise DimMismatch(
                    f"layer {idx - 1} outputs {prev.weight.shape[1]} values but layer {idx} expects {cur.weight.shape[0]}"
                )

    @classmethod
    def initialize(cls, dims: Sequence[int], rng: RngStream, *, bias: bool = True) -> "MlpEncoder":
        """Weights ~ N(0, 1/fan_in), biases zero."""
        layers = []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            weight = rng.normal((fan_in, fan_out)) / math.sqrt(fan_in)
            layers.append(Layer(weight, np.zeros(fan_out) if bias else None))
        return cls(layers)

    @property
    def input_dim(self) -> int:
        return self.layers[0].weight.shape[0]

    @property
    def output_dim(self) -> int:
        return self.layers[-1].weight.shape[1]

    @property
    def shapes(self) -> list[tuple[tuple[int, int], bool]]:
        return [(layer.weight.shape, layer.bias is not None) for layer in self.layers]

    def forward(self, X: Matrix) -> tuple[Matrix, _ForwardCache]:
        X = as_matrix(X)
        if X.shape[1] != self.input_dim:
            raise DimMismatch(f"encoder expects {self.input_dim} input columns, got {X.shape[1]}")
        cache = _ForwardCache([], [])
        h = X
        last = len(self.layers) - 1
        for idx, layer in enumerate(self.layers):
            cache.inputs.append(h)
            z = h @ layer.weight
            if layer.bias is not None:
                z = z + layer.bias
            if idx < last:
                cache.pre_activations.append(z)
                h = gelu(z)
            else:
                h = z
        return h, cache

    def __call__(self, X: Matrix) -> Matrix:
        return self.forward(X)[0]

    def backward(self, cache: _ForwardCache, d_out: Matrix) -> tuple[list[tuple[Matrix, Vector | None]], Matrix]:
        grads: list[tuple[Matrix, Vector | None]] = [None] * len(self.layers)  # type: ignore[list-item]
        d = d_out
        last = len(self.layers) - 1
        for idx in range(last, -1, -1):
            layer = self.layers[idx]
            if idx < last:
                d = d * gelu_grad(cache.pre_activations[idx])
            d_weight = cache.inputs[idx].T @ d
            d_bias = np.sum(d, axis=0) if layer.bias is not None else None
            grads[idx] = (d_weight, d_bias)
            d = d @ layer.weight.T
        return grads, d

    def named_parameters(self, prefix: str) -> list[tuple[str, np.ndarray]]:
        named = []
        for idx, layer in enumerate(self.layers):
            named.append((f"{prefix}.{idx}.weight", layer.weight))
            if layer.bias is not None:
                named.append((f"{prefix}.{idx}.bias", layer.bias))
        return named

    @staticmethod
    def named_gradients(prefix: str, grads: list[tuple[Matrix, Vector | None]]) -> dict[str, np.ndarray]:
        named = {}
        for idx, (d_weight, d_bias) in enumerate(grads):
            named[f"{prefix}.{idx}.weight"] = d_weight
            if d_bias is not None:
                named[f"{prefix}.{idx}.bias"] = d_bias
        return named

    def copy(self) -> "MlpEncoder":
        return MlpEncoder([layer.copy() for layer in self.layers])

    def freeze(self) -> "MlpEncoder":
        for layer in self.layers:
            layer.weight.setflags(write=False)
            if layer.bias is not None:
                layer.bias.setflags(write=False)
        return self


def encode(encoder: MlpEncoder, X: Matrix) -> Matrix:
    """Raw (pre-normalisation) embeddings of X."""
    return encoder(X)


# ---------------------------------------------------------------------------
# Third tower
# ---------------------------------------------------------------------------

def _as_ids(ids) -> np.ndarray:
    return np.asarray(ids, dtype=np.int64).reshape(-1)


@dataclass
class FrozenTower:
    """
    Frozen embedding table p (one row per example id) plus a trainable
    projection to the shared dimension. ``body`` is the frozen network the
    table was computed with; it embeds inputs that are not in the table.
    """

    table: Matrix
    projection: MlpEncoder
    body: MlpEncoder | None = None
    modality: str = "image"
    kind: str = "linear"

    def __post_init__(self) -> None:
        if self.modality not in MODALITIES:
            raise ConfigError(f"modality must be one of {MODALITIES}, got {self.modality!r}")
        if self.kind not in PROJECTION_KINDS:
            raise ConfigError(f"projection kind must be one of {PROJECTION_KINDS}, got {self.kind!r}")
        table = as_matrix(self.table)
        if table.flags.writeable:
            table = table.copy()
            table.setflags(write=False)
        self.table = table
        if self.projection.input_dim != table.shape[1]:
            raise DimMismatch(
                f"projection expects {self.projection.input_dim} inputs but the table has {table.shape[1]} columns"
            )
        if self.body is not None:
            if self.body.output_dim != table.shape[1]:
                raise DimMismatch(
                    f"frozen body outputs {self.body.output_dim} values but the table has {table.shape[1]} columns"
                )
            self.body.freeze()

    @classmethod
    def from_table(
        cls,
        table: Matrix,
        embed_dim: int,
        rng: RngStream,
        *,
        body: MlpEncoder | None = None,
        modality: str = "image",
        kind: str = "linear",
    ) -> "FrozenTower":
        width = as_matrix(table).shape[1]
        if kind == "mlp":
            projection = MlpEncoder.initialize((width, 4 * width, embed_dim), rng, bias=True)
        else:
            projection = MlpEncoder.initialize((width, embed_dim), rng, bias=False)
        return cls(table, projection, body=body, modality=modality, kind=kind)

    @property
    def num_examples(self) -> int:
        return self.table.shape[0]

    @property
    def output_dim(self) -> int:
        return self.projection.output_dim

    def rows(self, ids) -> Matrix:
        ids = _as_ids(ids)
        if ids.size and (ids.min() < 0 or ids.max() >= self.num_examples):
            bad = ids[(ids < 0) | (ids >= self.num_examples)][0]
            raise UnknownId(f"id {int(bad)} is not in the frozen table ({self.num_examples} rows)")
        return self.table[ids]

    def embed_features(self, X: Matrix) -> Matrix:
        if self.body is None:
            raise ConfigError("this frozen tower has no body; only table ids can be embedded")
        return self.body(X)

    def copy(self) -> "FrozenTower":
        return FrozenTower(self.table, self.projection.copy(), body=self.body, modality=self.modality, kind=self.kind)


def third_tower_embed(frozen: FrozenTower, ids) -> Matrix:
    return frozen.projection(frozen.rows(ids))


# ---------------------------------------------------------------------------
# Adaptor heads
# ---------------------------------------------------------------------------

@dataclass
class HeadConfig:
    """Learned head matrices; a head missing from ``maps`` is the identity."""

    variant: str = "default"
    maps: dict[str, Matrix] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.variant not in HEAD_VARIANTS:
            raise ConfigError(f"head variant must be one of {HEAD_VARIANTS}, got {self.variant!r}")
        expected = set(_LEARNED_HEADS[self.variant])
        if set(self.maps) != expected:
            raise ConfigError(
                f"head variant {self.variant!r} needs heads {sorted(expected)}, got {sorted(self.maps)}"
            )
        dims = set()
        for name, matrix in self.maps.items():
            matrix = as_matrix(matrix)
            if matrix.shape[0] != matrix.shape[1]:
                raise DimMismatch(f"head {name} must be square, got {matrix.shape}")
            dims.add(matrix.shape[0])
            self.maps[name] = matrix
        if len(dims) > 1:
            raise DimMismatch(f"head maps disagree on dimension: {sorted(dims)}")

    @classmethod
    def identity(cls, variant: str, dim: int) -> "HeadConfig":
        if variant not in HEAD_VARIANTS:
            raise ConfigError(f"head variant must be one of {HEAD_VARIANTS}, got {variant!r}")
        return cls(variant, {name: np.eye(dim) for name in _LEARNED_HEADS[variant]})

    @property
    def learned_names(self) -> tuple[str, ...]:
        return tuple(name for name in HEAD_NAMES if name in self.maps)

    @property
    def dim(self) -> int | None:
        for matrix in self.maps.values():
            return matrix.shape[0]
        return None

    def matrix(self, name: str) -> Matrix | None:
        return self.maps.get(name)

    def copy(self) -> "HeadConfig":
        return HeadConfig(self.variant, {name: m.copy() for name, m in self.maps.items()})


def _head_forward(H: Matrix | None, x: Matrix) -> tuple[Matrix, tuple[Matrix, Matrix, Matrix]]:
    z = x if H is None else x @ H
    y = l2_normalize_rows(z)
    return y, (x, z, y)


def _head_backward(H: Matrix | None, cache, dy: Matrix) -> tuple[Matrix | None, Matrix]:
    x, z, y = cache
    dz = l2_normalize_rows_backward(z, y, dy)
    if H is None:
        return None, dz
    return x.T @ dz, dz @ H.T


def apply_heads(config: HeadConfig, raw_f: Matrix, raw_g: Matrix, raw_h: Matrix) -> HeadOutputs:
    """Normalised inputs for the three loss terms."""
    raw = {"f": as_matrix(raw_f), "g": as_matrix(raw_g), "h": as_matrix(raw_h)}
    shapes = {batch.shape for batch in raw.values()}
    if len(shapes) != 1:
        raise DimMismatch(f"tower outputs disagree in shape: {sorted(shapes)}")
    dim = config.dim
    if dim is not None and raw["f"].shape[1] != dim:
        raise DimMismatch(f"heads are {dim}-dimensional, tower outputs have {raw['f'].shape[1]} columns")
    outs = {}
    for out_name, head_name, tower in _HEAD_FEEDS:
        outs[out_name], _ = _head_forward(config.matrix(head_name), raw[tower])
    return HeadOutputs(**outs)


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------

@dataclass
class Batch:
    """Aligned (id, image features, text features) rows."""

    ids: np.ndarray
    image: Matrix
    text: Matrix

    def __post_init__(self) -> None:
        self.ids = _as_ids(self.ids)
        self.image = as_matrix(self.image)
        self.text = as_matrix(self.text)
        if not (len(self.ids) == self.image.shape[0] == self.text.shape[0]):
            raise LengthMismatch(
                f"batch parts differ in length: ids={len(self.ids)}, image={self.image.shape[0]}, text={self.text.shape[0]}"
            )

    def __len__(self) -> int:
        return len(self.ids)


@dataclass(frozen=True)
class ModelMode:
    mode: str = "three_towers"
    frozen_modality: str = "image"
    init_main_from_pretrained: bool = False

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.frozen_modality not in MODALITIES:
            raise ConfigError(f"frozen modality must be one of {MODALITIES}, got {self.frozen_modality!r}")

    @property
    def uses_frozen(self) -> bool:
        return self.mode != "baseline"

    def as_dict(self) -> dict:
        return {
            "mode": self.mode,
            "frozen_modality": self.frozen_modality,
            "init_main_from_pretrained": self.init_main_from_pretrained,
        }


@dataclass
class Model:
    mode: ModelMode
    image_encoder: MlpEncoder | None
    text_encoder: MlpEncoder | None
    frozen: FrozenTower | None
    heads: HeadConfig
    temperatures: dict[str, Temperature]
    variant: LossVariant = field(default_factory=LossVariant)

    # ----- parameters -----

    def named_parameters(self) -> list[tuple[str, np.ndarray]]:
        """Trainable tensors in a fixed order; frozen parts never appear."""
        named: list[tuple[str, np.ndarray]] = []
        if self.image_encoder is not None:
            named += self.image_encoder.named_parameters("image")
        if self.text_encoder is not None:
            named += self.text_encoder.named_parameters("text")
        if self.frozen is not None:
            named += self.frozen.projection.named_parameters("third")
        for name in self.heads.learned_names:
            named.append((f"head.{name}", self.heads.maps[name]))
        for key in self.variant.temperature_keys:
            named.append((f"temp.{key}", self.temperatures[key].log_inv_tau))
        return named

    @property
    def parameter_count(self) -> int:
        return sum(p.size for _, p in self.named_parameters())

    def flat_parameters(self) -> Vector:
        named = self.named_parameters()
        if not named:
            return np.zeros(0)
        return np.concatenate([p.ravel() for _, p in named])

    def load_flat_parameters(self, params: Vector) -> None:
        params = np.asarray(params, dtype=np.float64).reshape(-1)
        if params.size != self.parameter_count:
            raise ShapeMismatch(f"expected {self.parameter_count} parameters, got {params.size}")
        offset = 0
        for _, tensor in self.named_parameters():
            tensor[...] = params[offset:offset + tensor.size].reshape(tensor.shape)
            offset += tensor.size

    def flatten_gradients(self, grads: dict[str, np.ndarray]) -> Vector:
        parts = [np.asarray(grads[name]).ravel() if name in grads else np.zeros(p.size) for name, p in self.named_parameters()]
        return np.concatenate(parts) if parts else np.zeros(0)

    def decay_mask(self) -> np.ndarray:
        """True where weight decay applies (everything but temperatures)."""
        named = self.named_parameters()
        if not named:
            return np.zeros(0, dtype=bool)
        return np.concatenate([np.full(p.size, not name.startswith("temp.")) for name, p in named])

    def term_thetas(self) -> tuple[float, float, float]:
        if self.variant.temps == "shared":
            theta = self.temperatures["shared"].theta
            return (theta, theta, theta)
        return tuple(self.temperatures[key].theta for key in ("fg", "fh", "gh"))  # type: ignore[return-value]

    @property
    def main_tau(self) -> float:
        """Temperature of the f<->g term, used for zero-shot probabilities."""
        return math.exp(-self.term_thetas()[0])

    def copy(self) -> "Model":
        return Model(
            mode=self.mode,
            image_encoder=None if self.image_encoder is None else self.image_encoder.copy(),
            text_encoder=None if self.text_encoder is None else self.text_encoder.copy(),
            frozen=None if self.frozen is None else self.frozen.copy(),
            heads=self.heads.copy(),
            temperatures={key: t.copy() for key, t in self.temperatures.items()},
            variant=self.variant,
        )

    # ----- training objective -----

    def _forward_towers(self, batch: Batch) -> tuple[dict[str, Matrix], dict[str, _ForwardCache]]:
        raw: dict[str, Matrix] = {}
        caches: dict[str, _ForwardCache] = {}
        if self.image_encoder is not None:
            raw["f"], caches["f"] = self.image_encoder.forward(batch.image)
        if self.text_encoder is not None:
            raw["g"], caches["g"] = self.text_encoder.forward(batch.text)
        if self.frozen is not None:
            raw["h"], caches["h"] = self.frozen.projection.forward(self.frozen.rows(batch.ids))
        return raw, caches

    def _contrastive_sides(self) -> tuple[str, str]:
        """(image side, text side) of the single term used by baseline and lit."""
        if self.mode.mode == "baseline":
            return "f", "g"
        if self.mode.frozen_modality == "image":
            return "h", "g"
        return "f", "h"

    def loss(self, batch: Batch) -> LossBreakdown:
        raw, _ = self._forward_towers(batch)
        if self.mode.mode == "three_towers":
            outputs = apply_heads(self.heads, raw["f"], raw["g"], raw["h"])
            taus = tuple(math.exp(-theta) for theta in self.term_thetas())
            return variant_loss(outputs, taus, self.variant)  # type: ignore[arg-type]
        a, b = self._contrastive_sides()
        value = bidirectional_loss(l2_normalize_rows(raw[a]), l2_normalize_rows(raw[b]), self.main_tau)
        return LossBreakdown(l_fg=value, l_fh=0.0, l_gh=0.0, total=value)

    def loss_and_grads(self, batch: Batch) -> tuple[LossBreakdown, dict[str, np.ndarray]]:
        """Loss plus gradients keyed by parameter name."""
        raw, caches = self._forward_towers(batch)
        grads: dict[str, np.ndarray] = {}
        d_raw: dict[str, Matrix] = {}

        def accumulate(tower: str, d: Matrix) -> None:
            d_raw[tower] = d if tower not in d_raw else d_raw[tower] + d

        if self.mode.mode == "three_towers":
            outs, head_caches = {}, {}
            for out_name, head_name, tower in _HEAD_FEEDS:
                outs[out_name], head_caches[out_name] = _head_forward(self.heads.matrix(head_name), raw[tower])
            breakdown, d_outputs, d_thetas = objective_with_grads(
                HeadOutputs(**outs), self.term_thetas(), self.variant
            )
            for out_name, head_name, tower in _HEAD_FEEDS:
                H = self.heads.matrix(head_name)
                d_head, d_in = _head_backward(H, head_caches[out_name], getattr(d_outputs, out_name))
                if d_head is not None:
                    grads[f"head.{head_name}"] = d_head
                accumulate(tower, d_in)
        else:
            a, b = self._contrastive_sides()
            A, cache_a = _head_forward(None, raw[a])
            B, cache_b = _head_forward(None, raw[b])
            value, d_A, d_B, d_theta = contrastive_term_with_grads(A, B, self.term_thetas()[0])
            breakdown = LossBreakdown(l_fg=value, l_fh=0.0, l_gh=0.0, total=value)
            accumulate(a, _head_backward(None, cache_a, d_A)[1])
            accumulate(b, _head_backward(None, cache_b, d_B)[1])
            d_thetas = (d_theta, 0.0, 0.0)

        if self.variant.temps == "shared":
            grads["temp.shared"] = np.array([d_thetas[0] + d_thetas[1] + d_thetas[2]])
        else:
            for key, d_theta in zip(("fg", "fh", "gh"), d_thetas):
                grads[f"temp.{key}"] = np.array([d_theta])

        towers = (
            ("f", self.image_encoder, "image"),
            ("g", self.text_encoder, "text"),
            ("h", None if self.frozen is None else self.frozen.projection, "third"),
        )
        for tower, encoder, prefix in towers:
            if encoder is None or tower not in d_raw:
                continue
            layer_grads, _ = encoder.backward(caches[tower], d_raw[tower])
            grads.update(MlpEncoder.named_gradients(prefix, layer_grads))
        return breakdown, grads

    # ----- inference (main towers only, third tower discarded) -----

    def _frozen_side(self, modality: str) -> bool:
        return self.mode.mode == "lit" and self.mode.frozen_modality == modality

    def _main_head(self, name: str, raw: Matrix) -> Matrix:
        H = self.heads.matrix(name) if self.mode.mode == "three_towers" else None
        return l2_normalize_rows(raw if H is None else raw @ H)

    def image_raw(self, ids, X: Matrix) -> Matrix:
        if self._frozen_side("image"):
            return third_tower_embed(self.frozen, ids)
        return self.image_encoder(X)

    def text_raw(self, ids, X: Matrix) -> Matrix:
        if self._frozen_side("text"):
            return third_tower_embed(self.frozen, ids)
        return self.text_encoder(X)

    def embed_images(self, ids, X: Matrix) -> Matrix:
        return self._main_head("f_g", self.image_raw(ids, X))

    def embed_texts(self, ids, X: Matrix) -> Matrix:
        return self._main_head("g_f", self.text_raw(ids, X))

    def label_embeddings(self, class_text: Matrix) -> Matrix:
        """Class embeddings from canonical per-class text features."""
        if self._frozen_side("text"):
            return l2_normalize_rows(self.frozen.projection(self.frozen.embed_features(class_text)))
        return self._main_head("g_f", self.text_encoder(class_text))

    def image_prelogits(self, ids, X: Matrix) -> Matrix:
        """Pre-normalisation image representations used by few-shot probes."""
        if self._frozen_side("image"):
            return self.frozen.rows(ids).copy()
        return self.image_encoder(X)

    def third_tower_embeddings(self, ids) -> tuple[Matrix, Matrix]:
        if self.frozen is None:
            raise MissingFrozenTower("this model has no third tower")
        raw = third_tower_embed(self.frozen, ids)
        return raw, l2_normalize_rows(raw)


# ---------------------------------------------------------------------------
# Assembly
# ---------------------------------------------------------------------------

def _default_temperatures(variant: LossVariant) -> dict[str, Temperature]:
    return {key: Temperature.from_tau(TAU_INIT) for key in variant.temperature_keys}


def assemble_model(
    mode: ModelMode,
    image_encoder: MlpEncoder | None,
    text_encoder: MlpEncoder | None,
    frozen: FrozenTower | None,
    heads: HeadConfig,
    temperatures: dict[str, Temperature] | None = None,
    variant: LossVariant | None = None,
) -> Model:
    variant = variant or LossVariant()
    if mode.mode == "baseline":
        if frozen is not None:
            logger.warning("Baseline mode has no third tower; ignoring the pretrained table")
            frozen = None
    elif frozen is None:
        raise MissingFrozenTower(f"{mode.mode} mode needs a pretrained frozen tower")
    elif frozen.modality != mode.frozen_modality:
        raise ConfigError(
            f"pretrained tower is a {frozen.modality} tower but frozen modality is {mode.frozen_modality!r}"
        )

    if mode.mode == "lit":
        if mode.frozen_modality == "image":
            image_encoder = None
        else:
            text_encoder = None

    needed = {"image": image_encoder, "text": text_encoder}
    if mode.mode == "lit":
        needed.pop(mode.frozen_modality)
    for side, encoder in needed.items():
        if encoder is None:
            raise ConfigError(f"{mode.mode} mode needs a trainable {side} encoder")

    if mode.mode != "three_towers":
        if heads.variant != "headless":
            logger.warning("%s mode uses no adaptor heads; ignoring head variant %r", mode.mode, heads.variant)
        if variant.temps != "shared":
            raise ConfigError("per-term temperatures only apply to three_towers mode")

    outputs = {
        name: part.output_dim
        for name, part in (
            ("image encoder", image_encoder),
            ("text encoder", text_encoder),
            ("third tower", None if frozen is None else frozen.projection),
        )
        if part is not None
    }
    if len(set(outputs.values())) != 1:
        raise DimMismatch(f"towers disagree on the embedding dimension: {outputs}")
    dim = next(iter(outputs.values()))

    if mode.mode == "three_towers":
        if heads.dim is not None and heads.dim != dim:
            raise DimMismatch(f"heads are {heads.dim}-dimensional, towers output {dim}")
    else:
        heads = HeadConfig.identity("headless", dim)

    if temperatures is None:
        temperatures = _default_temperatures(variant)
    if set(temperatures) != set(variant.temperature_keys):
        raise ConfigError(
            f"temperatures {sorted(temperatures)} do not match {variant.temps!r} ({list(variant.temperature_keys)})"
        )

    if mode.init_main_from_pretrained:
        if mode.mode != "three_towers":
            raise ConfigError("init_main_from_pretrained only applies to three_towers mode")
        if frozen.body is None:
            raise ConfigError("the pretrained tower carries no body to initialise from")
        target = image_encoder if frozen.modality == "image" else text_encoder
        if target.shapes != frozen.body.shapes:
            raise DimMismatch(
                f"main {frozen.modality} encoder {target.shapes} does not match the pretrained body {frozen.body.shapes}"
            )
        if frozen.modality == "image":
            image_encoder = frozen.body.copy()
        else:
            text_encoder = frozen.body.copy()
        logger.info("Initialised the main %s tower from the pretrained body", frozen.modality)

    return Model(
        mode=mode,
        image_encoder=image_encoder,
        text_encoder=text_encoder,
        frozen=frozen,
        heads=heads,
        temperatures=temperatures,
        variant=variant,
    )


def build_model(
    mode: ModelMode,
    *,
    image_dim: int,
    text_dim: int,
    embed_dim: int = 16,
    hidden: int = 64,
    frozen_table: Matrix | None = None,
    frozen_body: MlpEncoder | None = None,
    head_variant: str = "default",
    third_tower: str = "linear",
    variant: LossVariant | None = None,
    seed: int = 0,
) -> Model:
    """
    Freshly initialised model. Draw order is image encoder, text encoder,
    third-tower projection, so every mode with the same seed starts its main
    towers from the same weights.
    """
    rng = RngStream(seed)
    def dims(width: int) -> tuple[int, ...]:
        return (width, hidden, embed_dim) if hidden > 0 else (width, embed_dim)

    image_encoder = MlpEncoder.initialize(dims(image_dim), rng)
    text_encoder = MlpEncoder.initialize(dims(text_dim), rng)
    frozen = None
    if mode.uses_frozen:
        if frozen_table is None:
            raise MissingFrozenTower(f"{mode.mode} mode needs a pretrained frozen tower")
        frozen = FrozenTower.from_table(
            frozen_table,
            embed_dim,
            rng,
            body=frozen_body,
            modality=mode.frozen_modality,
            kind=third_tower,
        )
    elif frozen_table is not None:
        logger.warning("Baseline mode has no third tower; ignoring the pretrained table")
    head_variant = head_variant if mode.mode == "three_towers" else "headless"
    heads = HeadConfig.identity(head_variant, embed_dim)
    return assemble_model(mode, image_encoder, text_encoder, frozen, heads, variant=variant)
