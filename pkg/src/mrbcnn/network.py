"""The three-part embedding network and its CNN / B-CNN / MR-B-CNN variants."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass

import numpy as np

from . import layers
from .bilinear import (
    PART_NAMES,
    BilinearDescriptor,
    RegionGrid,
    assemble_descriptor,
    bilinear_outer,
    grid_from_counts,
    make_region_grid,
    region_pool,
    signed_sqrt_l2,
)
from .errors import ContractError, DimensionError
from .layers import ConvSpec, ParamStore
from .rng import Stream
from .tensor import Tensor, as_tensor, concat, reshape, slice_axis

VARIANTS = ("cnn", "bcnn", "mr-bcnn")
_VARIANT_ALIASES = {
    "cnn": "cnn",
    "b-cnn": "bcnn",
    "bcnn": "bcnn",
    "mr-b-cnn": "mr-bcnn",
    "mr-bcnn": "mr-bcnn",
    "mrbcnn": "mr-bcnn",
}


def normalize_variant(name: str) -> str:
    try:
        return _VARIANT_ALIASES[name.strip().lower().replace("_", "-").replace(" ", "-")]
    except KeyError:
        raise ContractError(f"unknown variant {name!r}; expected one of {VARIANTS}") from None


@dataclass(frozen=True)
class NetworkConfig:
    """Architecture description; defaults give the full-size MR-B-CNN."""

    variant: str = "mr-bcnn"
    input_h: int = 160
    input_w: int = 60
    part_height: int = 72
    part_stride: int = 44
    conv1_channels: int = 32
    conv2_channels: int = 32
    conv1_kernel: int = 7
    conv2_kernel: int = 5
    cell_h: int = 5
    cell_w: int = 5
    # when both are positive the cell size is derived from a requested grid count
    grid_rows: int = 0
    grid_cols: int = 0
    embedding_dim: int = 500
    dropout_p: float = 0.5
    normalize: bool = False

    def __post_init__(self):
        object.__setattr__(self, "variant", normalize_variant(self.variant))
        if self.part_height + 2 * self.part_stride != self.input_h:
            raise ContractError(
                f"parts do not fit: {self.part_height} + 2*{self.part_stride} != input height {self.input_h}"
            )
        if self.part_stride < 1 or self.part_stride >= self.part_height:
            raise ContractError("part stride must be positive and below the part height (parts overlap)")
        if self.embedding_dim < 1:
            raise ContractError("embedding_dim must be positive")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ContractError("dropout_p must lie in [0, 1)")
        if min(self.conv1_channels, self.conv2_channels) < 1:
            raise ContractError("channel counts must be positive")
        self.feature_hw  # validates the conv/pool arithmetic

    @property
    def part_windows(self) -> list[tuple[int, int]]:
        return [(i * self.part_stride, i * self.part_stride + self.part_height) for i in range(3)]

    @property
    def conv_specs(self) -> tuple[ConvSpec, ConvSpec]:
        k1, k2 = self.conv1_kernel, self.conv2_kernel
        return (
            ConvSpec(3, self.conv1_channels, (k1, k1)),
            ConvSpec(self.conv1_channels, self.conv2_channels, (k2, k2)),
        )

    @property
    def stage_extents(self) -> list[tuple[int, int]]:
        """Spatial extents after conv1, pool1, conv2, pool2 for one part."""
        c1, c2 = self.conv_specs
        h, w = self.part_height, self.input_w
        out = []
        h, w = c1.output_hw(h, w)
        out.append((h, w))
        h, w = h // 2, w // 2
        out.append((h, w))
        h, w = c2.output_hw(h, w)
        out.append((h, w))
        h, w = h // 2, w // 2
        if h < 1 or w < 1:
            raise DimensionError(f"part {self.part_height}x{self.input_w} too small for the conv stream")
        out.append((h, w))
        return out

    @property
    def feature_hw(self) -> tuple[int, int]:
        return self.stage_extents[-1]

    @property
    def grid(self) -> RegionGrid:
        h, w = self.feature_hw
        if self.variant == "bcnn":
            return make_region_grid(h, w, h, w)
        if self.grid_rows > 0 and self.grid_cols > 0:
            return grid_from_counts(h, w, self.grid_rows, self.grid_cols)
        return make_region_grid(h, w, min(self.cell_h, h), min(self.cell_w, w))

    @property
    def bilinear_dim(self) -> int:
        return self.conv2_channels * self.conv2_channels

    @property
    def descriptor_dim(self) -> int:
        """Fan-in of the final fully-connected layer."""
        if self.variant == "cnn":
            h, w = self.feature_hw
            return 3 * self.conv2_channels * h * w
        return 3 * self.grid.n_regions * self.bilinear_dim

    @property
    def streams(self) -> tuple[str, ...]:
        return ("a",) if self.variant == "cnn" else ("a", "b")

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        c1, c2 = self.conv_specs
        shapes: dict[str, tuple[int, ...]] = {}
        for part in PART_NAMES:
            for s in self.streams:
                pre = f"{part}.{s}"
                shapes[f"{pre}.conv1.w"] = c1.weight_shape
                shapes[f"{pre}.conv1.b"] = (c1.out_channels,)
                shapes[f"{pre}.conv2.w"] = c2.weight_shape
                shapes[f"{pre}.conv2.b"] = (c2.out_channels,)
        shapes["fc.w"] = (self.embedding_dim, self.descriptor_dim)
        shapes["fc.b"] = (self.embedding_dim,)
        return shapes

    def to_dict(self) -> dict:
        return asdict(self)

    def fingerprint(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def init_params(config: NetworkConfig, stream: Stream) -> ParamStore:
    """Fresh parameters for ``config``; a pure function of the stream's seed/path."""
    return layers.init_weights(config.param_shapes(), stream)


def check_params(params: ParamStore, config: NetworkConfig) -> None:
    expected = config.param_shapes()
    got = params.shapes()
    if set(expected) != set(got):
        missing = sorted(set(expected) - set(got))
        extra = sorted(set(got) - set(expected))
        raise ContractError(f"parameters do not match variant {config.variant}: missing {missing}, extra {extra}")
    for name, shape in expected.items():
        if got[name] != shape:
            raise ContractError(f"parameter {name} has shape {got[name]}, config needs {shape}")


def split_parts(image, config: NetworkConfig | None = None) -> list[Tensor]:
    """Cut an image (or batch) into overlapping top/middle/bottom row windows."""
    config = config or NetworkConfig()
    image = as_tensor(image)
    want = (3, config.input_h, config.input_w)
    if image.shape[-3:] != want or image.ndim not in (3, 4):
        raise DimensionError(f"expected image of shape {want} (optionally batched), got {image.shape}")
    axis = image.ndim - 2
    return [slice_axis(image, axis, r0, r1) for r0, r1 in config.part_windows]


def conv_stream(x: Tensor, params: ParamStore, prefix: str, config: NetworkConfig) -> Tensor:
    """conv7 -> ReLU -> pool -> conv5 -> ReLU -> pool."""
    c1, c2 = config.conv_specs
    h = layers.conv2d(x, params[f"{prefix}.conv1.w"], params[f"{prefix}.conv1.b"], c1)
    h = layers.maxpool2(layers.relu(h))
    h = layers.conv2d(h, params[f"{prefix}.conv2.w"], params[f"{prefix}.conv2.b"], c2)
    return layers.maxpool2(layers.relu(h))


def part_descriptor(x: Tensor, params: ParamStore, part: str, config: NetworkConfig) -> BilinearDescriptor:
    fa = conv_stream(x, params, f"{part}.a", config)
    fb = conv_stream(x, params, f"{part}.b", config)
    desc = region_pool(bilinear_outer(fa, fb), config.grid, part)
    return signed_sqrt_l2(desc) if config.normalize else desc


def descriptor(images, params: ParamStore, config: NetworkConfig) -> Tensor:
    """Concatenated per-part features that feed the final FC layer."""
    images = as_tensor(images)
    parts = split_parts(images, config)
    batched = images.ndim == 4
    if config.variant == "cnn":
        flat = []
        for part, x in zip(PART_NAMES, parts):
            f = conv_stream(x, params, f"{part}.a", config)
            flat.append(reshape(f, (f.shape[0], f.size // f.shape[0]) if batched else (f.size,)))
        return concat(flat, axis=1 if batched else 0)
    return assemble_descriptor([part_descriptor(x, params, p, config) for p, x in zip(PART_NAMES, parts)])


def embed(images, params: ParamStore, config: NetworkConfig, train: bool = False, stream: Stream | None = None) -> Tensor:
    """Map an image ``3 x H x W`` (or a batch) to ``embedding_dim`` features.

    In training mode dropout before the FC layer draws from ``stream``;
    evaluation mode is deterministic.
    """
    check_params(params, config)
    d = descriptor(images, params, config)
    d = layers.dropout(d, config.dropout_p, stream, train)
    return layers.fc(d, params["fc.w"], params["fc.b"])


def embed_numpy(images: np.ndarray, params: ParamStore, config: NetworkConfig, chunk: int = 64) -> np.ndarray:
    """Eval-mode embeddings for a stack of images, computed in chunks."""
    frozen = ParamStore({n: t.detach() for n, t in params.params.items()}, params.momentum)
    out = [embed(Tensor(images[i : i + chunk]), frozen, config).data for i in range(0, len(images), chunk)]
    return np.concatenate(out, axis=0) if out else np.zeros((0, config.embedding_dim))


def cosine_similarity(a, b) -> float:
    """Cosine of the angle between two embeddings, clamped to [-1, 1]."""
    a = np.asarray(a.data if isinstance(a, Tensor) else a, dtype=np.float64).reshape(-1)
    b = np.asarray(b.data if isinstance(b, Tensor) else b, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise DimensionError(f"embedding sizes differ: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ContractError("cosine similarity is undefined for a zero vector")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def cosine_matrix(emb: Tensor) -> Tensor:
    """All-pairs cosine similarities of the rows of a ``B x D`` tensor."""
    emb = as_tensor(emb)
    if emb.ndim != 2:
        raise DimensionError(f"cosine_matrix expects B x D, got {emb.shape}")
    x = emb.data
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ContractError("cosine similarity is undefined for a zero embedding")
    u = x / norms
    s = np.clip(u @ u.T, -1.0, 1.0)

    def back(g):
        gu = (g + g.T) @ u
        gx = (gu - u * np.sum(gu * u, axis=1, keepdims=True)) / norms
        return (gx,)

    return Tensor._from_op(s, (emb,), back, "cosine_matrix")
