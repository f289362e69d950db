"""MLP feature extractor + linear head, LoRA factors, dual BN statistics, checkpoints."""
from __future__ import annotations

import copy
import enum
import io
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .tensor import Tensor, as_tensor, batchnorm_eval, batchnorm_train, relu

BN_MOMENTUM = 0.1
BN_EPS = 1e-5


class ConfigurationError(ValueError):
    """A requested mode or operation does not fit the parameters supplied."""


class FormatError(ValueError):
    """A checkpoint could not be decoded."""


@dataclass(frozen=True)
class ModelSpec:
    """Shape of the model.

    The feature extractor maps ``input_dim`` through ``hidden_dims``; its last
    width is the feature dimension fed to the ``num_classes``-way head.
    """

    input_dim: int
    hidden_dims: tuple[int, ...]
    num_classes: int
    use_batchnorm: bool = True

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.input_dim < 1:
            raise ConfigurationError(f"input_dim must be >= 1, got {self.input_dim}")
        if not self.hidden_dims or min(self.hidden_dims) < 1:
            raise ConfigurationError(f"hidden_dims must be non-empty positive, got {self.hidden_dims}")
        if self.num_classes < 2:
            raise ConfigurationError(f"num_classes must be >= 2, got {self.num_classes}")

    @property
    def feature_dim(self) -> int:
        return self.hidden_dims[-1]

    @property
    def layer_shapes(self) -> list[tuple[int, int]]:
        widths = (self.input_dim, *self.hidden_dims)
        return list(zip(widths[:-1], widths[1:]))

    @property
    def num_layers(self) -> int:
        return len(self.hidden_dims)


@dataclass(frozen=True)
class LoRaConfig:
    rank: int = 8
    init_std: float = 0.01

    def validate(self, spec: ModelSpec) -> None:
        if self.rank < 1:
            raise ConfigurationError(f"LoRA rank must be positive, got {self.rank}")
        if self.init_std <= 0:
            raise ConfigurationError(f"LoRA init_std must be positive, got {self.init_std}")
        limit = min(min(s) for s in spec.layer_shapes)
        if self.rank > limit:
            raise ConfigurationError(f"LoRA rank {self.rank} exceeds smallest layer extent {limit}")


class ForwardMode(enum.Enum):
    BASE = "base"
    LORA = "lora"
    FROZEN_BN = "frozen_bn"


def _w(i):
    return f"fe{i}.weight"


def _b(i):
    return f"fe{i}.bias"


@dataclass
class ParamSet:
    """All parameters and BN statistics of one model.

    ``theta1`` is the feature extractor, ``theta2`` the classifier head.
    Linear weights are stored as ``[in, out]`` so a layer computes ``x @ W + b``,
    and the LoRA pair for layer ``i`` is ``B: [in, r]``, ``A: [r, out]``.
    """

    spec: ModelSpec
    theta1: dict[str, np.ndarray]
    theta2: dict[str, np.ndarray]
    bn_stats: dict[str, np.ndarray] = field(default_factory=dict)
    lora: dict[str, np.ndarray] | None = None
    bn_stats_frozen: dict[str, np.ndarray] | None = None

    def copy(self) -> "ParamSet":
        return copy.deepcopy(self)

    def groups(self) -> dict[str, dict[str, np.ndarray]]:
        out = {"theta1": self.theta1, "theta2": self.theta2, "bn": self.bn_stats}
        if self.lora is not None:
            out["lora"] = self.lora
        if self.bn_stats_frozen is not None:
            out["bnfrozen"] = self.bn_stats_frozen
        return out

    def trainable(self, method: str) -> dict[str, np.ndarray]:
        """Name -> array of everything the given fine-tuning method updates."""
        out = {**self.theta1, **self.theta2}
        if method == "autolora":
            if self.lora is None:
                raise ConfigurationError("autolora needs LoRA factors; call init_lora first")
            out.update(self.lora)
        return out

    def set(self, name: str, value: np.ndarray) -> None:
        for group in (self.theta1, self.theta2, self.lora or {}):
            if name in group:
                group[name] = value
                return
        raise KeyError(name)

    def freeze_bn_stats(self) -> None:
        """Keep a private copy of the current running statistics for the frozen branch."""
        self.bn_stats_frozen = {k: v.copy() for k, v in self.bn_stats.items()}


def init_params(spec: ModelSpec, rng: np.random.Generator) -> ParamSet:
    theta1: dict[str, np.ndarray] = {}
    bn: dict[str, np.ndarray] = {}
    for i, (fan_in, fan_out) in enumerate(spec.layer_shapes):
        theta1[_w(i)] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
        theta1[_b(i)] = np.zeros(fan_out)
        if spec.use_batchnorm:
            theta1[f"fe{i}.bn_weight"] = np.ones(fan_out)
            theta1[f"fe{i}.bn_bias"] = np.zeros(fan_out)
            bn[f"fe{i}.running_mean"] = np.zeros(fan_out)
            bn[f"fe{i}.running_var"] = np.ones(fan_out)
    params = ParamSet(spec, theta1, {}, bn)
    return init_head(params, spec.num_classes, rng)


def init_head(params: ParamSet, num_classes: int, rng: np.random.Generator) -> ParamSet:
    """Return ``params`` with a freshly initialised ``num_classes``-way head."""
    spec = replace(params.spec, num_classes=num_classes)
    v = spec.feature_dim
    bound = 1.0 / np.sqrt(v)
    theta2 = {
        "head.weight": rng.uniform(-bound, bound, size=(v, num_classes)),
        "head.bias": np.zeros(num_classes),
    }
    return replace(params, spec=spec, theta2=theta2)


def init_lora(params: ParamSet, cfg: LoRaConfig, rng: np.random.Generator) -> ParamSet:
    """Attach LoRA factors: A ~ N(0, init_std), B = 0, so B @ A starts at zero."""
    cfg.validate(params.spec)
    lora = {}
    for i, (fan_in, fan_out) in enumerate(params.spec.layer_shapes):
        lora[f"fe{i}.lora_B"] = np.zeros((fan_in, cfg.rank))
        lora[f"fe{i}.lora_A"] = rng.normal(0.0, cfg.init_std, size=(cfg.rank, fan_out))
    return replace(params, lora=lora)


def forward(params: ParamSet, x, mode: ForwardMode = ForwardMode.BASE, train: bool = False,
            leaves: dict[str, Tensor] | None = None) -> Tensor:
    """Logits for a batch ``x`` of shape ``[b, input_dim]``.

    ``leaves`` maps parameter names to tracked tensors; any parameter not in it
    enters as a constant.  In ``LORA`` mode the feature-extractor tensors are
    always constants, so gradients reach only the LoRA factors and the head.
    With ``train=True`` the BASE and LORA paths normalise with batch
    statistics and fold them into ``params.bn_stats``; FROZEN_BN always
    normalises with ``params.bn_stats_frozen`` and never updates them.
    """
    spec = params.spec
    if mode is ForwardMode.LORA and params.lora is None:
        raise ConfigurationError("LoRA forward requested but the model has no LoRA factors")
    if mode is ForwardMode.FROZEN_BN and params.bn_stats_frozen is None:
        raise ConfigurationError("frozen-BN forward requested but no frozen statistics are stored")
    leaves = leaves or {}

    def get(name, source):
        leaf = leaves.get(name)
        if leaf is None:
            return Tensor(source[name])
        if mode is ForwardMode.LORA and source is params.theta1:
            return Tensor(leaf.data)
        return leaf

    h = as_tensor(x)
    if h.ndim != 2 or h.shape[1] != spec.input_dim:
        raise ConfigurationError(f"expected input of shape [b, {spec.input_dim}], got {h.shape}")
    for i in range(spec.num_layers):
        w = get(_w(i), params.theta1)
        if mode is ForwardMode.LORA:
            w = w + get(f"fe{i}.lora_B", params.lora) @ get(f"fe{i}.lora_A", params.lora)
        h = h @ w + get(_b(i), params.theta1)
        if spec.use_batchnorm:
            gamma = get(f"fe{i}.bn_weight", params.theta1)
            beta = get(f"fe{i}.bn_bias", params.theta1)
            mkey, vkey = f"fe{i}.running_mean", f"fe{i}.running_var"
            if mode is ForwardMode.FROZEN_BN:
                stats = params.bn_stats_frozen
                h = batchnorm_eval(h, gamma, beta, stats[mkey], stats[vkey], BN_EPS)
            elif train:
                h, mu, var = batchnorm_train(h, gamma, beta, BN_EPS)
                stats = params.bn_stats
                stats[mkey] = (1 - BN_MOMENTUM) * stats[mkey] + BN_MOMENTUM * mu
                stats[vkey] = (1 - BN_MOMENTUM) * stats[vkey] + BN_MOMENTUM * var
            else:
                stats = params.bn_stats
                h = batchnorm_eval(h, gamma, beta, stats[mkey], stats[vkey], BN_EPS)
        h = relu(h)
    return h @ get("head.weight", params.theta2) + get("head.bias", params.theta2)


def predict(params: ParamSet, x: np.ndarray, mode: ForwardMode = ForwardMode.BASE) -> np.ndarray:
    return forward(params, x, mode, train=False).data.argmax(axis=1)


def merge_lora(params: ParamSet) -> ParamSet:
    """Fold each ``B @ A`` into its weight and drop the LoRA factors."""
    if params.lora is None:
        raise ConfigurationError("merge_lora: no LoRA factors to merge (already merged?)")
    theta1 = dict(params.theta1)
    for i in range(params.spec.num_layers):
        theta1[_w(i)] = theta1[_w(i)] + params.lora[f"fe{i}.lora_B"] @ params.lora[f"fe{i}.lora_A"]
    out = params.copy()
    out.theta1 = {k: v.copy() for k, v in theta1.items()}
    out.lora = None
    return out


def param_ratio(spec: ModelSpec, cfg: LoRaConfig) -> float:
    """LoRA parameter count over feature-extractor weight count."""
    if cfg.rank == 0:
        return 0.0
    lora = sum(cfg.rank * (fan_in + fan_out) for fan_in, fan_out in spec.layer_shapes)
    base = sum(fan_in * fan_out for fan_in, fan_out in spec.layer_shapes)
    return lora / base


def count_params(arrays: dict[str, np.ndarray]) -> int:
    return int(sum(a.size for a in arrays.values()))


# --- checkpoint format -------------------------------------------------------
#
# b"ALRA" | u32 version | u32 record count | records...
# record: u16 name length | name (utf-8) | u8 dtype tag | u8 rank | u64 dims... | payload
# Everything little-endian; payloads are float64 ("f") or int64 ("i").

MAGIC = b"ALRA"
FORMAT_VERSION = 1
_DTYPES = {b"f": np.dtype("<f8"), b"i": np.dtype("<i8")}


def _spec_record(spec: ModelSpec) -> np.ndarray:
    return np.array([spec.input_dim, spec.num_classes, int(spec.use_batchnorm), *spec.hidden_dims],
                    dtype=np.int64)


def save_checkpoint(params: ParamSet) -> bytes:
    records = [("meta/spec", _spec_record(params.spec))]
    for group, arrays in params.groups().items():
        records.extend((f"{group}/{name}", arr) for name, arr in arrays.items())
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", FORMAT_VERSION, len(records)))
    for name, arr in records:
        arr = np.asarray(arr)
        tag = b"i" if arr.dtype.kind in "iu" else b"f"
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(tag)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes())
    return buf.getvalue()


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.blob):
            raise FormatError(f"checkpoint truncated while reading {what}")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load_checkpoint(blob: bytes) -> ParamSet:
    r = _Reader(bytes(blob))
    if r.take(4, "magic") != MAGIC:
        raise FormatError("not an ALRA checkpoint (bad magic)")
    version, count = r.unpack("<II", "header")
    if version != FORMAT_VERSION:
        raise FormatError(f"field 'version': expected {FORMAT_VERSION}, found {version}")
    records: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H", "record name length")
        name = r.take(nlen, "record name").decode("utf-8")
        tag = r.take(1, f"dtype of {name!r}")
        if tag not in _DTYPES:
            raise FormatError(f"field {name!r}: unknown dtype tag {tag!r}")
        (rank,) = r.unpack("<B", f"rank of {name!r}")
        dims = r.unpack(f"<{rank}Q", f"dims of {name!r}")
        dtype = _DTYPES[tag]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
        payload = r.take(nbytes, f"payload of {name!r}")
        records[name] = np.frombuffer(payload, dtype=dtype).reshape(dims).astype(dtype.type)
    if r.pos != len(r.blob):
        raise FormatError(f"{len(r.blob) - r.pos} trailing bytes after last record")

    meta = records.pop("meta/spec", None)
    if meta is None:
        raise FormatError("field 'meta/spec' missing")
    spec = ModelSpec(int(meta[0]), tuple(int(h) for h in meta[3:]), int(meta[1]), bool(meta[2]))
    groups: dict[str, dict[str, np.ndarray]] = {}
    for key, arr in records.items():
        group, _, name = key.partition("/")
        groups.setdefault(group, {})[name] = arr.astype(np.float64)
    params = ParamSet(spec, groups.get("theta1", {}), groups.get("theta2", {}),
                      groups.get("bn", {}), groups.get("lora"), groups.get("bnfrozen"))
    _check_shapes(params)
    return params


def _check_shapes(params: ParamSet) -> None:
    spec = params.spec
    expected: dict[str, tuple[str, tuple[int, ...]]] = {}
    for i, (fan_in, fan_out) in enumerate(spec.layer_shapes):
        expected[_w(i)] = ("theta1", (fan_in, fan_out))
        expected[_b(i)] = ("theta1", (fan_out,))
        if spec.use_batchnorm:
            expected[f"fe{i}.bn_weight"] = ("theta1", (fan_out,))
            expected[f"fe{i}.bn_bias"] = ("theta1", (fan_out,))
            expected[f"fe{i}.running_mean"] = ("bn", (fan_out,))
            expected[f"fe{i}.running_var"] = ("bn", (fan_out,))
    expected["head.weight"] = ("theta2", (spec.feature_dim, spec.num_classes))
    expected["head.bias"] = ("theta2", (spec.num_classes,))
    groups = params.groups()
    for name, (group, shape) in expected.items():
        arr = groups[group].get(name)
        if arr is None:
            raise FormatError(f"field '{group}/{name}' missing")
        if arr.shape != shape:
            raise FormatError(f"field '{group}/{name}': shape {arr.shape}, expected {shape}")
    if params.bn_stats_frozen is not None:
        for name, arr in params.bn_stats_frozen.items():
            if name not in params.bn_stats or arr.shape != params.bn_stats[name].shape:
                raise FormatError(f"field 'bnfrozen/{name}' does not match live statistics")
    if params.lora is not None:
        for i, (fan_in, fan_out) in enumerate(spec.layer_shapes):
            b = params.lora.get(f"fe{i}.lora_B")
            a = params.lora.get(f"fe{i}.lora_A")
            if b is None or a is None:
                raise FormatError(f"field 'lora/fe{i}' missing a factor")
            if b.shape[0] != fan_in or a.shape[1] != fan_out or b.shape[1] != a.shape[0]:
                raise FormatError(f"field 'lora/fe{i}': B{b.shape} @ A{a.shape} != {(fan_in, fan_out)}")
