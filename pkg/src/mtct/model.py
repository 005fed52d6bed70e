"""Multi-task network: shared NIN conv trunk + one FC branch per attribute.

Also builds the three-stream assembly used in the second training stage,
where two weight-shared source slots and one target network consume
(target, positive-source, negative-source) triplets, with everything frozen
except the target's fifth conv block and the FC layers of both networks.
"""

from __future__ import annotations

import copy
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import engine as en
from .engine import Tensor
from .errors import ContractError, DimensionError

CHECKPOINT_MAGIC = b"MTCTCKPT1\n"


@dataclass(frozen=True)
class AttributeSchema:
    """Ordered attribute categories with their value cardinalities."""

    attributes: tuple[tuple[str, int], ...]

    def __post_init__(self):
        if not self.attributes:
            raise ContractError("schema must declare at least one attribute")
        names = [n for n, _ in self.attributes]
        if len(set(names)) != len(names):
            raise ContractError(f"duplicate attribute names: {names}")
        for n, card in self.attributes:
            if card < 2:
                raise ContractError(f"attribute '{n}' needs cardinality >= 2, got {card}")

    @property
    def n_attr(self) -> int:
        return len(self.attributes)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(n for n, _ in self.attributes)

    @property
    def cardinalities(self) -> tuple[int, ...]:
        return tuple(c for _, c in self.attributes)


@dataclass(frozen=True)
class TrunkConfig:
    """Five NIN blocks: spatial conv + two 1x1 convs, each followed by relu."""

    channels: tuple[int, int, int, int, int] = (8, 16, 32, 32, 32)
    in_channels: int = 3
    input_hw: int = 32
    kernel: int = 3
    pool_after: tuple[int, ...] = (1, 2, 4)  # 2x2/stride-2 max pool after these blocks

    def __post_init__(self):
        if len(self.channels) != 5:
            raise ContractError(f"trunk requires exactly five blocks, got {len(self.channels)}")
        if any(b not in range(1, 6) for b in self.pool_after):
            raise ContractError(f"pool_after blocks out of range: {self.pool_after}")

    def block_output_hw(self, block: int) -> int:
        hw = self.input_hw
        for b in range(1, block + 1):
            if b in self.pool_after:
                hw //= 2
        return hw

    @property
    def feature_len(self) -> int:
        """Length of the flattened block-5 activation (the transfer feature)."""
        hw = self.block_output_hw(5)
        return self.channels[4] * hw * hw


class MTNModel:
    """Trunk + per-attribute branch parameters with a freeze mask."""

    def __init__(self, schema: AttributeSchema, trunk: TrunkConfig,
                 branch_hidden: tuple[int, int], params: dict[str, Tensor],
                 frozen: set[str] | None = None):
        self.schema = schema
        self.trunk = trunk
        self.branch_hidden = branch_hidden
        self.params = params
        self.frozen = set(frozen or ())
        self._sync_requires_grad()

    def _sync_requires_grad(self):
        for name, t in self.params.items():
            t.requires_grad = name not in self.frozen

    # -- parameter bookkeeping ------------------------------------------------

    def trainable_names(self) -> list[str]:
        return [n for n in self.params if n not in self.frozen]

    def count_parameters(self) -> int:
        return sum(t.size for t in self.params.values())

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def clone(self) -> "MTNModel":
        params = {n: Tensor(t.data.copy(), requires_grad=t.requires_grad)
                  for n, t in self.params.items()}
        return MTNModel(self.schema, self.trunk, self.branch_hidden, params,
                        frozen=set(self.frozen))

    # -- forward ---------------------------------------------------------------

    def forward(self, batch: Tensor) -> tuple[Tensor, list[Tensor]]:
        return forward_mtn(self, batch)

    def forward_trunk(self, batch: Tensor) -> Tensor:
        cfg = self.trunk
        if batch.data.ndim != 4 or batch.shape[1:] != (cfg.in_channels, cfg.input_hw, cfg.input_hw):
            raise DimensionError(
                f"trunk expects (N,{cfg.in_channels},{cfg.input_hw},{cfg.input_hw}), got {batch.shape}")
        x = batch
        p = self.params
        pad = cfg.kernel // 2
        for b in range(1, 6):
            x = en.relu(en.add(en.conv2d(x, p[f"trunk.conv{b}.spatial.w"], stride=1, pad=pad),
                               p[f"trunk.conv{b}.spatial.b"]))
            x = en.relu(en.add(en.conv2d(x, p[f"trunk.conv{b}.mid.w"]), p[f"trunk.conv{b}.mid.b"]))
            x = en.relu(en.add(en.conv2d(x, p[f"trunk.conv{b}.out.w"]), p[f"trunk.conv{b}.out.b"]))
            if b in cfg.pool_after:
                x = en.maxpool2d(x, 2, 2)
        return en.flatten(x)

    def forward_branches(self, features: Tensor) -> list[Tensor]:
        p = self.params
        logits = []
        for name, _ in self.schema.attributes:
            h = en.relu(en.add(en.matmul(features, p[f"branch.{name}.fc1.w"]),
                               p[f"branch.{name}.fc1.b"]))
            h = en.relu(en.add(en.matmul(h, p[f"branch.{name}.fc2.w"]),
                               p[f"branch.{name}.fc2.b"]))
            logits.append(en.add(en.matmul(h, p[f"branch.{name}.fc3.w"]),
                                 p[f"branch.{name}.fc3.b"]))
        return logits


def build_mtn(schema: AttributeSchema, trunk: TrunkConfig | None = None,
              branch_hidden: tuple[int, int] = (64, 64), init_seed: int = 0) -> MTNModel:
    """Initialize trunk and branches with fan-in-scaled normal weights."""
    trunk = trunk or TrunkConfig()
    w1, w2 = branch_hidden
    if w1 <= 0 or w2 <= 0:
        raise ContractError(f"branch hidden widths must be positive, got {branch_hidden}")
    rng = np.random.default_rng(init_seed)
    params: dict[str, Tensor] = {}

    def conv_param(name, c_out, c_in, k):
        # fan-in scaled normal with relu gain sqrt(2)
        fan_in = c_in * k * k
        params[f"{name}.w"] = Tensor(
            rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(c_out, c_in, k, k)), requires_grad=True)
        params[f"{name}.b"] = Tensor(np.zeros(c_out), requires_grad=True)

    def fc_param(name, d_in, d_out):
        params[f"{name}.w"] = Tensor(
            rng.normal(0.0, np.sqrt(2.0 / d_in), size=(d_in, d_out)), requires_grad=True)
        params[f"{name}.b"] = Tensor(np.zeros(d_out), requires_grad=True)

    c_prev = trunk.in_channels
    for b, c in enumerate(trunk.channels, start=1):
        conv_param(f"trunk.conv{b}.spatial", c, c_prev, trunk.kernel)
        conv_param(f"trunk.conv{b}.mid", c, c, 1)
        conv_param(f"trunk.conv{b}.out", c, c, 1)
        c_prev = c

    feat = trunk.feature_len
    for name, card in schema.attributes:
        fc_param(f"branch.{name}.fc1", feat, w1)
        fc_param(f"branch.{name}.fc2", w1, w2)
        fc_param(f"branch.{name}.fc3", w2, card)

    return MTNModel(schema, trunk, branch_hidden, params)


def forward_mtn(model: MTNModel, batch: Tensor) -> tuple[Tensor, list[Tensor]]:
    """Run the full network: returns (flattened conv5 features, per-attribute logits)."""
    feats = model.forward_trunk(batch)
    return feats, model.forward_branches(feats)


def clone_to_target(source: MTNModel) -> MTNModel:
    """Deep-copy the source network; the copies evolve independently."""
    return source.clone()


def apply_freeze(model: MTNModel, mask: dict[str, bool]) -> None:
    """Install a freeze mask (True = frozen). Must cover every parameter."""
    unknown = set(mask) - set(model.params)
    if unknown:
        raise ContractError(f"freeze mask names unknown tensors: {sorted(unknown)}")
    missing = set(model.params) - set(mask)
    if missing:
        raise ContractError(f"freeze mask does not cover: {sorted(missing)}")
    model.frozen = {n for n, f in mask.items() if f}
    model._sync_requires_grad()


def _full_mask(model: MTNModel, frozen_pred) -> dict[str, bool]:
    return {n: bool(frozen_pred(n)) for n in model.params}


@dataclass
class ThreeStreamModel:
    """Stage-2 assembly: one target network, one source network shared by the
    positive and negative input slots."""

    source: MTNModel
    target: MTNModel
    trainable: set[str] = field(default_factory=set)

    @property
    def positive_slot(self) -> MTNModel:
        return self.source

    @property
    def negative_slot(self) -> MTNModel:
        return self.source


def build_3mtn(source: MTNModel, target: MTNModel) -> ThreeStreamModel:
    """Assemble the three-stream model and install the stage-2 freeze plan."""
    if source.schema != target.schema or source.trunk != target.trunk:
        raise ContractError("source and target must share schema and trunk config")

    def target_trainable(name):
        return name.startswith("trunk.conv5.") or name.startswith("branch.")

    def source_trainable(name):
        return name.startswith("branch.")

    apply_freeze(target, _full_mask(target, lambda n: not target_trainable(n)))
    apply_freeze(source, _full_mask(source, lambda n: not source_trainable(n)))
    trainable = ({f"target.{n}" for n in target.trainable_names()}
                 | {f"source.{n}" for n in source.trainable_names()})
    return ThreeStreamModel(source=source, target=target, trainable=trainable)


# ---------------------------------------------------------------------------
# checkpoint container: JSON header + raw little-endian float64 blob
# ---------------------------------------------------------------------------

def save_checkpoint(path, model: MTNModel, stage: str = "") -> None:
    header = {
        "schema": list(model.schema.attributes),
        "trunk": {
            "channels": list(model.trunk.channels),
            "in_channels": model.trunk.in_channels,
            "input_hw": model.trunk.input_hw,
            "kernel": model.trunk.kernel,
            "pool_after": list(model.trunk.pool_after),
        },
        "branch_hidden": list(model.branch_hidden),
        "stage": stage,
        "frozen": sorted(model.frozen),
        "tensors": [{"name": n, "shape": list(t.shape)} for n, t in model.params.items()],
    }
    hjson = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<Q", len(hjson)))
        f.write(hjson)
        for t in model.params.values():
            f.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[MTNModel, str]:
    with open(path, "rb") as f:
        magic = f.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ContractError(f"not a checkpoint file: {path}")
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen).decode("utf-8"))
        schema = AttributeSchema(tuple((n, int(c)) for n, c in header["schema"]))
        tc = header["trunk"]
        trunk = TrunkConfig(channels=tuple(tc["channels"]), in_channels=tc["in_channels"],
                            input_hw=tc["input_hw"], kernel=tc["kernel"],
                            pool_after=tuple(tc["pool_after"]))
        params: dict[str, Tensor] = {}
        for entry in header["tensors"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = f.read(count * 8)
            params[entry["name"]] = Tensor(
                np.frombuffer(buf, dtype="<f8").reshape(shape).copy())
    model = MTNModel(schema, trunk, tuple(header["branch_hidden"]), params,
                     frozen=set(header["frozen"]))
    return model, header["stage"]
