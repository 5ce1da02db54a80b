"""Multi-exit MLP: m stacked ReLU blocks, one affine exit head per block."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from .tensor_nn import (
    ParamSet,
    Tensor,
    add_all,
    affine_forward,
    backward,
    cross_entropy,
    relu,
    scale,
    softmax,
)

CKPT_VERSION = "feexd-ckpt-1"


@dataclass(frozen=True)
class ArchSpec:
    input_dim: int
    hidden_dims: tuple[int, ...]
    num_classes: int

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if len(self.hidden_dims) < 2:
            raise ValueError("an early-exit network needs at least 2 blocks")
        if self.input_dim <= 0 or self.num_classes <= 0 or min(self.hidden_dims) <= 0:
            raise ValueError("all dimensions must be positive")

    @property
    def m(self) -> int:
        return len(self.hidden_dims)

    def block_shape(self, j: int) -> tuple[int, int]:
        d_in = self.input_dim if j == 1 else self.hidden_dims[j - 2]
        return d_in, self.hidden_dims[j - 1]

    def exit_shape(self, j: int) -> tuple[int, int]:
        return self.hidden_dims[j - 1], self.num_classes

    def to_dict(self) -> dict:
        return {"input_dim": self.input_dim, "hidden_dims": list(self.hidden_dims),
                "num_classes": self.num_classes}


def block_names(j: int) -> tuple[str, str]:
    return f"block{j}.W", f"block{j}.b"


def exit_names(j: int) -> tuple[str, str]:
    return f"exit{j}.W", f"exit{j}.b"


@dataclass
class EENParams:
    """Parameters of one multi-exit model.

    Values in ``params`` are float64 arrays; inside :func:`value_and_grad` they
    are temporarily replaced by leaf :class:`Tensor` objects.
    """

    arch: ArchSpec
    params: ParamSet

    @property
    def m(self) -> int:
        return self.arch.m

    def backbone_names(self) -> list[str]:
        return [n for j in range(1, self.m + 1) for n in block_names(j)]

    def backbone(self) -> ParamSet:
        return self.params.subset(self.backbone_names())

    def exit(self, j: int) -> ParamSet:
        _check_exit(self.arch, j)
        w, b = exit_names(j)
        return ParamSet(W=self.params[w], b=self.params[b])

    def set_backbone(self, backbone: ParamSet) -> None:
        for name in self.backbone_names():
            self.params[name] = np.array(backbone[name], dtype=np.float64, copy=True)

    def set_exit(self, j: int, head: ParamSet) -> None:
        _check_exit(self.arch, j)
        w, b = exit_names(j)
        if np.shape(head["W"]) != self.arch.exit_shape(j):
            raise ValueError(f"exit head shape {np.shape(head['W'])} does not fit exit {j}")
        self.params[w] = np.array(head["W"], dtype=np.float64, copy=True)
        self.params[b] = np.array(head["b"], dtype=np.float64, copy=True)

    def copy(self) -> "EENParams":
        return EENParams(self.arch, self.params.copy())


def _check_exit(arch: ArchSpec, j: int) -> None:
    if not 1 <= j <= arch.m:
        raise ValueError(f"exit index {j} outside 1..{arch.m}")


def init_model(arch: ArchSpec, seed: int) -> EENParams:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    params = ParamSet()
    for j in range(1, arch.m + 1):
        for names, (fan_in, fan_out) in ((block_names(j), arch.block_shape(j)),
                                         (exit_names(j), arch.exit_shape(j))):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            params[names[0]] = rng.uniform(-limit, limit, size=(fan_in, fan_out))
            params[names[1]] = np.zeros(fan_out)
    # keep canonical order: all blocks, then all exits
    order = [n for j in range(1, arch.m + 1) for n in block_names(j)]
    order += [n for j in range(1, arch.m + 1) for n in exit_names(j)]
    return EENParams(arch, ParamSet((n, params[n]) for n in order))


# ---------------------------------------------------------------- forward


def features(model: EENParams, x, depth: int) -> list[Tensor]:
    """Hidden states of blocks 1..depth (blocks past ``depth`` are not run)."""
    h = x if isinstance(x, Tensor) else Tensor(x)
    out = []
    for j in range(1, depth + 1):
        w, b = block_names(j)
        h = relu(affine_forward(h, model.params[w], model.params[b]))
        out.append(h)
    return out


def exit_probs(model: EENParams, x, exits: Iterable[int]) -> dict[int, Tensor]:
    exits = sorted(set(exits))
    for j in exits:
        _check_exit(model.arch, j)
    hidden = features(model, x, exits[-1])
    out = {}
    for j in exits:
        w, b = exit_names(j)
        out[j] = softmax(affine_forward(hidden[j - 1], model.params[w], model.params[b]))
    return out


def forward_to_exit(model: EENParams, x, j: int) -> np.ndarray:
    return exit_probs(model, x, [j])[j].data


def forward_all_exits(model: EENParams, x) -> list[np.ndarray]:
    probs = exit_probs(model, x, range(1, model.m + 1))
    return [probs[j].data for j in range(1, model.m + 1)]


# ---------------------------------------------------------------- losses


def exit_weights(m: int, S: Iterable[int], renormalize: bool = True) -> np.ndarray:
    """Per-exit loss weights (index j-1 for exit j); zero outside ``S``."""
    S = set(S)
    if not S:
        raise ValueError("exit set is empty")
    w = np.zeros(m)
    for j in S:
        w[j - 1] = 1.0 / len(S) if renormalize else 1.0 / m
    return w


def joint_loss(model: EENParams, x, labels, S: Iterable[int], w) -> Tensor:
    S = sorted(set(S))
    if not S:
        raise ValueError("exit set is empty")
    probs = exit_probs(model, x, S)
    w = np.asarray(w, dtype=np.float64)
    return add_all([scale(cross_entropy(probs[j], labels), w[j - 1]) for j in S])


def value_and_grad(loss_fn: Callable[[EENParams], Tensor], model: EENParams) -> tuple[float, ParamSet]:
    leaves = ParamSet((k, Tensor(v, requires_grad=True)) for k, v in model.params.items())
    loss = loss_fn(EENParams(model.arch, leaves))
    return loss.item(), backward(loss, leaves)


# ---------------------------------------------------------------- flattening


def flatten_exit(model: EENParams, j: int) -> np.ndarray:
    head = model.exit(j)
    return np.concatenate([np.asarray(head["W"]).ravel(), np.asarray(head["b"]).ravel()])


def unflatten_exit(vec, arch: ArchSpec, j: int) -> ParamSet:
    d_in, d_out = arch.exit_shape(j)
    vec = np.asarray(vec, dtype=np.float64)
    if vec.size != d_in * d_out + d_out:
        raise ValueError(f"vector of length {vec.size} does not fit exit {j}")
    return ParamSet(W=vec[: d_in * d_out].reshape(d_in, d_out).copy(), b=vec[d_in * d_out:].copy())


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(model: EENParams, path: str | Path, extra: dict | None = None) -> Path:
    """Write ``<path>.json`` (manifest) and ``<path>.bin`` (little-endian f64 blob)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest = {
        "version": CKPT_VERSION,
        "arch": model.arch.to_dict(),
        "tensors": [{"name": k, "shape": list(np.shape(v))} for k, v in model.params.items()],
        "blob": path.name + ".bin",
    }
    if extra:
        manifest["extra"] = extra
    blob = model.params.flat().astype("<f8").tobytes()
    path.with_name(path.name + ".bin").write_bytes(blob)
    manifest_path = path.with_name(path.name + ".json")
    manifest_path.write_text(json.dumps(manifest, indent=2))
    return manifest_path


def load_checkpoint(path: str | Path) -> EENParams:
    path = Path(path)
    if path.suffix == ".json":
        path = path.with_suffix("")
    manifest = json.loads(path.with_name(path.name + ".json").read_text())
    if manifest.get("version") != CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {manifest.get('version')!r}")
    arch = ArchSpec(**manifest["arch"])
    flat = np.frombuffer(path.with_name(manifest["blob"]).read_bytes(), dtype="<f8")
    params = ParamSet()
    offset = 0
    for entry in manifest["tensors"]:
        size = int(np.prod(entry["shape"]))
        params[entry["name"]] = flat[offset: offset + size].reshape(entry["shape"]).astype(np.float64)
        offset += size
    if offset != flat.size:
        raise ValueError("checkpoint blob length does not match manifest")
    return EENParams(arch, params)
