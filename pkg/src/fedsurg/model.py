"""Multi-branch multi-task risk network.

Three type-specific branches (continuous, binary, high-cardinality via
embeddings) merge into a shared layer that feeds four sigmoid outcome
heads. Parameters live in an ordered dict of named float64 arrays whose
layout is a pure function of the architecture config.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad

ModelParams = dict[str, np.ndarray]


@dataclass(frozen=True)
class ArchConfig:
    n_continuous: int
    n_binary: int
    high_card_specs: tuple[tuple[int, int], ...]  # (vocab_size, embed_dim) per feature
    branch_hidden: int = 32
    merge_hidden: int = 64
    n_outcomes: int = 4

    def __post_init__(self):
        if self.n_continuous < 1 or self.n_binary < 1:
            raise ValueError("need at least one continuous and one binary feature")
        if self.branch_hidden < 1 or self.merge_hidden < 1 or self.n_outcomes < 1:
            raise ValueError("all widths must be >= 1")
        for vocab, dim in self.high_card_specs:
            if vocab < 2:
                raise ValueError("vocab size must be >= 2 (categories plus 'missing')")
            if dim < 1:
                raise ValueError("embedding dim must be >= 1")


@dataclass
class Batch:
    """Model-ready tensors for a slice of encounters."""

    continuous: np.ndarray            # B x n_continuous, values in [0, 1]
    binary: np.ndarray                # B x n_binary, values in {0, 1}
    high_card: tuple[np.ndarray, ...]  # per feature, int index column of length B
    labels: np.ndarray                # B x 4, values in {0, 1}
    surgeon: np.ndarray | None = None  # personalization feature, not a model input
    encounter_ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        n = self.continuous.shape[0]
        rows = [self.binary.shape[0], self.labels.shape[0]]
        rows += [col.shape[0] for col in self.high_card]
        if any(r != n for r in rows):
            raise ValueError("batch row counts disagree")

    def __len__(self):
        return self.continuous.shape[0]

    def take(self, idx: np.ndarray) -> "Batch":
        return Batch(
            continuous=self.continuous[idx],
            binary=self.binary[idx],
            high_card=tuple(col[idx] for col in self.high_card),
            labels=self.labels[idx],
            surgeon=None if self.surgeon is None else self.surgeon[idx],
            encounter_ids=[self.encounter_ids[i] for i in idx] if self.encounter_ids else [],
        )


# transform() produces full-dataset tensors with the same layout
FeatureMatrix = Batch

HEAD_NAMES = ("icu", "mv", "aki", "mortality")


def param_shapes(arch: ArchConfig) -> dict[str, tuple[int, ...]]:
    """Ordered layout of the parameter set, derived only from arch."""
    h, m = arch.branch_hidden, arch.merge_hidden
    shapes: dict[str, tuple[int, ...]] = {
        "cont.W": (arch.n_continuous, h),
        "cont.b": (h,),
        "bin.W": (arch.n_binary, h),
        "bin.b": (h,),
    }
    total_embed = 0
    for i, (vocab, dim) in enumerate(arch.high_card_specs):
        shapes[f"emb{i}.table"] = (vocab, dim)
        total_embed += dim
    n_branches = 2
    if arch.high_card_specs:
        shapes["embproj.W"] = (total_embed, h)
        shapes["embproj.b"] = (h,)
        n_branches = 3
    shapes["merge.W"] = (n_branches * h, m)
    shapes["merge.b"] = (m,)
    for k in range(arch.n_outcomes):
        shapes[f"head{k}.W"] = (m, 1)
        shapes[f"head{k}.b"] = (1,)
    return shapes


def arch_fingerprint(arch: ArchConfig) -> str:
    text = ";".join(f"{k}:{v}" for k, v in param_shapes(arch).items())
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def glorot_bound(shape: tuple[int, ...]) -> float:
    fan_in, fan_out = (shape[0], shape[1]) if len(shape) == 2 else (shape[0], shape[0])
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def init_params(arch: ArchConfig, seed: int) -> ModelParams:
    """Glorot-uniform weights, zero biases, deterministic in the seed."""
    rng = np.random.default_rng(seed)
    params: ModelParams = {}
    for name, shape in param_shapes(arch).items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape)
        else:
            a = glorot_bound(shape)
            params[name] = rng.uniform(-a, a, size=shape)
    return params


def flatten_params(params: ModelParams) -> np.ndarray:
    return np.concatenate([params[k].ravel() for k in params])


def unflatten_params(flat: np.ndarray, arch: ArchConfig) -> ModelParams:
    shapes = param_shapes(arch)
    expected = sum(int(np.prod(s)) for s in shapes.values())
    if flat.size != expected:
        raise ValueError(f"flat vector has {flat.size} values, layout needs {expected}")
    out: ModelParams = {}
    pos = 0
    for name, shape in shapes.items():
        size = int(np.prod(shape))
        out[name] = flat[pos:pos + size].reshape(shape).copy()
        pos += size
    return out


def _build_leaves(tape: ad.Tape, params: ModelParams, trainable: bool) -> dict[str, ad.Node]:
    return {k: tape.leaf(v, name=k, trainable=trainable) for k, v in params.items()}


def merge_activation_from_nodes(tape: ad.Tape, nodes: dict[str, ad.Node],
                                arch: ArchConfig, batch: Batch) -> ad.Node:
    """Shared representation consumed by all four heads."""
    x_cont = tape.leaf(batch.continuous)
    x_bin = tape.leaf(batch.binary)
    branches = [
        ad.relu(tape, ad.linear(tape, x_cont, nodes["cont.W"], nodes["cont.b"])),
        ad.relu(tape, ad.linear(tape, x_bin, nodes["bin.W"], nodes["bin.b"])),
    ]
    if arch.high_card_specs:
        embeds = [ad.embedding(tape, nodes[f"emb{i}.table"], batch.high_card[i])
                  for i in range(len(arch.high_card_specs))]
        stacked = embeds[0] if len(embeds) == 1 else ad.concat(tape, embeds)
        branches.append(ad.relu(tape, ad.linear(
            tape, stacked, nodes["embproj.W"], nodes["embproj.b"])))
    return ad.relu(tape, ad.linear(
        tape, ad.concat(tape, branches), nodes["merge.W"], nodes["merge.b"]))


def forward_from_nodes(tape: ad.Tape, nodes: dict[str, ad.Node], arch: ArchConfig,
                       batch: Batch) -> ad.Node:
    merged = merge_activation_from_nodes(tape, nodes, arch, batch)
    heads = [ad.sigmoid(tape, ad.linear(
        tape, merged, nodes[f"head{k}.W"], nodes[f"head{k}.b"]))
        for k in range(arch.n_outcomes)]
    return ad.concat(tape, heads)


def forward(params: ModelParams, arch: ArchConfig, batch: Batch,
            tape: ad.Tape | None = None, trainable: bool = False) -> ad.Node:
    tape = tape if tape is not None else ad.Tape()
    nodes = _build_leaves(tape, params, trainable)
    return forward_from_nodes(tape, nodes, arch, batch)


def predict(params: ModelParams, arch: ArchConfig, data: Batch,
            batch_size: int = 4096) -> np.ndarray:
    """Risk probabilities, B x n_outcomes."""
    chunks = []
    for start in range(0, len(data), batch_size):
        idx = np.arange(start, min(start + batch_size, len(data)))
        chunks.append(forward(params, arch, data.take(idx)).value)
    return np.concatenate(chunks, axis=0)


def multitask_loss(tape: ad.Tape, probs: ad.Node, labels: np.ndarray) -> ad.Node:
    # equal-weight mean over the four heads; with equal batch sizes this is
    # exactly the elementwise BCE mean over the B x 4 block
    return ad.bce_loss(tape, probs, labels)


def params_digest(params: ModelParams) -> str:
    """Content hash of a parameter set (names, shapes and exact bytes)."""
    h = hashlib.sha256()
    for name in params:
        h.update(name.encode())
        h.update(str(params[name].shape).encode())
        h.update(np.ascontiguousarray(params[name], dtype="<f8").tobytes())
    return h.hexdigest()


_CKPT_MAGIC = b"FSCK"
_CKPT_VERSION = 1


def _write_tensor(fh, name: str, arr: np.ndarray) -> None:
    raw = name.encode()
    fh.write(struct.pack("<H", len(raw)))
    fh.write(raw)
    fh.write(struct.pack("<B", arr.ndim))
    for d in arr.shape:
        fh.write(struct.pack("<I", d))
    fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_tensor(fh) -> tuple[str, np.ndarray]:
    (nlen,) = struct.unpack("<H", fh.read(2))
    name = fh.read(nlen).decode()
    (ndim,) = struct.unpack("<B", fh.read(1))
    shape = tuple(struct.unpack("<I", fh.read(4))[0] for _ in range(ndim))
    count = int(np.prod(shape)) if shape else 1
    arr = np.frombuffer(fh.read(8 * count), dtype="<f8").reshape(shape).copy()
    return name, arr


def save_checkpoint(path, params: ModelParams, arch: ArchConfig) -> None:
    """Versioned binary checkpoint: header + named little-endian f64 tensors."""
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<I", _CKPT_VERSION))
        fp = arch_fingerprint(arch).encode()
        fh.write(struct.pack("<H", len(fp)))
        fh.write(fp)
        fh.write(struct.pack("<I", len(params)))
        for name, arr in params.items():
            _write_tensor(fh, name, arr)


def load_checkpoint(path, arch: ArchConfig | None = None) -> tuple[ModelParams, str]:
    """Returns (params, arch fingerprint); validates against arch if given."""
    with open(path, "rb") as fh:
        if fh.read(4) != _CKPT_MAGIC:
            raise ValueError(f"{path} is not a model checkpoint")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != _CKPT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        (fplen,) = struct.unpack("<H", fh.read(2))
        fingerprint = fh.read(fplen).decode()
        if arch is not None and fingerprint != arch_fingerprint(arch):
            raise ValueError("checkpoint was written for a different architecture")
        (count,) = struct.unpack("<I", fh.read(4))
        params = dict(_read_tensor(fh) for _ in range(count))
    return params, fingerprint


@dataclass
class TrainStepReport:
    params: ModelParams
    n_samples: int
    steps_taken: int
    mean_loss: float


def loss_on(params: ModelParams, arch: ArchConfig, data: Batch) -> float:
    tape = ad.Tape()
    probs = forward(params, arch, data, tape=tape)
    return float(multitask_loss(tape, probs, data.labels).value)


def local_train(params: ModelParams, arch: ArchConfig, data: Batch, cfg,
                rng: np.random.Generator,
                prox: tuple[float, ModelParams] | None = None,
                grad_offset: ModelParams | None = None) -> TrainStepReport:
    """Minibatch SGD for cfg.local_epochs over the dataset.

    ``prox`` adds mu * (w - anchor) to each gradient (FedProx).
    ``grad_offset`` adds a fixed parameter-shaped correction to each
    gradient (SCAFFOLD passes c - c_i).
    """
    n = len(data)
    if n == 0:
        raise ValueError("local_train on an empty dataset")
    if prox is not None and prox[1].keys() != params.keys():
        raise ad.KeyMismatchError("prox anchor layout differs from params")
    current = dict(params)
    steps = 0
    losses = []
    for _ in range(cfg.local_epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            batch = data.take(order[start:start + cfg.batch_size])
            tape = ad.Tape()
            nodes = _build_leaves(tape, current, trainable=True)
            probs = forward_from_nodes(tape, nodes, arch, batch)
            loss = multitask_loss(tape, probs, batch.labels)
            grads = tape.gradients(loss)
            if prox is not None and prox[0] != 0.0:
                mu, anchor = prox
                grads = {k: grads[k] + mu * (current[k] - anchor[k]) for k in grads}
            if grad_offset is not None:
                grads = {k: grads[k] + grad_offset[k] for k in grads}
            current = ad.sgd_step(current, grads, cfg.lr)
            steps += 1
            losses.append(float(loss.value))
    return TrainStepReport(current, n, steps, float(np.mean(losses)))
