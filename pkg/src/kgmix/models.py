"""Bilinear link-prediction models over a shared entity embedding table.

Every encoder maps a (subject, relation) query batch to states H with one
row per query; scores for all candidate objects are then the single matrix
product H @ E^T, which is what caps the score matrix at rank d.  Encoders:

  distmult   h = e_s * w_r           (elementwise; symmetric scorer)
  rescal     h = e_s @ W_r           (full d x d matrix per relation)
  mlp        h = two leaky-relu affine layers on [e_s ; w_r]

Checkpoints are a single JSON header line followed by the raw little-endian
float64 array bytes in header order, so round-trips are bit-exact.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import mos as mos_mod
from .autodiff import Node, Parameter, Tape, xavier_uniform

ENCODERS = ("distmult", "rescal", "mlp")

CHECKPOINT_MAGIC = "kgmix-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class ModelParams:
    """Encoder weights plus the entity table they score against."""

    encoder: str
    n_entities: int
    n_relations: int
    dim: int
    seed: int
    entities: Parameter
    relations: Parameter
    mlp_w1: Parameter | None = None
    mlp_b1: Parameter | None = None
    mlp_w2: Parameter | None = None
    mlp_b2: Parameter | None = None

    def parameters(self) -> list[Parameter]:
        out = [self.entities, self.relations]
        if self.encoder == "mlp":
            out += [self.mlp_w1, self.mlp_b1, self.mlp_w2, self.mlp_b2]
        return out

    def param_count(self) -> int:
        return sum(p.value.size for p in self.parameters())


def init_model(
    encoder: str,
    n_entities: int,
    n_relations: int,
    dim: int,
    seed: int = 0,
    rng: np.random.Generator | None = None,
) -> ModelParams:
    """Xavier-uniform init; sampling order is fixed so seeds reproduce."""
    if encoder not in ENCODERS:
        raise ValueError(f"unknown encoder {encoder!r}, pick one of {ENCODERS}")
    if min(n_entities, n_relations, dim) < 1:
        raise ValueError("n_entities, n_relations and dim must be positive")
    if rng is None:
        rng = np.random.default_rng(seed)
    entities = Parameter("entities", xavier_uniform(rng, (n_entities, dim)))
    if encoder == "rescal":
        # one d x d matrix per relation, each drawn at the d x d fan bound
        mats = np.stack([xavier_uniform(rng, (dim, dim)) for _ in range(n_relations)])
        relations = Parameter("relations", mats.reshape(n_relations, dim * dim))
    else:
        relations = Parameter("relations", xavier_uniform(rng, (n_relations, dim)))
    model = ModelParams(
        encoder=encoder,
        n_entities=n_entities,
        n_relations=n_relations,
        dim=dim,
        seed=seed,
        entities=entities,
        relations=relations,
    )
    if encoder == "mlp":
        model.mlp_w1 = Parameter("mlp_w1", xavier_uniform(rng, (dim, 2 * dim)))
        model.mlp_b1 = Parameter("mlp_b1", np.zeros((1, dim)))
        model.mlp_w2 = Parameter("mlp_w2", xavier_uniform(rng, (dim, dim)))
        model.mlp_b2 = Parameter("mlp_b2", np.zeros((1, dim)))
    return model


def _validate_ids(ids, upper: int, what: str) -> np.ndarray:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1 or ids.size == 0:
        raise ValueError(f"{what} ids must be a non-empty 1-D array")
    if ids.min() < 0 or ids.max() >= upper:
        raise ValueError(f"{what} id out of range [0, {upper})")
    return ids


def encode(
    model: ModelParams,
    subjects,
    relations,
    tape: Tape,
    training: bool = False,
    dropout: float = 0.0,
    rng: np.random.Generator | None = None,
    slope: float = 0.01,
) -> Node:
    """Map a query batch to states H (batch, dim) on the given tape.

    When training with dropout > 0, an inverted-scaling mask drawn from rng
    is applied to H, so the same dropped H feeds whatever output layer is
    stacked on top.
    """
    subjects = _validate_ids(subjects, model.n_entities, "subject")
    relations = _validate_ids(relations, model.n_relations, "relation")
    if subjects.shape != relations.shape:
        raise ValueError("subjects and relations must align")
    e_node = tape.param(model.entities)
    r_node = tape.param(model.relations)
    subj = tape.gather_rows(e_node, subjects)
    rel = tape.gather_rows(r_node, relations)
    if model.encoder == "distmult":
        h = tape.hadamard(subj, rel)
    elif model.encoder == "rescal":
        h = tape.batch_matvec(subj, rel)
    else:
        x = tape.concat_cols(subj, rel)
        h1 = tape.leaky_relu(
            tape.affine(x, tape.param(model.mlp_w1), tape.param(model.mlp_b1)), slope
        )
        h = tape.leaky_relu(
            tape.affine(h1, tape.param(model.mlp_w2), tape.param(model.mlp_b2)), slope
        )
    if training and dropout > 0.0:
        if rng is None:
            raise ValueError("training dropout needs an rng")
        mask = (rng.random(h.value.shape) >= dropout) / (1.0 - dropout)
        h = tape.dropout(h, mask)
    return h


def score_all(model: ModelParams, h: Node, tape: Tape) -> Node:
    """Scores for every entity: Z = H @ E^T, rank at most dim."""
    return tape.matmul(h, tape.param(model.entities), transpose_b=True)


class Scorer:
    """Inference-mode scoring over all entities for evaluation.

    scores() returns what rankings should sort on (raw bilinear scores for
    the plain layer, mixture log-probabilities otherwise); log_probs()
    always returns normalized log-probabilities.
    """

    def __init__(self, model: ModelParams, mos=None, slope: float = 0.01):
        self.model = model
        self.mos = mos
        self.slope = slope

    def _forward(self, subjects, relations, want_log: bool) -> np.ndarray:
        tape = Tape()
        h = encode(self.model, subjects, relations, tape, training=False,
                   slope=self.slope)
        if self.mos is not None:
            e_node = tape.param(self.model.entities)
            return mos_mod.mixture_log_prob(
                self.mos, h, e_node, tape, training=False, slope=self.slope
            ).value
        z = score_all(self.model, h, tape)
        if want_log:
            return tape.row_log_softmax(z).value
        return z.value

    def scores(self, subjects, relations) -> np.ndarray:
        return self._forward(subjects, relations, want_log=False)

    def log_probs(self, subjects, relations) -> np.ndarray:
        return self._forward(subjects, relations, want_log=True)

    def log_probs_from_states(self, states) -> np.ndarray:
        """Log-probabilities for raw query states H, bypassing the encoder."""
        tape = Tape()
        h = tape.constant(states)
        e_node = tape.param(self.model.entities)
        if self.mos is not None:
            return mos_mod.mixture_log_prob(
                self.mos, h, e_node, tape, training=False, slope=self.slope
            ).value
        return tape.row_log_softmax(tape.matmul(h, e_node, transpose_b=True)).value


# ---- checkpoint io ----


def _checkpoint_arrays(model: ModelParams, mos) -> list[tuple[str, np.ndarray]]:
    arrays = [(p.name, p.value) for p in model.parameters()]
    if mos is not None:
        arrays.append((mos.omegas.name, mos.omegas.value))
        for i, c in enumerate(mos.components):
            for p in c.parameters():
                arrays.append((p.name, p.value))
            arrays.append((f"mos.c{i}.bn1.running_mean", c.bn1.running_mean))
            arrays.append((f"mos.c{i}.bn1.running_var", c.bn1.running_var))
            arrays.append((f"mos.c{i}.bn2.running_mean", c.bn2.running_mean))
            arrays.append((f"mos.c{i}.bn2.running_var", c.bn2.running_var))
    return arrays


def save_checkpoint(path: str, model: ModelParams, mos=None, extra: dict | None = None):
    """One JSON header line, then raw '<f8' bytes per array in header order."""
    arrays = _checkpoint_arrays(model, mos)
    header = {
        "format": CHECKPOINT_MAGIC,
        "version": CHECKPOINT_VERSION,
        "encoder": model.encoder,
        "n_entities": model.n_entities,
        "n_relations": model.n_relations,
        "dim": model.dim,
        "seed": model.seed,
        "output_layer": "softmax" if mos is None else "mos",
        "k": None if mos is None else mos.k,
        "arrays": [{"name": n, "shape": list(a.shape)} for n, a in arrays],
        "extra": extra or {},
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        for _, a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_checkpoint(path: str):
    """Rebuild (model, mos, extra) exactly as saved; bit-exact values."""
    with open(path, "rb") as fh:
        header_line = fh.readline()
        try:
            header = json.loads(header_line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise ValueError(f"{path}: not a checkpoint ({e})") from e
        if header.get("format") != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: bad checkpoint magic")
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported version {header.get('version')}")
        blob = fh.read()
    values: dict[str, np.ndarray] = {}
    offset = 0
    for spec in header["arrays"]:
        shape = tuple(spec["shape"])
        n = int(np.prod(shape)) if shape else 1
        nbytes = n * 8
        if offset + nbytes > len(blob):
            raise ValueError(f"{path}: truncated checkpoint")
        values[spec["name"]] = (
            np.frombuffer(blob, dtype="<f8", count=n, offset=offset)
            .reshape(shape)
            .copy()
        )
        offset += nbytes
    if offset != len(blob):
        raise ValueError(f"{path}: trailing bytes in checkpoint")

    model = init_model(
        header["encoder"],
        header["n_entities"],
        header["n_relations"],
        header["dim"],
        seed=header["seed"],
    )
    for p in model.parameters():
        p.value[...] = values[p.name]
    mos = None
    if header["output_layer"] == "mos":
        mos = mos_mod.init_mos(header["k"], header["dim"], np.random.default_rng(0))
        for p in mos.parameters():
            p.value[...] = values[p.name]
        for i, c in enumerate(mos.components):
            c.bn1.running_mean[...] = values[f"mos.c{i}.bn1.running_mean"]
            c.bn1.running_var[...] = values[f"mos.c{i}.bn1.running_var"]
            c.bn2.running_mean[...] = values[f"mos.c{i}.bn2.running_mean"]
            c.bn2.running_var[...] = values[f"mos.c{i}.bn2.running_var"]
    return model, mos, header["extra"]
