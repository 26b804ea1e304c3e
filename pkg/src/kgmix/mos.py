"""Output layers mapping query states H to distributions over entities.

plain_log_prob is a single softmax over H @ E^T, whose log-probability
matrix can never exceed rank d+1.  mixture_log_prob blends K softmaxes,
each over a separately projected copy of H, with query-dependent priors;
for K >= 2 the blend is no longer log-linear in H and escapes that rank
ceiling.  All mixing happens in log space through logsumexp.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import BatchNormState, Node, Parameter, Tape, xavier_uniform


@dataclass
class MosComponent:
    """One mixture component: two (affine -> batch-norm -> leaky-relu ->
    dropout) blocks of width dim, applied to H before its softmax."""

    w1: Parameter
    b1: Parameter
    gamma1: Parameter
    beta1: Parameter
    bn1: BatchNormState
    w2: Parameter
    b2: Parameter
    gamma2: Parameter
    beta2: Parameter
    bn2: BatchNormState

    def parameters(self) -> list[Parameter]:
        return [
            self.w1, self.b1, self.gamma1, self.beta1,
            self.w2, self.b2, self.gamma2, self.beta2,
        ]


@dataclass
class MosParams:
    """K projection components plus the prior weight vectors."""

    k: int
    dim: int
    omegas: Parameter  # (k, dim); priors are softmax(H @ omegas^T)
    components: list[MosComponent]

    def parameters(self) -> list[Parameter]:
        out = [self.omegas]
        for c in self.components:
            out.extend(c.parameters())
        return out

    def param_count(self) -> int:
        return sum(p.value.size for p in self.parameters())


def init_mos(k: int, dim: int, rng: np.random.Generator) -> MosParams:
    """Sample mixture parameters in a fixed order from the given stream."""
    if k < 1:
        raise ValueError("mixture needs k >= 1")
    if dim < 1:
        raise ValueError("dim must be positive")
    omegas = Parameter("mos.omegas", xavier_uniform(rng, (k, dim)))
    components = []
    for i in range(k):
        name = f"mos.c{i}"
        components.append(
            MosComponent(
                w1=Parameter(f"{name}.w1", xavier_uniform(rng, (dim, dim))),
                b1=Parameter(f"{name}.b1", np.zeros((1, dim))),
                gamma1=Parameter(f"{name}.gamma1", np.ones((1, dim))),
                beta1=Parameter(f"{name}.beta1", np.zeros((1, dim))),
                bn1=BatchNormState(dim),
                w2=Parameter(f"{name}.w2", xavier_uniform(rng, (dim, dim))),
                b2=Parameter(f"{name}.b2", np.zeros((1, dim))),
                gamma2=Parameter(f"{name}.gamma2", np.ones((1, dim))),
                beta2=Parameter(f"{name}.beta2", np.zeros((1, dim))),
                bn2=BatchNormState(dim),
            )
        )
    return MosParams(k=k, dim=dim, omegas=omegas, components=components)


def _dropout_mask(shape, p: float, rng: np.random.Generator) -> np.ndarray:
    # inverted scaling keeps expectations fixed, so inference needs no rescale
    return (rng.random(shape) >= p) / (1.0 - p)


def prior_logits(mos: MosParams, h: Node, tape: Tape) -> Node:
    return tape.matmul(h, tape.param(mos.omegas), transpose_b=True)


def priors(mos: MosParams, h: Node, tape: Tape) -> Node:
    """Row-stochastic (batch, k) matrix of component weights."""
    return tape.row_softmax(prior_logits(mos, h, tape))


def project(
    mos: MosParams,
    component: MosComponent,
    h: Node,
    tape: Tape,
    training: bool = False,
    dropout: float = 0.0,
    rng: np.random.Generator | None = None,
    slope: float = 0.01,
) -> Node:
    """Run one component's two projection blocks on H."""
    c = component
    x = h
    for w, b, gamma, beta, bn in (
        (c.w1, c.b1, c.gamma1, c.beta1, c.bn1),
        (c.w2, c.b2, c.gamma2, c.beta2, c.bn2),
    ):
        x = tape.affine(x, tape.param(w), tape.param(b))
        x = tape.batch_norm(x, tape.param(gamma), tape.param(beta), bn, training)
        x = tape.leaky_relu(x, slope)
        if training and dropout > 0.0:
            if rng is None:
                raise ValueError("training dropout needs an rng")
            x = tape.dropout(x, _dropout_mask(x.value.shape, dropout, rng))
    return x


def plain_log_prob(h: Node, entities: Node, tape: Tape) -> Node:
    """log softmax(H @ E^T): the single-softmax output layer."""
    return tape.row_log_softmax(tape.matmul(h, entities, transpose_b=True))


def mixture_log_prob(
    mos: MosParams,
    h: Node,
    entities: Node,
    tape: Tape,
    training: bool = False,
    dropout: float = 0.0,
    rng: np.random.Generator | None = None,
    slope: float = 0.01,
) -> Node:
    """log sum_k pi_k(H) softmax(f_k(H) @ E^T), evaluated in log space.

    Priors and projections both consume the same H node, so dropout applied
    upstream of this call affects them identically.
    """
    log_pi = tape.row_log_softmax(prior_logits(mos, h, tape))
    terms = []
    for k, comp in enumerate(mos.components):
        hk = project(mos, comp, h, tape, training, dropout, rng, slope)
        log_k = tape.row_log_softmax(tape.matmul(hk, entities, transpose_b=True))
        terms.append(tape.add(log_k, tape.slice_cols(log_pi, k, k + 1)))
    return tape.stack_logsumexp(terms)
