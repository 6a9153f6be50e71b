"""Per-weight pruning scores and global mask selection.

GraSP scores are ``-theta * (H g)`` with the Hessian-gradient product taken on
a scoring batch; the weights with the largest scores are removed first. SNIP
(``|theta * g|``), random and magnitude scores use the opposite polarity: the
largest scores are kept.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import autodiff as ad
from .autodiff import NumericalError
from .container import read_container, write_container
from .nn import ModelSpec, ParamSet, loss_fn

CRITERIA = ("grasp", "snip", "random", "magnitude")


class Polarity(str, enum.Enum):
    REMOVE_LARGEST = "remove_largest"
    KEEP_LARGEST = "keep_largest"


POLARITY = {
    "grasp": Polarity.REMOVE_LARGEST,
    "snip": Polarity.KEEP_LARGEST,
    "random": Polarity.KEEP_LARGEST,
    "magnitude": Polarity.KEEP_LARGEST,
}


@dataclass
class ScoreVector:
    values: np.ndarray
    criterion: str
    layout: list = field(default_factory=list)  # (name, shape, prunable) per parameter

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if not np.all(np.isfinite(self.values)):
            raise NumericalError(f"{self.criterion} scores contain non-finite entries")

    @property
    def polarity(self) -> Polarity:
        return POLARITY.get(self.criterion, Polarity.KEEP_LARGEST)

    def __len__(self) -> int:
        return len(self.values)


@dataclass
class Mask:
    tensors: list  # one 0/1 float array per parameter
    ratio: float
    criterion: str = ""
    seed: int | None = None
    fingerprint: str = ""
    layout: list = field(default_factory=list)

    @property
    def d(self) -> int:
        return sum(t.size for t, (_, _, p) in zip(self.tensors, self.layout) if p)

    def zeros(self) -> int:
        return sum(int(np.count_nonzero(t == 0)) for t, (_, _, p) in zip(self.tensors, self.layout) if p)

    def survival(self) -> list[tuple[str, int, int]]:
        """``(name, kept, size)`` per prunable tensor."""
        return [
            (name, int(np.count_nonzero(t)), t.size)
            for t, (name, _, p) in zip(self.tensors, self.layout)
            if p
        ]

    def save(self, path, extra_meta: dict | None = None):
        meta = {
            "ratio": self.ratio,
            "criterion": self.criterion,
            "seed": self.seed,
            "dataset_fingerprint": self.fingerprint,
        }
        meta.update(extra_meta or {})
        entries = [
            {"name": n, "array": t, "dtype": "|u1", "prunable": p}
            for t, (n, _, p) in zip(self.tensors, self.layout)
        ]
        return write_container(path, "mask", entries, meta)

    @classmethod
    def load(cls, path) -> "Mask":
        header, arrays = read_container(path, kind="mask")
        meta = header["meta"]
        layout = [(e["name"], tuple(e["shape"]), e["prunable"]) for e in header["entries"]]
        tensors = [arrays[n].astype(np.float64) for n, _, _ in layout]
        return cls(tensors, meta["ratio"], meta["criterion"], meta["seed"], meta["dataset_fingerprint"], layout)


def ones_mask(params: ParamSet) -> Mask:
    return Mask([np.ones(t.shape) for t in params.tensors], 0.0, "dense", layout=params.layout())


def _batches(batch) -> list:
    return list(batch) if isinstance(batch, (list, tuple)) else [batch]


def weight_gradient(spec, params: ParamSet, batch, temperature: float = 1.0, mask=None) -> list[np.ndarray]:
    """Loss gradient w.r.t. the prunable weights (biases enter as constants).

    Returns one array per parameter tensor; non-prunable entries are zero.
    """
    tape = ad.Tape()
    inputs = [tape.leaf(t) if p else ad.constant(t) for t, p in zip(params.tensors, params.prunable)]
    loss = loss_fn(spec, temperature, mask)(inputs, batch)
    if not np.isfinite(loss.value):
        raise NumericalError(f"loss is not finite on batch {batch.fingerprint}")
    leaves = [v for v in inputs if v.requires_grad]
    grads = iter(ad.gradient(loss, leaves))
    return [next(grads) if p else np.zeros(t.shape) for t, p in zip(params.tensors, params.prunable)]


def gradient_flow(spec: ModelSpec, params: ParamSet, batch, temperature: float = 1.0, mask=None) -> float:
    """Squared norm of the loss gradient over all prunable weights on ``batch``."""
    return float(sum(np.vdot(g, g) for g in weight_gradient(spec, params, batch, temperature, mask)))


def dataset_gradient_flow(spec: ModelSpec, params: ParamSet, dataset, temperature: float = 1.0, mask=None,
                          batch_size: int = 1000) -> float:
    """Squared norm of the gradient of the mean loss over a whole dataset (evaluated in chunks)."""
    n = len(dataset)
    if n == 0:
        raise ValueError("cannot measure gradient flow on an empty dataset")
    total = [np.zeros(t.shape) for t in params.tensors]
    for b in dataset.batches(batch_size):
        for acc, g in zip(total, weight_gradient(spec, params, b, temperature, mask)):
            acc += g * (len(b) / n)
    return float(sum(np.vdot(g, g) for g in total))


def grasp_scores(spec: ModelSpec, params: ParamSet, batch, temperature: float = 200.0) -> ScoreVector:
    """``-theta * Hg`` over prunable weights, summed over one or more scoring batches."""
    total = np.zeros(params.d)
    for b in _batches(batch):
        hg = ad.hessian_gradient_product(loss_fn(spec, temperature), params.tensors, b, wrt=params.prunable)
        total += -params.flatten() * params.flatten(hg)
    return ScoreVector(total, "grasp", params.layout())


def snip_scores(spec: ModelSpec, params: ParamSet, batch, temperature: float = 1.0) -> ScoreVector:
    """``|theta * g|`` over prunable weights (gradients summed over batches)."""
    g_total = np.zeros(params.d)
    for b in _batches(batch):
        g_total += params.flatten(weight_gradient(spec, params, b, temperature))
    return ScoreVector(np.abs(params.flatten() * g_total), "snip", params.layout())


def baseline_scores(kind: str, params: ParamSet, seed: int = 0) -> ScoreVector:
    if kind == "random":
        values = np.random.default_rng(seed).uniform(0.0, 1.0, size=params.d)
    elif kind == "magnitude":
        values = np.abs(params.flatten())
    else:
        raise ValueError(f"unknown baseline {kind!r}; choose 'random' or 'magnitude'")
    return ScoreVector(values, kind, params.layout())


def compute_scores(criterion: str, spec, params, batch, temperature: float, seed: int = 0) -> ScoreVector:
    if criterion == "grasp":
        return grasp_scores(spec, params, batch, temperature)
    if criterion == "snip":
        return snip_scores(spec, params, batch, temperature)
    if criterion in ("random", "magnitude"):
        return baseline_scores(criterion, params, seed)
    raise ValueError(f"unknown criterion {criterion!r}; choose from {CRITERIA}")


def removal_count(ratio: float, d: int) -> int:
    """``ceil(ratio * d)`` evaluated exactly on the decimal value of ``ratio``."""
    return math.ceil(Fraction(str(ratio)) * d)


def removal_order(scores: np.ndarray, polarity: Polarity) -> np.ndarray:
    """Flat indices ordered from first-removed to last-removed; ties go to the lowest index."""
    scores = np.asarray(scores, dtype=np.float64)
    key = -scores if polarity == Polarity.REMOVE_LARGEST else scores
    key = key + 0.0  # fold -0.0 into 0.0
    return np.lexsort((np.arange(len(scores)), key))


def compute_mask(scores: ScoreVector, ratio: float, polarity: Polarity | None = None, seed=None, fingerprint="") -> Mask:
    """Remove exactly ``ceil(ratio * d)`` weights, ranked globally across layers."""
    if not 0.0 <= ratio < 1.0:
        raise ValueError(f"pruning ratio must lie in [0, 1), got {ratio}")
    polarity = Polarity(polarity) if polarity is not None else scores.polarity
    d = len(scores)
    flat = np.ones(d)
    flat[removal_order(scores.values, polarity)[: removal_count(ratio, d)]] = 0.0
    tensors = []
    off = 0
    for _, shape, prunable in scores.layout:
        size = int(np.prod(shape))
        if prunable:
            tensors.append(flat[off : off + size].reshape(shape).copy())
            off += size
        else:
            tensors.append(np.ones(shape))
    if not scores.layout:
        tensors = [flat]
    return Mask(tensors, ratio, scores.criterion, seed, fingerprint, list(scores.layout))


def taylor_flow_change(hg_flat: np.ndarray, params: ParamSet, flat_index: int) -> float:
    """First-order prediction ``2 delta^T Hg`` for zeroing one weight."""
    theta = params.flatten()
    return float(2.0 * (-theta[flat_index]) * hg_flat[flat_index])


def brute_force_flow_change(spec, params: ParamSet, batch, flat_index: int, temperature: float) -> float:
    """Measured change of the gradient flow when one weight is set to zero."""
    name, idx = params.locate(flat_index)
    perturbed = params.copy()
    perturbed[name][idx] = 0.0
    return gradient_flow(spec, perturbed, batch, temperature) - gradient_flow(spec, params, batch, temperature)
