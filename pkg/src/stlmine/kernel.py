"""
STL kernel embeddings.

A formula is embedded as its normalized Monte-Carlo kernel values against a
fixed set of anchor formulae, where the kernel is the mean product of
robustness values over trajectories drawn from mu0. The random formula
sampler used for anchors (and for retrieval experiments) lives here too.
"""
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np
from tqdm import tqdm

from utils.logging_utils import get_logger, progress_enabled
from utils.parallel import parallel_map
from .binary_io import BinaryReader, BinaryWriter
from .formula import GE, LE, And, Atom, Eventually, Globally, Interval, Not, Or, Until
from .parser import format_formula, parse_formula
from .semantics import EvaluationError, robustness_batch
from .trajectories import Mu0Params, sample_mu0_batch

logger = get_logger("kernel")

REFERENCE_MAGIC = b"STLREF\x00\x00"
REFERENCE_VERSION = 1
MIN_SELFNORM = 1e-9

OPERATORS = ("not", "and", "or", "F", "G", "U")


class KernelError(ValueError):
    """Raised when a formula cannot be embedded (zero self-norm, non-finite robustness)."""


class ReferenceFormatError(ValueError):
    """Raised for unreadable reference-set files."""


@dataclass(frozen=True)
class FDistParams:
    """Random recursive formula growth: atoms with probability p_leaf, else a uniform operator."""

    p_leaf: float = 0.5
    n_vars: int = 3
    value_range: tuple = (-4.0, 4.0)
    time_range: tuple = (0, 100)
    max_depth: int = 4
    p_unbounded: float = 0.1
    max_nodes: int = None
    threshold_decimals: int = 4

    def __post_init__(self):
        if not 0 < self.p_leaf < 1:
            raise ValueError(f"p_leaf must lie in (0, 1), got {self.p_leaf}")
        if self.n_vars < 1:
            raise ValueError(f"n_vars must be >= 1, got {self.n_vars}")
        if not self.value_range[1] > self.value_range[0]:
            raise ValueError(f"empty value range {self.value_range}")
        if not (0 <= self.time_range[0] < self.time_range[1]):
            raise ValueError(f"invalid time range {self.time_range}")
        if self.max_depth < 0:
            raise ValueError("max_depth must be >= 0")
        if self.max_nodes is not None and self.max_nodes < 1:
            raise ValueError("max_nodes must be >= 1")
        object.__setattr__(self, "value_range", tuple(self.value_range))
        object.__setattr__(self, "time_range", tuple(self.time_range))


class FormulaSampler:
    """Draws formulae from the recursive growing distribution with its own RNG stream."""

    def __init__(self, params=None, seed=0):
        self.params = params or FDistParams()
        self.rng = np.random.default_rng(seed)

    def _interval(self):
        lo_bound, hi_bound = int(self.params.time_range[0]), int(self.params.time_range[1])
        lo = int(self.rng.integers(lo_bound, hi_bound))
        if self.rng.random() < self.params.p_unbounded:
            return Interval(lo)
        hi = int(self.rng.integers(lo + 1, hi_bound + 1))
        return Interval(lo, hi)

    def _atom(self):
        p = self.params
        threshold = round(float(self.rng.uniform(*p.value_range)), p.threshold_decimals)
        direction = LE if self.rng.random() < 0.5 else GE
        return Atom(int(self.rng.integers(p.n_vars)), direction, threshold)

    def _grow(self, depth):
        if depth >= self.params.max_depth or self.rng.random() < self.params.p_leaf:
            return self._atom()
        op = OPERATORS[int(self.rng.integers(len(OPERATORS)))]
        if op == "not":
            return Not(self._grow(depth + 1))
        if op in ("F", "G"):
            interval = self._interval()
            child = self._grow(depth + 1)
            return Eventually(interval, child) if op == "F" else Globally(interval, child)
        if op == "U":
            interval = self._interval()
            return Until(interval, self._grow(depth + 1), self._grow(depth + 1))
        left, right = self._grow(depth + 1), self._grow(depth + 1)
        return And(left, right) if op == "and" else Or(left, right)

    def sample(self):
        """One formula; oversized draws are rejected when max_nodes is set."""
        while True:
            f = self._grow(0)
            if self.params.max_nodes is None or f.node_count() <= self.params.max_nodes:
                return f

    def sample_many(self, n):
        return [self.sample() for _ in range(n)]


def sample_formula(params=None, seed=0):
    """Single draw from the formula distribution."""
    return FormulaSampler(params, seed).sample()


def _quantize(values):
    """Round to float32 precision so stored and in-memory values agree bit for bit."""
    return np.asarray(values, dtype=np.float32).astype(np.float64)


@dataclass(frozen=True, eq=False)
class ReferenceSet:
    """
    Anchor formulae with their robustness on a fixed Monte-Carlo trajectory set.

    anchor_rho[i, j] = robustness(anchors[i], trajectories[j], 0), stored at
    float32 precision; anchor_selfnorm[i] = sqrt(mean_j anchor_rho[i, j]^2).
    """

    anchors: tuple
    trajectories: np.ndarray
    anchor_rho: np.ndarray
    seed: int = 0
    dt: float = 1.0
    squash: bool = False
    fparams: FDistParams = field(default_factory=FDistParams)
    mu0: Mu0Params = field(default_factory=Mu0Params)

    def __post_init__(self):
        rho = np.asarray(self.anchor_rho, dtype=np.float64)
        if rho.shape != (len(self.anchors), self.trajectories.shape[0]):
            raise KernelError(f"anchor_rho shape {rho.shape} does not match "
                              f"{len(self.anchors)} anchors x {self.trajectories.shape[0]} trajectories")
        selfnorm = np.sqrt(np.mean(rho ** 2, axis=1))
        if np.any(selfnorm < MIN_SELFNORM):
            raise KernelError("anchor with near-zero self-norm")
        object.__setattr__(self, "anchors", tuple(self.anchors))
        object.__setattr__(self, "anchor_rho", rho)
        object.__setattr__(self, "anchor_selfnorm", selfnorm)

    @property
    def n_train(self):
        return len(self.anchors)

    @property
    def n_mc(self):
        return self.trajectories.shape[0]

    @property
    def dim(self):
        return self.trajectories.shape[1]

    @property
    def n_points(self):
        return self.trajectories.shape[2]

    def features(self, f):
        """Robustness of f on the Monte-Carlo trajectories (arctan-squashed when enabled)."""
        try:
            rho = robustness_batch(f, self.trajectories, dt=self.dt, t=0)
        except EvaluationError as exc:
            raise KernelError(f"cannot embed '{f}': {exc}") from None
        if not np.all(np.isfinite(rho)):
            raise KernelError(f"cannot embed '{f}': non-finite robustness")
        return np.arctan(rho) if self.squash else rho

    def manifest(self):
        return {
            "n_train": self.n_train,
            "n_mc": self.n_mc,
            "dim": self.dim,
            "n_points": self.n_points,
            "dt": self.dt,
            "seed": self.seed,
            "squash": self.squash,
            "fparams": asdict(self.fparams),
            "mu0": asdict(self.mu0),
        }


def _selfnorm(features):
    return math.sqrt(float(np.mean(features ** 2)))


def build_reference_set(n_train=1000, n_mc=10_000, fparams=None, mu0params=None, seed=0, squash=False,
                        threads=None):
    """
    Sample anchors and Monte-Carlo trajectories and materialize the anchor robustness matrix.

    Anchors that cannot be evaluated or whose self-norm is below 1e-9 are
    redrawn. The result depends only on the arguments, not on threads.

    Args:
        n_train: Number of anchor formulae (embedding dimension)
        n_mc: Number of mu0 trajectories
        fparams: FDistParams for anchors
        mu0params: Mu0Params for trajectories
        seed: Master seed
        squash: Apply arctan to robustness values
        threads: Worker cap for row computation

    Returns:
        ReferenceSet
    """
    if n_train < 1 or n_mc < 1:
        raise KernelError(f"n_train and n_mc must be >= 1, got {n_train}, {n_mc}")
    fparams = fparams or FDistParams()
    mu0params = mu0params or Mu0Params()
    start_time = time.time()
    anchor_seq, mc_seq = np.random.SeedSequence(seed).spawn(2)
    trajectories = _quantize(sample_mu0_batch(mu0params, n_mc, fparams.n_vars, mc_seq))
    trajectories.setflags(write=False)

    sampler = FormulaSampler(fparams, anchor_seq)

    def row(f):
        try:
            rho = robustness_batch(f, trajectories, dt=mu0params.delta, t=0)
        except EvaluationError:
            return None
        if not np.all(np.isfinite(rho)):
            return None
        rho = _quantize(np.arctan(rho) if squash else rho)
        return rho if _selfnorm(rho) >= MIN_SELFNORM else None

    anchors, rows, rejected = [], [], 0
    with tqdm(total=n_train, desc="anchors", disable=not progress_enabled(logger)) as bar:
        while len(anchors) < n_train:
            batch = sampler.sample_many(n_train - len(anchors))
            for f, rho in zip(batch, parallel_map(row, batch, threads=threads)):
                if rho is None:
                    rejected += 1
                    continue
                anchors.append(f)
                rows.append(rho)
                bar.update(1)

    reference = ReferenceSet(tuple(anchors), trajectories, np.stack(rows), seed, mu0params.delta, squash,
                             fparams, mu0params)
    elapsed = time.time() - start_time
    logger.info(f"Built reference set: {n_train} anchors x {n_mc} trajectories "
                f"({rejected} anchors redrawn) in {elapsed:.2f}s")
    return reference


def raw_kernel(f, g, reference):
    """Unnormalized Monte-Carlo kernel mean_j rho(f, xi_j) * rho(g, xi_j)."""
    return float(np.mean(reference.features(f) * reference.features(g)))


def kernel(f, g, reference):
    """
    Normalized kernel k(f, g) / sqrt(k(f, f) * k(g, g)), in [-1, 1].

    Raises:
        KernelError: either formula has zero self-norm
    """
    rf, rg = reference.features(f), reference.features(g)
    nf, ng = _selfnorm(rf), _selfnorm(rg)
    if nf < MIN_SELFNORM or ng < MIN_SELFNORM:
        raise KernelError("zero self-norm: robustness is identically zero on the reference trajectories")
    return float(np.mean(rf * rg)) / (nf * ng)


def _embed_features(rho, reference):
    norm = _selfnorm(rho)
    if norm < MIN_SELFNORM:
        raise KernelError("zero self-norm: robustness is identically zero on the reference trajectories")
    return (reference.anchor_rho @ rho) / reference.n_mc / (norm * reference.anchor_selfnorm)


def embed(f, reference):
    """Embedding of f: normalized kernel values against every anchor, shape (n_train,)."""
    return _embed_features(reference.features(f), reference)


def embed_many(formulas, reference, threads=None, skip_invalid=False):
    """
    Embed many formulae in parallel.

    Args:
        formulas: Sequence of Formula
        reference: ReferenceSet
        threads: Worker cap
        skip_invalid: Drop formulae that cannot be embedded instead of raising

    Returns:
        Array (m, n_train); with skip_invalid, (array, indices of embedded formulae)
    """

    def one(f):
        try:
            return _embed_features(reference.features(f), reference)
        except KernelError:
            if skip_invalid:
                return None
            raise

    rows = parallel_map(one, formulas, threads=threads)
    kept = [i for i, r in enumerate(rows) if r is not None]
    matrix = np.stack([rows[i] for i in kept]) if kept else np.empty((0, reference.n_train))
    return (matrix, kept) if skip_invalid else matrix


def gram_matrix(formulas, reference, normalized=True):
    """Kernel matrix of a list of formulae (symmetrized)."""
    features = np.stack([reference.features(f) for f in formulas])
    gram = features @ features.T / reference.n_mc
    gram = (gram + gram.T) / 2.0
    if normalized:
        norms = np.sqrt(np.diag(gram))
        if np.any(norms < MIN_SELFNORM):
            raise KernelError("zero self-norm in gram matrix")
        gram = gram / np.outer(norms, norms)
    return gram


def save_reference_set(reference, path):
    """Write magic, version, counts, seed, manifest, anchor texts and float32 arrays."""
    writer = BinaryWriter(REFERENCE_MAGIC)
    writer.u32(REFERENCE_VERSION)
    writer.u64(reference.n_train)
    writer.u64(reference.n_mc)
    writer.i64(reference.seed)
    writer.json(reference.manifest())
    writer.texts([format_formula(f) for f in reference.anchors])
    writer.array(reference.trajectories, np.float32)
    writer.array(reference.anchor_rho, np.float32)
    size = writer.save(path)
    logger.info(f"Saved reference set ({reference.n_train} anchors, {reference.n_mc} trajectories) to {path}, "
                f"{size} bytes")


def load_reference_set(path):
    """Read a reference-set file; the checksum is verified before decoding."""
    reader = BinaryReader(path, REFERENCE_MAGIC, ReferenceFormatError)
    version = reader.u32()
    if version != REFERENCE_VERSION:
        raise ReferenceFormatError(f"{path}: unsupported reference-set version {version}")
    n_train, n_mc, seed = reader.u64(), reader.u64(), reader.i64()
    manifest = reader.json()
    texts = reader.texts()
    if len(texts) != n_train or manifest.get("n_train") != n_train or manifest.get("n_mc") != n_mc:
        raise ReferenceFormatError(f"{path}: header counts disagree with contents")
    shape = (n_mc, manifest["dim"], manifest["n_points"])
    trajectories = reader.array(np.float32, shape).astype(np.float64)
    anchor_rho = reader.array(np.float32, (n_train, n_mc)).astype(np.float64)
    reader.finish()
    trajectories.setflags(write=False)

    fparams = manifest["fparams"]
    fparams = FDistParams(**{**fparams, "value_range": tuple(fparams["value_range"]),
                             "time_range": tuple(fparams["time_range"])})
    reference = ReferenceSet(
        tuple(parse_formula(text) for text in texts),
        trajectories,
        anchor_rho,
        seed,
        manifest["dt"],
        manifest["squash"],
        fparams,
        Mu0Params(**manifest["mu0"]),
    )
    logger.info(f"Loaded reference set from {path}: {n_train} anchors, {n_mc} trajectories")
    return reference
