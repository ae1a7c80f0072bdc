"""
Semantic vector database of STL formulae.

Formulae and their embeddings are sharded by (number of variables, node
budget). A formula with n nodes is stored in every shard whose node budget
is >= n. Search is exact L2 by default. Each shard can also carry an
inverted-file index (k-means cells) and a product quantizer, used alone or
together to trade accuracy for scan speed.
"""
import math
import time
from dataclasses import dataclass, field

import numpy as np
from sklearn.cluster import KMeans
from tqdm import tqdm

from utils.logging_utils import get_logger, progress_enabled
from .binary_io import BinaryReader, BinaryWriter
from .kernel import embed_many
from .parser import format_formula, parse_formula
from .templates import generate_formula_set
from .trajectories import sample_mu0_batch

DB_MAGIC = b"STLDB\x00\x00\x00"
DB_VERSION = 1
DEFAULT_NODE_LIMITS = (4, 5)
SEARCH_MODES = ("exact", "ivf", "pq", "ivfpq")
SCAN_CHUNK = 2048


class DatabaseFormatError(ValueError):
    """Raised for unreadable, truncated or incompatible index files."""


class VectorDbError(ValueError):
    """Raised for invalid database operations (dimension mismatch, bad keys, IVF sizing)."""


@dataclass(frozen=True, order=True)
class ShardKey:
    n_vars: int
    max_nodes: int

    def __str__(self):
        return f"vars={self.n_vars},nodes<={self.max_nodes}"


@dataclass(frozen=True)
class QueryResult:
    text: str
    distance: float
    rank: int
    node_count: int
    shard: ShardKey
    embedding: np.ndarray = field(repr=False, compare=False)

    @property
    def formula(self):
        return parse_formula(self.text)

    def to_dict(self):
        return {"rank": self.rank, "formula": self.text, "distance": self.distance,
                "node_count": self.node_count, "shard": str(self.shard)}


@dataclass
class IvfIndex:
    """Coarse quantizer of one shard: centroids and the cell of every row."""

    centroids: np.ndarray
    assignments: np.ndarray
    nprobe: int

    def __post_init__(self):
        self.cells = [np.flatnonzero(self.assignments == c) for c in range(len(self.centroids))]

    @property
    def nlist(self):
        return len(self.centroids)

    def candidate_rows(self, query, nprobe=None):
        """Row indices of the nprobe cells nearest to the query, ascending."""
        nprobe = min(nprobe or self.nprobe, self.nlist)
        d2 = squared_distances(self.centroids, query)
        cells = np.argsort(d2, kind="stable")[:nprobe]
        return np.sort(np.concatenate([self.cells[c] for c in cells]))


@dataclass
class PqCodec:
    """
    Product quantizer of one shard.

    Each embedding is split into m equal sub-vectors and every sub-vector is
    replaced by the index of its nearest codeword. Query distances are summed
    from a per-query (m, ksub) lookup table.
    """

    codebooks: np.ndarray
    codes: np.ndarray

    @property
    def m(self):
        return self.codebooks.shape[0]

    @property
    def ksub(self):
        return self.codebooks.shape[1]

    @property
    def dsub(self):
        return self.codebooks.shape[2]

    def encode(self, vectors):
        vectors = np.asarray(vectors, dtype=np.float32)
        codes = np.empty((len(vectors), self.m), dtype=np.uint8)
        codebooks = self.codebooks.astype(np.float64)
        step = max(1, SCAN_CHUNK // self.ksub)
        for start in range(0, len(vectors), step):
            block = vectors[start:start + step].astype(np.float64).reshape(-1, self.m, self.dsub)
            d2 = np.sum((block[:, :, None, :] - codebooks[None]) ** 2, axis=3)
            codes[start:start + step] = d2.argmin(axis=2)
        return codes

    def distance_table(self, query):
        query = np.asarray(query, dtype=np.float32).astype(np.float64).reshape(self.m, self.dsub)
        diff = self.codebooks.astype(np.float64) - query[:, None, :]
        return np.sum(diff ** 2, axis=2)

    def distances(self, rows, query):
        """Asymmetric squared distances between the query and the coded rows."""
        table = self.distance_table(query)
        return table[np.arange(self.m), self.codes[rows]].sum(axis=1)


class Shard:
    """Texts, float32 embedding matrix and per-row node / max-variable counts."""

    def __init__(self, key, dim):
        self.key = key
        self.dim = dim
        self.texts = []
        self.embeddings = np.empty((0, dim), dtype=np.float32)
        self.node_counts = np.empty(0, dtype=np.uint8)
        self.max_vars = np.empty(0, dtype=np.uint8)
        self.ivf = None
        self.pq = None

    def __len__(self):
        return len(self.texts)

    def append(self, texts, embeddings, node_counts, max_vars):
        self.texts.extend(texts)
        self.embeddings = np.concatenate([self.embeddings, np.asarray(embeddings, dtype=np.float32)])
        self.node_counts = np.concatenate([self.node_counts, np.asarray(node_counts, dtype=np.uint8)])
        self.max_vars = np.concatenate([self.max_vars, np.asarray(max_vars, dtype=np.uint8)])
        if self.ivf is not None and len(texts):
            new = squared_distances_matrix(self.embeddings[-len(texts):], self.ivf.centroids)
            self.ivf = IvfIndex(self.ivf.centroids, np.concatenate([self.ivf.assignments, new.argmin(axis=1)]),
                                self.ivf.nprobe)
        if self.pq is not None and len(texts):
            codes = self.pq.encode(self.embeddings[-len(texts):])
            self.pq = PqCodec(self.pq.codebooks, np.concatenate([self.pq.codes, codes]))


def squared_distances(matrix, query):
    """Row-wise sum((row - query)^2) in float64, computed in chunks."""
    query = np.asarray(query, dtype=np.float32).astype(np.float64)
    out = np.empty(len(matrix))
    for start in range(0, len(matrix), SCAN_CHUNK):
        block = matrix[start:start + SCAN_CHUNK].astype(np.float64)
        out[start:start + SCAN_CHUNK] = np.sum((block - query) ** 2, axis=1)
    return out


def squared_distances_matrix(rows, centroids):
    return np.stack([squared_distances(centroids, row) for row in rows]) if len(rows) else np.empty((0, len(centroids)))


@dataclass
class Selection:
    """Deduplicated eligible entries of a set of shards."""

    texts: list
    embeddings: np.ndarray
    node_counts: np.ndarray


class SemanticDb:
    """Sharded (formula, embedding) store with exact and IVF nearest-neighbor search."""

    def __init__(self, dim, node_limits=DEFAULT_NODE_LIMITS, metadata=None):
        self.logger = get_logger("vector_db")
        self.dim = int(dim)
        self.node_limits = tuple(sorted(int(m) for m in node_limits))
        self.metadata = dict(metadata or {})
        self.shards = {}

    # ------------------------------------------------------------------
    # Content
    # ------------------------------------------------------------------

    def shard(self, key):
        if key not in self.shards:
            if key.max_nodes not in self.node_limits or key.n_vars < 1:
                raise VectorDbError(f"invalid shard key {key} (node limits {self.node_limits})")
            self.shards[key] = Shard(key, self.dim)
        return self.shards[key]

    def add(self, formulas, embeddings):
        """
        Store formulae in every shard that admits them.

        Returns:
            Number of formulae dropped for exceeding the largest node limit
        """
        embeddings = np.asarray(embeddings)
        if embeddings.ndim != 2 or embeddings.shape[1] != self.dim or len(formulas) != len(embeddings):
            raise VectorDbError(f"expected {len(formulas)} x {self.dim} embeddings, got {embeddings.shape}")
        staged, dropped = {}, 0
        for f, row in zip(formulas, embeddings):
            nodes, n_vars = f.node_count(), f.var_count()
            if n_vars < 1:
                raise VectorDbError(f"formula without variables cannot be indexed: {f}")
            limits = [m for m in self.node_limits if nodes <= m]
            if not limits:
                dropped += 1
                continue
            text = format_formula(f)
            for max_nodes in limits:
                bucket = staged.setdefault(ShardKey(n_vars, max_nodes), ([], [], [], []))
                bucket[0].append(text)
                bucket[1].append(row)
                bucket[2].append(nodes)
                bucket[3].append(f.max_var_index())
        for key in sorted(staged):
            texts, rows, nodes, max_vars = staged[key]
            self.shard(key).append(texts, np.stack(rows), nodes, max_vars)
        if dropped:
            self.logger.warning(f"Dropped {dropped} formulae larger than {self.node_limits[-1]} nodes")
        return dropped

    def extend(self, formulas, embeddings):
        """Add formulae to a built (possibly IVF-trained) database."""
        dropped = self.add(formulas, embeddings)
        self.logger.info(f"Extended database with {len(formulas) - dropped} formulae; now {self.total_entries()} entries")
        return dropped

    def keys(self):
        return sorted(self.shards)

    def total_entries(self):
        return sum(len(s) for s in self.shards.values())

    def summary(self):
        return {
            "dim": self.dim,
            "node_limits": list(self.node_limits),
            "shards": [
                self._shard_summary(self.shards[key]) for key in self.keys()
            ],
            "total_entries": self.total_entries(),
        }

    @staticmethod
    def _shard_summary(shard):
        return {"n_vars": shard.key.n_vars, "max_nodes": shard.key.max_nodes, "count": len(shard),
                "ivf_nlist": shard.ivf.nlist if shard.ivf else None,
                "pq": [shard.pq.m, shard.pq.ksub] if shard.pq else None}

    def eligible_keys(self, max_vars=None, max_nodes=None):
        """Keys with n_vars <= max_vars and the given node budget (default: smallest budget)."""
        budget = max_nodes if max_nodes is not None else self.node_limits[0]
        return [key for key in self.keys()
                if key.max_nodes == budget and (max_vars is None or key.n_vars <= max_vars)]

    def _selected(self, keys):
        keys = sorted(set(keys))
        if not keys:
            raise VectorDbError("query needs at least one shard key")
        return [self.shards[key] for key in keys if key in self.shards]

    def collect(self, keys, max_var_index=None):
        """All eligible entries of the selected shards, first occurrence of each text kept."""
        texts, blocks, nodes, seen = [], [], [], set()
        for shard in self._selected(keys):
            rows = [i for i, text in enumerate(shard.texts)
                    if text not in seen and (max_var_index is None or shard.max_vars[i] <= max_var_index)]
            seen.update(shard.texts[i] for i in rows)
            texts.extend(shard.texts[i] for i in rows)
            blocks.append(shard.embeddings[rows])
            nodes.append(shard.node_counts[rows])
        if not texts:
            return Selection([], np.empty((0, self.dim), dtype=np.float32), np.empty(0, dtype=np.int64))
        return Selection(texts, np.concatenate(blocks), np.concatenate(nodes).astype(np.int64))

    # ------------------------------------------------------------------
    # Search
    # ------------------------------------------------------------------

    def query(self, embedding, k, keys, max_var_index=None, mode=None, nprobe=None):
        """
        k nearest stored formulae by L2 distance over the union of the selected shards.

        Args:
            embedding: Query vector of length dim
            k: Number of results (fewer when the shards hold fewer formulae)
            keys: Iterable of ShardKey
            max_var_index: Skip formulae using a variable index above this
            mode: "exact", "ivf", "pq", "ivfpq", or None (ivf when every selected shard is trained)
            nprobe: Cells to scan in the ivf modes (default: the trained nprobe)

        Returns:
            List of QueryResult sorted by (distance, node count, text), ranks 1..k.
            The pq modes report quantized distances.
        """
        embedding = np.asarray(embedding, dtype=np.float64).reshape(-1)
        if embedding.shape[0] != self.dim:
            raise VectorDbError(f"query has dimension {embedding.shape[0]}, database has {self.dim}")
        if k < 1:
            raise VectorDbError(f"k must be >= 1, got {k}")
        shards = self._selected(keys)
        if mode is None:
            mode = "ivf" if shards and all(s.ivf is not None for s in shards) else "exact"
        if mode not in SEARCH_MODES:
            raise VectorDbError(f"unknown search mode {mode!r}")

        candidates = []
        for shard in shards:
            if not len(shard):
                continue
            if mode.startswith("ivf"):
                if shard.ivf is None:
                    raise VectorDbError(f"shard {shard.key} has no IVF index")
                rows = shard.ivf.candidate_rows(embedding, nprobe)
            else:
                rows = np.arange(len(shard))
            if mode.endswith("pq") and shard.pq is None:
                raise VectorDbError(f"shard {shard.key} has no product quantizer")
            if max_var_index is not None:
                rows = rows[shard.max_vars[rows] <= max_var_index]
            if not len(rows):
                continue
            if mode.endswith("pq"):
                d2 = shard.pq.distances(rows, embedding)
            else:
                d2 = squared_distances(shard.embeddings[rows], embedding)
            window = min(len(rows), k * len(shards))
            if window < len(rows):
                cut = np.partition(d2, window - 1)[window - 1]
                keep = d2 <= cut
                rows, d2 = rows[keep], d2[keep]
            candidates.extend((float(d2[i]), int(shard.node_counts[r]), shard.texts[r], shard, int(r))
                              for i, r in enumerate(rows))

        candidates.sort(key=lambda c: (c[0], c[1], c[2]))
        results, seen = [], set()
        for d2, nodes, text, shard, row in candidates:
            if text in seen:
                continue
            seen.add(text)
            results.append(QueryResult(text, math.sqrt(d2), len(results) + 1, nodes, shard.key,
                                       shard.embeddings[row].astype(np.float64)))
            if len(results) == k:
                break
        return results

    def sample(self, n, keys, seed, max_var_index=None):
        """Seeded uniform draw of n distinct eligible formula texts (fewer if not available)."""
        selection = self.collect(keys, max_var_index)
        if not selection.texts:
            return selection, np.empty(0, dtype=np.int64)
        rng = np.random.default_rng(seed)
        picks = rng.choice(len(selection.texts), size=min(n, len(selection.texts)), replace=False)
        return selection, picks

    # ------------------------------------------------------------------
    # Inverted-file and product-quantization acceleration
    # ------------------------------------------------------------------

    def train_ivf(self, nlist, nprobe, seed=0, max_iter=50):
        """
        Fit a k-means coarse quantizer per non-empty shard.

        Raises:
            VectorDbError: nlist larger than a shard
        """
        if nlist < 1 or nprobe < 1:
            raise VectorDbError(f"nlist and nprobe must be >= 1, got {nlist}, {nprobe}")
        start_time = time.time()
        for key in self.keys():
            shard = self.shards[key]
            if not len(shard):
                self.logger.warning(f"Shard {key} is empty; no IVF index trained")
                continue
            if nlist > len(shard):
                raise VectorDbError(f"nlist={nlist} exceeds the size of shard {key} ({len(shard)})")
            kmeans = KMeans(n_clusters=nlist, random_state=seed, n_init=1, max_iter=max_iter)
            kmeans.fit(shard.embeddings.astype(np.float64))
            centroids = kmeans.cluster_centers_.astype(np.float32)
            assignments = squared_distances_matrix(shard.embeddings, centroids).argmin(axis=1)
            shard.ivf = IvfIndex(centroids, assignments.astype(np.int64), nprobe)
        elapsed = time.time() - start_time
        self.logger.info(f"Trained IVF (nlist={nlist}, nprobe={nprobe}) on {len(self.shards)} shards in {elapsed:.2f}s")
        return self

    def train_pq(self, m=8, nbits=8, seed=0, max_iter=25):
        """
        Fit a product quantizer per non-empty shard and encode its rows.

        Args:
            m: Number of sub-vectors (must divide the embedding dimension)
            nbits: Bits per code; each sub-codebook holds min(2**nbits, shard size) codewords
            seed: k-means seed
            max_iter: k-means iterations per sub-codebook

        Raises:
            VectorDbError: m does not divide the dimension, or nbits outside 1..8
        """
        if m < 1 or self.dim % m:
            raise VectorDbError(f"pq m={m} must be a positive divisor of the dimension {self.dim}")
        if not 1 <= nbits <= 8:
            raise VectorDbError(f"pq nbits must lie in 1..8, got {nbits}")
        start_time = time.time()
        dsub = self.dim // m
        for key in self.keys():
            shard = self.shards[key]
            if not len(shard):
                self.logger.warning(f"Shard {key} is empty; no product quantizer trained")
                continue
            ksub = min(2 ** nbits, len(shard))
            codebooks = np.empty((m, ksub, dsub), dtype=np.float32)
            for j in range(m):
                block = shard.embeddings[:, j * dsub:(j + 1) * dsub].astype(np.float64)
                kmeans = KMeans(n_clusters=ksub, random_state=seed, n_init=1, max_iter=max_iter)
                kmeans.fit(block)
                codebooks[j] = kmeans.cluster_centers_
            codec = PqCodec(codebooks, np.empty((0, m), dtype=np.uint8))
            shard.pq = PqCodec(codebooks, codec.encode(shard.embeddings))
        elapsed = time.time() - start_time
        self.logger.info(f"Trained PQ (m={m}, nbits={nbits}) on {len(self.shards)} shards in {elapsed:.2f}s")
        return self

    # ------------------------------------------------------------------
    # Persistence
    # ------------------------------------------------------------------

    def manifest(self):
        return {"format_version": DB_VERSION, **self.summary(), "metadata": self.metadata}

    def save(self, path):
        start_time = time.time()
        writer = BinaryWriter(DB_MAGIC)
        writer.u32(DB_VERSION)
        writer.json(self.manifest())
        writer.u64(len(self.shards))
        for key in self.keys():
            shard = self.shards[key]
            writer.u32(key.n_vars)
            writer.u32(key.max_nodes)
            writer.texts(shard.texts)
            writer.array(shard.embeddings, np.float32)
            writer.array(shard.node_counts, np.uint8)
            writer.array(shard.max_vars, np.uint8)
            writer.u32((1 if shard.ivf is not None else 0) | (2 if shard.pq is not None else 0))
            if shard.ivf is not None:
                writer.u64(shard.ivf.nprobe)
                writer.u64(shard.ivf.nlist)
                writer.array(shard.ivf.centroids, np.float32)
                writer.array(shard.ivf.assignments, np.int64)
            if shard.pq is not None:
                writer.u64(shard.pq.m)
                writer.u64(shard.pq.ksub)
                writer.array(shard.pq.codebooks, np.float32)
                writer.array(shard.pq.codes, np.uint8)
        size = writer.save(path)
        elapsed = time.time() - start_time
        self.logger.info(f"Saved database ({self.total_entries()} entries, {size} bytes) to {path} in {elapsed:.2f}s")
        return size

    @classmethod
    def load(cls, path):
        """Read an index file; nothing is returned unless the whole file decodes."""
        reader = BinaryReader(path, DB_MAGIC, DatabaseFormatError)
        version = reader.u32()
        if version != DB_VERSION:
            raise DatabaseFormatError(f"{path}: unsupported index version {version}")
        manifest = reader.json()
        try:
            db = cls(manifest["dim"], manifest["node_limits"], manifest.get("metadata"))
        except (KeyError, TypeError) as exc:
            raise DatabaseFormatError(f"{path}: incomplete manifest ({exc})") from None
        for _ in range(reader.u64()):
            key = ShardKey(reader.u32(), reader.u32())
            shard = Shard(key, db.dim)
            shard.texts = reader.texts()
            count = len(shard.texts)
            shard.embeddings = reader.array(np.float32, (count, db.dim))
            shard.node_counts = reader.array(np.uint8, (count,))
            shard.max_vars = reader.array(np.uint8, (count,))
            flags = reader.u32()
            if flags & 1:
                nprobe, nlist = reader.u64(), reader.u64()
                centroids = reader.array(np.float32, (nlist, db.dim))
                assignments = reader.array(np.int64, (count,))
                shard.ivf = IvfIndex(centroids, assignments, int(nprobe))
            if flags & 2:
                m, ksub = reader.u64(), reader.u64()
                if not m or db.dim % m:
                    raise DatabaseFormatError(f"{path}: product quantizer m={m} does not divide dimension {db.dim}")
                codebooks = reader.array(np.float32, (m, ksub, db.dim // m))
                shard.pq = PqCodec(codebooks, reader.array(np.uint8, (count, m)))
            db.shards[key] = shard
        reader.finish()
        expected = {(s["n_vars"], s["max_nodes"]): s["count"] for s in manifest.get("shards", [])}
        actual = {(k.n_vars, k.max_nodes): len(s) for k, s in db.shards.items()}
        if expected != actual:
            raise DatabaseFormatError(f"{path}: manifest shard counts disagree with contents")
        db.logger.info(f"Loaded database from {path}: {db.total_entries()} entries in {len(db.shards)} shards")
        return db


def build_db(max_nodes, n_vars, grid, tau_sim, reference, cap=10_000, seed=0, node_limits=DEFAULT_NODE_LIMITS,
             signature_size=100, threads=None, metadata=None):
    """
    Build the database: enumerate, instantiate, filter, embed and shard formulae.

    Args:
        max_nodes: Template node budget M
        n_vars: Number of variables N (must not exceed the reference-set dimension)
        grid: ParameterGrid
        tau_sim: Signature similarity threshold
        reference: ReferenceSet used for embeddings
        cap: Per-template instantiation cap
        seed: Seed for signature trajectories and grid subsampling
        node_limits: Node budgets of the shards
        signature_size: Number of mu0 trajectories used for signatures
        threads: Worker cap
        metadata: Extra manifest fields (build config echo)

    Returns:
        SemanticDb
    """
    logger = get_logger("vector_db")
    if n_vars > reference.dim:
        raise VectorDbError(f"n_vars={n_vars} exceeds the reference-set dimension {reference.dim}")
    start_time = time.time()
    signature_seq, grid_seq = np.random.SeedSequence(seed).spawn(2)
    signature_set = sample_mu0_batch(reference.mu0, signature_size, n_vars, signature_seq)
    grid_seed = int(grid_seq.generate_state(1)[0])

    formulas, report = generate_formula_set(max_nodes, n_vars, grid, signature_set, tau_sim=tau_sim, cap=cap,
                                            seed=grid_seed, threads=threads)
    embeddings, kept = embed_many(formulas, reference, threads=threads, skip_invalid=True)
    if len(kept) < len(formulas):
        logger.warning(f"Skipped {len(formulas) - len(kept)} formulae with zero self-norm on the reference set")

    meta = {
        "build": {"max_nodes": max_nodes, "n_vars": n_vars, "tau_sim": tau_sim, "cap": cap, "seed": seed,
                  "signature_size": signature_size, "values": list(grid.values), "times": list(grid.times)},
        "formula_set": {"templates": report.templates, "instantiated": report.instantiated,
                        "unevaluable": report.unevaluable, "kept": report.kept, "embedded": len(kept)},
        "reference": {"n_train": reference.n_train, "n_mc": reference.n_mc, "seed": reference.seed},
        **(metadata or {}),
    }
    db = SemanticDb(reference.n_train, node_limits, meta)
    chosen = [formulas[i] for i in kept]
    batch = 4096
    for start in tqdm(range(0, len(chosen), batch), desc="indexing", disable=not progress_enabled(logger)):
        db.add(chosen[start:start + batch], embeddings[start:start + batch])

    for v in range(1, n_vars + 1):
        for m in db.node_limits:
            if len(db.shards.get(ShardKey(v, m), ())) == 0:
                logger.warning(f"Shard {ShardKey(v, m)} is empty; consider a larger grid or node budget")
    elapsed = time.time() - start_time
    logger.info(f"Built database: {db.total_entries()} entries in {len(db.shards)} shards in {elapsed:.2f}s")
    return db
