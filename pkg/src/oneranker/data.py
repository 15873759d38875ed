"""Synthetic advertising dataset with planted interest/value structure.

Users carry a latent archetype over item clusters; click/conversion
probabilities follow archetype-cluster affinity, item values are
log-normal with cluster multipliers, and every sampled candidate carries
a realized-value label. Hierarchical semantic IDs come from nested
k-means over the latent item embeddings.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

# token-type codes shared with the backbone embedding
USER, CONTEXT, CONTENT, ITEM = 0, 1, 2, 3

# SeedSequence stream tags so independent stages never share randomness
_TAG_ITEMS, _TAG_ARCHETYPES, _TAG_USER, _TAG_SID, _TAG_BATCH = 101, 102, 103, 104, 105


def rng_for(*entropy) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(e) for e in entropy]))


# ---------------------------------------------------------------------------
# k-means
# ---------------------------------------------------------------------------

@dataclass
class KMeansResult:
    centers: np.ndarray
    assignments: np.ndarray
    inertia: float
    iterations: int
    inertia_trace: list
    warning: str | None = None


def kmeans(points: np.ndarray, k: int, max_iters: int = 50, seed: int = 0) -> KMeansResult:
    """Lloyd iterations from k-means++ seeding.

    Empty clusters are reseeded to the point farthest from its assigned
    center. All-identical inputs return k copies of the point with a
    warning set instead of failing.
    """
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if k < 1:
        raise ValueError(f"kmeans: k must be >= 1, got {k}")
    if k > n:
        raise ValueError(f"kmeans: k={k} exceeds point count {n}")
    if (points == points[0]).all():
        return KMeansResult(centers=np.repeat(points[:1], k, axis=0),
                            assignments=np.zeros(n, dtype=np.int64),
                            inertia=0.0, iterations=0, inertia_trace=[0.0],
                            warning="all points identical; centers are k copies")

    rng = rng_for(seed)
    centers = _kmeans_pp_seed(points, k, rng)
    assignments = np.zeros(n, dtype=np.int64)
    trace = []
    iterations = 0
    for iterations in range(1, max_iters + 1):
        d2 = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new_assign = d2.argmin(axis=1)
        # reseed empty clusters to the globally farthest point
        for c in range(k):
            if not (new_assign == c).any():
                far = d2[np.arange(n), new_assign].argmax()
                centers[c] = points[far]
                d2[:, c] = ((points - centers[c]) ** 2).sum(axis=1)
                new_assign = d2.argmin(axis=1)
        converged = iterations > 1 and (new_assign == assignments).all()
        assignments = new_assign
        for c in range(k):
            centers[c] = points[assignments == c].mean(axis=0)
        inertia = float(((points - centers[assignments]) ** 2).sum())
        trace.append(inertia)
        if converged:
            break
    return KMeansResult(centers=centers, assignments=assignments,
                        inertia=trace[-1], iterations=iterations, inertia_trace=trace)


def _kmeans_pp_seed(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    centers = np.empty((k, points.shape[1]))
    centers[0] = points[rng.integers(n)]
    d2 = ((points - centers[0]) ** 2).sum(axis=1)
    for c in range(1, k):
        total = d2.sum()
        if total <= 0:
            centers[c] = points[rng.integers(n)]
            continue
        centers[c] = points[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, ((points - centers[c]) ** 2).sum(axis=1))
    return centers


# ---------------------------------------------------------------------------
# hierarchical semantic IDs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SemanticId:
    path: tuple

    def __post_init__(self):
        if any(c < 0 for c in self.path):
            raise ValueError(f"negative code in semantic id {self.path}")


def build_semantic_ids(item_embeddings: np.ndarray, levels: int, branch_per_level: int,
                       seed: int = 0, dedup: bool = True):
    """Nested k-means code paths, one per item.

    Level 1 clusters all items; each deeper level clusters within its
    parent cluster. Items sharing a full path get the final code expanded
    lexicographically with a residual-rank index (distance to the final
    center, ties by item index), so paths are unique. Returns
    ``(paths, level_sizes)`` where ``paths`` is (n_items, levels) int.
    """
    emb = np.asarray(item_embeddings, dtype=np.float64)
    n = emb.shape[0]
    if levels < 1:
        raise ValueError("levels must be >= 1")
    if branch_per_level < 2 and n > 1:
        raise ValueError("branch_per_level must be >= 2")
    if not dedup and branch_per_level ** levels < n:
        raise ValueError(
            f"branch^levels = {branch_per_level ** levels} cannot address {n} items without dedup")

    paths = np.zeros((n, levels), dtype=np.int64)
    residual = np.zeros(n)
    groups = {(): np.arange(n)}
    for level in range(levels):
        next_groups = {}
        for gi, (prefix, idx) in enumerate(sorted(groups.items())):
            k = min(branch_per_level, len(idx))
            if k <= 1:
                paths[idx, level] = 0
                residual[idx] = 0.0
                next_groups[prefix + (0,)] = idx
                continue
            res = kmeans(emb[idx], k, seed=_hash_seed(seed, _TAG_SID, level, gi))
            paths[idx, level] = res.assignments
            residual[idx] = ((emb[idx] - res.centers[res.assignments]) ** 2).sum(axis=1)
            for c in range(k):
                next_groups[prefix + (c,)] = idx[res.assignments == c]
        groups = {p: i for p, i in next_groups.items() if len(i)}

    level_sizes = [branch_per_level] * levels
    if dedup:
        multiplicity = max(len(idx) for idx in groups.values())
        if multiplicity > 1:
            for idx in groups.values():
                # rank within the leaf bucket by residual distance, ties by item index
                order = idx[np.lexsort((idx, residual[idx]))]
                rank_of = {int(item): r for r, item in enumerate(order)}
                paths[idx, levels - 1] = paths[idx, levels - 1] * multiplicity + \
                    np.array([rank_of[int(i)] for i in idx])
            level_sizes[-1] = branch_per_level * multiplicity
    return paths, level_sizes


def _hash_seed(*parts) -> int:
    h = hashlib.sha256(",".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(h[:8], "little")


# ---------------------------------------------------------------------------
# records and instances
# ---------------------------------------------------------------------------

@dataclass
class Event:
    item: int
    sid: tuple
    content: tuple
    impression: int
    click: int
    conversion: int
    ecpm: float


@dataclass
class InteractionRecord:
    user_tokens: tuple
    context_tokens: tuple
    events: list

    def check_label_hierarchy(self) -> None:
        for e in self.events:
            if e.conversion and not e.click:
                raise ValueError("conversion without click")
            if e.click and not e.impression:
                raise ValueError("click without impression")


@dataclass
class Candidate:
    item: int
    sid: tuple
    ecpm: float
    is_positive: bool


@dataclass
class TrainingInstance:
    user_tokens: tuple
    context_tokens: tuple
    history: list          # Events with impression/click/conversion flags
    target_item: int
    target_sid: tuple
    candidates: list

    def positive_index(self) -> int:
        hits = [i for i, c in enumerate(self.candidates) if c.is_positive]
        if len(hits) != 1:
            raise ValueError(f"instance has {len(hits)} positives, expected exactly 1")
        return hits[0]


@dataclass
class TokenStream:
    types: np.ndarray
    ids: np.ndarray

    def __len__(self):
        return len(self.types)


def stream_from_instance(inst: TrainingInstance) -> TokenStream:
    """Flatten an instance's context and history into the U/X/C/I stream."""
    types, ids = [], []
    for u in inst.user_tokens:
        types.append(USER)
        ids.append(u)
    for x in inst.context_tokens:
        types.append(CONTEXT)
        ids.append(x)
    for e in inst.history:
        for c in e.content:
            types.append(CONTENT)
            ids.append(c)
        types.append(ITEM)
        ids.append(e.item)
    return TokenStream(np.asarray(types, dtype=np.int64), np.asarray(ids, dtype=np.int64))


# ---------------------------------------------------------------------------
# generator configuration
# ---------------------------------------------------------------------------

@dataclass
class DataConfig:
    num_items: int = 2000
    num_users: int = 5000
    levels: int = 2                  # nested clustering levels
    branch: int = 16                 # codes per clustering level
    latent_dim: int = 16
    gen_clusters: int = 16           # planted item clusters
    cluster_spread: float = 3.0
    item_noise: float = 0.6
    archetypes: int = 8
    affinity_sharpness: float = 2.5  # concentration of archetype preferences
    history_len: int = 64
    num_train: int = 256
    num_eval: int = 128
    candidates: int = 30
    hard_negative_frac: float = 0.5
    high_value_clusters: int = 4
    high_value_multiplier: float = 4.0
    ecpm_sigma: float = 0.35
    value_bias: float = 0.7          # exposure tilt toward valuable items
    click_floor: float = 0.08
    click_ceiling: float = 0.85
    conversion_rate: float = 0.35
    label_affinity_power: float = 1.0
    context_vocab: int = 8
    context_tokens: int = 2
    user_tokens: int = 1

    def fingerprint(self, seed: int) -> str:
        payload = json.dumps({"data": asdict(self), "seed": seed}, sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


@dataclass
class DatasetManifest:
    record_count: int
    config_fingerprint: str
    seed: int
    level_vocab_sizes: list
    item_count: int


@dataclass
class ItemWorld:
    """Generator-side item state: latents, planted clusters, values, sids."""
    latents: np.ndarray
    clusters: np.ndarray
    values: np.ndarray
    high_value: np.ndarray
    sid_paths: np.ndarray
    level_sizes: list


def build_item_world(cfg: DataConfig, seed: int) -> ItemWorld:
    rng = rng_for(seed, _TAG_ITEMS)
    centers = rng.standard_normal((cfg.gen_clusters, cfg.latent_dim)) * cfg.cluster_spread
    clusters = np.repeat(np.arange(cfg.gen_clusters),
                         -(-cfg.num_items // cfg.gen_clusters))[:cfg.num_items]
    clusters = rng.permutation(clusters)
    latents = centers[clusters] + rng.standard_normal((cfg.num_items, cfg.latent_dim)) * cfg.item_noise
    high = np.zeros(cfg.num_items, dtype=bool)
    hv_clusters = np.arange(cfg.high_value_clusters)
    high[np.isin(clusters, hv_clusters)] = True
    values = rng.lognormal(mean=0.0, sigma=cfg.ecpm_sigma, size=cfg.num_items)
    values[high] *= cfg.high_value_multiplier
    paths, level_sizes = build_semantic_ids(latents, cfg.levels, cfg.branch, seed=seed)
    return ItemWorld(latents=latents, clusters=clusters, values=values,
                     high_value=high, sid_paths=paths, level_sizes=level_sizes)


def sample_value_target(ecpms, rng: np.random.Generator) -> int:
    """Draw an index with probability proportional to its value label."""
    ecpms = np.asarray(ecpms, dtype=np.float64)
    if (ecpms < 0).any():
        raise ValueError("ecpm values must be nonnegative")
    total = ecpms.sum()
    if total <= 0:
        raise ValueError("all ecpm values are zero; caller must fall back to uniform")
    return int(rng.choice(len(ecpms), p=ecpms / total))


class SyntheticGenerator:
    """Deterministic record sampler; each record draws from a per-user stream."""

    def __init__(self, cfg: DataConfig, seed: int):
        self.cfg = cfg
        self.seed = seed
        self.world = build_item_world(cfg, seed)
        arng = rng_for(seed, _TAG_ARCHETYPES)
        logits = arng.standard_normal((cfg.archetypes, cfg.gen_clusters)) * cfg.affinity_sharpness
        e = np.exp(logits - logits.max(axis=1, keepdims=True))
        self.affinity = e / e.sum(axis=1, keepdims=True)
        # exposure propensity: affinity tilted toward valuable items
        self._value_tilt = self.world.values ** cfg.value_bias
        self._cluster_members = [np.flatnonzero(self.world.clusters == c)
                                 for c in range(cfg.gen_clusters)]
        self._sid1_members = {}
        for i, p in enumerate(self.world.sid_paths[:, 0]):
            self._sid1_members.setdefault(int(p), []).append(i)
        self._sid1_members = {k: np.asarray(v) for k, v in self._sid1_members.items()}

    def _click_prob(self, archetype: int, items) -> np.ndarray:
        aff = self.affinity[archetype][self.world.clusters[items]]
        rel = aff / self.affinity[archetype].max()
        return self.cfg.click_floor + (self.cfg.click_ceiling - self.cfg.click_floor) * rel

    def _label(self, archetype: int, items) -> np.ndarray:
        p = self._click_prob(archetype, items)
        return self.world.values[items] * p ** self.cfg.label_affinity_power

    def _sample_items(self, archetype: int, count: int, rng) -> np.ndarray:
        w = self.affinity[archetype][self.world.clusters] * self._value_tilt
        return rng.choice(self.cfg.num_items, size=count, p=w / w.sum())

    def record(self, user_id: int):
        """One (InteractionRecord, TrainingInstance) pair for a user."""
        cfg = self.cfg
        rng = rng_for(self.seed, _TAG_USER, user_id)
        archetype = int(rng.integers(cfg.archetypes))
        context = tuple(int(x) for x in rng.integers(cfg.context_vocab, size=cfg.context_tokens))
        user_tokens = (user_id,) * cfg.user_tokens

        items = self._sample_items(archetype, cfg.history_len + 32, rng)
        pclick = self._click_prob(archetype, items)
        clicks = rng.random(len(items)) < pclick
        # target: the first clicked item past the history window
        target_pos = None
        for j in range(cfg.history_len, len(items)):
            if clicks[j]:
                target_pos = j
                break
        if target_pos is None:
            target_pos = cfg.history_len
            clicks[target_pos] = True

        events = []
        for j in range(cfg.history_len):
            it = int(items[j])
            conv = bool(clicks[j]) and rng.random() < cfg.conversion_rate
            events.append(Event(
                item=it, sid=tuple(int(c) for c in self.world.sid_paths[it]),
                content=(int(self.world.sid_paths[it, 0]),),
                impression=1, click=int(clicks[j]), conversion=int(conv),
                ecpm=float(self._label(archetype, np.array([it]))[0])))
        tgt = int(items[target_pos])
        conv = rng.random() < cfg.conversion_rate
        target_event = Event(
            item=tgt, sid=tuple(int(c) for c in self.world.sid_paths[tgt]),
            content=(int(self.world.sid_paths[tgt, 0]),),
            impression=1, click=1, conversion=int(conv),
            ecpm=float(self._label(archetype, np.array([tgt]))[0]))

        record = InteractionRecord(user_tokens=user_tokens, context_tokens=context,
                                   events=events + [target_event])
        record.check_label_hierarchy()

        candidates = self._candidate_set(archetype, tgt, rng)
        instance = TrainingInstance(
            user_tokens=user_tokens, context_tokens=context, history=events,
            target_item=tgt, target_sid=target_event.sid, candidates=candidates)
        return record, instance

    def _candidate_set(self, archetype: int, target: int, rng) -> list:
        cfg = self.cfg
        n_neg = cfg.candidates - 1
        n_hard = int(round(cfg.hard_negative_frac * n_neg))
        pool_hard = self._sid1_members[int(self.world.sid_paths[target, 0])]
        pool_hard = pool_hard[pool_hard != target]
        n_hard = min(n_hard, len(pool_hard))
        hard = rng.choice(pool_hard, size=n_hard, replace=False) if n_hard else np.empty(0, np.int64)
        taken = set(hard.tolist()) | {target}
        uniform = []
        while len(uniform) < n_neg - n_hard:
            cand = int(rng.integers(cfg.num_items))
            if cand not in taken:
                uniform.append(cand)
                taken.add(cand)
        negs = np.concatenate([hard.astype(np.int64), np.asarray(uniform, dtype=np.int64)])
        order = rng.permutation(cfg.candidates)
        ids = np.concatenate([[target], negs])[order]
        labels = self._label(archetype, ids)
        return [Candidate(item=int(i), sid=tuple(int(c) for c in self.world.sid_paths[i]),
                          ecpm=float(y), is_positive=bool(i == target))
                for i, y in zip(ids, labels)]


# ---------------------------------------------------------------------------
# file I/O
# ---------------------------------------------------------------------------

def _instance_to_json(inst: TrainingInstance) -> str:
    obj = {
        "user_tokens": list(inst.user_tokens),
        "context_tokens": list(inst.context_tokens),
        "history": [{"item": e.item, "sid": list(e.sid),
                     "flags": [e.impression, e.click, e.conversion],
                     "ecpm": float(e.ecpm)} for e in inst.history],
        "target": {"item": inst.target_item, "sid": list(inst.target_sid)},
        "candidates": [{"item": c.item, "sid": list(c.sid), "ecpm": float(c.ecpm),
                        "is_positive": c.is_positive} for c in inst.candidates],
    }
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _instance_from_json(obj: dict) -> TrainingInstance:
    history = [Event(item=h["item"], sid=tuple(h["sid"]), content=(h["sid"][0],),
                     impression=h["flags"][0], click=h["flags"][1],
                     conversion=h["flags"][2], ecpm=h["ecpm"])
               for h in obj["history"]]
    candidates = [Candidate(item=c["item"], sid=tuple(c["sid"]), ecpm=c["ecpm"],
                            is_positive=c["is_positive"]) for c in obj["candidates"]]
    return TrainingInstance(
        user_tokens=tuple(obj["user_tokens"]), context_tokens=tuple(obj["context_tokens"]),
        history=history, target_item=obj["target"]["item"],
        target_sid=tuple(obj["target"]["sid"]), candidates=candidates)


def generate_synthetic_dataset(cfg: DataConfig, seed: int, out_dir) -> DatasetManifest:
    """Write interactions, train/eval instances, item table, and manifest.

    Byte-deterministic for a fixed (config, seed): every record derives
    solely from a per-user seed stream.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    gen = SyntheticGenerator(cfg, seed)
    total = cfg.num_train + cfg.num_eval
    if total > cfg.num_users:
        raise ValueError(f"{total} records need {total} distinct users, have {cfg.num_users}")
    user_ids = rng_for(seed, _TAG_ITEMS, 7).permutation(cfg.num_users)[:total]

    try:
        with open(out / "interactions.jsonl", "w") as f_int, \
             open(out / "train.jsonl", "w") as f_tr, \
             open(out / "eval.jsonl", "w") as f_ev:
            for r, uid in enumerate(user_ids):
                record, inst = gen.record(int(uid))
                f_int.write(json.dumps({
                    "user_tokens": list(record.user_tokens),
                    "context_tokens": list(record.context_tokens),
                    "events": [{"item": e.item, "sid": list(e.sid), "content": list(e.content),
                                "impression": e.impression, "click": e.click,
                                "conversion": e.conversion, "ecpm": float(e.ecpm)}
                               for e in record.events],
                }, sort_keys=True, separators=(",", ":")) + "\n")
                (f_tr if r < cfg.num_train else f_ev).write(_instance_to_json(inst) + "\n")
        with open(out / "items.jsonl", "w") as f_it:
            for i in range(cfg.num_items):
                f_it.write(json.dumps({
                    "item": i, "cluster": int(gen.world.clusters[i]),
                    "sid": [int(c) for c in gen.world.sid_paths[i]],
                    "value": float(gen.world.values[i]),
                    "high_value": bool(gen.world.high_value[i]),
                }, sort_keys=True, separators=(",", ":")) + "\n")
    except OSError as exc:
        raise OSError(f"dataset write failed under {out}: {exc}") from exc

    manifest = DatasetManifest(
        record_count=total, config_fingerprint=cfg.fingerprint(seed), seed=seed,
        level_vocab_sizes=[int(v) for v in gen.world.level_sizes],
        item_count=cfg.num_items)
    with open(out / "manifest.json", "w") as f:
        json.dump(asdict(manifest), f, sort_keys=True, indent=2)
        f.write("\n")
    return manifest


def load_manifest(data_dir) -> DatasetManifest:
    with open(Path(data_dir) / "manifest.json") as f:
        return DatasetManifest(**json.load(f))


def load_dataset(path):
    """Yield TrainingInstances from a jsonl file; bad lines report their number."""
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                yield _instance_from_json(json.loads(line))
            except (KeyError, ValueError, TypeError) as exc:
                raise ValueError(f"{path}: malformed record at line {lineno}: {exc}") from exc


def batches(instances: list, size: int, seed: int, epoch: int):
    """Deterministic per-(seed, epoch) shuffle, then fixed-size chunks."""
    if size < 1:
        raise ValueError("batch size must be >= 1")
    perm = rng_for(seed, _TAG_BATCH, epoch).permutation(len(instances))
    for lo in range(0, len(instances), size):
        yield [instances[i] for i in perm[lo:lo + size]]
