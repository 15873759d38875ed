"""Training loop, evaluation, ablation variant matrix, checkpoints."""

from __future__ import annotations

import dataclasses
import difflib
import hashlib
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import (
    DataConfig,
    batches,
    generate_synthetic_dataset,
    load_dataset,
    load_manifest,
    rng_for,
    sample_value_target,
)
from .losses import LossWeights
from .metrics import (
    ConsistencyReport,
    MetricsRow,
    consistency_report,
    hr_at_k,
    ndcg_at_k,
    rank_order,
    write_consistency,
    write_metrics,
)
from .model import ModelConfig, OneRankerModel
from .tensor import reverse_accumulate

_TAG_VALUE = 301

EVAL_KS = (1, 3, 5, 10, 15)


@dataclass
class TrainConfig:
    learning_rate: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 6
    batch_size: int = 8
    seed: int = 0
    threads: int = 1


@dataclass
class PathsConfig:
    data_dir: str = "data"
    out_dir: str = "runs"


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    train: TrainConfig = field(default_factory=TrainConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)
    variant: str = "full"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def fingerprint(self) -> str:
        payload = self.to_dict()
        payload.pop("paths")  # output locations don't affect results
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]

    def copy(self) -> "RunConfig":
        return config_from_dict(self.to_dict())


_SECTIONS = {"data": DataConfig, "model": ModelConfig, "loss": LossWeights,
             "train": TrainConfig, "paths": PathsConfig}


def config_from_dict(obj: dict) -> RunConfig:
    known_top = set(_SECTIONS) | {"variant"}
    for key in obj:
        if key not in known_top:
            raise ValueError(_unknown_key_message(key, known_top))
    kwargs = {}
    for section, cls in _SECTIONS.items():
        sub = obj.get(section, {})
        names = {f.name for f in dataclasses.fields(cls)}
        for key in sub:
            if key not in names:
                raise ValueError(_unknown_key_message(f"{section}.{key}",
                                                      {f"{section}.{n}" for n in names}))
        kwargs[section] = cls(**sub)
    if "variant" in obj:
        if obj["variant"] not in VARIANTS:
            raise ValueError(_unknown_key_message(obj["variant"], set(VARIANTS)))
        kwargs["variant"] = obj["variant"]
    return RunConfig(**kwargs)


def _unknown_key_message(key: str, valid) -> str:
    near = difflib.get_close_matches(key, sorted(valid), n=1)
    hint = f"; nearest valid name: {near[0]!r}" if near else ""
    return f"unknown config key {key!r}{hint}"


def load_config(path) -> RunConfig:
    with open(path) as f:
        return config_from_dict(json.load(f))


def save_config(cfg: RunConfig, path) -> None:
    with open(path, "w") as f:
        json.dump(cfg.to_dict(), f, sort_keys=True, indent=2)
        f.write("\n")


def set_dotted(obj: dict, dotted: str, raw: str) -> None:
    """Apply a --set section.key=value override onto a config dict."""
    parts = dotted.split(".")
    cur = obj
    for p in parts[:-1]:
        cur = cur.setdefault(p, {})
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    cur[parts[-1]] = value


# ---------------------------------------------------------------------------
# ablation variants
# ---------------------------------------------------------------------------

_S2_ONLY = {"model.use_ranker": False, "loss.beta": 0.0, "loss.gamma": 0.0}

VARIANTS: dict[str, dict] = {
    "full": {},
    "wo_dc_loss": {"loss.gamma": 0.0},
    "wo_s2_info": {"model.ranker_kv_s2": False},
    "s3_ranker_only": {"loss.gamma": 0.0, "model.ranker_kv_s2": False},
    "s2_only": dict(_S2_ONLY),
    "s2_wo_target": {**_S2_ONLY, "model.use_target_channel": False},
    "s2_wo_target_mda": {**_S2_ONLY, "model.use_target_channel": False,
                         "model.multi_task_heads": False},
    # the consistency/Step-2 ablation block anchors on the same S2 config
    "s2_baseline": dict(_S2_ONLY),
    "wo_ca_pri": {"model.cross_attention_first": False},
    "wo_h_mask": {"model.hetero_mask": False},
}


def apply_variant(base: RunConfig, name: str) -> RunConfig:
    if name not in VARIANTS:
        raise ValueError(_unknown_key_message(name, set(VARIANTS)))
    obj = base.to_dict()
    obj["variant"] = name
    for dotted, value in VARIANTS[name].items():
        section, key = dotted.split(".")
        obj[section][key] = value
    return config_from_dict(obj)


def ablation_matrix(base: RunConfig) -> list:
    """The baseline plus all nine named single- or chained-toggle variants."""
    return [apply_variant(base, name) for name in VARIANTS]


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class Adam:
    def __init__(self, params: dict, lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = {n: np.zeros_like(p.values) for n, p in params.items()}
        self.v = {n: np.zeros_like(p.values) for n, p in params.items()}
        self.t = 0

    def step(self, scale: float = 1.0) -> None:
        self.t += 1
        bc1 = 1.0 - self.b1 ** self.t
        bc2 = 1.0 - self.b2 ** self.t
        for name, p in self.params.items():
            g = p.grad * scale
            self.m[name] = self.b1 * self.m[name] + (1 - self.b1) * g
            self.v[name] = self.b2 * self.v[name] + (1 - self.b2) * g * g
            p.values -= (self.lr * (self.m[name] / bc1) /
                         (np.sqrt(self.v[name] / bc2) + self.eps)).astype(p.values.dtype)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def evaluate_model(model: OneRankerModel, instances, ks=EVAL_KS, epoch: int = 0,
                   split: str = "eval") -> list:
    """Mean HR@K and NDCG@K (eCPM-graded) over the instance set."""
    hr_sums = {k: 0.0 for k in ks}
    ndcg_sums = {k: 0.0 for k in ks}
    for inst in instances:
        scores = model.score_candidates(inst)
        ids = np.array([c.item for c in inst.candidates])
        gains = np.array([c.ecpm for c in inst.candidates])
        order = rank_order(scores, ids)
        ranked_ids = ids[order].tolist()
        positive = inst.candidates[inst.positive_index()].item
        for k in ks:
            hr_sums[k] += hr_at_k(ranked_ids, positive, k)
            ndcg_sums[k] += ndcg_at_k(order, gains, k)
    n = len(instances)
    rows = [MetricsRow(epoch, split, "hr", k, hr_sums[k] / n) for k in ks]
    rows += [MetricsRow(epoch, split, "ndcg", k, ndcg_sums[k] / n) for k in ks]
    return rows


def collect_consistency(model: OneRankerModel, instances) -> ConsistencyReport:
    s2s, s3s, ids = [], [], []
    for inst in instances:
        s2, s3 = model.both_stage_scores(inst)
        s2s.append(s2)
        s3s.append(s3)
        ids.append([c.item for c in inst.candidates])
    return consistency_report(s2s, s3s, ids)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, model: OneRankerModel, cfg: RunConfig) -> None:
    payload = {f"param::{name}": p.values for name, p in model.params().items()}
    meta = {"config": cfg.to_dict(), "fingerprint": cfg.fingerprint()}
    np.savez(path, __meta__=np.frombuffer(json.dumps(meta, sort_keys=True).encode(),
                                          dtype=np.uint8), **payload)


def load_checkpoint(path):
    """Rebuild the model and config recorded in a checkpoint."""
    with np.load(path) as blob:
        meta = json.loads(bytes(blob["__meta__"]).decode())
        cfg = config_from_dict(meta["config"])
        if cfg.fingerprint() != meta["fingerprint"]:
            raise ValueError("checkpoint fingerprint does not match its config")
        model = OneRankerModel(cfg.model, cfg.data, seed=cfg.train.seed)
        params = model.params()
        stored = {k[len("param::"):]: blob[k] for k in blob.files if k.startswith("param::")}
        if set(stored) != set(params):
            missing = set(params) ^ set(stored)
            raise ValueError(f"checkpoint parameter groups disagree: {sorted(missing)}")
        for name, p in params.items():
            if stored[name].shape != p.values.shape:
                raise ValueError(f"{name}: shape {stored[name].shape} != {p.values.shape}")
            p.values = stored[name].copy()
    return model, cfg


def evaluate_checkpoint(ckpt_path, data_path, ks=EVAL_KS):
    """Re-rank a dataset with a stored model; fingerprints must line up."""
    model, cfg = load_checkpoint(ckpt_path)
    data_dir = Path(data_path).parent
    manifest = load_manifest(data_dir)
    if manifest.config_fingerprint != cfg.data.fingerprint(cfg.train.seed):
        raise ValueError("dataset manifest fingerprint does not match checkpoint config")
    instances = list(load_dataset(data_path))
    return evaluate_model(model, instances, ks=ks), model, cfg


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    out_dir: Path
    checkpoint: Path
    metrics: Path
    config_echo: Path
    rows: list
    model: OneRankerModel
    cfg: RunConfig


def train(cfg: RunConfig, data_dir=None, out_dir=None, quiet: bool = False) -> TrainResult:
    """Joint optimization of the triadic loss; deterministic per seed."""
    data_dir = Path(data_dir if data_dir is not None else cfg.paths.data_dir)
    out_dir = Path(out_dir if out_dir is not None else cfg.paths.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    seed = cfg.train.seed

    manifest = load_manifest(data_dir)
    if manifest.config_fingerprint != cfg.data.fingerprint(seed):
        raise ValueError("dataset under {} was generated from a different data config/seed"
                         .format(data_dir))
    cfg = cfg.copy()
    if cfg.model.level_vocab_sizes:
        if list(cfg.model.level_vocab_sizes) != list(manifest.level_vocab_sizes):
            raise ValueError("configured level_vocab_sizes disagree with the dataset manifest")
    else:
        cfg.model.level_vocab_sizes = list(manifest.level_vocab_sizes)

    train_insts = list(load_dataset(data_dir / "train.jsonl"))
    eval_insts = list(load_dataset(data_dir / "eval.jsonl"))

    model = OneRankerModel(cfg.model, cfg.data, seed=seed)
    params = model.params()
    opt = Adam(params, lr=cfg.train.learning_rate, beta1=cfg.train.beta1,
               beta2=cfg.train.beta2, eps=cfg.train.eps)
    value_targets_needed = model.tasks.v > 0

    rows: list = []
    t0 = time.time()
    for epoch in range(1, cfg.train.epochs + 1):
        comp_sums: dict = {}
        step = 0
        for batch in batches(train_insts, cfg.train.batch_size, seed, epoch):
            opt.zero_grad()
            for inst in batch:
                vt = None
                if value_targets_needed:
                    vrng = rng_for(seed, _TAG_VALUE, epoch, step)
                    vt = sample_value_target([c.ecpm for c in inst.candidates], vrng)
                total, comps = model.losses_for_instance(inst, cfg.loss, vt)
                if not math.isfinite(comps["loss_total"]):
                    raise RuntimeError(
                        f"non-finite loss at epoch {epoch} step {step}: {comps}")
                reverse_accumulate(total)
                for k, v in comps.items():
                    comp_sums[k] = comp_sums.get(k, 0.0) + v
                step += 1
            opt.step(scale=1.0 / len(batch))
        for name, total_v in sorted(comp_sums.items()):
            rows.append(MetricsRow(epoch, "train", name, 0, total_v / step))
        rows.extend(evaluate_model(model, eval_insts, epoch=epoch))
        if not quiet:
            hr5 = next(r.value for r in rows
                       if r.epoch == epoch and r.metric == "hr" and r.k == 5)
            print(f"[{cfg.variant}] epoch {epoch}/{cfg.train.epochs} "
                  f"loss={comp_sums['loss_total'] / step:.4f} eval hr@5={hr5:.4f} "
                  f"({time.time() - t0:.1f}s)")

    metrics_path = out_dir / "metrics.csv"
    write_metrics(rows, metrics_path)
    ckpt_path = out_dir / "checkpoint.npz"
    save_checkpoint(ckpt_path, model, cfg)
    echo_path = out_dir / "config.json"
    save_config(cfg, echo_path)
    return TrainResult(out_dir=out_dir, checkpoint=ckpt_path, metrics=metrics_path,
                       config_echo=echo_path, rows=rows, model=model, cfg=cfg)


# ---------------------------------------------------------------------------
# multi-seed benchmark driver
# ---------------------------------------------------------------------------

@dataclass
class VariantOutcome:
    variant: str
    seed: int
    hr: dict
    ndcg: dict
    consistency: ConsistencyReport | None
    run_dir: Path


def run_benchmark(base: RunConfig, variants, seeds, out_root, quiet: bool = False,
                  with_consistency: bool = True) -> list:
    """Generate data, train, and evaluate each (seed, variant) pair.

    Datasets are shared across variants at the same seed so comparisons
    are paired.
    """
    out_root = Path(out_root)
    outcomes = []
    for seed in seeds:
        seed_dir = out_root / f"seed{seed}"
        data_dir = seed_dir / "data"
        data_cfg = base.data
        if not (data_dir / "manifest.json").exists():
            generate_synthetic_dataset(data_cfg, seed=seed, out_dir=data_dir)
        for name in variants:
            cfg = apply_variant(base, name)
            cfg.train.seed = seed
            run_dir = seed_dir / name
            result = train(cfg, data_dir=data_dir, out_dir=run_dir, quiet=quiet)
            final = [r for r in result.rows if r.epoch == cfg.train.epochs and r.split == "eval"]
            hr = {r.k: r.value for r in final if r.metric == "hr"}
            ndcg = {r.k: r.value for r in final if r.metric == "ndcg"}
            report = None
            if with_consistency and cfg.model.use_ranker:
                eval_insts = list(load_dataset(data_dir / "eval.jsonl"))
                report = collect_consistency(result.model, eval_insts)
                write_consistency(report, run_dir / "consistency.csv")
            outcomes.append(VariantOutcome(variant=name, seed=seed, hr=hr, ndcg=ndcg,
                                           consistency=report, run_dir=run_dir))
    return outcomes


def summarize_benchmark(outcomes) -> dict:
    """Per-variant means over seeds: HR/NDCG, top-1 overlap, median deviation."""
    summary: dict = {}
    for out in outcomes:
        entry = summary.setdefault(out.variant, {"hr": {}, "ndcg": {}, "seeds": [],
                                                 "top1_overlap": [], "median_dev": []})
        entry["seeds"].append(out.seed)
        for k, v in out.hr.items():
            entry["hr"].setdefault(k, []).append(v)
        for k, v in out.ndcg.items():
            entry["ndcg"].setdefault(k, []).append(v)
        if out.consistency is not None:
            entry["top1_overlap"].append(float(out.consistency.overlap[0]))
            entry["median_dev"].append(out.consistency.median_deviation())
    result = {}
    for name, entry in summary.items():
        result[name] = {
            "seeds": entry["seeds"],
            "hr": {k: float(np.mean(v)) for k, v in entry["hr"].items()},
            "ndcg": {k: float(np.mean(v)) for k, v in entry["ndcg"].items()},
        }
        if entry["top1_overlap"]:
            result[name]["top1_overlap"] = float(np.mean(entry["top1_overlap"]))
            result[name]["median_rank_deviation"] = float(np.mean(entry["median_dev"]))
    return result
