"""End-to-end compression pipeline: supernet, search, prune, finetune, report.

Every stage writes into its own directory under the run's output directory
and stamps its artifacts with a hash of the configuration sections it
depends on. A later stage recomputes that hash from its own configuration
and refuses artifacts that do not match, naming the stage to rerun.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import yaml

from .config import DIMENSIONS, PRESETS, PruningPolicy, VitConfig
from .data import Dataset, DatasetSpec, read_tensor, synth_dataset, write_tensor
from .flops import batch_cost, cost, resolve_budget
from .hsic import KernelConfig
from .pruning import RetentionPlan, build_retention_plan
from .search import SearchState, bounds_vector, search
from .vit import TrainConfig, evaluate, finetune, forward, select_by_plan, supernet_train

logger = logging.getLogger(__name__)

CRITERIA = ("dependency", "magnitude", "random")
STAGES = ("pretrain", "search", "prune", "finetune", "eval", "report")
# configuration sections each stage's outputs depend on (cumulative)
_STAGE_SECTIONS = {
    "pretrain": ("model", "data", "train", "budget", "rho_max", "seed", "sigma", "pretrain"),
}
_STAGE_SECTIONS["search"] = _STAGE_SECTIONS["pretrain"] + ("prune", "search")
_STAGE_SECTIONS["prune"] = _STAGE_SECTIONS["search"]
_STAGE_SECTIONS["finetune"] = _STAGE_SECTIONS["prune"] + ("finetune",)
_STAGE_SECTIONS["eval"] = _STAGE_SECTIONS["finetune"]
_STAGE_SECTIONS["report"] = _STAGE_SECTIONS["eval"] + ("report",)


class StageError(Exception):
    """A stage could not find usable artifacts from an earlier stage."""

    def __init__(self, stage: str, kind: str, message: str):
        super().__init__(message)
        self.stage = stage
        self.kind = kind

    def to_dict(self) -> dict:
        return {"error": self.kind, "stage": self.stage, "message": str(self)}


# -- configuration -------------------------------------------------------------------


@dataclass(frozen=True)
class StepConfig:
    steps: int
    lr: float


@dataclass(frozen=True)
class SearchConfig:
    init: int = 20
    iterations: int = 30
    restarts: int = 8
    xi: float = 0.0
    dims: tuple[str, ...] = DIMENSIONS


@dataclass(frozen=True)
class PruneConfig:
    calib_batch: int = 128
    criterion: str = "dependency"


@dataclass(frozen=True)
class ReportConfig:
    attention_dump: bool = True


@dataclass(frozen=True)
class ExperimentConfig:
    model: VitConfig = field(default_factory=lambda: PRESETS["tiny"]())
    data: DatasetSpec = DatasetSpec()
    train: TrainConfig = TrainConfig()
    budget: float = 0.4
    rho_max: tuple[float, float, float] = (0.9, 0.9, 0.9)
    seed: int = 0
    sigma: float = 1.0
    pretrain: StepConfig = StepConfig(steps=400, lr=0.05)
    search: SearchConfig = SearchConfig()
    prune: PruneConfig = PruneConfig()
    finetune: StepConfig = StepConfig(steps=200, lr=0.01)
    report: ReportConfig = ReportConfig()
    out: str = "runs/default"

    def __post_init__(self):
        if not self.budget > 0:
            raise ValueError(f"budget must be a fraction in (0, 1] or a positive MAC count, got {self.budget}")
        if self.budget > 1 and self.budget != int(self.budget):
            raise ValueError(f"absolute budgets are whole MAC counts, got {self.budget}")
        if len(self.rho_max) != 3 or not all(0 <= r < 1 for r in self.rho_max):
            raise ValueError(f"rho_max needs one value in [0, 1) per dimension, got {self.rho_max}")
        for name, n in (("pretrain.steps", self.pretrain.steps), ("finetune.steps", self.finetune.steps),
                        ("search.iterations", self.search.iterations), ("prune.calib_batch", self.prune.calib_batch)):
            if int(n) != n or n < 1:
                raise ValueError(f"{name} must be a positive integer, got {n}")
        if self.search.init < 2:
            raise ValueError(f"search.init must be at least 2, got {self.search.init}")
        if not isinstance(self.seed, int) or isinstance(self.seed, bool) or self.seed < 0:
            raise ValueError(f"seed must be a non-negative integer, got {self.seed!r}")
        if not self.search.dims or set(self.search.dims) - set(DIMENSIONS):
            raise ValueError(f"search.dims must be a non-empty subset of {DIMENSIONS}, got {self.search.dims}")
        if self.prune.criterion not in CRITERIA:
            raise ValueError(f"prune.criterion must be one of {CRITERIA}, got {self.prune.criterion!r}")
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")

    @property
    def rho(self) -> dict[str, float]:
        return dict(zip(DIMENSIONS, self.rho_max))

    @property
    def kernel(self) -> KernelConfig:
        return KernelConfig(self.sigma)

    @property
    def budget_macs(self) -> int:
        return resolve_budget(self.model, self.budget)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["model"] = self.model.to_dict()
        for key in ("data", "train", "pretrain", "search", "prune", "finetune", "report"):
            d[key] = asdict(d[key])
        del d["train"]["lr"]  # each training stage carries its own rate
        d["search"]["dims"] = list(self.search.dims)
        d["rho_max"] = self.rho
        return d

    @classmethod
    def from_dict(cls, d: dict | None) -> "ExperimentConfig":
        d = copy.deepcopy(d or {})
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        base = cls()
        kw = {}
        if "model" in d:
            m = d["model"]
            if isinstance(m, str):
                if m not in PRESETS:
                    raise ValueError(f"unknown model preset {m!r}; choose from {sorted(PRESETS)}")
                kw["model"] = PRESETS[m]()
            else:
                m = dict(m)
                preset = m.pop("preset", None)
                start = PRESETS[preset]() if preset else base.model
                try:
                    kw["model"] = replace(start, **m)
                except TypeError as e:
                    raise ValueError(f"bad keys in config section 'model': {e}") from None
        for key in ("data", "train", "pretrain", "search", "prune", "finetune", "report"):
            if key in d:
                sub = dict(d[key] or {})
                if key == "train" and "lr" in sub:
                    raise ValueError("set pretrain.lr and finetune.lr instead of train.lr")
                if key == "search" and "dims" in sub:
                    sub["dims"] = parse_dims(sub["dims"])
                try:
                    kw[key] = replace(getattr(base, key), **sub)
                except TypeError as e:
                    raise ValueError(f"bad keys in config section {key!r}: {e}") from None
        if "rho_max" in d:
            r = d["rho_max"]
            kw["rho_max"] = (tuple(float(r[k]) for k in DIMENSIONS) if isinstance(r, dict)
                             else tuple(np.broadcast_to(np.asarray(r, dtype=float), (3,)).tolist()))
        for key in ("budget", "seed", "sigma", "out"):
            if key in d:
                kw[key] = d[key]
        if "budget" in kw:
            kw["budget"] = float(kw["budget"])
        return cls(**kw)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        text = Path(path).read_text()
        return cls.from_dict(yaml.safe_load(text))

    def dumps(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def with_overrides(self, seed=None, out=None, budget=None, dims=None, criterion=None) -> "ExperimentConfig":
        kw = {}
        if seed is not None:
            kw["seed"] = int(seed)
        if out is not None:
            kw["out"] = str(out)
        if budget is not None:
            kw["budget"] = float(budget)
        if dims is not None:
            kw["search"] = replace(self.search, dims=parse_dims(dims))
        if criterion is not None:
            kw["prune"] = replace(self.prune, criterion=criterion)
        return replace(self, **kw)

    def stage_hash(self, stage: str) -> str:
        d = self.to_dict()
        payload = {k: d[k] for k in _STAGE_SECTIONS[stage]}
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


def parse_dims(dims) -> tuple[str, ...]:
    if isinstance(dims, str):
        dims = [t for t in dims.replace("+", ",").split(",") if t.strip()]
    out = tuple(t.strip() for t in dims)
    bad = set(out) - set(DIMENSIONS)
    if not out or bad:
        raise ValueError(f"dims must be a non-empty subset of {DIMENSIONS}, got {list(dims)}")
    # canonical order keeps hashes independent of how the user listed them
    return tuple(d for d in DIMENSIONS if d in out)


# -- artifact storage ----------------------------------------------------------------


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def save_weights(directory, weights: dict, config_hash: str, stage: str, extra: dict | None = None) -> None:
    """One MDVP file per parameter plus a manifest carrying the config hash and file digests."""
    d = Path(directory)
    (d / "weights").mkdir(parents=True, exist_ok=True)
    params = {}
    for name in sorted(weights):
        f = d / "weights" / f"{name}.mdvp"
        write_tensor(f, weights[name], version=2)
        params[name] = {"file": f"weights/{name}.mdvp", "shape": list(np.shape(weights[name])),
                        "sha256": _sha256(f)}
    _write_json(d / "manifest.json", {"stage": stage, "config_hash": config_hash, "params": params,
                                      **(extra or {})})


def _read_stamped(path: Path, stage: str, config_hash: str) -> dict:
    if not path.exists():
        raise StageError(stage, "missing_artifact", f"{path} not found; run the '{stage}' stage first")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise StageError(stage, "corrupt_artifact", f"{path}: {e}; rerun the '{stage}' stage") from None
    if doc.get("config_hash") != config_hash:
        raise StageError(stage, "config_mismatch",
                         f"{path} was produced by config {doc.get('config_hash')}, current config is "
                         f"{config_hash}; rerun the '{stage}' stage")
    return doc


def load_weights(directory, config_hash: str, stage: str) -> tuple[dict, dict]:
    d = Path(directory)
    manifest = _read_stamped(d / "manifest.json", stage, config_hash)
    weights = {}
    for name, meta in manifest["params"].items():
        f = d / meta["file"]
        if not f.exists() or _sha256(f) != meta["sha256"]:
            raise StageError(stage, "corrupt_artifact", f"{f} is missing or altered; rerun the '{stage}' stage")
        weights[name] = read_tensor(f)
    return weights, manifest


# -- shared helpers ------------------------------------------------------------------


def dataset(cfg: ExperimentConfig) -> Dataset:
    spec = cfg.data
    m = cfg.model
    if (spec.image_size, spec.patch_size, spec.channels) != (m.image_size, m.patch_size, m.channels):
        raise ValueError("dataset image geometry does not match the model config")
    if spec.num_classes != m.num_classes:
        raise ValueError(f"dataset has {spec.num_classes} classes, model predicts {m.num_classes}")
    return synth_dataset(spec, cfg.seed)


def calibration_batch(cfg: ExperimentConfig, data: Dataset) -> np.ndarray:
    n = len(data.train)
    idx = np.sort(np.random.default_rng([cfg.seed, 7]).choice(n, size=min(cfg.prune.calib_batch, n), replace=False))
    return data.train.images[idx]


def inherited_accuracy(cfg: ExperimentConfig, weights: dict, policy: PruningPolicy, calib: np.ndarray,
                       images: np.ndarray, labels: np.ndarray) -> tuple[float, RetentionPlan]:
    """Accuracy of a sub-model that inherits supernet weights, ranked on the calibration batch."""
    plan = build_retention_plan(cfg.model, weights, policy, calib, cfg.kernel, cfg.prune.criterion, cfg.seed)
    sub = select_by_plan(weights, plan.neurons, plan.heads)
    return evaluate(cfg.model, sub, policy, images, labels, tokens=plan.tokens, kernel=cfg.kernel), plan


def _train_cfg(cfg: ExperimentConfig, stage: StepConfig) -> TrainConfig:
    return replace(cfg.train, lr=stage.lr)


def _out(cfg: ExperimentConfig, stage: str) -> Path:
    return Path(cfg.out) / stage


def _tokens_of(plan: RetentionPlan) -> list[np.ndarray]:
    return [np.asarray(t, dtype=np.int64) for t in plan.tokens]


# -- stages ----------------------------------------------------------------------------


def cmd_pretrain(cfg: ExperimentConfig, data: Dataset | None = None) -> dict:
    t0 = time.perf_counter()
    data = data or dataset(cfg)
    log: list[float] = []
    weights = supernet_train(cfg.model, data.train.images, data.train.labels, cfg.budget_macs,
                             cfg.pretrain.steps, _train_cfg(cfg, cfg.pretrain), seed=cfg.seed,
                             rho_max=cfg.rho, kernel=cfg.kernel, log=log)
    save_weights(_out(cfg, "pretrain"), weights, cfg.stage_hash("pretrain"), "pretrain",
                 {"final_loss": float(np.mean(log[-10:])), "wall_clock": time.perf_counter() - t0})
    return weights


def run_search(cfg: ExperimentConfig, weights: dict, data: Dataset, dims=None) -> SearchState:
    calib = calibration_batch(cfg, data)
    evaluator = lambda p: inherited_accuracy(cfg, weights, p, calib, data.val.images, data.val.labels)[0]  # noqa: E731
    return search(evaluator, cfg.model, cfg.budget_macs, m=cfg.search.init, iterations=cfg.search.iterations,
                  seed=cfg.seed, rho_max=cfg.rho, dims=dims or cfg.search.dims, xi=cfg.search.xi,
                  restarts=cfg.search.restarts)


def cmd_search(cfg: ExperimentConfig, data: Dataset | None = None) -> SearchState:
    t0 = time.perf_counter()
    weights, _ = load_weights(_out(cfg, "pretrain"), cfg.stage_hash("pretrain"), "pretrain")
    data = data or dataset(cfg)
    state = run_search(cfg, weights, data)
    h = cfg.stage_hash("search")
    out = _out(cfg, "search")
    out.mkdir(parents=True, exist_ok=True)
    (out / "history.jsonl").write_text("".join(json.dumps({"config_hash": h, **r}, sort_keys=True) + "\n"
                                               for r in state.history))
    policy = state.best_policy
    _write_json(out / "policy.json", {
        "config_hash": h, "stage": "search", "policy": policy.to_dict(),
        "vector": [float(x) for x in state.best_vector], "accuracy": state.best_value,
        "exact_cost": int(cost(cfg.model, policy).total), "budget": cfg.budget_macs,
        "dims": list(cfg.search.dims), "evaluations": len(state.values),
        "stall_iteration": state.stall_iteration(), "wall_clock": time.perf_counter() - t0,
    })
    return state


def load_policy(cfg: ExperimentConfig) -> tuple[PruningPolicy, dict]:
    doc = _read_stamped(_out(cfg, "search") / "policy.json", "search", cfg.stage_hash("search"))
    return PruningPolicy.from_dict(doc["policy"]), doc


def prune_model(cfg: ExperimentConfig, weights: dict, policy: PruningPolicy, data: Dataset):
    plan = build_retention_plan(cfg.model, weights, policy, calibration_batch(cfg, data), cfg.kernel,
                                cfg.prune.criterion, cfg.seed)
    return select_by_plan(weights, plan.neurons, plan.heads), plan


def cmd_prune(cfg: ExperimentConfig, data: Dataset | None = None) -> tuple[dict, RetentionPlan]:
    t0 = time.perf_counter()
    weights, _ = load_weights(_out(cfg, "pretrain"), cfg.stage_hash("pretrain"), "pretrain")
    policy, _ = load_policy(cfg)
    data = data or dataset(cfg)
    sub, plan = prune_model(cfg, weights, policy, data)
    h = cfg.stage_hash("prune")
    out = _out(cfg, "prune")
    save_weights(out, sub, h, "prune", {"policy": policy.to_dict(), "wall_clock": time.perf_counter() - t0})
    _write_json(out / "plan.json", {"config_hash": h, "stage": "prune", **plan.to_dict()})
    return sub, plan


def _load_plan(cfg: ExperimentConfig) -> RetentionPlan:
    doc = _read_stamped(_out(cfg, "prune") / "plan.json", "prune", cfg.stage_hash("prune"))
    return RetentionPlan.from_dict(doc)


def cmd_finetune(cfg: ExperimentConfig, data: Dataset | None = None) -> dict:
    t0 = time.perf_counter()
    sub, manifest = load_weights(_out(cfg, "prune"), cfg.stage_hash("prune"), "prune")
    policy = PruningPolicy.from_dict(manifest["policy"])
    plan = _load_plan(cfg)
    data = data or dataset(cfg)
    log: list[float] = []
    tuned = finetune(cfg.model, sub, policy, data.train.images, data.train.labels, cfg.finetune.steps,
                     _train_cfg(cfg, cfg.finetune), seed=cfg.seed, tokens=_tokens_of(plan), kernel=cfg.kernel,
                     log=log)
    save_weights(_out(cfg, "finetune"), tuned, cfg.stage_hash("finetune"), "finetune",
                 {"policy": policy.to_dict(), "final_loss": float(np.mean(log[-10:])),
                  "wall_clock": time.perf_counter() - t0})
    return tuned


def cmd_eval(cfg: ExperimentConfig, data: Dataset | None = None) -> dict:
    """Holdout accuracies of the unpruned supernet, the pruned model, and the finetuned model."""
    t0 = time.perf_counter()
    full, _ = load_weights(_out(cfg, "pretrain"), cfg.stage_hash("pretrain"), "pretrain")
    policy, search_doc = load_policy(cfg)
    pruned, _ = load_weights(_out(cfg, "prune"), cfg.stage_hash("prune"), "prune")
    tuned, _ = load_weights(_out(cfg, "finetune"), cfg.stage_hash("finetune"), "finetune")
    plan = _load_plan(cfg)
    data = data or dataset(cfg)
    m, hold, tokens = cfg.model, data.holdout, _tokens_of(plan)
    acc = {
        "baseline": evaluate(m, full, PruningPolicy.zeros(m.layers), hold.images, hold.labels),
        "inherited": search_doc["accuracy"],
        "post_prune": evaluate(m, pruned, policy, hold.images, hold.labels, tokens=tokens),
        "post_finetune": evaluate(m, tuned, policy, hold.images, hold.labels, tokens=tokens),
    }
    doc = {"config_hash": cfg.stage_hash("eval"), "stage": "eval", "accuracy": acc,
           "wall_clock": time.perf_counter() - t0}
    _write_json(_out(cfg, "eval") / "eval.json", doc)
    return doc


# -- report --------------------------------------------------------------------------


def reduction(baseline_total: int, pruned_total: int) -> float:
    return 1.0 - pruned_total / baseline_total


@dataclass
class RunReport:
    config_hash: str
    budget: int
    dims: list[str]
    criterion: str
    baseline_flops: dict
    pruned_flops: dict
    policy: dict
    retained: dict
    reduction: float
    accuracy: dict
    history: str
    attention_dir: str | None = None
    ablation: list[dict] | None = None
    wall_clock: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "RunReport":
        r = cls(**d)
        expect = reduction(r.baseline_flops["total"], r.pruned_flops["total"])
        if r.reduction != expect:
            raise ValueError(f"report reduction {r.reduction} does not match recomputed {expect}")
        return r

    @classmethod
    def load(cls, path) -> "RunReport":
        return cls.from_dict(json.loads(Path(path).read_text()))


def dump_attention(cfg: ExperimentConfig, weights: dict, plan: RetentionPlan, calib: np.ndarray, directory) -> Path:
    """Per-head batch-mean attention maps of the unpruned model as text grids, plus which heads the plan keeps."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    _, trace = forward(cfg.model, weights, PruningPolicy.zeros(cfg.model.layers), calib, capture=True)
    index = {}
    for l, maps in enumerate(trace.attention):
        kept = set(int(h) for h in plan.heads[l])
        index[str(l)] = {str(h): h in kept for h in range(maps.shape[0])}
        for h, grid in enumerate(maps):
            np.savetxt(d / f"layer{l:02d}_head{h:02d}.txt", grid, fmt="%.6e")
    _write_json(d / "index.json", {"config_hash": cfg.stage_hash("report"), "kept": index})
    return d


def ablation_variants(cfg: ExperimentConfig) -> list[tuple[str, tuple[str, ...]]]:
    return [("joint", DIMENSIONS)] + [(f"{d}-only", (d,)) for d in DIMENSIONS]


def run_ablation(cfg: ExperimentConfig, weights: dict, data: Dataset) -> list[dict]:
    """Search, prune and finetune once per dimension restriction against the same supernet.

    Restrictions that cannot reach the budget even at maximum pruning, or whose
    feasible region is too thin to sample, are reported as infeasible.
    """
    rows = []
    m = cfg.model
    for name, dims in ablation_variants(cfg):
        floor = int(batch_cost(m, bounds_vector(m, cfg.rho, dims)[None])[0])
        row = {"variant": name, "dims": list(dims), "min_cost": floor, "feasible": floor <= cfg.budget_macs}
        if row["feasible"]:
            try:
                state = run_search(cfg, weights, data, dims)
            except RuntimeError as e:  # feasible region too thin for rejection sampling
                row["feasible"] = False
                row["reason"] = str(e)
                rows.append(row)
                continue
            policy = state.best_policy
            sub, plan = prune_model(cfg, weights, policy, data)
            tokens = _tokens_of(plan)
            tuned = finetune(m, sub, policy, data.train.images, data.train.labels, cfg.finetune.steps,
                             _train_cfg(cfg, cfg.finetune), seed=cfg.seed, tokens=tokens, kernel=cfg.kernel)
            hold = data.holdout
            row.update(policy=policy.to_dict(), exact_cost=int(cost(m, policy).total),
                       inherited=state.best_value,
                       post_prune=evaluate(m, sub, policy, hold.images, hold.labels, tokens=tokens),
                       post_finetune=evaluate(m, tuned, policy, hold.images, hold.labels, tokens=tokens))
        rows.append(row)
    return rows


def cmd_report(cfg: ExperimentConfig, data: Dataset | None = None, ablation: bool = False) -> RunReport:
    t0 = time.perf_counter()
    policy, search_doc = load_policy(cfg)
    eval_doc = _read_stamped(_out(cfg, "eval") / "eval.json", "eval", cfg.stage_hash("eval"))
    plan = _load_plan(cfg)
    m = cfg.model
    base, pruned = cost(m), cost(m, policy)
    out = _out(cfg, "report")
    attention_dir = None
    weights = None
    if cfg.report.attention_dump or ablation:
        weights, _ = load_weights(_out(cfg, "pretrain"), cfg.stage_hash("pretrain"), "pretrain")
        data = data or dataset(cfg)
    if cfg.report.attention_dump:
        dump_attention(cfg, weights, plan, calibration_batch(cfg, data), out / "attention")
        attention_dir = "attention"
    rows = run_ablation(cfg, weights, data) if ablation else None
    wall = {s: _wall(cfg, s) for s in ("pretrain", "search", "prune", "finetune", "eval")}
    wall["report"] = time.perf_counter() - t0
    report = RunReport(
        config_hash=cfg.stage_hash("report"), budget=cfg.budget_macs, dims=list(cfg.search.dims),
        criterion=cfg.prune.criterion, baseline_flops=base.to_dict(), pruned_flops=pruned.to_dict(),
        policy=policy.to_dict(),
        retained={"neuron": policy.neurons_kept(m), "head": policy.heads_kept(m),
                  "seq": [k for _, k in policy.token_counts(m)]},
        reduction=reduction(base.total, pruned.total), accuracy=eval_doc["accuracy"],
        history="../search/history.jsonl", attention_dir=attention_dir, ablation=rows, wall_clock=wall,
    )
    _write_json(out / "report.json", report.to_dict())
    return report


def _wall(cfg: ExperimentConfig, stage: str) -> float | None:
    for name in ("manifest.json", "policy.json", "eval.json"):
        p = _out(cfg, stage) / name
        if p.exists():
            return json.loads(p.read_text()).get("wall_clock")
    return None


def run_pipeline(cfg: ExperimentConfig, ablation: bool = False) -> RunReport:
    data = dataset(cfg)
    cmd_pretrain(cfg, data)
    cmd_search(cfg, data)
    cmd_prune(cfg, data)
    cmd_finetune(cfg, data)
    cmd_eval(cfg, data)
    return cmd_report(cfg, data, ablation)


def strip_wall_clock(obj):
    """Copy of a JSON-like object without wall-clock fields, for repeat-run comparisons."""
    if isinstance(obj, dict):
        return {k: strip_wall_clock(v) for k, v in obj.items() if k != "wall_clock"}
    if isinstance(obj, list):
        return [strip_wall_clock(v) for v in obj]
    return obj
