"""The alternating unsupervised search loop with its config and checkpoint plumbing."""
from __future__ import annotations

import configparser
import csv
import hashlib
import json
import logging
import os
import struct
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numkernel as nk
from .archsearch import (AUG_KINDS, READINGS, ArchAugSpec, alpha_similarity,
                         arch_discrimination_probs, augment_architecture, contrastive_search_loss)
from .disentangle import factor_weighted_loss, infer_factor_probs
from .graphio import (FactorSpec, Graph, GraphBatch, GraphDataset, Variant, batch_graphs,
                      default_factor_specs, make_synthetic_factors, parse_node_dataset,
                      parse_tudataset)
from .optim import AdamState, SGDState, adam_step, sgd_step, zero_grad
from .pretext import PretextTask, ViewAugSpec
from .supernet import Architecture, SuperNet, SupernetSpec

log = logging.getLogger(__name__)

MAGIC = b"DSGS"
FORMAT_VERSION = 1
CHECKPOINT_NAME = "checkpoint.dsgs"
METRICS_NAME = "metrics.csv"
SEED_ENV = "DSGAS_SEED"

# task → (hidden, layers, norm, factors)
TASK_DEFAULTS = {"graph_level": (32, 3, "batch", 4), "node_level": (128, 2, "layer", 3)}
# fields that may change between a checkpoint and a resumed run
_RESUMABLE = ("epochs", "output_dir", "checkpoint_every")


class SearchDiverged(FloatingPointError):
    """A loss went non-finite; carries the epoch and the step that produced it."""


@dataclass
class SearchConfig:
    # data
    data_format: str = "tudataset"         # tudataset | node | synthetic
    data_path: str = ""
    data_name: str = ""
    degree_features: bool = False
    node_files: tuple[str, str, str] = ("", "", "")  # edges, features, labels
    synthetic_graphs: int = 400
    synthetic_seed: int = 0
    synthetic_noise: float = 0.1
    synthetic_factors: list[FactorSpec] = field(default_factory=default_factor_specs)
    # model; None resolves to the task default
    task: str = "graph_level"
    num_factors: int | None = None
    num_layers: int | None = None
    hidden: int | None = None
    norm: str | None = None
    # pretext
    pretext: str | None = None
    temperature: float = 0.5
    view1: ViewAugSpec | None = None
    view2: ViewAugSpec | None = None
    num_negatives: int = 256
    # search
    epochs: int = 200
    batch_size: int = 128
    lr_w: float = 1e-3
    lr_alpha: float = 1e-2
    momentum: float = 0.0
    aug: str = "compose"
    r1: float = 1.1
    r2: float = 0.1
    r3: float = 0.05
    reading: str = "architecture"
    contrastive: bool = True
    detach_posterior: bool = False
    seed: int = 0
    # output
    output_dir: str | None = None
    checkpoint_every: int = 50

    def __post_init__(self):
        if self.task not in TASK_DEFAULTS:
            raise ValueError(f"unknown task {self.task!r}")
        hidden, layers, norm, factors = TASK_DEFAULTS[self.task]
        self.hidden = hidden if self.hidden is None else self.hidden
        self.num_layers = layers if self.num_layers is None else self.num_layers
        self.norm = norm if self.norm is None else self.norm
        self.num_factors = factors if self.num_factors is None else self.num_factors
        if self.pretext is None:
            self.pretext = "graph_contrastive" if self.task == "graph_level" else "node_contrastive"
        default = PretextTask(self.pretext) if self.pretext == "graph_contrastive" else None
        if self.view1 is None:
            self.view1 = default.view1 if default else ViewAugSpec("edge_perturb", 0.2)
        if self.view2 is None:
            self.view2 = default.view2 if default else ViewAugSpec("feature_mask", 0.2)
        if self.data_format not in ("tudataset", "node", "synthetic"):
            raise ValueError(f"unknown data format {self.data_format!r}")
        if self.aug not in AUG_KINDS:
            raise ValueError(f"unknown architecture augmentation {self.aug!r}")
        if self.reading not in READINGS:
            raise ValueError(f"unknown discrimination reading {self.reading!r}")
        positive = {"epochs": self.epochs + 1, "batch_size": self.batch_size,
                    "hidden": self.hidden, "num_layers": self.num_layers,
                    "num_factors": self.num_factors, "checkpoint_every": self.checkpoint_every,
                    "temperature": self.temperature}
        bad = [k for k, v in positive.items() if v <= 0]
        if bad or self.lr_w < 0 or self.lr_alpha < 0:
            raise ValueError(f"config values must be positive: {bad or ['learning rates']}")
        self.arch_aug()  # validates r1..r3

    def arch_aug(self) -> ArchAugSpec:
        return ArchAugSpec(self.aug, self.r1, self.r2, self.r3)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["view1"], out["view2"] = str(self.view1), str(self.view2)
        out["node_files"] = list(self.node_files)
        out["synthetic_factors"] = [
            {"variants": [[v.motif, v.signal] for v in f.variants], "min_nodes": f.min_nodes,
             "max_nodes": f.max_nodes, "level": f.level} for f in self.synthetic_factors]
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "SearchConfig":
        d = dict(d)
        for key in ("view1", "view2"):
            if isinstance(d.get(key), str):
                d[key] = ViewAugSpec.parse(d[key])
        if "node_files" in d:
            d["node_files"] = tuple(d["node_files"])
        if "synthetic_factors" in d:
            d["synthetic_factors"] = [f if isinstance(f, FactorSpec) else FactorSpec.from_dict(f)
                                      for f in d["synthetic_factors"]]
        return cls(**d)

    def fingerprint(self) -> bytes:
        """sha256 over everything that shapes the trajectory (not run length or output)."""
        d = {k: v for k, v in self.to_dict().items() if k not in _RESUMABLE}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).digest()


# ---------------------------------------------------------------- config files

_INI_KEYS = {
    "data": {"format": "data_format", "path": "data_path", "name": "data_name",
             "degree_features": "degree_features", "edges": None, "features": None, "labels": None},
    "model": {"task": "task", "factors": "num_factors", "layers": "num_layers",
              "hidden": "hidden", "norm": "norm"},
    "pretext": {"kind": "pretext", "temperature": "temperature", "view1": "view1",
                "view2": "view2", "negatives": "num_negatives"},
    "search": {"epochs": "epochs", "batch_size": "batch_size", "lr_w": "lr_w",
               "lr_alpha": "lr_alpha", "momentum": "momentum", "aug": "aug", "r1": "r1",
               "r2": "r2", "r3": "r3", "reading": "reading", "contrastive": "contrastive",
               "detach_posterior": "detach_posterior", "seed": "seed"},
    "output": {"dir": "output_dir", "checkpoint_every": "checkpoint_every"},
    "synthetic": {"graphs": "synthetic_graphs", "seed": "synthetic_seed",
                  "noise": "synthetic_noise"},
}


def _coerce(name: str, raw: str):
    kind = {f.name: f.type for f in fields(SearchConfig)}[name]
    if "bool" in kind:
        return raw.strip().lower() in ("1", "true", "yes", "on")
    if kind.startswith("int"):
        return int(raw)
    if kind.startswith("float"):
        return float(raw)
    if "ViewAugSpec" in kind:
        return ViewAugSpec.parse(raw)
    return raw.strip()


def parse_factor_sections(parser: configparser.ConfigParser) -> list[FactorSpec]:
    """[synthetic.factorN] sections: variants = motif/signal, motif/signal, ..."""
    names = sorted((s for s in parser.sections() if s.startswith("synthetic.factor")),
                   key=lambda s: int(s.rsplit("factor", 1)[1] or 0))
    specs = []
    for name in names:
        sec = parser[name]
        variants = tuple(Variant(*(p.strip() for p in item.split("/")))
                         for item in sec["variants"].split(","))
        specs.append(FactorSpec(variants, sec.getint("min_nodes", 6), sec.getint("max_nodes", 10),
                                sec.getfloat("level", 1.0)))
    return specs


def load_config(path, env=None) -> SearchConfig:
    """Read an INI search config; ``DSGAS_SEED`` in ``env`` overrides [search] seed."""
    env = os.environ if env is None else env
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    with open(path, encoding="utf-8") as fh:
        parser.read_file(fh)
    base = Path(path).parent
    kw: dict = {}
    for section, keys in _INI_KEYS.items():
        if not parser.has_section(section):
            continue
        for key, raw in parser[section].items():
            if key not in keys:
                raise ValueError(f"unknown key [{section}] {key}")
            if keys[key] is not None:
                kw[keys[key]] = _coerce(keys[key], raw)
    if parser.has_section("data"):
        data = parser["data"]
        if "edges" in data:
            kw["node_files"] = tuple(str(base / data[k]) for k in ("edges", "features", "labels"))
        if kw.get("data_path"):
            kw["data_path"] = str(base / kw["data_path"])
    factors = parse_factor_sections(parser)
    if factors:
        kw["synthetic_factors"] = factors
    if env.get(SEED_ENV):
        kw["seed"] = int(env[SEED_ENV])
    return SearchConfig(**kw)


def load_dataset(config: SearchConfig) -> GraphDataset:
    if config.data_format == "synthetic":
        return make_synthetic_factors(config.synthetic_graphs, config.synthetic_factors,
                                      seed=config.synthetic_seed, noise=config.synthetic_noise)
    if config.data_format == "node":
        return parse_node_dataset(*config.node_files, name=config.data_name)
    return parse_tudataset(config.data_path, config.data_name, config.degree_features)


# ---------------------------------------------------------------- checkpoints

def _blob(name: str, arr: np.ndarray) -> bytes:
    arr = np.asarray(arr, dtype="<f8")
    key = name.encode()
    head = struct.pack("<I", len(key)) + key + struct.pack("<I", arr.ndim)
    return head + struct.pack(f"<{arr.ndim}Q", *arr.shape) + arr.tobytes()


def save_checkpoint(path, config_hash: bytes, tensors: dict[str, np.ndarray], meta: dict) -> None:
    """"DSGS", u32 version, 32-byte config hash, u32 count, then named f64 blobs.

    ``meta`` travels as JSON bytes stored in a blob named ``__meta__``.
    """
    payload = dict(tensors)
    payload["__meta__"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8).astype(np.float64)
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION), config_hash, struct.pack("<I", len(payload))]
    parts += [_blob(k, v) for k, v in payload.items()]
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)


def load_checkpoint(path) -> tuple[bytes, dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    config_hash = raw[8:40]
    (count,) = struct.unpack_from("<I", raw, 40)
    pos, tensors = 44, {}
    for _ in range(count):
        (klen,) = struct.unpack_from("<I", raw, pos)
        name = raw[pos + 4:pos + 4 + klen].decode()
        pos += 4 + klen
        (ndim,) = struct.unpack_from("<I", raw, pos)
        shape = struct.unpack_from(f"<{ndim}Q", raw, pos + 4)
        pos += 4 + 8 * ndim
        size = int(np.prod(shape)) if ndim else 1
        tensors[name] = np.frombuffer(raw, "<f8", size, pos).reshape(shape).copy()
        pos += 8 * size
    meta = json.loads(tensors.pop("__meta__").astype(np.uint8).tobytes())
    return config_hash, tensors, meta


# ---------------------------------------------------------------- search state

@dataclass
class SearchResult:
    architecture: Architecture
    checkpoint: Path | None
    loss_w: list[float]
    loss_alpha: list[float]
    alpha_similarity: list[float]   # entry 0 is the initialization
    posterior: np.ndarray           # N × K, full dataset, final weights
    embeddings: np.ndarray
    labels: np.ndarray
    wallclock_s: float


class SearchState:
    """Everything a run needs to continue bit-exactly: model, optimizers, rng streams."""

    def __init__(self, config: SearchConfig, dataset: GraphDataset):
        self.config, self.dataset = config, dataset
        data_ss, view_ss, arch_ss, init_ss = np.random.SeedSequence(config.seed).spawn(4)
        init_seed = int(init_ss.generate_state(1)[0])
        spec = SupernetSpec(dataset.num_features, config.hidden, config.num_layers,
                            config.num_factors, config.task, config.norm)
        self.net = SuperNet(spec, seed=init_seed)
        self.task = PretextTask.default(config.pretext, config.hidden, seed=init_seed + 1,
                                        view1=config.view1, view2=config.view2,
                                        temperature=config.temperature,
                                        num_negatives=config.num_negatives)
        self.rngs = {"data": np.random.default_rng(data_ss), "view": np.random.default_rng(view_ss),
                     "arch": np.random.default_rng(arch_ss)}
        self.adam = AdamState()
        self.sgd = SGDState(momentum=config.momentum)
        self.epoch = 0
        self.curves: dict[str, list[float]] = {"loss_w": [], "loss_alpha": [],
                                               "alpha_similarity": [alpha_similarity(self.net)]}

    def weight_params(self) -> dict[str, nk.Tensor]:
        return {**self.net.weight_params(), **self.task.params(), **self.net.factor_params()}

    def tensors(self) -> dict[str, np.ndarray]:
        out = {f"param.{k}": t.data for k, t in {**self.net.named_tensors(), **self.task.params()}.items()}
        out.update({f"adam.m.{k}": v for k, v in self.adam.m.items()})
        out.update({f"adam.v.{k}": v for k, v in self.adam.v.items()})
        out.update({f"sgd.buf.{k}": v for k, v in self.sgd.buf.items()})
        return out

    def meta(self) -> dict:
        return {"config": self.config.to_dict(), "epoch": self.epoch, "curves": self.curves,
                "adam_t": self.adam.t,
                "rng": {k: r.bit_generator.state for k, r in self.rngs.items()}}

    def restore(self, tensors: dict[str, np.ndarray], meta: dict) -> None:
        params = {**self.net.named_tensors(), **self.task.params()}
        for name, t in params.items():
            saved = tensors[f"param.{name}"]
            if saved.shape != t.shape:
                raise ValueError(f"checkpoint tensor {name} has shape {saved.shape}, expected {t.shape}")
            t.data[...] = saved
        for prefix, store in (("adam.m.", self.adam.m), ("adam.v.", self.adam.v),
                              ("sgd.buf.", self.sgd.buf)):
            store.clear()
            store.update({k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)})
        self.adam.t = meta["adam_t"]
        for k, state in meta["rng"].items():
            self.rngs[k].bit_generator.state = state
        self.epoch = meta["epoch"]
        self.curves = {k: list(v) for k, v in meta["curves"].items()}

    # -------------------------------------------------------------- one epoch
    def sample(self) -> list[Graph]:
        graphs = self.dataset.graphs
        if self.config.task == "node_level" or len(graphs) <= self.config.batch_size:
            return list(graphs)
        idx = np.sort(self.rngs["data"].choice(len(graphs), self.config.batch_size, replace=False))
        return [graphs[i] for i in idx]

    def weight_loss(self, graphs: Sequence[Graph], clean: GraphBatch) -> nk.Tensor:
        net, task, K = self.net, self.task, self.net.num_factors
        b1, b2 = task.views(graphs, self.rngs["view"])
        e1, e2 = net.forward(b1).factors, net.forward(b2).factors
        negatives = task.negatives(e1[0].shape[0], self.rngs["view"])
        losses = nk.concat([nk.reshape(task.instance_loss(e1[k], e2[k], negatives), (-1, 1))
                            for k in range(K)], axis=1)
        z = net.forward(clean).factors
        posterior = infer_factor_probs(z, net.encode_arch(), net.prototypes,
                                       detach=self.config.detach_posterior)
        return factor_weighted_loss(posterior, losses)

    def search_loss(self, clean: GraphBatch) -> nk.Tensor:
        ctx = augment_architecture(self.net, self.config.arch_aug(), self.rngs["arch"])
        z = self.net.forward(clean).factors
        z_aug = self.net.forward(clean, ctx).factors
        return contrastive_search_loss(arch_discrimination_probs(z, z_aug, self.config.reading))

    def step(self) -> tuple[float, float]:
        cfg, net = self.config, self.net
        graphs = self.sample()
        clean = batch_graphs(graphs)
        weights, theta = self.weight_params(), net.arch_params()
        everything = {**weights, **theta}

        zero_grad(everything)
        try:
            with nk.Tape() as tape:
                loss_w = self.weight_loss(graphs, clean)
        except FloatingPointError as exc:
            raise SearchDiverged(f"epoch {self.epoch + 1}, weight step: {exc}") from exc
        tape.backward(loss_w)
        adam_step(weights, self.adam, cfg.lr_w)

        if not cfg.contrastive:
            # ablation: θ follows the pretext loss instead of the discrimination task
            sgd_step(theta, self.sgd, cfg.lr_alpha)
            return float(loss_w.data), float("nan")

        zero_grad(everything)
        with nk.Tape() as tape:
            loss_a = self.search_loss(clean)
        value = float(loss_a.data) / clean.num_graphs if cfg.task == "graph_level" \
            else float(loss_a.data) / clean.num_nodes
        if not np.isfinite(value):
            raise SearchDiverged(f"epoch {self.epoch + 1}, architecture step: non-finite L_alpha")
        tape.backward(loss_a)
        sgd_step(theta, self.sgd, cfg.lr_alpha)
        return float(loss_w.data), value

    # -------------------------------------------------------------- outputs
    def full_batch(self) -> GraphBatch:
        return batch_graphs(self.dataset.graphs)

    def final_outputs(self) -> tuple[np.ndarray, np.ndarray]:
        batch = self.full_batch()
        z = self.net.forward(batch).factors
        post = infer_factor_probs(z, self.net.encode_arch(), self.net.prototypes)
        Z = np.concatenate([t.data for t in z], axis=1)
        return Z, post.data.copy()


def _write_metrics(path: Path, rows: list[tuple]) -> None:
    fresh = not path.exists()
    with open(path, "a", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        if fresh:
            w.writerow(["epoch", "loss_w", "loss_alpha", "wallclock_ms"])
        w.writerows(rows)


def restore_state(checkpoint, config: SearchConfig | None = None,
                  dataset: GraphDataset | None = None) -> SearchState:
    """Rebuild a SearchState from a checkpoint, optionally under a new run length/output."""
    config_hash, tensors, meta = load_checkpoint(checkpoint)
    saved = SearchConfig.from_dict(meta["config"])
    if config is None:
        config = saved
    elif config.fingerprint() != config_hash:
        raise ValueError(f"{checkpoint} was written by a different configuration")
    state = SearchState(config, load_dataset(config) if dataset is None else dataset)
    state.restore(tensors, meta)
    return state


def run_unsupervised_search(config: SearchConfig, dataset: GraphDataset | None = None,
                            resume=None) -> SearchResult:
    """Alternate one Adam step on L_w with one SGD step on L_α for ``config.epochs`` epochs."""
    started = time.perf_counter()
    if resume is not None:
        state = restore_state(resume, config, dataset)
    else:
        state = SearchState(config, load_dataset(config) if dataset is None else dataset)
    out_dir = Path(config.output_dir) if config.output_dir else None
    ckpt = out_dir / CHECKPOINT_NAME if out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
    config_hash = config.fingerprint()

    def checkpoint() -> None:
        if ckpt:
            save_checkpoint(ckpt, config_hash, state.tensors(), state.meta())

    if state.epoch == 0:
        checkpoint()
    pending: list[tuple] = []
    while state.epoch < config.epochs:
        t0 = time.perf_counter()
        loss_w, loss_a = state.step()
        state.epoch += 1
        state.curves["loss_w"].append(loss_w)
        state.curves["loss_alpha"].append(loss_a)
        state.curves["alpha_similarity"].append(alpha_similarity(state.net))
        ms = 1e3 * (time.perf_counter() - t0)
        pending.append((state.epoch, repr(loss_w), repr(loss_a), f"{ms:.3f}"))
        log.debug("epoch %d  L_w %.5f  L_alpha %.5f  %.0f ms", state.epoch, loss_w, loss_a, ms)
        if state.epoch % config.checkpoint_every == 0 or state.epoch == config.epochs:
            if out_dir:
                _write_metrics(out_dir / METRICS_NAME, pending)
            pending = []
            checkpoint()
            log.info("epoch %d/%d  L_w %.4f  L_alpha %.4f", state.epoch, config.epochs, loss_w, loss_a)

    Z, posterior = state.final_outputs()
    labels = state.dataset.labels()
    if out_dir:
        np.save(out_dir / "embeddings.npy", Z)
        np.save(out_dir / "labels.npy", labels)
        (out_dir / "architecture.json").write_text(
            json.dumps(state.net.discretize().to_dict(), indent=2), encoding="utf-8")
    return SearchResult(state.net.discretize(), ckpt, list(state.curves["loss_w"]),
                        list(state.curves["loss_alpha"]), list(state.curves["alpha_similarity"]),
                        posterior, Z, labels, time.perf_counter() - started)

