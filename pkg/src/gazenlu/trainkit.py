"""Two-phase training: scanpath pretraining, then joint fine-tuning.

Phase one fits the generator to recorded fixation sequences by
teacher-forced NLL. Phase two trains the full model on a labeled task,
optionally starting from (and optionally freezing) the pretrained
generator. Both phases early-stop on a dev signal and keep the best-dev
parameter snapshot. Single-threaded runs are bit-reproducible from
(seed, data, config).
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass

import numpy as np

from .augmentor import TEXT_ONLY, JointModel
from .corpus import GazeRecord, TextInstance
from .diffcore import Module, RngState, no_grad
from .gazegen import GeneratorConfig, ScanpathGenerator
from .textenc import (Batch, EncodedText, TextEncoder, TextEncoderConfig,
                      Vocab, collate, tokenize)

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
WEIGHT_DECAY = 0.01
IMPROVE_TOL = 1e-6
LR_GRID = (5e-5, 4e-5, 3e-5, 2e-5)


@dataclass
class TrainConfig:
    lr: float
    batch_size: int = 32
    max_epochs: int = 20
    patience: int = 3
    tau: float = 0.5
    n_scanpaths_train: int = 3
    freeze_generator: bool = False
    pretrained_generator: bool = True
    seed: int = 42
    weight_decay: float = WEIGHT_DECAY
    pretrain_lr: float = 1e-3

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.patience < 1:
            raise ValueError(f"patience must be >= 1, got {self.patience}")
        if self.tau <= 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if self.n_scanpaths_train < 1:
            raise ValueError(
                f"n_scanpaths_train must be >= 1, got {self.n_scanpaths_train}"
            )


def save_config(path, config: TrainConfig) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for fld in dataclasses.fields(config):
            v = getattr(config, fld.name)
            if isinstance(v, bool):
                v = "true" if v else "false"
            f.write(f"{fld.name}={v}\n")


def load_config(path, overrides: dict | None = None) -> TrainConfig:
    """Flat key=value file; `overrides` (e.g. CLI flags) win over the file."""
    types = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    raw: dict = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, _, value = line.partition("=")
            key = key.strip()
            if key not in types:
                raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
            raw[key] = _coerce(key, types[key], value.strip(), f"{path}:{lineno}")
    for key, value in (overrides or {}).items():
        if key not in types:
            raise ValueError(f"unknown config key {key!r}")
        raw[key] = value if not isinstance(value, str) else _coerce(
            key, types[key], value, "override"
        )
    if "lr" not in raw:
        raise ValueError(f"{path}: missing required key 'lr'")
    return TrainConfig(**raw)


def _coerce(key: str, typ: str, value: str, where: str):
    base = str(typ)
    if "bool" in base:
        if value.lower() in ("true", "1", "yes"):
            return True
        if value.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"{where}: {key} expects true/false, got {value!r}")
    if "int" in base:
        return int(value)
    return float(value)


# -- optimizer -----------------------------------------------------------


def adamw_step(params: dict, grads: dict, state: dict, lr: float,
               betas: tuple = ADAM_BETAS, eps: float = ADAM_EPS,
               weight_decay: float = WEIGHT_DECAY):
    """One decoupled-weight-decay Adam update; functional in, functional out.

    state maps name -> (m, v, t); missing entries start at zero. Returns
    (new_params, new_state) without touching the inputs.
    """
    b1, b2 = betas
    new_params, new_state = {}, {}
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
        m, v, t = state.get(name, (np.zeros_like(p, dtype=np.float64),
                                   np.zeros_like(p, dtype=np.float64), 0))
        t = t + 1
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        step = m_hat / (np.sqrt(v_hat) + eps) + weight_decay * p
        new_params[name] = (p - lr * step).astype(p.dtype)
        new_state[name] = (m, v, t)
    return new_params, new_state


class AdamW:
    """Stateful wrapper applying adamw_step to a module's trainable params."""

    def __init__(self, model: Module, lr: float, betas: tuple = ADAM_BETAS,
                 eps: float = ADAM_EPS, weight_decay: float = WEIGHT_DECAY):
        self.slots = [(n, t) for n, t in model.named_parameters() if t.requires_grad]
        names = [n for n, _ in self.slots]
        if len(set(names)) != len(names):
            raise ValueError("duplicate parameter names")
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.state: dict = {}

    @property
    def n_params(self) -> int:
        return len(self.slots)

    def step(self) -> None:
        live = [(n, t) for n, t in self.slots if t.grad is not None]
        params = {n: t.data for n, t in live}
        grads = {n: t.grad for n, t in live}
        new_params, new_state = adamw_step(
            params, grads, self.state, self.lr, self.betas, self.eps,
            self.weight_decay,
        )
        self.state.update(new_state)
        for n, t in live:
            t.data = new_params[n]


class EarlyStopper:
    """Patience counter with strict improvement beyond a small tolerance."""

    def __init__(self, patience: int = 3, mode: str = "max",
                 tol: float = IMPROVE_TOL):
        if mode not in ("max", "min"):
            raise ValueError(f"mode must be max|min, got {mode!r}")
        self.patience = patience
        self.mode = mode
        self.tol = tol
        self.best_value = -np.inf if mode == "max" else np.inf
        self.best_epoch = 0
        self.bad_epochs = 0
        self.epoch = 0

    def update(self, value: float) -> bool:
        """Record one epoch's dev value; returns True on improvement."""
        self.epoch += 1
        if self.mode == "max":
            improved = value > self.best_value + self.tol
        else:
            improved = value < self.best_value - self.tol
        if improved:
            self.best_value = value
            self.best_epoch = self.epoch
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
        return improved

    @property
    def should_stop(self) -> bool:
        return self.bad_epochs >= self.patience


# -- shared plumbing -----------------------------------------------------


def _snapshot(model: Module) -> dict[str, np.ndarray]:
    return {k: v.copy() for k, v in model.state_dict().items()}


def _batched(n: int, size: int):
    for at in range(0, n, size):
        yield range(at, min(at + size, n))


def _append_log(log_path, record: dict) -> None:
    if log_path is None:
        return
    with open(log_path, "a", encoding="utf-8") as f:
        f.write(json.dumps(record, sort_keys=True) + "\n")


def encode_instances(instances: list[TextInstance], vocab: Vocab,
                     max_len: int) -> list[EncodedText]:
    return [tokenize(i.text1, i.text2, vocab, max_len) for i in instances]


# -- phase one: generator pretraining ------------------------------------


class GazeModel(Module):
    """Text encoder feeding the scanpath generator, as one checkpoint unit.

    Submodule names match the joint model's generator-side names, so a
    pretrained state dict loads directly via load_generator_state.
    """

    def __init__(self, text_cfg: TextEncoderConfig, gen_hidden: int = 128,
                 l_max: int = 32, seed: int = 42):
        super().__init__()
        root = RngState(seed, 0)
        self.gen_encoder = TextEncoder(text_cfg, root.substream("gen_enc"))
        self.generator = ScanpathGenerator(
            GeneratorConfig(text_cfg.d_model, gen_hidden, l_max),
            root.substream("generator"),
        )

    def batch_nll(self, batch: Batch, paths: list[list[int]],
                  drop_rng: RngState | None):
        _, _, words = self.gen_encoder.forward_batch(batch, drop_rng)
        ws = self.generator.encode_words_batch(words, batch.word_counts)
        return self.generator.nll_batch(ws, batch.word_counts, paths)


def _corpus_nll(model: GazeModel, encs: list[EncodedText],
                paths: list[list[int]], batch_size: int) -> float:
    total, steps = 0.0, 0
    was_training = model.training
    model.eval()
    try:
        with no_grad():
            for idx in _batched(len(encs), batch_size):
                batch = collate([encs[i] for i in idx])
                loss, n = model.batch_nll(batch, [paths[i] for i in idx], None)
                total += float(loss.data) * n
                steps += n
    finally:
        model.train(was_training)
    return total / steps


def pretrain_generator(model: GazeModel, train_records: list[GazeRecord],
                       dev_records: list[GazeRecord], vocab: Vocab,
                       config: TrainConfig, log_path=None):
    """Teacher-forced NLL training; returns (best state dict, history).

    history rows mirror the JSONL log: {epoch, train_loss, dev_metric},
    where dev_metric is pooled dev NLL (lower is better). With
    max_epochs=0 the returned state is the untouched initialization.
    """
    if not train_records or not dev_records:
        raise ValueError("pretraining needs non-empty train and dev corpora")
    max_len = model.gen_encoder.cfg.max_len
    tr_encs = [tokenize(r.text, None, vocab, max_len) for r in train_records]
    dev_encs = [tokenize(r.text, None, vocab, max_len) for r in dev_records]
    tr_paths = [r.fixations for r in train_records]
    dev_paths = [r.fixations for r in dev_records]

    root = RngState(config.seed, 0).substream("pretrain")
    opt = AdamW(model, config.pretrain_lr, weight_decay=config.weight_decay)
    stopper = EarlyStopper(config.patience, mode="min")
    best_state = _snapshot(model)
    history: list[dict] = []

    for epoch in range(1, config.max_epochs + 1):
        model.train()
        order = root.substream("order", epoch).shuffled(list(range(len(tr_encs))))
        total, steps = 0.0, 0
        for bi, idx in enumerate(_batched(len(order), config.batch_size)):
            rows = [order[i] for i in idx]
            batch = collate([tr_encs[i] for i in rows])
            loss, n = model.batch_nll(
                batch, [tr_paths[i] for i in rows],
                root.substream("drop", epoch, bi),
            )
            model.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.data) * n
            steps += n
        train_nll = total / steps
        dev_nll = _corpus_nll(model, dev_encs, dev_paths, config.batch_size)
        row = {"epoch": epoch, "train_loss": train_nll, "dev_metric": dev_nll}
        history.append(row)
        _append_log(log_path, row)
        if stopper.update(dev_nll):
            best_state = _snapshot(model)
        if stopper.should_stop:
            break
    model.load_state_dict(best_state)
    return best_state, {
        "epochs": history,
        "best_epoch": stopper.best_epoch,
        "best_dev_nll": None if not history else stopper.best_value,
        "n_params": opt.n_params,
    }


# -- phase two: joint fine-tuning ----------------------------------------


def accuracy_from_logits(outputs: np.ndarray, labels: np.ndarray) -> float:
    return float((outputs.argmax(axis=1) == labels).mean())


def predict_instances(model: JointModel, encs: list[EncodedText],
                      sentence_ids: list, n_scanpaths: int, rng: RngState,
                      batch_size: int = 64) -> np.ndarray:
    """Averaged pre-softmax outputs for a list of encoded instances."""
    outs = []
    for idx in _batched(len(encs), batch_size):
        batch = collate([encs[i] for i in idx])
        outs.append(model.predict_batch(
            batch, [sentence_ids[i] for i in idx], n_scanpaths, rng
        ))
    return np.concatenate(outs, axis=0)


def train_joint(model: JointModel, train_instances: list[TextInstance],
                dev_instances: list[TextInstance], vocab: Vocab,
                config: TrainConfig, metric_fn=None,
                generator_state: dict | None = None, log_path=None):
    """Task fine-tuning over (instance, scanpath) pairs with early stopping.

    Returns (best state dict, history). The optimizer covers exactly the
    trainable parameters; freezing the generator removes its parameters
    from the update set before the first step.
    """
    if metric_fn is None:
        metric_fn = accuracy_from_logits
    uses_gaze = model.cfg.model_kind != TEXT_ONLY
    if uses_gaze:
        if config.pretrained_generator:
            if generator_state is None:
                raise ValueError(
                    "config.pretrained_generator requires a generator state"
                )
            model.load_generator_state(generator_state)
        if config.freeze_generator:
            model.freeze_generator()
    model.cfg.gumbel = dataclasses.replace(model.cfg.gumbel, temperature=config.tau)

    max_len = model.cfg.text.max_len
    tr_encs = encode_instances(train_instances, vocab, max_len)
    dev_encs = encode_instances(dev_instances, vocab, max_len)
    tr_labels = np.array([i.label for i in train_instances])
    dev_labels = np.array([i.label for i in dev_instances])
    dev_ids = [i.instance_id for i in dev_instances]

    n_paths = config.n_scanpaths_train if uses_gaze else 1
    pairs = [(i, p) for i in range(len(tr_encs)) for p in range(n_paths)]

    root = RngState(config.seed, 0).substream("joint")
    opt = AdamW(model, config.lr, weight_decay=config.weight_decay)
    n_trainable = sum(1 for _, t in model.named_parameters() if t.requires_grad)
    assert opt.n_params == n_trainable
    stopper = EarlyStopper(config.patience, mode="max")
    best_state = _snapshot(model)
    history: list[dict] = []
    dev_rng = root.substream("dev")

    for epoch in range(1, config.max_epochs + 1):
        model.train()
        order = root.substream("order", epoch).shuffled(pairs)
        total, count = 0.0, 0
        for bi, idx in enumerate(_batched(len(order), config.batch_size)):
            rows = [order[i] for i in idx]
            batch = collate([tr_encs[i] for i, _ in rows])
            labels = tr_labels[[i for i, _ in rows]]
            pair_rngs = [
                root.substream("gumbel", epoch, train_instances[i].instance_id, p)
                for i, p in rows
            ]
            loss = model.loss_pairs(
                batch, labels, pair_rngs, root.substream("drop", epoch, bi)
            )
            model.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.data) * len(rows)
            count += len(rows)
        outputs = predict_instances(
            model, dev_encs, dev_ids, n_paths, dev_rng, config.batch_size
        )
        dev_metric = metric_fn(outputs, dev_labels)
        row = {"epoch": epoch, "train_loss": total / count,
               "dev_metric": dev_metric}
        history.append(row)
        _append_log(log_path, row)
        if stopper.update(dev_metric):
            best_state = _snapshot(model)
        if stopper.should_stop:
            break
    model.load_state_dict(best_state)
    return best_state, {
        "epochs": history,
        "best_epoch": stopper.best_epoch,
        "best_dev_metric": None if not history else stopper.best_value,
        "n_params": opt.n_params,
        "n_trainable": n_trainable,
    }


# -- learning-rate selection ---------------------------------------------


def pick_lr(grid, metrics) -> float:
    """Argmax dev metric; exact ties resolve to the smaller rate."""
    if not grid or len(grid) != len(metrics):
        raise ValueError("grid and metrics must be non-empty and aligned")
    best = max(metrics)
    return min(lr for lr, m in zip(grid, metrics) if m == best)


def select_lr(run_fn, grid=LR_GRID):
    """Train once per rate via run_fn(lr) -> (dev_metric, payload).

    Returns (best_lr, runs) with runs = [(lr, dev_metric, payload), ...].
    """
    runs = []
    for lr in grid:
        dev_metric, payload = run_fn(lr)
        runs.append((lr, float(dev_metric), payload))
    best = pick_lr([r[0] for r in runs], [r[1] for r in runs])
    return best, runs
