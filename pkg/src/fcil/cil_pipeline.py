"""Sequential class-incremental loop over pre-extracted features.

The frozen backbone is the identity over incoming features; the
trainable unit is a residual adapter.  Each task finetunes the adapter
(warm-started from the previous task's finetuned adapter) together with
a fresh linear head while all earlier heads stay frozen.  After
finetuning, the task vector is folded into the merge accumulator, the
merged adapter becomes the deployed one, and the new classes' Gaussian
statistics are fitted under it.  Inference concatenates all head logits
and never sees a task identity.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn_core as nn
from .class_gaussians import ClassGaussian, GaussianBank, fit_single_class
from .errors import FormatError, ShapeError, StateError, ValidationError
from .evaluation_metrics import AccuracyMatrix
from .feature_store import FeatureDataset, TaskSplit
from .merge_engine import MergeState, apply_merge, merge_step, task_vector
from .rng import stream

ADAPTER_KINDS = ("residual_linear", "residual_mlp")

CHECKPOINT_MAGIC = b"FCCK"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class AdapterSpec:
    """Residual adapter: out = in + scale * f(in), f an MLP core.

    A freshly initialized adapter is the identity map (the core's output
    layer starts at zero), so merging deltas of it against the base is
    well defined from task one.
    """

    kind: str
    dim: int
    hidden: int = 32
    scale: float = 1.0

    def __post_init__(self) -> None:
        if self.kind not in ADAPTER_KINDS:
            raise ValueError(f"unknown adapter kind {self.kind!r}; know {ADAPTER_KINDS}")

    def core_spec(self) -> nn.MlpSpec:
        if self.kind == "residual_linear":
            return nn.MlpSpec((self.dim, self.dim), "identity")
        return nn.MlpSpec((self.dim, self.hidden, self.dim), "relu")


def init_adapter(spec: AdapterSpec, rng: np.random.Generator) -> nn.ParamVector:
    core = spec.core_spec()
    pv = nn.zeros_params(core)
    if spec.kind == "residual_mlp":
        # Gaussian down-projection, zero up-projection: identity map with live gradients
        w0 = pv.tensor("layer0.weight")
        w0[...] = rng.normal(0.0, 1.0 / np.sqrt(spec.dim), size=w0.shape)
    return pv


def adapter_forward(params: nn.ParamVector, spec: AdapterSpec, feats: np.ndarray) -> np.ndarray:
    feats = np.asarray(feats, dtype=np.float64)
    return feats + spec.scale * nn.forward(params, spec.core_spec(), feats)


def adapter_forward_cached(params: nn.ParamVector, spec: AdapterSpec, feats: np.ndarray):
    feats = np.asarray(feats, dtype=np.float64)
    core_out, cache = nn.forward_cached(params, spec.core_spec(), feats)
    return feats + spec.scale * core_out, cache


def adapter_backward(params: nn.ParamVector, spec: AdapterSpec, cache, d_out: np.ndarray):
    grad, d_core_in = nn.backward(params, spec.core_spec(), cache, spec.scale * d_out)
    return grad, d_out + d_core_in


@dataclass
class Head:
    """One task's classifier head; outputs one logit per local class."""

    params: nn.ParamVector
    spec: nn.MlpSpec
    class_ids: tuple[int, ...]

    @property
    def n_classes(self) -> int:
        return len(self.class_ids)


def make_head(dim: int, class_ids: tuple[int, ...], rng: np.random.Generator) -> Head:
    spec = nn.MlpSpec((dim, len(class_ids)), "identity")
    return Head(nn.init_params(spec, rng), spec, tuple(int(c) for c in class_ids))


@dataclass
class ProgressiveClassifier:
    """Ordered per-task heads whose logits are concatenated at inference."""

    heads: list[Head] = field(default_factory=list)

    @property
    def n_classes(self) -> int:
        return sum(h.n_classes for h in self.heads)

    @property
    def class_ids(self) -> list[int]:
        out: list[int] = []
        for h in self.heads:
            out.extend(h.class_ids)
        return out

    def offsets(self) -> list[int]:
        out = []
        acc = 0
        for h in self.heads:
            out.append(acc)
            acc += h.n_classes
        return out

    def position_of(self, class_id: int) -> int:
        pos = 0
        for h in self.heads:
            for c in h.class_ids:
                if c == class_id:
                    return pos
                pos += 1
        raise KeyError(class_id)

    def positions(self, class_ids: np.ndarray) -> np.ndarray:
        lookup = {c: i for i, c in enumerate(self.class_ids)}
        return np.array([lookup[int(c)] for c in class_ids], dtype=np.int64)

    def _linear_stack(self):
        """Fused (W, b) over all heads when every head is one linear layer."""
        ws = []
        bs = []
        for h in self.heads:
            if h.spec.n_layers != 1 or not h.spec.bias[0]:
                return None
            ws.append(h.params.tensor("layer0.weight"))
            bs.append(h.params.tensor("layer0.bias"))
        return np.concatenate(ws, axis=1), np.concatenate(bs)

    def logits(self, feats: np.ndarray) -> np.ndarray:
        if not self.heads:
            raise StateError("classifier has no heads")
        feats = np.asarray(feats, dtype=np.float64)
        stack = self._linear_stack()
        if stack is not None:
            w, b = stack
            return feats @ w + b
        return np.concatenate([nn.forward(h.params, h.spec, feats) for h in self.heads], axis=1)

    def logits_cached(self, feats: np.ndarray):
        if not self.heads:
            raise StateError("classifier has no heads")
        feats = np.asarray(feats, dtype=np.float64)
        stack = self._linear_stack()
        if stack is not None:
            w, b = stack
            return feats @ w + b, ("linear", feats)
        outs = []
        caches = []
        for h in self.heads:
            out, cache = nn.forward_cached(h.params, h.spec, feats)
            outs.append(out)
            caches.append(cache)
        return np.concatenate(outs, axis=1), ("general", caches)

    def backward_heads(self, cache, d_logits: np.ndarray) -> list[np.ndarray]:
        """Per-head flat parameter gradients from a concatenated logit gradient."""
        mode, payload = cache
        grads = []
        col = 0
        if mode == "linear":
            dw = payload.T @ d_logits
            db = d_logits.sum(axis=0)
            for h in self.heads:
                grads.append(
                    np.concatenate([dw[:, col : col + h.n_classes].ravel(), db[col : col + h.n_classes]])
                )
                col += h.n_classes
            return grads
        for h, head_cache in zip(self.heads, payload):
            g, _ = nn.backward(h.params, h.spec, head_cache, d_logits[:, col : col + h.n_classes])
            grads.append(g)
            col += h.n_classes
        return grads


@dataclass(frozen=True)
class TrainingConfig:
    epochs: int = 10
    batch_size: int = 64
    lr: float = 1e-2
    weight_decay: float = 5e-4
    momentum: float = 0.9
    eta_min: float = 1e-6


@dataclass(frozen=True)
class MergeConfig:
    operator: str = "max_abs"
    alpha: float = 1.0


@dataclass(frozen=True)
class PipelineConfig:
    training: TrainingConfig = TrainingConfig()
    merge: MergeConfig = MergeConfig()
    adapter_kind: str = "residual_linear"
    adapter_hidden: int = 32
    adapter_scale: float = 1.0
    alignment: "object | None" = None  # LcaConfig; None disables alignment
    alignment_schedule: str = "per_task"  # "per_task" | "final"
    shrinkage: float = 0.0

    def __post_init__(self) -> None:
        if self.alignment_schedule not in ("per_task", "final"):
            raise ValueError(f"unknown alignment schedule {self.alignment_schedule!r}")


@dataclass
class PipelineState:
    adapter_spec: AdapterSpec
    peft: nn.ParamVector  # most recent finetuned adapter (warm-start source)
    peft_base: nn.ParamVector
    deployed: nn.ParamVector  # merged adapter used for inference and prototypes
    merge: MergeState
    classifier: ProgressiveClassifier
    bank: GaussianBank
    task_cursor: int = 0


def new_state(spec: AdapterSpec, merge_cfg: MergeConfig, rng: np.random.Generator) -> PipelineState:
    base = init_adapter(spec, rng)
    return PipelineState(
        adapter_spec=spec,
        peft=base.copy(),
        peft_base=base.copy(),
        deployed=base.copy(),
        merge=MergeState(base=base.values.copy(), operator=merge_cfg.operator, alpha=merge_cfg.alpha),
        classifier=ProgressiveClassifier(),
        bank=GaussianBank(dim=spec.dim),
    )


def finetune_task(
    state: PipelineState,
    features: np.ndarray,
    labels: np.ndarray,
    class_ids: tuple[int, ...],
    cfg: TrainingConfig,
    rng: np.random.Generator,
) -> Head:
    """Train the adapter plus a fresh head on one task's data.

    The adapter warm-starts from the previous task's finetuned adapter;
    earlier heads receive no gradients and are not touched.  Cross
    entropy runs over this task's classes only.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    seen = set(state.classifier.class_ids)
    for c in class_ids:
        if c in seen:
            raise StateError(f"class {c} was already trained in an earlier task")
        if int(np.sum(labels == c)) < 1:
            raise ValidationError(f"class {c} has no training rows")
    local = {c: i for i, c in enumerate(class_ids)}
    local_labels = np.array([local[int(c)] for c in labels], dtype=np.int64)

    head = make_head(state.adapter_spec.dim, class_ids, rng)
    aspec = state.adapter_spec
    n_adapter = state.peft.size
    # one trainable vector [adapter | head]; the ParamVectors below are views into it
    theta = np.concatenate([state.peft.values, head.params.values])
    adapter_pv = nn.ParamVector(theta[:n_adapter], state.peft.layout)
    head_pv = nn.ParamVector(theta[n_adapter:], head.spec.layout())

    n = features.shape[0]
    n_batches = max(1, -(-n // cfg.batch_size))
    opt = nn.OptimizerState(
        lr0=cfg.lr,
        momentum_coef=cfg.momentum,
        weight_decay=cfg.weight_decay,
        total_steps=max(1, cfg.epochs * n_batches),
        eta_min=cfg.eta_min,
    )
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for b in range(n_batches):
            rows = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            if rows.size == 0:
                continue
            x = features[rows]
            acts, a_cache = adapter_forward_cached(adapter_pv, aspec, x)
            logits, h_cache = nn.forward_cached(head_pv, head.spec, acts)
            _, d_logits = nn.softmax_cross_entropy(logits, local_labels[rows])
            head_grad, d_acts = nn.backward(head_pv, head.spec, h_cache, d_logits)
            adapter_grad, _ = adapter_backward(adapter_pv, aspec, a_cache, d_acts)
            nn.sgd_step(opt, theta, np.concatenate([adapter_grad, head_grad]))

    state.peft = nn.ParamVector(theta[:n_adapter].copy(), state.peft.layout)
    head.params = nn.ParamVector(theta[n_adapter:].copy(), head.spec.layout())
    state.classifier.heads.append(head)
    return head


def concat_inference(features: np.ndarray, state: PipelineState):
    """Concatenated logits and predicted global class ids under the
    deployed adapter.  Task identity is never consumed."""
    if not state.classifier.heads:
        raise StateError("no heads have been trained yet")
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[1] != state.adapter_spec.dim:
        raise ShapeError(
            f"features of shape {feats.shape} do not match adapter dim {state.adapter_spec.dim}"
        )
    acts = adapter_forward(state.deployed, state.adapter_spec, feats)
    logits = state.classifier.logits(acts)
    ids = np.asarray(state.classifier.class_ids, dtype=np.int64)[np.argmax(logits, axis=1)]
    return logits, ids


def run_sequence(
    dataset: FeatureDataset,
    split: TaskSplit,
    config: PipelineConfig,
    seed: int,
    align_log_dir: str | Path | None = None,
) -> tuple[PipelineState, AccuracyMatrix]:
    """Run the full incremental loop and record the accuracy matrix.

    Per task: finetune, fold the task vector into the accumulator, deploy
    the merged adapter, fit the new classes' Gaussians under it, then
    (per config) align the classifier heads.  A_t after each task is the
    global accuracy over all test classes seen so far.
    """
    split.validate(dataset)
    aspec = AdapterSpec(config.adapter_kind, dataset.dim, config.adapter_hidden, config.adapter_scale)
    state = new_state(aspec, config.merge, stream(seed, "adapter-init"))
    entries: list[list[float]] = []
    a_t: list[float] = []
    per_task_mean: list[float] = []
    n_tasks = len(split.tasks)
    for t, entry in enumerate(split.tasks):
        rows = entry.train_rows
        finetune_task(
            state,
            dataset.features[rows],
            dataset.labels[rows],
            entry.class_ids,
            config.training,
            stream(seed, "task", t),
        )
        merge_step(state.merge, task_vector(state.peft.values, state.peft_base.values, t))
        state.deployed = nn.ParamVector(apply_merge(state.merge), state.peft.layout)
        acts = adapter_forward(state.deployed, aspec, dataset.features[rows])
        task_labels = dataset.labels[rows]
        for c in entry.class_ids:
            state.bank.add(fit_single_class(acts[task_labels == c], c, config.shrinkage))
        state.task_cursor = t + 1
        if config.alignment is not None and (
            config.alignment_schedule == "per_task" or t == n_tasks - 1
        ):
            from .lca_align import align_classifiers

            log_path = None
            if align_log_dir is not None:
                log_path = Path(align_log_dir) / f"align_task{t}.csv"
            align_classifiers(
                state, config.alignment, config.training, stream(seed, "align", t), log_path
            )
        row = []
        correct = 0
        total = 0
        for j in range(t + 1):
            test_rows = split.tasks[j].test_rows
            _, preds = concat_inference(dataset.features[test_rows], state)
            truth = dataset.labels[test_rows]
            row.append(float(np.mean(preds == truth)))
            correct += int(np.sum(preds == truth))
            total += truth.size
        entries.append(row)
        a_t.append(correct / total)
        per_task_mean.append(float(np.mean(row)))
    return state, AccuracyMatrix(entries, a_t, per_task_mean)


def refit_bank(
    state: PipelineState, dataset: FeatureDataset, split: TaskSplit, shrinkage: float = 0.0
) -> GaussianBank:
    """Re-estimate every seen class under the currently deployed adapter.

    The pipeline's stored bank keeps each class's statistics as fitted
    when its task finished; this gives the statistics the same classes
    have under the final backbone, for distribution-shift diagnostics.
    """
    bank = GaussianBank(dim=dataset.dim)
    for entry in split.tasks[: state.task_cursor]:
        rows = entry.train_rows
        acts = adapter_forward(state.deployed, state.adapter_spec, dataset.features[rows])
        task_labels = dataset.labels[rows]
        for c in entry.class_ids:
            bank.add(fit_single_class(acts[task_labels == c], c, shrinkage))
    return bank


def _pack_array(fh, arr: np.ndarray) -> None:
    data = np.asarray(arr, dtype="<f8").ravel()
    fh.write(struct.pack("<Q", data.size))
    fh.write(data.tobytes())


def _unpack_array(fh) -> np.ndarray:
    raw = fh.read(8)
    if len(raw) != 8:
        raise FormatError("truncated array length")
    (n,) = struct.unpack("<Q", raw)
    data = np.frombuffer(fh.read(8 * n), dtype="<f8")
    if data.size != n:
        raise FormatError("truncated array payload")
    return data.copy()


def write_checkpoint(path: str | Path, state: PipelineState) -> None:
    """Serialize PipelineState; resumable at task boundaries."""
    from .merge_engine import OPERATORS

    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(
            struct.pack(
                "<IIIdI",
                ADAPTER_KINDS.index(state.adapter_spec.kind),
                state.adapter_spec.dim,
                state.adapter_spec.hidden,
                state.adapter_spec.scale,
                state.task_cursor,
            )
        )
        _pack_array(fh, state.peft.values)
        _pack_array(fh, state.peft_base.values)
        _pack_array(fh, state.deployed.values)
        fh.write(
            struct.pack(
                "<IdQ",
                OPERATORS.index(state.merge.operator),
                state.merge.alpha,
                state.merge.merged_count,
            )
        )
        _pack_array(fh, state.merge.accumulator)
        fh.write(struct.pack("<I", len(state.classifier.heads)))
        for head in state.classifier.heads:
            fh.write(struct.pack("<I", head.n_classes))
            fh.write(np.asarray(head.class_ids, dtype="<i8").tobytes())
            _pack_array(fh, head.params.values)
        fh.write(struct.pack("<I", len(state.bank)))
        for c in state.bank.class_ids():
            g = state.bank[c]
            fh.write(struct.pack("<iQ", c, g.count))
            _pack_array(fh, g.mean)
            _pack_array(fh, g.cov)


def read_checkpoint(path: str | Path) -> PipelineState:
    from .class_gaussians import _cholesky_with_jitter
    from .merge_engine import OPERATORS

    with open(path, "rb") as fh:
        if fh.read(4) != CHECKPOINT_MAGIC:
            raise FormatError(f"not a checkpoint file: {path}")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        kind_idx, dim, hidden, scale, cursor = struct.unpack("<IIIdI", fh.read(24))
        aspec = AdapterSpec(ADAPTER_KINDS[kind_idx], dim, hidden, scale)
        layout = aspec.core_spec().layout()
        peft = nn.ParamVector(_unpack_array(fh), layout)
        base = nn.ParamVector(_unpack_array(fh), layout)
        deployed = nn.ParamVector(_unpack_array(fh), layout)
        op_idx, alpha, merged_count = struct.unpack("<IdQ", fh.read(20))
        acc = _unpack_array(fh)
        merge = MergeState(
            base=base.values.copy(),
            operator=OPERATORS[op_idx],
            alpha=alpha,
            accumulator=acc,
            merged_count=merged_count,
        )
        (n_heads,) = struct.unpack("<I", fh.read(4))
        classifier = ProgressiveClassifier()
        for _ in range(n_heads):
            (n_local,) = struct.unpack("<I", fh.read(4))
            ids = np.frombuffer(fh.read(8 * n_local), dtype="<i8")
            spec = nn.MlpSpec((dim, n_local), "identity")
            classifier.heads.append(
                Head(nn.ParamVector(_unpack_array(fh), spec.layout()), spec, tuple(int(i) for i in ids))
            )
        (n_classes,) = struct.unpack("<I", fh.read(4))
        bank = GaussianBank(dim=dim)
        for _ in range(n_classes):
            c, count = struct.unpack("<iQ", fh.read(12))
            mean = _unpack_array(fh)
            cov = _unpack_array(fh).reshape(dim, dim)
            chol, jitter = _cholesky_with_jitter(cov)
            bank.add(ClassGaussian(c, mean, cov, chol, jitter, count))
    return PipelineState(aspec, peft, base, deployed, merge, classifier, bank, cursor)
