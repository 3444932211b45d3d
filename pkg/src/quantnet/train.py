"""Deterministic desk-scale training.

Backprop for every differentiable node kind, Adam with bias correction, the
three-stage schedule (frozen-backbone head training, full fine-tuning,
ultra-low-rate refinement) with plateau LR reduction and early stopping with
best-weight restoration, knowledge-distillation loss, and fake-quant nodes
with straight-through gradients.

Conventions pinned for reproducibility: Adam beta1=0.9, beta2=0.999,
eps=1e-7; batch-norm fine-tuning uses batch statistics with EMA momentum
0.99 on the moving stats; early stopping monitors validation accuracy while
plateau reduction monitors validation loss; frozen backbone batch-norms run
in inference mode so frozen weights stay bit-identical.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels as K
from .ir import INPUT_ID, Checkpoint, Graph, Node, Tensor, DType, validate_graph
from .quantize import activation_qparams
from .runtime import dequantize_array, quantize_array
from .tmf import write_tmf

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-7
BN_MOMENTUM = 0.99
FQ_MOMENTUM = 0.99


@dataclass
class PlateauPolicy:
    factor: float
    patience: int

    def __post_init__(self):
        if not 0 < self.factor < 1:
            raise ValueError(f"plateau factor must be in (0,1), got {self.factor}")
        if self.patience < 1:
            raise ValueError("plateau patience must be >= 1")


@dataclass
class EarlyStopPolicy:
    monitor: str = "val_accuracy"
    patience: int = 8
    restore_best: bool = True

    def __post_init__(self):
        if self.patience < 1:
            raise ValueError("early-stop patience must be >= 1")


@dataclass
class StageConfig:
    freeze_backbone: bool
    learning_rate: float
    max_epochs: int
    plateau: PlateauPolicy | None = None
    early_stop: EarlyStopPolicy | None = None

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be > 0")


def default_stages(scale: float = 1.0) -> list[StageConfig]:
    """The reference three-stage schedule: frozen head training at 1e-3, full
    fine-tune at 1e-5 with plateau(0.5, 4), refinement at 5e-6 with
    plateau(0.3, 3).  `scale` shrinks the epoch budgets for desk runs."""
    def ep(n):
        return max(1, int(round(n * scale)))
    return [
        StageConfig(True, 1e-3, ep(15), None, EarlyStopPolicy(patience=4)),
        StageConfig(False, 1e-5, ep(30), PlateauPolicy(0.5, 4), EarlyStopPolicy(patience=8)),
        StageConfig(False, 5e-6, ep(20), PlateauPolicy(0.3, 3), EarlyStopPolicy(patience=8)),
    ]


@dataclass
class KDConfig:
    temperature: float = 4.0
    alpha: float = 0.5

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if not 0 <= self.alpha <= 1:
            raise ValueError("alpha must be in [0,1]")


@dataclass
class EpochRecord:
    stage: int
    epoch: int
    train_loss: float
    val_loss: float
    val_accuracy: float
    learning_rate: float


@dataclass
class TrainHistory:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1

    def metric(self, name: str) -> list[float]:
        return [getattr(e, name) for e in self.epochs]


# ---------------------------------------------------------------------------
# schedule primitives (pure functions of the metric trace)

def _better(value: float, best: float, mode: str) -> bool:
    return value < best if mode == "min" else value > best


def _replay_wait(values, patience: int, mode: str, reset_on_fire: bool):
    """Walk a metric trace tracking epochs-since-improvement; yields the wait
    counter after each epoch, optionally resetting when it reaches patience
    (plateau semantics)."""
    best = math.inf if mode == "min" else -math.inf
    wait = 0
    for v in values:
        if _better(v, best, mode):
            best = v
            wait = 0
        else:
            wait += 1
        fired = wait >= patience
        yield wait, fired
        if fired and reset_on_fire:
            wait = 0


def reduce_lr_on_plateau(history, factor: float, patience: int,
                         current_lr: float, mode: str = "min") -> float:
    """New learning rate after the latest epoch of `history` (monitored
    metric values, oldest first).  Reduces by `factor` when the metric has
    not improved for `patience` consecutive epochs since the last best or
    last reduction."""
    if not 0 < factor < 1:
        raise ValueError(f"factor must be in (0,1), got {factor}")
    fired_last = False
    for _, fired in _replay_wait(history, patience, mode, reset_on_fire=True):
        fired_last = fired
    return current_lr * factor if fired_last else current_lr


def lr_trace(history, initial_lr: float, factor: float, patience: int,
             mode: str = "min") -> list[float]:
    """Learning rate in effect for each epoch of the trace (entry i is the
    rate used while producing history[i])."""
    lr = initial_lr
    out = []
    for _, fired in _replay_wait(history, patience, mode, reset_on_fire=True):
        out.append(lr)
        if fired:
            lr *= factor
    return out


def early_stop(history, patience: int, mode: str = "max") -> tuple[bool, int]:
    """(should_stop, best_epoch_index) for a monitored metric trace.

    Stops once the metric has failed to improve for `patience` epochs; the
    best index is where the monitored value first reached its running best."""
    if patience < 1:
        raise ValueError("patience must be >= 1")
    best = math.inf if mode == "min" else -math.inf
    best_idx = -1
    for i, v in enumerate(history):
        if _better(v, best, mode):
            best, best_idx = v, i
    if best_idx < 0:
        return False, -1
    return len(history) - 1 - best_idx >= patience, best_idx


# ---------------------------------------------------------------------------
# optimizer

@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def for_params(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()})


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState, lr: float,
              beta1: float = ADAM_BETA1, beta2: float = ADAM_BETA2,
              eps: float = ADAM_EPS):
    """One bias-corrected Adam update, in place on `params`."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, g in grads.items():
        p = params[name]
        if p.shape != g.shape:
            raise ValueError(f"{name}: grad shape {g.shape} vs param {p.shape}")
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * np.square(g)
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return params, state


# ---------------------------------------------------------------------------
# stochastic / quantization-simulation ops

def dropout(x: np.ndarray, rate: float, rng: np.random.Generator,
            training: bool = True) -> np.ndarray:
    """Inverted dropout: survivors scaled by 1/(1-rate); identity at inference."""
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate must be in [0,1), got {rate}")
    if not training or rate == 0:
        return x
    mask = (rng.random(x.shape) >= rate).astype(x.dtype) / (1 - rate)
    return x * mask


@dataclass
class FakeQuantState:
    """Per-tensor running range with EMA momentum 0.99."""

    min_val: float | None = None
    max_val: float | None = None
    momentum: float = FQ_MOMENTUM
    updates: int = 0

    def update(self, x: np.ndarray) -> None:
        lo, hi = float(x.min()), float(x.max())
        if self.min_val is None:
            self.min_val, self.max_val = lo, hi
        else:
            m = self.momentum
            self.min_val = m * self.min_val + (1 - m) * lo
            self.max_val = m * self.max_val + (1 - m) * hi
        if self.max_val < self.min_val:
            self.min_val = self.max_val = (self.min_val + self.max_val) / 2
        self.updates += 1

    def qparams(self):
        return activation_qparams(self.min_val, self.max_val)


def fake_quant(x: np.ndarray, state: FakeQuantState, training: bool = True):
    """Simulated INT8 quantization with a clipped straight-through gradient.

    Returns (x_hat, grad_mask): the gradient passes unchanged where x lies
    inside [min, max] and is zero outside.  The running range is EMA-updated
    in training mode before quantizing."""
    if training:
        state.update(x)
    if state.min_val is None:
        return x, np.ones_like(x, dtype=bool)
    qp = state.qparams()
    xhat = dequantize_array(quantize_array(x, qp), qp).astype(x.dtype)
    mask = (x >= state.min_val) & (x <= state.max_val)
    return xhat, mask


def insert_fake_quant(graph: Graph) -> Graph:
    """Insert FakeQuant nodes on the input and on post-activation edges
    (activation, pooling, residual and logits outputs) for QAT."""
    from .graphopt import _copy_graph
    g = _copy_graph(graph)
    out_id = g.output_node().id

    def fq_node(src: str) -> Node:
        return Node(f"{src}_fq", "FakeQuant", [src], [],
                    {"momentum": FQ_MOMENTUM, "min": None, "max": None, "updates": 0})

    new_nodes: list[Node] = []
    inserted: dict[str, str] = {}
    input_fq = fq_node(INPUT_ID)
    new_nodes.append(input_fq)
    inserted[INPUT_ID] = input_fq.id
    for node in g.nodes:
        node.inputs = [inserted.get(i, i) for i in node.inputs]
        new_nodes.append(node)
        wants_fq = node.kind in ("ReLU", "ReLU6", "GlobalAvgPool", "Add") or \
            (node.kind == "Dense" and node.id == out_id)
        if wants_fq:
            fq = fq_node(node.id)
            new_nodes.append(fq)
            inserted[node.id] = fq.id
    g.nodes = new_nodes
    return g


# ---------------------------------------------------------------------------
# losses

def onehot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim == 2:
        return labels
    return np.eye(num_classes, dtype=np.float64)[labels]


def kd_loss(student_logits: np.ndarray, teacher_logits: np.ndarray,
            labels: np.ndarray, cfg: KDConfig):
    """Distillation objective and its gradient w.r.t. the student logits.

    L = alpha * CE(labels, softmax(z_s))
      + (1 - alpha) * T^2 * KL(softmax(z_t/T) || softmax(z_s/T))

    Teacher logits are treated as constants; returns (loss, dlogits)."""
    if student_logits.shape != teacher_logits.shape:
        raise ValueError(f"class-count mismatch: student {student_logits.shape} "
                         f"vs teacher {teacher_logits.shape}")
    y = onehot(labels, student_logits.shape[-1]).astype(student_logits.dtype)
    n = student_logits.shape[0]
    t = cfg.temperature
    ce, dce = K.softmax_cross_entropy(student_logits, y)
    logq_s = K.log_softmax(student_logits / t)
    logq_t = K.log_softmax(teacher_logits / t)
    q_t = np.exp(logq_t)
    kl = (q_t * (logq_t - logq_s)).sum() / n
    loss = cfg.alpha * ce + (1 - cfg.alpha) * t * t * kl
    dlogits = cfg.alpha * dce + (1 - cfg.alpha) * t * (np.exp(logq_s) - q_t) / n
    return loss, dlogits


# ---------------------------------------------------------------------------
# graph training runner

class TrainingRunner:
    """Forward/backward execution over a builder graph.

    In float32 the runner operates directly on the graph's tensors, so Adam
    updates and batch-norm moving statistics persist into the graph; in
    float64 (gradient-check mode) weights are private copies.
    """

    def __init__(self, graph: Graph, freeze_backbone: bool = False,
                 compute_dtype=np.float32, seed: int = 0):
        violations = validate_graph(graph)
        if violations:
            raise ValueError("invalid graph: " + "; ".join(violations))
        self.graph = graph
        self.dtype = np.dtype(compute_dtype)
        self.freeze_backbone = freeze_backbone
        self.rng = np.random.default_rng(seed)
        self._shared = self.dtype == np.float32
        self.weights = {name: (t.data if self._shared else t.data.astype(self.dtype))
                        for name, t in graph.tensors.items()}
        self._frozen_nodes = {n.id for n in graph.nodes
                              if freeze_backbone and n.attrs.get("group") == "backbone"}
        self._num_classes = self._infer_classes()

    def _infer_classes(self) -> int:
        from .ir import infer_shapes
        shape = infer_shapes(self.graph)[self.graph.output_node().id]
        return int(shape[-1])

    @property
    def num_classes(self) -> int:
        return self._num_classes

    def trainable_params(self) -> dict[str, np.ndarray]:
        from .ir import trainable_tensor_names
        frozen = self._frozen_nodes
        names = []
        for node in self.graph.nodes:
            if node.id in frozen:
                continue
            skip = (2, 3) if node.kind == "BatchNorm" else ()
            names.extend(w for s, w in enumerate(node.weights) if s not in skip)
        return {n: self.weights[n] for n in names}

    # forward ------------------------------------------------------------

    def forward(self, x: np.ndarray, training: bool = True):
        """Logits and per-node caches for backward."""
        x = np.asarray(x, dtype=self.dtype)
        acts: dict[str, np.ndarray] = {INPUT_ID: x}
        caches: dict[str, tuple] = {}
        logits_id = None
        for node in self.graph.nodes:
            if node.kind == "Softmax":
                logits_id = node.inputs[0]
                acts[node.id] = acts[logits_id]  # loss handles the softmax
                continue
            ins = [acts[i] for i in node.inputs]
            acts[node.id], caches[node.id] = self._forward_node(node, ins, training)
        out_id = self.graph.output_node().id
        return acts[logits_id or out_id], acts, caches

    def _forward_node(self, node: Node, ins, training: bool):
        kind = node.kind
        x = ins[0]
        if node.attrs.get("fused_activation") is not None:
            raise ValueError(f"node {node.id}: cannot train a fused graph")
        if kind == "Conv2D":
            w = self.weights[node.weights[0]]
            b = self.weights[node.weights[1]] if len(node.weights) > 1 else None
            return K.conv2d(x, w, b, node.attrs["stride"], node.attrs["padding"]), (x,)
        if kind == "DepthwiseConv2D":
            w = self.weights[node.weights[0]]
            b = self.weights[node.weights[1]] if len(node.weights) > 1 else None
            return K.depthwise_conv2d(x, w, b, node.attrs["stride"], node.attrs["padding"]), (x,)
        if kind == "Dense":
            w = self.weights[node.weights[0]]
            b = self.weights[node.weights[1]] if len(node.weights) > 1 else None
            return K.dense(x, w, b), (x,)
        if kind == "BatchNorm":
            g, b, mean, var = (self.weights[w] for w in node.weights)
            if node.id in self._frozen_nodes or not training:
                y = K.batchnorm_inference(x, g, b, mean, var, node.attrs["epsilon"])
                return y, ("inference", g / np.sqrt(var + node.attrs["epsilon"]))
            y, cache, bm, bv = K.batchnorm_train(x, g, b, node.attrs["epsilon"])
            mom = node.attrs.get("momentum", BN_MOMENTUM)
            mean *= mom
            mean += (1 - mom) * bm
            var *= mom
            var += (1 - mom) * bv
            return y, ("batch", cache)
        if kind == "ReLU":
            return K.relu(x), (x,)
        if kind == "ReLU6":
            return K.relu6(x), (x,)
        if kind == "GlobalAvgPool":
            return K.global_avg_pool(x), (x.shape,)
        if kind == "Add":
            return K.residual_add(ins[0], ins[1]), ()
        if kind == "Dropout":
            rate = node.attrs["rate"]
            if not training or rate == 0:
                return x, (None,)
            mask = (self.rng.random(x.shape) >= rate).astype(x.dtype) / (1 - rate)
            return x * mask, (mask,)
        if kind == "FakeQuant":
            state = FakeQuantState(node.attrs.get("min"), node.attrs.get("max"),
                                   node.attrs.get("momentum", FQ_MOMENTUM),
                                   node.attrs.get("updates", 0))
            xhat, mask = fake_quant(x, state, training=training)
            if training:
                node.attrs.update(min=state.min_val, max=state.max_val,
                                  updates=state.updates)
            return xhat, (mask,)
        raise ValueError(f"cannot train node kind {kind!r}")

    # loss + backward ------------------------------------------------------

    def forward_backward(self, batch: np.ndarray, labels: np.ndarray,
                         kd: tuple[np.ndarray, KDConfig] | None = None,
                         training: bool = True):
        """Loss (CE + L2 over regularized dense kernels, or the KD objective)
        and gradients for every trainable, non-frozen tensor."""
        y = onehot(labels, self._num_classes).astype(self.dtype)
        if y.shape[-1] != self._num_classes:
            raise ValueError(f"labels have {y.shape[-1]} classes, model has {self._num_classes}")
        logits, acts, caches = self.forward(batch, training=training)
        if kd is not None:
            teacher_logits, cfg = kd
            loss, dlogits = kd_loss(logits, teacher_logits.astype(self.dtype), y, cfg)
        else:
            loss, dlogits = K.softmax_cross_entropy(logits, y)
        loss = float(loss)  # accumulate regularizers in double precision
        grads: dict[str, np.ndarray] = {}
        for node in self.graph.nodes:
            lam = node.attrs.get("l2", 0.0)
            if node.kind == "Dense" and lam:
                w = self.weights[node.weights[0]]
                loss += lam * float((w.astype(np.float64) ** 2).sum())
        self._backward(dlogits, acts, caches, grads)
        for node in self.graph.nodes:
            lam = node.attrs.get("l2", 0.0)
            if node.kind == "Dense" and lam and node.weights[0] in grads:
                grads[node.weights[0]] += 2 * lam * self.weights[node.weights[0]]
        return float(loss), grads

    def _backward(self, dlogits, acts, caches, grads):
        d: dict[str, np.ndarray] = {}
        out = self.graph.output_node()
        start = out.inputs[0] if out.kind == "Softmax" else out.id
        d[start] = dlogits
        for node in reversed(self.graph.nodes):
            if node.kind == "Softmax" or node.id not in d:
                continue
            dy = d[node.id]
            din = self._backward_node(node, dy, acts, caches.get(node.id), grads)
            for ref, g in zip(node.inputs, din):
                if ref == INPUT_ID or g is None:
                    continue
                d[ref] = d[ref] + g if ref in d else g

    def _backward_node(self, node: Node, dy, acts, cache, grads):
        kind = node.kind
        frozen = node.id in self._frozen_nodes

        def put(slot, g):
            if frozen or g is None:
                return
            name = node.weights[slot]
            grads[name] = grads[name] + g if name in grads else g

        if kind in ("Conv2D", "DepthwiseConv2D", "Dense"):
            x = cache[0]
            w = self.weights[node.weights[0]]
            has_b = len(node.weights) > 1
            if kind == "Conv2D":
                dx, dw, db = K.conv2d_backward(dy, x, w, node.attrs["stride"],
                                               node.attrs["padding"], has_b)
            elif kind == "DepthwiseConv2D":
                dx, dw, db = K.depthwise_conv2d_backward(dy, x, w, node.attrs["stride"],
                                                         node.attrs["padding"], has_b)
            else:
                dx, dw, db = K.dense_backward(dy, x, w, has_b)
            put(0, dw)
            if has_b:
                put(1, db)
            return [dx]
        if kind == "BatchNorm":
            tag, payload = cache
            if tag == "inference":
                return [dy * payload]  # d/dx of the frozen affine map
            dx, dgamma, dbeta = K.batchnorm_train_backward(dy, payload)
            put(0, dgamma)
            put(1, dbeta)
            return [dx]
        if kind in ("ReLU", "ReLU6"):
            return [K.activation_backward(dy, cache[0], kind)]
        if kind == "GlobalAvgPool":
            return [K.global_avg_pool_backward(dy, cache[0])]
        if kind == "Add":
            return [dy, dy]
        if kind == "Dropout":
            mask = cache[0]
            return [dy if mask is None else dy * mask]
        if kind == "FakeQuant":
            return [dy * cache[0]]
        raise ValueError(f"no backward for kind {kind!r}")

    # evaluation -----------------------------------------------------------

    def evaluate(self, x: np.ndarray, labels: np.ndarray, batch_size: int = 64):
        """(mean CE loss, accuracy) in inference mode."""
        y = onehot(labels, self._num_classes).astype(self.dtype)
        total_loss = 0.0
        correct = 0
        for i in range(0, len(x), batch_size):
            xb, yb = x[i:i + batch_size], y[i:i + batch_size]
            logits, _, _ = self.forward(xb, training=False)
            loss, _ = K.softmax_cross_entropy(logits, yb)
            total_loss += loss * len(xb)
            correct += int((logits.argmax(axis=1) == yb.argmax(axis=1)).sum())
        return total_loss / len(x), correct / len(x)


def forward_backward(graph: Graph, batch: np.ndarray, labels: np.ndarray,
                     kd: tuple[np.ndarray, KDConfig] | None = None,
                     freeze_backbone: bool = False, compute_dtype=np.float32,
                     seed: int = 0, training: bool = True):
    """One-shot loss + gradients over a graph (see TrainingRunner)."""
    runner = TrainingRunner(graph, freeze_backbone=freeze_backbone,
                            compute_dtype=compute_dtype, seed=seed)
    return runner.forward_backward(batch, labels, kd=kd, training=training)


# ---------------------------------------------------------------------------
# training loops

def make_checkpoint(graph: Graph, adam: AdamState | None = None,
                    trainable: dict[str, np.ndarray] | None = None,
                    epoch: int = 0, best_epoch: int = 0, seed: int = 0) -> Checkpoint:
    """Checkpoint with Adam slot tensors (zero-initialized when no state is
    given) for every trainable tensor."""
    if trainable is None:
        runner = TrainingRunner(graph)
        trainable = runner.trainable_params()
    slots = {}
    for name in trainable:
        m = adam.m[name] if adam else np.zeros_like(graph.tensors[name].data)
        v = adam.v[name] if adam else np.zeros_like(graph.tensors[name].data)
        slots[f"{name}.adam_m"] = Tensor(f"{name}.adam_m", np.asarray(m, dtype=np.float32),
                                         DType.F32, training_only=True)
        slots[f"{name}.adam_v"] = Tensor(f"{name}.adam_v", np.asarray(v, dtype=np.float32),
                                         DType.F32, training_only=True)
    return Checkpoint(graph, slots, epoch=epoch, best_epoch=best_epoch, seed=seed)


class _StageLoop:
    """One stage of training with plateau scheduling, early stopping and
    best-weight snapshots."""

    def __init__(self, graph, stage: StageConfig, data, seed: int, stage_idx: int,
                 teacher=None, kd_cfg: KDConfig | None = None):
        self.graph = graph
        self.stage = stage
        self.data = data
        self.stage_idx = stage_idx
        self.teacher = teacher
        self.kd_cfg = kd_cfg
        drop_seed = np.random.SeedSequence([seed, stage_idx, 7]).generate_state(1)[0]
        self.runner = TrainingRunner(graph, freeze_backbone=stage.freeze_backbone,
                                     seed=int(drop_seed))
        self.adam = AdamState.for_params(self.runner.trainable_params())

    def run(self, history: TrainHistory, global_epoch: int, seed: int, out_path=None):
        stage = self.stage
        lr = stage.learning_rate
        val_losses: list[float] = []
        val_accs: list[float] = []
        best_acc = -math.inf
        best = None
        x_val, y_val = self.data.val_data()
        params = self.runner.trainable_params()
        for _ in range(stage.max_epochs):
            losses = []
            for xb, yb in self.data.train_batches(global_epoch):
                kd = None
                if self.teacher is not None:
                    _, t_logits = self.teacher.run(xb, return_logits=True)
                    kd = (t_logits, self.kd_cfg)
                loss, grads = self.runner.forward_backward(xb, yb, kd=kd)
                adam_step(params, grads, self.adam, lr)
                losses.append(loss)
            val_loss, val_acc = self.runner.evaluate(x_val, y_val)
            history.epochs.append(EpochRecord(self.stage_idx + 1, global_epoch,
                                              float(np.mean(losses)), val_loss,
                                              val_acc, lr))
            val_losses.append(val_loss)
            val_accs.append(val_acc)
            if val_acc > best_acc:
                best_acc = val_acc
                best = {"weights": {k: w.copy() for k, w in self.runner.weights.items()},
                        "m": {k: m.copy() for k, m in self.adam.m.items()},
                        "v": {k: v.copy() for k, v in self.adam.v.items()},
                        "epoch": global_epoch}
                if out_path is not None:
                    ck = make_checkpoint(self.graph, self.adam, params,
                                         epoch=global_epoch, best_epoch=global_epoch,
                                         seed=seed)
                    write_tmf(out_path, ck)
            global_epoch += 1
            if stage.plateau is not None:
                lr = reduce_lr_on_plateau(val_losses, stage.plateau.factor,
                                          stage.plateau.patience, lr)
            if stage.early_stop is not None:
                stop, _ = early_stop(val_accs, stage.early_stop.patience)
                if stop:
                    break
        restore = stage.early_stop is None or stage.early_stop.restore_best
        if best is not None and restore:
            for name, w in best["weights"].items():
                self.runner.weights[name][...] = w
        return global_epoch, best


def three_stage_train(model: Graph, data, stages: list[StageConfig] | None = None,
                      seed: int = 42, out_path=None):
    """Staged transfer-learning loop.  Each stage restores its best weights
    before the next begins (stage 3 always starts from the stage-2 best);
    the returned checkpoint is the best over the final stage."""
    stages = stages if stages is not None else default_stages()
    history = TrainHistory()
    global_epoch = 0
    best = None
    for si, stage in enumerate(stages):
        loop = _StageLoop(model, stage, data, seed, si)
        global_epoch, stage_best = loop.run(history, global_epoch, seed, out_path=out_path)
        if stage_best is not None:
            best = stage_best
    accs = history.metric("val_accuracy")
    history.best_epoch = int(np.argmax(accs)) if accs else -1
    adam = AdamState({k: v for k, v in best["m"].items()},
                     {k: v for k, v in best["v"].items()}) if best else None
    trainable = {k: model.tensors[k].data for k in best["m"]} if best else None
    ckpt = make_checkpoint(model, adam, trainable,
                           epoch=global_epoch - 1,
                           best_epoch=best["epoch"] if best else -1, seed=seed)
    if out_path is not None:
        write_tmf(out_path, ckpt)
    return ckpt, history


def distill_train(student: Graph, teacher_exec, data, kd_cfg: KDConfig,
                  stage: StageConfig, seed: int = 42, out_path=None):
    """Train a student against a frozen teacher with the KD objective."""
    history = TrainHistory()
    loop = _StageLoop(student, stage, data, seed, 0, teacher=teacher_exec, kd_cfg=kd_cfg)
    last_epoch, best = loop.run(history, 0, seed, out_path=out_path)
    accs = history.metric("val_accuracy")
    history.best_epoch = int(np.argmax(accs)) if accs else -1
    adam = AdamState(best["m"], best["v"]) if best else None
    trainable = {k: student.tensors[k].data for k in best["m"]} if best else None
    ckpt = make_checkpoint(student, adam, trainable, epoch=last_epoch - 1,
                           best_epoch=best["epoch"] if best else -1, seed=seed)
    if out_path is not None:
        write_tmf(out_path, ckpt)
    return ckpt, history
