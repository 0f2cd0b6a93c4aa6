"""Numpy Double-DQN trained offline on a replay corpus.

The Q-network is a small rectifier MLP whose parameters live in one flat vector,
so optimizers, target-network syncs and finite-difference checks all operate
on a single array.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import IO, Callable, Sequence

import numpy as np

from .domain import N_ACTIONS, InterventionAction, ReplayCorpus, TransitionRecord, slot_mask, split_corpus

POLICY_FORMAT = "ddqn-policy"
POLICY_VERSION = 1
DEFAULT_HIDDEN = (16, 16)

MaskFn = Callable[[int], Sequence[bool]]


class PolicyFormatError(ValueError):
    pass


class DimensionError(ValueError):
    pass


class Mlp:
    """Fully connected net: rectifier hidden layers, linear output.

    ``weights[i]`` has shape (fan_in, fan_out) and, like ``biases[i]``, is a view
    into ``theta``.
    """

    def __init__(self, sizes: Sequence[int], theta: np.ndarray | None = None):
        self.sizes = tuple(int(s) for s in sizes)
        if len(self.sizes) < 2 or any(s < 1 for s in self.sizes):
            raise ValueError(f"bad layer sizes {self.sizes}")
        n = sum(i * o + o for i, o in zip(self.sizes[:-1], self.sizes[1:]))
        if theta is None:
            theta = np.zeros(n)
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (n,):
            raise DimensionError(f"parameter vector has {theta.size} entries, layer sizes need {n}")
        self.theta = theta
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        off = 0
        for fan_in, fan_out in zip(self.sizes[:-1], self.sizes[1:]):
            self.weights.append(theta[off:off + fan_in * fan_out].reshape(fan_in, fan_out))
            off += fan_in * fan_out
            self.biases.append(theta[off:off + fan_out])
            off += fan_out

    @classmethod
    def init(cls, sizes: Sequence[int], rng: np.random.Generator) -> "Mlp":
        net = cls(sizes)
        for w in net.weights:
            bound = math.sqrt(6.0 / w.shape[0])
            w[...] = rng.uniform(-bound, bound, size=w.shape)
        return net

    @property
    def in_dim(self) -> int:
        return self.sizes[0]

    @property
    def out_dim(self) -> int:
        return self.sizes[-1]

    def copy(self) -> "Mlp":
        return Mlp(self.sizes, self.theta.copy())

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return forward(self, x)


def q_network(feature_dim: int, rng: np.random.Generator, hidden: Sequence[int] = DEFAULT_HIDDEN) -> Mlp:
    return Mlp.init((feature_dim, *hidden, N_ACTIONS), rng)


def forward(net: Mlp, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    batch = x[None, :] if single else x
    if batch.shape[1] != net.in_dim:
        raise DimensionError(f"input has {batch.shape[1]} features, network expects {net.in_dim}")
    out = _forward(net, batch)
    return out[0] if single else out


def _forward(net: Mlp, a: np.ndarray) -> np.ndarray:
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        a = a @ w + b
        if i < last:
            np.maximum(a, 0.0, out=a)
    return a


def loss_and_grad(net: Mlp, x: np.ndarray, actions: np.ndarray, targets: np.ndarray,
                  out: Mlp | None = None) -> tuple[float, np.ndarray]:
    """Mean squared error of Q(x, action) against fixed targets, and its gradient in theta.

    ``out`` is an optional preallocated gradient net with the same sizes; its
    ``theta`` is overwritten and returned.
    """
    acts = [x]
    a = x
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        a = a @ w + b
        if i < last:
            np.maximum(a, 0.0, out=a)
        acts.append(a)
    rows = np.arange(len(actions))
    err = a[rows, actions] - targets
    loss = float(err @ err) / len(actions)

    g = out if out is not None else Mlp(net.sizes)
    delta = np.zeros(a.shape)
    delta[rows, actions] = 2.0 * err / len(actions)
    for i in range(last, -1, -1):
        g.weights[i][...] = acts[i].T @ delta
        g.biases[i][...] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ net.weights[i].T) * (acts[i] > 0.0)
    return loss, g.theta


def grad_check(net: Mlp, x: np.ndarray, actions: np.ndarray, targets: np.ndarray, h: float = 1e-5) -> float:
    """Largest relative gap between backprop and central differences over all parameters."""
    x = np.asarray(x, dtype=np.float64)
    actions = np.asarray(actions, dtype=np.int64)
    targets = np.asarray(targets, dtype=np.float64)
    _, analytic = loss_and_grad(net, x, actions, targets)
    probe = net.copy()
    numeric = np.empty_like(analytic)
    for j in range(probe.theta.size):
        orig = probe.theta[j]
        probe.theta[j] = orig + h
        up = loss_and_grad(probe, x, actions, targets)[0]
        probe.theta[j] = orig - h
        down = loss_and_grad(probe, x, actions, targets)[0]
        probe.theta[j] = orig
        numeric[j] = (up - down) / (2.0 * h)
    rel = np.abs(analytic - numeric) / np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    return float(rel.max()) if rel.size else 0.0


def masked_argmax(q: np.ndarray, mask: Sequence[bool] | np.ndarray | None = None) -> np.ndarray | int:
    """Argmax over allowed actions; ties resolve to the lowest action code."""
    q = np.asarray(q, dtype=np.float64)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not mask.any(axis=-1).all():
            raise ValueError("action mask allows no action")
        q = np.where(mask, q, -np.inf)
    # np.argmax returns the first maximum
    return np.argmax(q, axis=-1)


def ddqn_target(record: TransitionRecord, successor: np.ndarray | None, main: Mlp, target: Mlp,
                gamma: float, mask: Sequence[bool] | None = None) -> float:
    """r + gamma * Q_target(s', argmax_a' Q_main(s', a')) or r on terminal records."""
    if record.done:
        return float(record.reward)
    if successor is None:
        raise ValueError(f"non-terminal record at position {record.position} has no successor state")
    best = int(masked_argmax(forward(main, successor), mask))
    return float(record.reward + gamma * forward(target, successor)[best])


def ddqn_targets(rewards: np.ndarray, next_states: np.ndarray, dones: np.ndarray, main: Mlp, target: Mlp,
                 gamma: float, next_masks: np.ndarray | None = None) -> np.ndarray:
    q_main = _forward(main, next_states)
    q_target = _forward(target, next_states)
    if next_masks is not None:
        q_main = np.where(next_masks, q_main, -np.inf)
    best = np.argmax(q_main, axis=1)
    evaluated = q_target[np.arange(len(best)), best]
    return np.where(dones, rewards, rewards + gamma * evaluated)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    gamma: float = 0.9
    batch_size: int = 32
    sync_every: int = 4
    epochs: int = 2000
    seed: int = 0
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    hidden: tuple[int, ...] = DEFAULT_HIDDEN
    train_fraction: float = 0.8
    mask_evaluation_slots: bool = True

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must be in [0, 1]")
        if self.batch_size < 1 or self.sync_every < 1:
            raise ValueError("batch_size and sync_every must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")


class Adam:
    def __init__(self, size: int, lr: float, beta1: float, beta2: float, eps: float):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, theta: np.ndarray, grad: np.ndarray) -> None:
        self.t += 1
        self.m *= self.beta1
        self.m += (1.0 - self.beta1) * grad
        self.v *= self.beta2
        self.v += (1.0 - self.beta2) * grad * grad
        lr_t = self.lr * math.sqrt(1.0 - self.beta2 ** self.t) / (1.0 - self.beta1 ** self.t)
        theta -= lr_t * self.m / (np.sqrt(self.v) + self.eps)


class Sgd:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, theta: np.ndarray, grad: np.ndarray) -> None:
        theta -= self.lr * grad


@dataclass
class Batch:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    dones: np.ndarray
    next_masks: np.ndarray | None = None

    def take(self, idx: np.ndarray | slice) -> "Batch":
        return Batch(self.states[idx], self.actions[idx], self.rewards[idx], self.next_states[idx],
                     self.dones[idx], None if self.next_masks is None else self.next_masks[idx])

    def __len__(self) -> int:
        return len(self.actions)


class DdqnTrainer:
    """Main/target network pair with the optimizer state and update counter."""

    def __init__(self, main: Mlp, config: TrainConfig):
        self.config = config
        self.main = main
        self.target = main.copy()
        if config.optimizer == "adam":
            self.opt = Adam(main.theta.size, config.learning_rate, config.beta1, config.beta2, config.adam_eps)
        else:
            self.opt = Sgd(config.learning_rate)
        self.updates = 0
        self._grad = Mlp(main.sizes)

    def targets(self, batch: Batch) -> np.ndarray:
        return ddqn_targets(batch.rewards, batch.next_states, batch.dones, self.main, self.target,
                            self.config.gamma, batch.next_masks)

    def loss(self, batch: Batch) -> float:
        if len(batch) == 0:
            return math.nan
        q = forward(self.main, batch.states)[np.arange(len(batch)), batch.actions]
        return float(np.mean((q - self.targets(batch)) ** 2))

    def train_step(self, batch: Batch) -> float:
        if len(batch) == 0:
            raise ValueError("empty minibatch")
        y = self.targets(batch)
        loss, grad = loss_and_grad(self.main, batch.states, batch.actions, y, out=self._grad)
        self.opt.step(self.main.theta, grad)
        self.updates += 1
        if self.updates % self.config.sync_every == 0:
            self.target.theta[...] = self.main.theta
        return loss


@dataclass
class Policy:
    net: Mlp
    mean: np.ndarray
    sd: np.ndarray
    mask_rule: str = "evaluation-slots"

    def __post_init__(self) -> None:
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.sd = np.asarray(self.sd, dtype=np.float64)
        if self.mean.shape != (self.net.in_dim,) or self.sd.shape != (self.net.in_dim,):
            raise DimensionError("standardization vectors do not match the network input size")
        if (self.sd <= 0).any():
            raise ValueError("standardization sd must be positive")

    def standardize(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.net.in_dim:
            raise DimensionError(f"state has {x.shape[-1]} features, policy expects {self.net.in_dim}")
        return (x - self.mean) / self.sd

    def q_values(self, state: np.ndarray) -> np.ndarray:
        return forward(self.net, self.standardize(state))


def fit_standardization(states: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-feature mean and sd; features constant in the training data get sd 1."""
    mean = states.mean(axis=0)
    sd = states.std(axis=0)
    sd = np.where(sd < 1e-8, 1.0, sd)
    return mean, sd


def select_action(policy: Policy, state: np.ndarray, mask: Sequence[bool] = (True, True, True)) -> InterventionAction:
    return InterventionAction(int(masked_argmax(policy.q_values(state), mask)))


def _batch_from(corpus: ReplayCorpus, mean: np.ndarray, sd: np.ndarray, mask_fn: MaskFn | None) -> Batch:
    arr = corpus.arrays()
    dim = len(mean)
    states = (arr["states"].reshape(-1, dim) - mean) / sd
    next_states = (arr["next_states"].reshape(-1, dim) - mean) / sd
    next_masks = None
    if mask_fn is not None:
        next_masks = np.ones((len(arr["actions"]), N_ACTIONS), dtype=bool)
        for i, (pos, done) in enumerate(zip(arr["next_positions"], arr["dones"])):
            if not done:
                next_masks[i] = mask_fn(int(pos))
    return Batch(states, arr["actions"], arr["rewards"], next_states, arr["dones"], next_masks)


@dataclass
class TrainResult:
    policy: Policy
    train_loss: list[float] = field(default_factory=list)
    test_loss: list[float] = field(default_factory=list)
    best_policy: Policy | None = None
    best_epoch: int | None = None


def train(corpus: ReplayCorpus, config: TrainConfig = TrainConfig(),
          successor_mask: MaskFn | None = None) -> TrainResult:
    """Offline DDQN on a by-student train/held-out split of ``corpus``.

    ``successor_mask`` restricts the next-state argmax; by default evaluation
    slots (last problem of each level) allow only NoIntervention when
    ``config.mask_evaluation_slots`` is set.
    """
    if len(corpus) == 0:
        raise ValueError("cannot train on an empty corpus")
    if successor_mask is None and config.mask_evaluation_slots:
        successor_mask = slot_mask
    train_part, test_part = split_corpus(corpus, config.train_fraction, config.seed)
    if len(train_part) == 0:
        train_part = corpus
    dim = corpus.feature_dim
    states = np.array([r.state for r in train_part.records], dtype=np.float64).reshape(-1, dim)
    mean, sd = fit_standardization(states)
    train_batch = _batch_from(train_part, mean, sd, successor_mask)
    test_batch = _batch_from(test_part, mean, sd, successor_mask) if len(test_part) else None

    rng = np.random.default_rng(config.seed)
    main = Mlp.init((dim, *config.hidden, N_ACTIONS), rng)
    trainer = DdqnTrainer(main, config)
    result = TrainResult(Policy(main, mean, sd))
    best = math.inf
    n = len(train_batch)
    for epoch in range(config.epochs):
        shuffled = train_batch.take(rng.permutation(n))
        losses = []
        for start in range(0, n, config.batch_size):
            losses.append(trainer.train_step(shuffled.take(slice(start, start + config.batch_size))))
        result.train_loss.append(float(np.mean(losses)))
        held_out = trainer.loss(test_batch) if test_batch is not None else math.nan
        result.test_loss.append(held_out)
        if held_out < best:
            best = held_out
            result.best_epoch = epoch
            result.best_policy = Policy(main.copy(), mean, sd)
    return result


# --- persistence -------------------------------------------------------------------------


def policy_to_dict(policy: Policy) -> dict:
    net = policy.net
    return {
        "format": POLICY_FORMAT,
        "version": POLICY_VERSION,
        "layer_sizes": list(net.sizes),
        "activation": "relu",
        "weight_layout": "row-major (fan_in, fan_out)",
        "weights": [w.ravel().tolist() for w in net.weights],
        "biases": [b.tolist() for b in net.biases],
        "feature_mean": policy.mean.tolist(),
        "feature_sd": policy.sd.tolist(),
        "mask_rule": policy.mask_rule,
        "actions": {str(int(a)): a.token for a in InterventionAction},
    }


def policy_from_dict(doc: dict) -> Policy:
    if doc.get("format") != POLICY_FORMAT:
        raise PolicyFormatError(f"not a policy document (format={doc.get('format')!r})")
    if doc.get("version") != POLICY_VERSION:
        raise PolicyFormatError(f"unsupported policy version {doc.get('version')!r}")
    try:
        sizes = [int(s) for s in doc["layer_sizes"]]
        actions = {int(k): v for k, v in doc["actions"].items()}
        weights, biases = doc["weights"], doc["biases"]
        mean, sd = doc["feature_mean"], doc["feature_sd"]
    except (KeyError, TypeError, ValueError) as exc:
        raise PolicyFormatError(f"malformed policy document: {exc}") from None
    if actions != {int(a): a.token for a in InterventionAction}:
        raise PolicyFormatError(f"action table mismatch: {actions}")
    if sizes[-1] != N_ACTIONS:
        raise DimensionError(f"policy has {sizes[-1]} outputs, expected {N_ACTIONS}")
    if len(weights) != len(sizes) - 1 or len(biases) != len(sizes) - 1:
        raise DimensionError("layer count does not match layer_sizes")
    net = Mlp(sizes)
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        if len(weights[i]) != fan_in * fan_out or len(biases[i]) != fan_out:
            raise DimensionError(f"layer {i} arrays do not match sizes ({fan_in}, {fan_out})")
        net.weights[i][...] = np.asarray(weights[i], dtype=np.float64).reshape(fan_in, fan_out)
        net.biases[i][...] = biases[i]
    if len(mean) != sizes[0] or len(sd) != sizes[0]:
        raise DimensionError("standardization vectors do not match the input size")
    return Policy(net, np.asarray(mean, dtype=np.float64), np.asarray(sd, dtype=np.float64),
                  doc.get("mask_rule", "evaluation-slots"))


def save_policy(policy: Policy, sink: IO) -> None:
    text = json.dumps(policy_to_dict(policy), indent=1) + "\n"
    if hasattr(sink, "encoding"):
        sink.write(text)
    else:
        sink.write(text.encode("utf-8"))


def load_policy(source: IO) -> Policy:
    raw = source.read()
    if isinstance(raw, bytes):
        raw = raw.decode("utf-8")
    try:
        doc = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise PolicyFormatError(f"unreadable policy file: {exc}") from None
    if not isinstance(doc, dict):
        raise PolicyFormatError("policy document must be an object")
    return policy_from_dict(doc)
