"""Learning-augmented simulation: nominal step plus a learned state residual.

The residual network sees ``(s_t, a_t, s_nom)`` where ``s_nom`` is the
nominal simulator's prediction, and outputs a correction added to it.
Everything is written with the autodiff ops so rollouts through the
augmented step can be differentiated end to end.
"""

from __future__ import annotations

import json
import struct
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from artisim import autodiff as ad
from artisim.diffsim import DEFAULT_DT, Attachment, ObjectState, RobotState, RobotWorld, SimState, robot_step

WEIGHTS_MAGIC = b"ARSN"
WEIGHTS_VERSION = 1


class ResidualError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# network


@dataclass
class ResidualNet:
    """Fully connected tanh network with input standardisation and output scaling.

    An optional linear skip path (standardised input straight to the output)
    lets the residual extrapolate beyond the states seen in training.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    in_mean: np.ndarray
    in_std: np.ndarray
    out_scale: np.ndarray
    state_dim: int
    action_dim: int
    velocity_only: bool = False
    skip: np.ndarray | None = None  # optional linear path from standardised inputs

    @classmethod
    def create(cls, state_dim: int, action_dim: int, hidden: Sequence[int] = (64, 64), seed: int = 0, velocity_only: bool = False, skip: bool = True) -> "ResidualNet":
        rng = np.random.default_rng(seed)
        sizes = [2 * state_dim + action_dim, *hidden, state_dim]
        weights, biases = [], []
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            if i == len(sizes) - 2:
                weights.append(np.zeros((a, b)))  # start exactly at the nominal simulator
            else:
                lim = np.sqrt(6.0 / (a + b))
                weights.append(rng.uniform(-lim, lim, size=(a, b)))
            biases.append(np.zeros(b))
        n_in = sizes[0]
        lin = np.zeros((n_in, state_dim)) if skip else None
        return cls(weights, biases, np.zeros(n_in), np.ones(n_in), np.ones(state_dim), state_dim, action_dim, velocity_only, lin)

    @classmethod
    def zeros(cls, state_dim: int, action_dim: int, hidden: Sequence[int] = (64, 64)) -> "ResidualNet":
        net = cls.create(state_dim, action_dim, hidden)
        net.weights = [np.zeros_like(w) for w in net.weights]
        net.skip = None
        return net

    @property
    def layer_sizes(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def copy(self) -> "ResidualNet":
        return ResidualNet(
            [w.copy() for w in self.weights], [b.copy() for b in self.biases], self.in_mean.copy(),
            self.in_std.copy(), self.out_scale.copy(), self.state_dim, self.action_dim, self.velocity_only,
            None if self.skip is None else self.skip.copy(),
        )

    def _mask(self) -> np.ndarray:
        m = np.ones(self.state_dim)
        if self.velocity_only:
            # state layout: [q_o, qd_o, q_r, qd_r]; positions are left untouched
            m[:] = 0.0
            n_o = (self.state_dim - 2 * self._n_rob()) // 2
            m[n_o:2 * n_o] = 1.0
            m[2 * n_o + self._n_rob():] = 1.0
        return m

    def _n_rob(self) -> int:
        return self.action_dim

    def forward(self, s, a, s_nom, params=None):
        """Residual for one state (1-D inputs) or a batch (2-D inputs)."""
        W, b, lin = params if params is not None else (self.weights, self.biases, self.skip)
        x = ad.concatenate([s, a, s_nom], axis=-1)
        x = (x - self.in_mean) / self.in_std
        h = x
        for i in range(len(W)):
            h = h @ W[i] + b[i]
            if i < len(W) - 1:
                h = ad.tanh(h)
        if lin is not None:
            h = h + x @ lin
        return h * (self.out_scale * self._mask())

    def check_finite(self) -> None:
        for arr in (*self.weights, *self.biases, *([] if self.skip is None else [self.skip])):
            if not np.all(np.isfinite(arr)):
                raise ResidualError("network weights are not finite")


def write_weights(path: str | Path, net: ResidualNet) -> None:
    """Versioned little-endian binary: header, standardisation, then layers row-major."""
    sizes = net.layer_sizes
    out = bytearray()
    out += WEIGHTS_MAGIC
    out += struct.pack("<IIIIII", WEIGHTS_VERSION, net.state_dim, net.action_dim, int(net.velocity_only), int(net.skip is not None), len(sizes))
    out += struct.pack(f"<{len(sizes)}I", *sizes)
    skip = [] if net.skip is None else [net.skip]
    for arr in (net.in_mean, net.in_std, net.out_scale, *[x for wb in zip(net.weights, net.biases) for x in wb], *skip):
        out += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    Path(path).write_bytes(bytes(out))


def read_weights(path: str | Path) -> ResidualNet:
    data = Path(path).read_bytes()
    if data[:4] != WEIGHTS_MAGIC:
        raise ResidualError("not a residual-network weight file")
    version, sdim, adim, vel, has_skip, n = struct.unpack_from("<IIIIII", data, 4)
    if version != WEIGHTS_VERSION:
        raise ResidualError(f"unsupported weight file version {version}")
    off = 4 + 24
    sizes = list(struct.unpack_from(f"<{n}I", data, off))
    off += 4 * n

    def take(count, shape):
        nonlocal off
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=off).astype(float).reshape(shape)
        off += 8 * count
        return arr

    in_mean = take(sizes[0], (sizes[0],))
    in_std = take(sizes[0], (sizes[0],))
    out_scale = take(sdim, (sdim,))
    weights, biases = [], []
    for a, b in zip(sizes[:-1], sizes[1:]):
        weights.append(take(a * b, (a, b)))
        biases.append(take(b, (b,)))
    skip = take(sizes[0] * sdim, (sizes[0], sdim)) if has_skip else None
    if off != len(data):
        raise ResidualError("trailing bytes in weight file")
    return ResidualNet(weights, biases, in_mean, in_std, out_scale, sdim, adim, bool(vel), skip)


# ---------------------------------------------------------------------------
# transitions


@dataclass
class Transition:
    s: SimState
    a: np.ndarray
    s_next: SimState


def _att_to_json(att: Attachment | None):
    if att is None:
        return None
    return {
        "link": att.link, "joint_index": att.joint_index, "kind": att.kind, "axis": list(map(float, att.axis)),
        "center": list(map(float, att.center)), "q_grasp": att.q_grasp, "ee_grasp": list(map(float, att.ee_grasp)),
    }


def _att_from_json(d) -> Attachment | None:
    if d is None:
        return None
    return Attachment(d["link"], d["joint_index"], d["kind"], np.array(d["axis"]), np.array(d["center"]), float(d["q_grasp"]), np.array(d["ee_grasp"]))


def _state_json(s: SimState) -> dict:
    s = s.numeric()
    return {
        "q_o": s.object.q.tolist(), "qd_o": s.object.qd.tolist(), "q_r": s.robot.q.tolist(), "qd_r": s.robot.qd.tolist(),
        "attachment": _att_to_json(s.attachment),
    }


def _state_from_json(d) -> SimState:
    f = lambda k: np.array(d[k], dtype=float)  # noqa: E731
    return SimState(ObjectState(f("q_o"), f("qd_o")), RobotState(f("q_r"), f("qd_r")), _att_from_json(d["attachment"]))


class TransitionBuffer:
    """Capacity-bounded FIFO of real-world transitions."""

    def __init__(self, capacity: int = 100_000):
        if capacity < 1:
            raise ResidualError("buffer capacity must be positive")
        self.capacity = capacity
        self._items: deque[Transition] = deque(maxlen=capacity)

    def __len__(self) -> int:
        return len(self._items)

    def __iter__(self):
        return iter(self._items)

    def __getitem__(self, i) -> Transition:
        return self._items[i]

    def add(self, s: SimState, a, s_next: SimState) -> None:
        s, s_next = s.numeric(), s_next.numeric()
        a = np.array(ad.value_of(a), dtype=float)
        for arr in (s.vector(), a, s_next.vector()):
            if not np.all(np.isfinite(arr)):
                raise ResidualError("transition contains non-finite values")
        if self._items:
            ref = self._items[0]
            if ref.s.vector().shape != s.vector().shape or ref.a.shape != a.shape:
                raise ResidualError("transition dimensions differ from the buffer's")
        self._items.append(Transition(s, a, s_next))

    def extend(self, items: Iterable[Transition]) -> None:
        for t in items:
            self.add(t.s, t.a, t.s_next)

    def to_jsonl(self) -> str:
        lines = []
        for t in self._items:
            lines.append(json.dumps({"s": _state_json(t.s), "a": t.a.tolist(), "s_next": _state_json(t.s_next)}, sort_keys=True))
        return "".join(line + "\n" for line in lines)

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_jsonl())

    @classmethod
    def read(cls, path: str | Path, capacity: int = 100_000) -> "TransitionBuffer":
        buf = cls(capacity)
        for line in Path(path).read_text().splitlines():
            if line.strip():
                d = json.loads(line)
                buf.add(_state_from_json(d["s"]), np.array(d["a"]), _state_from_json(d["s_next"]))
        return buf


# ---------------------------------------------------------------------------
# stepping


def nominal_step(s: SimState, a, world: RobotWorld, dt: float = DEFAULT_DT, grasp: bool = True) -> SimState:
    """The nominal simulator step (delegates to :func:`robot_step`)."""
    return robot_step(s, a, world, dt, grasp)


def augmented_step(s: SimState, a, net: ResidualNet, world: RobotWorld, dt: float = DEFAULT_DT, grasp: bool = True) -> SimState:
    """Nominal step plus the learned residual on the full state vector."""
    s_nom = nominal_step(s, a, world, dt, grasp)
    v_nom = s_nom.vector()
    delta = net.forward(s.vector(), a, v_nom)
    if not np.all(np.isfinite(ad.value_of(delta))):
        raise ResidualError("residual output is not finite")
    n_obj = len(ad.value_of(s.object.q))
    n_rob = len(ad.value_of(s.robot.q))
    return SimState.from_vector(v_nom + delta, n_obj, n_rob, s_nom.attachment)


def _dims(s: SimState) -> tuple[int, int]:
    return len(ad.value_of(s.object.q)), len(ad.value_of(s.robot.q))


def nominal_jacobians(s: SimState, a, world: RobotWorld, dt: float = DEFAULT_DT, grasp: bool = True):
    """(d s_nom / d s, d s_nom / d a) via reverse mode, one row per output."""
    n_obj, n_rob = _dims(s)
    att = s.attachment

    def f(sv, av):
        return nominal_step(SimState.from_vector(sv, n_obj, n_rob, att), av, world, dt, grasp).vector()

    _, (Js, Ja) = ad.jacobian(f, s.numeric().vector(), np.asarray(ad.value_of(a), dtype=float))
    return Js, Ja


def net_jacobians(net: ResidualNet, s_vec, a, s_nom) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Closed-form partials of the residual w.r.t. its three inputs."""
    x = np.concatenate([s_vec, a, s_nom])
    h = (x - net.in_mean) / net.in_std
    D0 = np.diag(1.0 / net.in_std)
    D = D0
    for i, (W, b) in enumerate(zip(net.weights, net.biases)):
        z = h @ W + b
        D = D @ W
        if i < len(net.weights) - 1:
            h = np.tanh(z)
            D = D * (1.0 - h**2)
        else:
            h = z
    if net.skip is not None:
        D = D + D0 @ net.skip
    D = D * (net.out_scale * net._mask())  # (n_in, S): d out_j / d x_i
    Jx = D.T
    S, A = net.state_dim, net.action_dim
    return Jx[:, :S], Jx[:, S:S + A], Jx[:, S + A:]


def augmented_jacobians(s: SimState, a, net: ResidualNet, world: RobotWorld, dt: float = DEFAULT_DT, grasp: bool = True):
    """Jacobians of the augmented step assembled from nominal and network parts.

    d s'/d s = d s_nom/d s + d delta/d s + d delta/d s_nom . d s_nom/d s, and the
    same with ``a`` in place of ``s``.
    """
    a = np.asarray(ad.value_of(a), dtype=float)
    Ns, Na = nominal_jacobians(s, a, world, dt, grasp)
    s_vec = s.numeric().vector()
    s_nom = nominal_step(s.numeric(), a, world, dt, grasp).vector()
    Ds, Da, Dn = net_jacobians(net, s_vec, a, np.asarray(ad.value_of(s_nom)))
    return Ns + Ds + Dn @ Ns, Na + Da + Dn @ Na


# ---------------------------------------------------------------------------
# training


def _features(buffer: Sequence[Transition], world: RobotWorld, dt: float, grasp: bool):
    S, A, N, T = [], [], [], []
    for t in buffer:
        s_nom = nominal_step(t.s, t.a, world, dt, grasp).numeric()
        S.append(t.s.vector())
        A.append(t.a)
        N.append(s_nom.vector())
        T.append(t.s_next.vector())
    return np.array(S), np.array(A), np.array(N), np.array(T)


def augmented_loss(net: ResidualNet, batch: Sequence[Transition], world: RobotWorld, dt: float = DEFAULT_DT, grasp: bool = True) -> float:
    """Mean Euclidean norm of the augmented one-step prediction error."""
    if len(batch) == 0:
        raise ResidualError("augmented_loss needs a non-empty batch")
    S, A, N, T = _features(batch, world, dt, grasp)
    return _loss_arrays(net, S, A, N, T)


def _loss_arrays(net, S, A, N, T, params=None):
    pred = N + net.forward(S, A, N, params)
    return ad.mean(ad.norm(pred - T, axis=1))


def nominal_error(batch: Sequence[Transition], world: RobotWorld, dt: float = DEFAULT_DT, grasp: bool = True) -> float:
    _, _, N, T = _features(batch, world, dt, grasp)
    return float(np.mean(np.linalg.norm(N - T, axis=1)))


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 64
    lr: float = 3e-3
    weight_decay: float = 0.0  # decoupled, applied to weights (not biases)
    beta1: float = 0.9
    beta2: float = 0.999
    seed: int = 0
    val_fraction: float = 0.1
    min_batch: int = 8
    divergence_factor: float = 1e3
    dt: float = DEFAULT_DT
    grasp: bool = True


@dataclass
class TrainingCurve:
    train: list[float] = field(default_factory=list)
    val: list[float] = field(default_factory=list)
    best_epoch: int = 0


def train_residual(net: ResidualNet, buffer: Sequence[Transition], world: RobotWorld, config: TrainConfig | None = None):
    """Fit the residual to real transitions by minibatch Adam on L_aug.

    Standardisation statistics come from the training split.  Returns the
    weights with the best validation loss (epoch 0 is the starting net).
    """
    cfg = config or TrainConfig()
    items = list(buffer)
    if len(items) < cfg.min_batch:
        raise ResidualError(f"need at least {cfg.min_batch} transitions, have {len(items)}")
    S, A, N, T = _features(items, world, cfg.dt, cfg.grasp)
    rng = np.random.default_rng(cfg.seed)
    order = rng.permutation(len(items))
    n_val = max(1, int(round(cfg.val_fraction * len(items))))
    val, tr = order[:n_val], order[n_val:]
    net = net.copy()
    X = np.concatenate([S, A, N], axis=1)[tr]
    net.in_mean = X.mean(axis=0)
    std = X.std(axis=0)
    net.in_std = np.where(std > 1e-8, std, 1.0)
    target = (T - N)[tr]
    net.out_scale = np.maximum(np.sqrt(np.mean(target**2, axis=0)), 1e-12)

    def val_loss(n):
        return float(ad.value_of(_loss_arrays(n, S[val], A[val], N[val], T[val])))

    curve = TrainingCurve()
    best_val, best = val_loss(net), net.copy()
    initial = float(ad.value_of(_loss_arrays(net, S[tr], A[tr], N[tr], T[tr])))
    curve.train.append(initial)
    curve.val.append(best_val)
    params = [*net.weights, *net.biases, *([] if net.skip is None else [net.skip])]
    m1 = [np.zeros_like(p) for p in params]
    m2 = [np.zeros_like(p) for p in params]
    L = len(net.weights)
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        perm = rng.permutation(tr)
        losses = []
        for start in range(0, len(perm), cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            tape = ad.Tape()
            leaves = [tape.var(p) for p in params]
            lin = leaves[2 * L] if net.skip is not None else None
            loss = _loss_arrays(net, S[idx], A[idx], N[idx], T[idx], (leaves[:L], leaves[L:2 * L], lin))
            grads = ad.grad(loss, leaves)
            step += 1
            for i, g in enumerate(grads):
                m1[i] = cfg.beta1 * m1[i] + (1 - cfg.beta1) * g
                m2[i] = cfg.beta2 * m2[i] + (1 - cfg.beta2) * g * g
                mh = m1[i] / (1 - cfg.beta1**step)
                vh = m2[i] / (1 - cfg.beta2**step)
                params[i] = params[i] - cfg.lr * mh / (np.sqrt(vh) + 1e-12)
                if cfg.weight_decay and not L <= i < 2 * L:
                    params[i] = params[i] * (1.0 - cfg.lr * cfg.weight_decay)
            losses.append(float(ad.value_of(loss)))
        net.weights, net.biases = params[:L], params[L:2 * L]
        if net.skip is not None:
            net.skip = params[2 * L]
        tl = float(np.mean(losses))
        if not np.isfinite(tl) or (initial > 0 and tl > cfg.divergence_factor * initial):
            raise ResidualError(f"residual training diverged at epoch {epoch}: loss {tl:.3g} (initial {initial:.3g})")
        v = val_loss(net)
        curve.train.append(tl)
        curve.val.append(v)
        if v < best_val:
            best_val, best = v, net.copy()
            curve.best_epoch = epoch
    best.check_finite()
    return best, curve


def split_buffer(buffer: Sequence[Transition], fraction: float, seed: int) -> tuple[list[Transition], list[Transition]]:
    items = list(buffer)
    order = np.random.default_rng(seed).permutation(len(items))
    n = int(round(fraction * len(items)))
    return [items[i] for i in order[n:]], [items[i] for i in order[:n]]
