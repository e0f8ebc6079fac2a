"""Closed-loop behavior-cloning policy over unified point states.

A fully-connected tanh network maps the flattened object points plus an
``h``-step action history to a chunk of ``l`` future actions.  Training
minimises the Gaussian negative log-likelihood ``||pi(s) - a||^2 / (2 sigma^2)``
(constant dropped) on whitened targets with hand-written backprop and Adam.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from collections import deque
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataset import ACTION_DIM, AugmentConfig, Demonstration, augment_arrays
from .errors import EmptyCorpus, MalformedFile, VersionMismatch
from .geometry import invert

log = logging.getLogger(__name__)

POLICY_FORMAT = "egopoint-policy"
POLICY_VERSION = 1


@dataclass(frozen=True)
class PolicyConfig:
    history_len: int = 6
    chunk_len: int = 10
    sigma: float = 0.1
    hidden_sizes: tuple = (256, 256)
    aggregation_m: float = 0.1
    learning_rate: float = 1e-3
    lr_final_fraction: float = 0.01
    batch_size: int = 64
    epochs: int = 1500
    seed: int = 0
    augment: bool = True
    augment_cfg: AugmentConfig = AugmentConfig()
    norm_samples: int = 8

    def __post_init__(self):
        if self.history_len < 1 or self.chunk_len < 1 or not self.sigma > 0:
            raise ValueError("history_len >= 1, chunk_len >= 1 and sigma > 0 required")
        object.__setattr__(self, "hidden_sizes", tuple(int(x) for x in self.hidden_sizes))
        if isinstance(self.augment_cfg, dict):
            object.__setattr__(self, "augment_cfg", AugmentConfig(**self.augment_cfg))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_sizes"] = list(self.hidden_sizes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PolicyConfig":
        d = dict(d)
        d["augment_cfg"] = AugmentConfig(**d.get("augment_cfg", {}))
        return cls(**d)


@dataclass
class Normalizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def identity(cls, dim: int) -> "Normalizer":
        return cls(np.zeros(dim), np.ones(dim))

    @classmethod
    def fit(cls, x: np.ndarray, floor: float = 1e-3) -> "Normalizer":
        return cls(x.mean(axis=0), np.maximum(x.std(axis=0), floor))

    def __call__(self, x):
        return (x - self.mean) / self.std

    def inverse(self, y):
        return y * self.std + self.mean


@dataclass
class PolicyParams:
    config: PolicyConfig
    num_points: int
    weights: list  # [(W, b), ...], W has shape (fan_in, fan_out)
    in_norm: Normalizer
    out_norm: Normalizer
    loss_curve: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    @property
    def input_dim(self) -> int:
        return 3 * self.num_points + ACTION_DIM * self.config.history_len

    @property
    def output_dim(self) -> int:
        return ACTION_DIM * self.config.chunk_len

    def copy(self) -> "PolicyParams":
        return replace(self, weights=[(w.copy(), b.copy()) for w, b in self.weights], loss_curve=list(self.loss_curve))

    def flat(self) -> np.ndarray:
        return np.concatenate([np.concatenate([w.ravel(), b.ravel()]) for w, b in self.weights])


def init_params(cfg: PolicyConfig, num_points: int, seed: int | None = None) -> PolicyParams:
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    sizes = [3 * num_points + ACTION_DIM * cfg.history_len, *cfg.hidden_sizes, ACTION_DIM * cfg.chunk_len]
    weights = []
    for fan_in, fan_out in zip(sizes, sizes[1:]):
        w = rng.normal(0.0, math.sqrt(1.0 / fan_in), (fan_in, fan_out))
        weights.append((w, np.zeros(fan_out)))
    return PolicyParams(cfg, num_points, weights, Normalizer.identity(sizes[0]), Normalizer.identity(sizes[-1]))


# -- network ----------------------------------------------------------------


def _mlp(weights, x):
    """Forward pass on whitened inputs; returns (output, activations)."""
    acts = [x]
    h = x
    for i, (w, b) in enumerate(weights):
        h = h @ w + b
        if i < len(weights) - 1:
            h = np.tanh(h)
        acts.append(h)
    return h, acts


def _mlp_backward(weights, acts, dout):
    grads = [None] * len(weights)
    d = dout
    for i in range(len(weights) - 1, -1, -1):
        w, _ = weights[i]
        grads[i] = (acts[i].T @ d, d.sum(axis=0))
        if i > 0:
            d = (d @ w.T) * (1.0 - acts[i] ** 2)
    return grads


def make_input(object_points, history) -> np.ndarray:
    return np.concatenate([np.asarray(object_points, dtype=float).reshape(-1), np.asarray(history, dtype=float).reshape(-1)])


def forward_batch(params: PolicyParams, x: np.ndarray) -> np.ndarray:
    """Raw inputs (B, in) -> denormalised chunk vectors (B, 7*l)."""
    y, _ = _mlp(params.weights, params.in_norm(x))
    return params.out_norm.inverse(y)


def forward(params: PolicyParams, state, hist) -> np.ndarray:
    """Mean action chunk ``(l, 7)`` for one state and history buffer.

    ``state`` may be a :class:`UnifiedState` or the (P, 3) object points.
    """
    pts = getattr(state, "object_points", state)
    hist = np.asarray(list(hist), dtype=float)
    x = make_input(pts, hist)
    if x.shape != (params.input_dim,):
        raise ValueError(f"input has {x.size} values, network expects {params.input_dim}")
    return forward_batch(params, x[None])[0].reshape(params.config.chunk_len, ACTION_DIM)


def nll_loss(pred, target, sigma: float) -> float:
    """Mean over the batch of ``||pred - target||^2 / (2 sigma^2)``."""
    pred = np.atleast_2d(pred)
    target = np.atleast_2d(target)
    return float(np.mean(np.sum((pred - target) ** 2, axis=1)) / (2.0 * sigma * sigma))


def loss(params: PolicyParams, batch) -> float:
    """Training loss on a raw ``(inputs, targets)`` batch, in whitened target units."""
    x, y = batch
    pred, _ = _mlp(params.weights, params.in_norm(x))
    return nll_loss(pred, params.out_norm(y), params.config.sigma)


def backward(params: PolicyParams, batch):
    """Exact gradients of :func:`loss` with respect to every weight and bias."""
    x, y = batch
    pred, acts = _mlp(params.weights, params.in_norm(x))
    s2 = params.config.sigma ** 2
    dout = (pred - params.out_norm(y)) / (s2 * len(x))
    return _mlp_backward(params.weights, acts, dout)


# -- data -------------------------------------------------------------------


def episode_samples(points, actions, history_len: int, chunk_len: int, tail: int | None = None):
    """(inputs, targets) for every step of one episode.

    The history of step ``t`` is the actions ``t-h .. t-1`` (clamped to the
    first action, matching the inference buffer initialisation) and the
    target is actions ``t .. t+l-1`` (clamped to the last action).  ``tail``
    extra steps past the end teach the policy to hold its final pose.
    """
    actions = np.asarray(actions, dtype=float)
    n = len(actions)
    tail = history_len if tail is None else tail
    t = np.arange(n + tail)
    hist_idx = np.clip(t[:, None] + np.arange(-history_len, 0)[None, :], 0, n - 1)
    tgt_idx = np.clip(t[:, None] + np.arange(chunk_len)[None, :], 0, n - 1)
    obj = np.broadcast_to(np.asarray(points, dtype=float).reshape(1, -1), (len(t), np.size(points)))
    x = np.concatenate([obj, actions[hist_idx].reshape(len(t), -1)], axis=1)
    y = actions[tgt_idx].reshape(len(t), -1)
    return x, y


def corpus_samples(corpus: Sequence[Demonstration], cfg: PolicyConfig, rng: np.random.Generator | None = None):
    """Stack samples of every demo; with ``rng`` each demo gets a fresh augmentation."""
    xs, ys = [], []
    for d in corpus:
        pts, act = d.object_points, d.actions
        if rng is not None:
            pts, act = augment_arrays(pts, act, cfg.augment_cfg, rng)
        x, y = episode_samples(pts, act, cfg.history_len, cfg.chunk_len)
        xs.append(x)
        ys.append(y)
    return np.concatenate(xs), np.concatenate(ys)


class Adam:
    def __init__(self, weights, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = [(np.zeros_like(w), np.zeros_like(b)) for w, b in weights]
        self.v = [(np.zeros_like(w), np.zeros_like(b)) for w, b in weights]
        self.t = 0

    def step(self, weights, grads):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for (w, b), (gw, gb), mi, vi in zip(weights, grads, self.m, self.v):
            for p, g, m, v in ((w, gw, mi[0], vi[0]), (b, gb, mi[1], vi[1])):
                m *= self.b1
                m += (1.0 - self.b1) * g
                v *= self.b2
                v += (1.0 - self.b2) * g * g
                p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def train(corpus: Sequence[Demonstration], cfg: PolicyConfig = PolicyConfig(), callback=None) -> PolicyParams:
    """Minibatch Adam on the NLL loss; augmentation is redrawn every epoch.

    Whitening statistics are fitted once, before training, on
    ``norm_samples`` augmented copies of the corpus (or the raw corpus when
    augmentation is off) so that they cover the volume seen in training.
    """
    if not corpus:
        raise EmptyCorpus("cannot train on an empty corpus")
    p = corpus[0].num_points
    if any(d.num_points != p for d in corpus):
        raise ValueError("all demonstrations must have the same number of object points")
    rng = np.random.default_rng(cfg.seed)
    params = init_params(cfg, p, seed=int(rng.integers(2**63)))
    aug_rng = np.random.default_rng(rng.integers(2**63))
    batch_rng = np.random.default_rng(rng.integers(2**63))

    if cfg.augment:
        norm_rng = np.random.default_rng(rng.integers(2**63))
        parts = [corpus_samples(corpus, cfg, norm_rng) for _ in range(max(1, cfg.norm_samples))]
        x0, y0 = np.concatenate([a for a, _ in parts]), np.concatenate([b for _, b in parts])
    else:
        x0, y0 = corpus_samples(corpus, cfg)
    params.in_norm = Normalizer.fit(x0)
    params.out_norm = Normalizer.fit(y0)
    params.meta["training_box"] = training_volume(corpus).tolist()
    params.meta["num_demos"] = len(corpus)

    opt = Adam(params.weights, cfg.learning_rate)
    fixed = None if cfg.augment else corpus_samples(corpus, cfg)
    for epoch in range(cfg.epochs):
        # cosine decay from learning_rate to lr_final_fraction * learning_rate
        frac = epoch / max(1, cfg.epochs - 1)
        opt.lr = cfg.learning_rate * (cfg.lr_final_fraction + (1.0 - cfg.lr_final_fraction) * 0.5 * (1.0 + math.cos(math.pi * frac)))
        x, y = corpus_samples(corpus, cfg, aug_rng) if cfg.augment else fixed
        xn, yn = params.in_norm(x), params.out_norm(y)
        order = batch_rng.permutation(len(x))
        total = 0.0
        s2 = cfg.sigma ** 2
        for start in range(0, len(x), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            pred, acts = _mlp(params.weights, xn[idx])
            r = pred - yn[idx]
            total += float(np.sum(r * r)) / (2.0 * s2)
            grads = _mlp_backward(params.weights, acts, r / (s2 * len(idx)))
            opt.step(params.weights, grads)
        params.loss_curve.append(total / len(x))
        if callback is not None:
            callback(epoch, params.loss_curve[-1])
    log.info("trained %d epochs, loss %.4g -> %.4g", cfg.epochs, params.loss_curve[0], params.loss_curve[-1])
    return params


# -- inference --------------------------------------------------------------


def aggregate(chunks, m: float) -> np.ndarray:
    """Exponentially weighted average of current-step predictions.

    ``chunks`` is a sequence of ``(age, prediction)`` pairs; a prediction made
    ``age`` steps ago gets weight ``exp(-m * age)``.
    """
    if not chunks:
        raise ValueError("no predictions to aggregate")
    ages = np.array([a for a, _ in chunks], dtype=float)
    preds = np.array([np.asarray(p, dtype=float) for _, p in chunks])
    w = np.exp(-m * (ages - ages.min()))
    w /= w.sum()
    return w @ preds


def binarize_gripper(g: float) -> float:
    return 1.0 if g > 0 else -1.0


class HistoryBuffer:
    """The last ``h`` executed actions, oldest first."""

    def __init__(self, initial, h: int):
        if h < 1:
            raise ValueError("history length must be >= 1")
        a = np.asarray(initial, dtype=float).reshape(ACTION_DIM)
        self._buf = deque([a.copy() for _ in range(h)], maxlen=h)

    def push(self, action):
        self._buf.append(np.asarray(action, dtype=float).reshape(ACTION_DIM).copy())

    def __len__(self):
        return len(self._buf)

    def __iter__(self):
        return iter(self._buf)

    def array(self) -> np.ndarray:
        return np.array(self._buf)


@dataclass
class RolloutTrace:
    states: list  # env states, initial state first
    actions: np.ndarray  # executed actions (T, 7)
    success: bool
    buffer_lengths: list = field(default_factory=list)


def training_volume(corpus: Sequence[Demonstration]) -> np.ndarray:
    """Axis-aligned box ``(3, 2)`` spanned by the corpus object points."""
    pts = np.concatenate([d.object_points for d in corpus])
    return np.column_stack([pts.min(axis=0), pts.max(axis=0)])


def rollout(policy, env, env_cfg=None, observed_points=None) -> RolloutTrace:
    """Run the closed inference loop until the env horizon.

    ``policy`` is either :class:`PolicyParams` or any callable
    ``(object_points, history_array) -> (l, 7) chunk``.  The object points
    are read once from the initial env state unless ``observed_points`` is
    given (e.g. points recovered by a depth sensor).
    """
    from .simulator import EnvConfig, env_step, env_success

    env_cfg = env_cfg or EnvConfig()
    if isinstance(policy, PolicyParams):
        cfg = policy.config
        h, m = cfg.history_len, cfg.aggregation_m
        predict = lambda pts, hist: forward(policy, pts, hist)  # noqa: E731
    else:
        h, m = getattr(policy, "history_len", 1), getattr(policy, "aggregation_m", 0.0)
        predict = policy
    pts = np.array(env.tracked_points if observed_points is None else observed_points, dtype=float)
    hist = HistoryBuffer(env.ee, h)
    live: deque = deque()
    states, executed, lengths = [env], [], []
    for t in range(env_cfg.horizon):
        chunk = np.asarray(predict(pts, hist.array()), dtype=float)
        live.append((t, chunk))
        while live and t - live[0][0] >= len(live[0][1]):
            live.popleft()
        a = aggregate([(t - t0, c[t - t0]) for t0, c in live], m)
        a[6] = binarize_gripper(a[6])
        env = env_step(env, a, env_cfg)
        hist.push(a)
        states.append(env)
        executed.append(a)
        lengths.append(len(hist))
    return RolloutTrace(states, np.array(executed), env_success(states, cfg=env_cfg), lengths)


# -- persistence ------------------------------------------------------------


def _floats(a) -> list:
    return np.asarray(a, dtype=float).ravel().tolist()


def save_policy(path, params: PolicyParams) -> str:
    """Write the policy as JSON; returns the SHA-256 of the file."""
    doc = {
        "format": POLICY_FORMAT,
        "version": POLICY_VERSION,
        "config": params.config.to_dict(),
        "num_points": params.num_points,
        "layers": [{"shape": list(w.shape), "W": _floats(w), "b": _floats(b)} for w, b in params.weights],
        "in_norm": {"mean": _floats(params.in_norm.mean), "std": _floats(params.in_norm.std)},
        "out_norm": {"mean": _floats(params.out_norm.mean), "std": _floats(params.out_norm.std)},
        "loss_curve": [float(v) for v in params.loss_curve],
        "meta": params.meta,
    }
    data = json.dumps(doc).encode()
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def load_policy(path) -> PolicyParams:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise MalformedFile(f"{path}: {e}") from None
    if doc.get("format") != POLICY_FORMAT:
        raise MalformedFile(f"{path}: not a policy file")
    if doc.get("version") != POLICY_VERSION:
        raise VersionMismatch(f"{path}: policy version {doc.get('version')!r}, reader version {POLICY_VERSION}")
    try:
        cfg = PolicyConfig.from_dict(doc["config"])
        weights = [
            (np.array(l["W"], dtype=float).reshape(l["shape"]), np.array(l["b"], dtype=float)) for l in doc["layers"]
        ]
        norm = lambda d: Normalizer(np.array(d["mean"], dtype=float), np.array(d["std"], dtype=float))  # noqa: E731
        return PolicyParams(cfg, int(doc["num_points"]), weights, norm(doc["in_norm"]), norm(doc["out_norm"]), list(doc["loss_curve"]), dict(doc.get("meta", {})))
    except (KeyError, TypeError, ValueError) as e:
        raise MalformedFile(f"{path}: {type(e).__name__}: {e}") from None


# -- evaluation -------------------------------------------------------------

HELD_OUT_SEED = 100_000
IN_VOLUME = "in"
OUT_OF_VOLUME = "out"


def out_of_volume_shift(grasp_point, box, rng: np.random.Generator, distance=(0.2, 0.4)) -> np.ndarray:
    """Translation putting ``grasp_point`` 0.2-0.4 m beyond one face of ``box``."""
    box = np.asarray(box, dtype=float)
    ax = int(rng.integers(3))
    side = int(rng.integers(2))
    gap = rng.uniform(*distance)
    shift = np.zeros(3)
    if side:
        shift[ax] = box[ax, 1] + gap - grasp_point[ax]
    else:
        shift[ax] = box[ax, 0] - gap - grasp_point[ax]
    return shift


def _eval_setup(seed, task_family, mode, box):
    from .simulator import generate_scene, sample_head_pose

    scene = generate_scene(task_family, seed)
    cam = sample_head_pose(seed)[0]
    shift = np.zeros(3)
    if mode == OUT_OF_VOLUME:
        if box is None:
            raise ValueError("out-of-volume evaluation needs the training box")
        g = invert(cam).apply(scene.grasp_point)
        shift = out_of_volume_shift(g, box, np.random.default_rng([seed, 7]))
    elif mode != IN_VOLUME:
        raise ValueError(f"unknown evaluation mode {mode!r}")
    return scene, cam, shift


def eval_env(seed: int, task_family: str = "pick_place", mode: str = IN_VOLUME, box=None):
    """Held-out env for ``seed``: scene, first head pose, optional task shift."""
    from .simulator import make_env

    scene, cam, shift = _eval_setup(seed, task_family, mode, box)
    return make_env(scene, cam, shift)


class ScriptedPolicy:
    """Replays a fixed action sequence through the chunked inference loop."""

    history_len = 1
    aggregation_m = 0.0

    def __init__(self, actions, chunk_len: int = 10):
        self.actions = np.asarray(actions, dtype=float)
        self.chunk_len = chunk_len
        self.t = 0

    def __call__(self, pts, hist):
        idx = np.clip(np.arange(self.t, self.t + self.chunk_len), 0, len(self.actions) - 1)
        self.t += 1
        return self.actions[idx]


def oracle_policy(seed: int, task_family: str = "pick_place", mode: str = IN_VOLUME, box=None) -> ScriptedPolicy:
    """The scripted expert for the held-out env of ``seed``."""
    from .simulator import scripted_expert

    scene, cam, shift = _eval_setup(seed, task_family, mode, box)
    act = scripted_expert(scene).actions(invert(cam))
    act[:, 0:3] += shift
    act[:, 3:6] += shift
    return ScriptedPolicy(act)


def triangulated_observation(seed: int, task_family: str = "pick_place", mode: str = IN_VOLUME, box=None,
                             k=None, noise=None, tri_cfg=None) -> np.ndarray:
    """Tracked points of the held-out scene recovered by triangulation over
    the head arc that starts at the env's camera pose."""
    from .geometry import CameraIntrinsics
    from .simulator import ArcConfig, TrackerNoiseModel, camera_arc, synth_tracks
    from .triangulation import TriangulationConfig, triangulate_object

    k = k or CameraIntrinsics.default()
    scene, cam, shift = _eval_setup(seed, task_family, mode, box)
    arc = camera_arc(scene, seed, ArcConfig(), k)
    tracks = synth_tracks(scene, arc, k, noise or TrackerNoiseModel(), seed)
    obj = triangulate_object(tracks, k, tri_cfg or TriangulationConfig(), seed, reference=cam)
    return obj.points + shift


def evaluate(policy, n: int = 50, *, first_seed: int = HELD_OUT_SEED, task_family: str = "pick_place",
             mode: str = IN_VOLUME, box=None, depth_warp=None, triangulate: bool = False, k=None,
             env_cfg=None) -> dict:
    """Success rate of ``policy`` over ``n`` held-out scenes.

    ``policy="oracle"`` runs the scripted expert of each scene instead.
    By default the policy observes the true object points.  With
    ``triangulate`` it observes points triangulated from noisy tracks; with
    ``depth_warp`` it observes points re-estimated from a warped, affinely
    calibrated depth map.
    """
    from .geometry import CameraIntrinsics
    from .simulator import warped_depth_points

    if triangulate and depth_warp is not None:
        raise ValueError("choose either triangulate or depth_warp")

    if box is None and isinstance(policy, PolicyParams):
        box = policy.meta.get("training_box")
    k = k or CameraIntrinsics.default()
    episodes = []
    for i in range(n):
        seed = first_seed + i
        env = eval_env(seed, task_family, mode, box)
        pol = oracle_policy(seed, task_family, mode, box) if policy == "oracle" else policy
        observed = None
        if depth_warp is not None:
            observed, _ = warped_depth_points(env.tracked_points, k, depth_warp)
        elif triangulate:
            observed = triangulated_observation(seed, task_family, mode, box, k)
        tr = rollout(pol, env, env_cfg, observed)
        final = tr.states[-1]
        episodes.append({
            "seed": seed,
            "success": tr.success,
            "grasped": bool(final.grasped),
            "final_goal_distance": float(np.linalg.norm(final.grasp_point - final.goal_point)),
            "state_error": 0.0 if observed is None else float(np.linalg.norm(observed - env.tracked_points, axis=1).mean()),
        })
    rate = float(np.mean([e["success"] for e in episodes])) if episodes else 0.0
    depth = "warped" if depth_warp is not None else "triangulated" if triangulate else "true"
    return {"mode": mode, "depth": depth, "n": n, "success_rate": rate, "episodes": episodes}
