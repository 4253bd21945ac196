"""Reward-guided fine-tuning of a trained flow with clipped-ratio policy
gradients, plus seeded constrained optimization.

Generation is treated as an episodic decision process: each node-type or
bond choice is one action, valency rejections cost a fixed penalty at
the step where they happen, and the property score of the finished
molecule is discounted backward through the episode. The policy's
probability of a discrete action is the exact probability that the
step's Gaussian, pushed through the affine transform, lands in that
category's argmax region. That integral has no closed form beyond two
categories, so it is evaluated by composite Gauss-Legendre quadrature
with panels refined around each category crossover point.

For the ratio objective, every step's integration grid is built once
from the acting-policy parameters and then frozen, which makes the
surrogate a smooth function of the weights: re-evaluating at the acting
weights reproduces the stored log-probabilities bit for bit, so ratios
start at exactly one and finite differences agree with the tape
gradient.
"""

from __future__ import annotations

import math
import shlex
import subprocess
from collections import Counter
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import rgcn
from .autodiff import AdamState, Tape, Tensor, adam_step
from .flow import (
    FlowParams,
    ModelSpec,
    _conditionals_for_graph,
    _edge_step_state,
    _reorder_for_window,
    build_plan,
    edge_conditional,
    node_conditional,
)
from .graph import GraphError, MolecularGraph, bfs_reorder, empty_categories
from .molt import write_molt
from .sampler import SamplerConfig, sample_molecule

LOG_TWO_PI = math.log(2.0 * math.pi)

_GL_CACHE: dict = {}


def _leggauss(n: int):
    if n not in _GL_CACHE:
        _GL_CACHE[n] = np.polynomial.legendre.leggauss(n)
    return _GL_CACHE[n]


GRID_SPAN = 9.0  # +-9 standard deviations; truncated tail mass ~ 2e-19

# fractions of the crossover halfwidth where extra panel edges go
_REFINE_FRACTIONS = np.array([-1.0, -0.25, 0.0, 0.25, 1.0])
_REFINE_FRACTIONS_FINE = np.array([-1.0, -0.5, -0.125, 0.0, 0.125, 0.5, 1.0])


def argmax_region_grid(
    mu: np.ndarray,
    alpha: np.ndarray,
    action: int,
    points: int = 8,
    fine: bool = False,
    span: float = GRID_SPAN,
):
    """Quadrature nodes and log-weights for one argmax-region integral.

    The integrand is phi(u) * prod_k Phi((mu_c + alpha_c u - mu_k) /
    alpha_k). Each k != c contributes a sigmoid-like factor switching at
    u = (mu_k - mu_c) / alpha_c over a width set by alpha_k / alpha_c;
    panel edges are packed around those switch points so sharp factors
    (tiny alpha ratios) stay resolved.
    """
    mu = np.asarray(mu, dtype=np.float64)
    alpha = np.asarray(alpha, dtype=np.float64)
    c = int(action)
    base = np.linspace(-span, span, 19 if fine else 13)
    fractions = _REFINE_FRACTIONS_FINE if fine else _REFINE_FRACTIONS
    extra = []
    for k in range(mu.shape[0]):
        if k == c:
            continue
        center = (mu[k] - mu[c]) / alpha[c]
        halfwidth = 6.0 * max(alpha[k] / alpha[c], 1e-8)
        extra.append(np.clip(center + halfwidth * fractions, -span, span))
    edges = np.unique(np.concatenate([base] + extra))
    edges = edges[np.concatenate([[True], np.diff(edges) > 1e-12])]
    nodes, weights = _leggauss(16 if fine else points)
    half = 0.5 * (edges[1:] - edges[:-1])  # (P,)
    mid = 0.5 * (edges[1:] + edges[:-1])
    u = (mid[:, None] + half[:, None] * nodes[None, :]).reshape(-1)
    logw = (np.log(half[:, None]) + np.log(weights[None, :])).reshape(-1)
    return u, logw


def _stacked_action_logprobs(
    mu,
    alpha,
    grid_u: np.ndarray,
    grid_logw: np.ndarray,
    actions: np.ndarray,
):
    """Log-probability of each row's action under its frozen grid.

    mu and alpha are (S, D) tensors (or constants wrapped as tensors);
    grid_u and grid_logw are (S, Q) with unused slots padded by -inf
    log-weight. Returns an (S,) tensor. All rows share one fused chain
    of array ops, so the tape stays small no matter how many steps.
    """
    s_count, d = mu.data.shape
    q = grid_u.shape[1]
    rows = np.arange(s_count)
    mu_c = ad.take(mu, (rows, actions)).reshape(s_count, 1)
    alpha_c = ad.take(alpha, (rows, actions)).reshape(s_count, 1)
    z_top = mu_c + alpha_c * Tensor(grid_u)  # (S, Q)
    y = (z_top.reshape(s_count, q, 1) - mu.reshape(s_count, 1, d)) / alpha.reshape(
        s_count, 1, d
    )
    log_cdf = ad.log_ndtr(y)  # (S, Q, D)
    keep = np.ones((s_count, 1, d))
    keep[rows, 0, actions] = 0.0  # own category contributes the phi factor instead
    tail = (log_cdf * Tensor(keep)).sum(axis=2)  # (S, Q)
    # padded slots carry -inf log-weight and drop out of the logsumexp
    const = grid_logw + (-0.5 * grid_u * grid_u - 0.5 * LOG_TWO_PI)
    return ad.logsumexp(tail + Tensor(const), axis=1)


def action_logprobs(
    mu: np.ndarray, alpha: np.ndarray, temperature: float = 1.0
) -> np.ndarray:
    """Normalized log-probabilities of every category for one step.

    Uses the fine quadrature grid; the exact probabilities sum to one,
    so normalization only removes residual quadrature error.
    """
    mu = np.asarray(mu, dtype=np.float64).reshape(-1)
    alpha = np.asarray(alpha, dtype=np.float64).reshape(-1) * temperature
    d = mu.shape[0]
    raw = np.empty(d)
    for c in range(d):
        u, logw = argmax_region_grid(mu, alpha, c, fine=True)
        term = logw - 0.5 * u * u - 0.5 * LOG_TWO_PI
        for k in range(d):
            if k != c:
                term = term + _log_ndtr_np((mu[c] - mu[k] + alpha[c] * u) / alpha[k])
        raw[c] = _logsumexp_np(term)
    return raw - _logsumexp_np(raw)


def _log_ndtr_np(x: np.ndarray) -> np.ndarray:
    from scipy.special import log_ndtr

    return log_ndtr(x)


def _logsumexp_np(a: np.ndarray) -> float:
    m = float(np.max(a))
    if not np.isfinite(m):
        return -745.0  # every node underflowed; report "essentially impossible"
    return m + math.log(float(np.sum(np.exp(a - m))))


def step_conditional(
    params: FlowParams, spec: ModelSpec, g: MolecularGraph, kind: str, i: int, j: int = -1
):
    """Evaluation-mode (mu, alpha) rows for one generation step of g."""
    k = params.rgcn.width
    if kind == "node":
        if i == 0:
            h = Tensor(np.zeros((1, k)))
        else:
            sub = MolecularGraph(g.node_types[:i], g.categories[:i, :i], g.no_edge)
            h = rgcn.encode(sub, params.rgcn, training=False).graph_embedding.reshape(1, k)
        mu, alpha = node_conditional(params, h)
    elif kind == "edge":
        sub = _edge_step_state(g, i, j)
        emb = rgcn.encode(sub, params.rgcn, training=False, undecided_row=(i, j))
        mu, alpha = edge_conditional(
            params,
            emb.graph_embedding.reshape(1, k),
            Tensor(emb.H.data[i : i + 1]),
            Tensor(emb.H.data[j : j + 1]),
        )
    else:
        raise ValueError(f"unknown step kind {kind!r}")
    return mu.data[0].copy(), alpha.data[0].copy()


def compute_action_logprob(
    params: FlowParams,
    spec: ModelSpec,
    g: MolecularGraph,
    kind: str,
    i: int,
    j: int,
    action: int,
    temperature: float = 1.0,
) -> float:
    """Log-probability that the sampler picks `action` at the given step
    when the generated prefix matches g."""
    mu, alpha = step_conditional(params, spec, g, kind, i, j)
    return float(action_logprobs(mu, alpha, temperature)[action])


# ---------------------------------------------------------------------------
# trajectories


@dataclass
class TrajStep:
    kind: str
    i: int
    j: int
    action: int
    mu_old: np.ndarray
    alpha_old: np.ndarray
    logp_old: float
    grid_u: np.ndarray
    grid_logw: np.ndarray
    penalty: float
    ret: float = 0.0


@dataclass
class Trajectory:
    """One complete generation episode with everything a ratio-objective
    update needs: the generated decision sequence (gen_graph includes a
    trailing node that termination discarded, so states can be rebuilt),
    acting-policy log-probs, per-step penalties and discounted returns."""

    gen_graph: MolecularGraph
    final_graph: MolecularGraph
    steps: list
    final_reward: float
    seed_size: int = 0

    @property
    def num_steps(self) -> int:
        return len(self.steps)

    def returns(self) -> np.ndarray:
        return np.array([s.ret for s in self.steps])

    def rewards(self) -> np.ndarray:
        """Per-step rewards: penalties at their own step, property reward
        at the last step."""
        r = np.array([s.penalty for s in self.steps])
        r[-1] += self.final_reward
        return r


@dataclass
class RewardConfig:
    """Shaping of the final property score plus episode discounting."""

    gamma: float = 0.9
    shaping: str = "linear"  # "linear": t1 * score; "exp": exp(score / t2)
    t1: float = 1.0
    t2: float = 1.0
    validity_penalty: float = -1.0

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")
        if self.t2 <= 0.0:
            raise ValueError("t2 must be positive")
        if self.shaping not in ("linear", "exp"):
            raise ValueError(f"unknown shaping {self.shaping!r}")

    def shape(self, score: float) -> float:
        if self.shaping == "linear":
            return self.t1 * score
        return math.exp(score / self.t2)


def _fill_returns(steps: list, final_reward: float, gamma: float) -> None:
    # G_t = r_t + gamma * G_{t+1}; r_t is the step's own penalty, with the
    # shaped property reward added at the last step
    g = 0.0
    for idx in range(len(steps) - 1, -1, -1):
        r = steps[idx].penalty + (final_reward if idx == len(steps) - 1 else 0.0)
        g = r + gamma * g
        steps[idx].ret = g


def _pad_grids(steps: list):
    q = max(s.grid_u.shape[0] for s in steps)
    u = np.zeros((len(steps), q))
    logw = np.full((len(steps), q), -np.inf)
    for row, s in enumerate(steps):
        u[row, : s.grid_u.shape[0]] = s.grid_u
        logw[row, : s.grid_logw.shape[0]] = s.grid_logw
    return u, logw


class ScorerError(Exception):
    pass


def build_trajectory(
    params: FlowParams,
    g: MolecularGraph,
    trace,
    spec: ModelSpec,
    reward_cfg: RewardConfig,
    score: float,
    temperature: float = 1.0,
    grid_points: int = 8,
    seed_size: int = 0,
) -> Trajectory:
    """Assemble a trajectory from a sampling trace and a property score.

    Acting log-probs are evaluated through the identical batched path the
    ratio objective uses, so re-evaluating under unchanged parameters
    reproduces them exactly."""
    if trace.termination == "no-bonds":
        last_node = [s for s in trace.steps if s.kind == "node"][-1]
        types = np.concatenate([g.node_types, [last_node.action]])
        cats = empty_categories(g.n + 1, g.no_edge)
        cats[: g.n, : g.n] = g.categories
        gen_graph = MolecularGraph(types, cats, g.no_edge)
    else:
        gen_graph = g
    steps = []
    for s in trace.steps:
        alpha_eff = s.alpha * temperature
        u, logw = argmax_region_grid(s.mu, alpha_eff, s.action, points=grid_points)
        steps.append(
            TrajStep(
                kind=s.kind,
                i=s.i,
                j=s.j,
                action=s.action,
                mu_old=s.mu,
                alpha_old=s.alpha,
                logp_old=0.0,
                grid_u=u,
                grid_logw=logw,
                penalty=reward_cfg.validity_penalty * s.rejections,
            )
        )
    final_reward = reward_cfg.shape(score)
    _fill_returns(steps, final_reward, reward_cfg.gamma)
    traj = Trajectory(
        gen_graph=gen_graph,
        final_graph=g,
        steps=steps,
        final_reward=final_reward,
        seed_size=seed_size,
    )
    lp, order = _new_policy_logprobs(params, spec, traj, temperature)
    for row, t in enumerate(order):
        steps[t].logp_old = float(lp.data[row])
    return traj


def collect_trajectories(
    params: FlowParams,
    spec: ModelSpec,
    sampler_cfg: SamplerConfig,
    reward_cfg: RewardConfig,
    scorer,
    count: int,
    rng,
    seeds=None,
    grid_points: int = 8,
):
    """Run `count` episodes; returns (trajectories, scorer_failures).

    Episodes use independent spawned random streams. A scorer failure
    drops that episode and bumps the failure counter.
    """
    streams = rng.spawn(count)
    out = []
    failures = 0
    for e in range(count):
        seed_graph = seeds[e % len(seeds)] if seeds else None
        g, trace = sample_molecule(
            params, spec, sampler_cfg, streams[e], seed_graph=seed_graph
        )
        if not trace.steps:
            continue  # seed already filled the graph; nothing to learn from
        try:
            score = scorer.score(g)
        except ScorerError:
            failures += 1
            continue
        out.append(
            build_trajectory(
                params,
                g,
                trace,
                spec,
                reward_cfg,
                score,
                temperature=sampler_cfg.temperature,
                grid_points=grid_points,
                seed_size=seed_graph.n if seed_graph is not None else 0,
            )
        )
    return out, failures


# ---------------------------------------------------------------------------
# clipped-ratio objective


class StepBaselines:
    """Per-step-position moving averages of returns.

    A position's first batch mean initializes its value outright, so on
    constant-reward batches the very next advantage is exactly zero;
    afterwards the mean folds in with the decay rate.
    """

    def __init__(self, decay: float = 0.9):
        if not 0.0 < decay < 1.0:
            raise ValueError("decay must lie in (0, 1)")
        self.decay = decay
        self.values: dict = {}

    def get(self, position: int) -> float:
        return self.values.get(position, 0.0)

    def advantages(self, traj: Trajectory) -> np.ndarray:
        return np.array([s.ret - self.get(t) for t, s in enumerate(traj.steps)])

    def update_from_batch(self, trajectories) -> None:
        sums: dict = {}
        counts: dict = {}
        for traj in trajectories:
            for t, s in enumerate(traj.steps):
                sums[t] = sums.get(t, 0.0) + s.ret
                counts[t] = counts.get(t, 0) + 1
        for t, total in sums.items():
            mean = total / counts[t]
            if t in self.values:
                self.values[t] = self.decay * self.values[t] + (1.0 - self.decay) * mean
            else:
                self.values[t] = mean


@dataclass
class PpoConfig:
    clip_ratio: float = 0.2
    updates: int = 4  # gradient passes over each collected batch
    batch_size: int = 64
    lr: float = 1e-3
    warmup: int = 0  # iterations of linear learning-rate ramp
    baseline_decay: float = 0.9
    grid_points: int = 8
    chunk: int = 16  # trajectories per tape during accumulation

    def __post_init__(self):
        if self.clip_ratio <= 0.0:
            raise ValueError("clip_ratio must be positive")


def _new_policy_logprobs(
    params: FlowParams, spec: ModelSpec, traj: Trajectory, temperature: float = 1.0
):
    """Current-policy log-probs of every step's action, over the frozen
    grids. Returns (lp tensor of shape (S,), step-index order) with node
    steps first."""
    plan = build_plan(traj.gen_graph.n, spec.window)
    mu_x, alpha_x, mu_a, alpha_a = _conditionals_for_graph(
        traj.gen_graph, params, plan, training=False
    )
    node_steps = [(t, s) for t, s in enumerate(traj.steps) if s.kind == "node"]
    edge_steps = [(t, s) for t, s in enumerate(traj.steps) if s.kind == "edge"]
    edge_row = {(i, j): r for r, (_, i, j) in enumerate(plan.edge_steps)}
    parts = []
    order = []
    for group, mu_all, alpha_all, rows in (
        (
            node_steps,
            mu_x,
            alpha_x,
            np.array([s.i for _, s in node_steps], dtype=np.int64),
        ),
        (
            edge_steps,
            mu_a,
            alpha_a,
            np.array([edge_row[(s.i, s.j)] for _, s in edge_steps], dtype=np.int64),
        ),
    ):
        if not group:
            continue
        mu = ad.take(mu_all, (rows,))
        alpha = ad.take(alpha_all, (rows,))
        if temperature != 1.0:
            alpha = alpha * Tensor(np.array(temperature))
        u, logw = _pad_grids([s for _, s in group])
        actions = np.array([s.action for _, s in group], dtype=np.int64)
        parts.append(_stacked_action_logprobs(mu, alpha, u, logw, actions))
        order.extend(t for t, _ in group)
    lp = ad.concat(parts, axis=0) if len(parts) > 1 else parts[0]
    return lp, order


def _trajectory_objective(
    params: FlowParams,
    spec: ModelSpec,
    traj: Trajectory,
    advantages: np.ndarray,
    cfg: PpoConfig,
    temperature: float = 1.0,
):
    """Mean over the trajectory's steps of min(ratio * A, clip(ratio) * A)
    under the current parameters, as a scalar tensor."""
    lp_new, order = _new_policy_logprobs(params, spec, traj, temperature)
    lp_old = np.array([traj.steps[t].logp_old for t in order])
    adv = advantages[np.array(order, dtype=np.int64)]
    ratios = ad.exp(lp_new - Tensor(lp_old))
    unclipped = ratios * Tensor(adv)
    clipped = ad.clip(ratios, 1.0 - cfg.clip_ratio, 1.0 + cfg.clip_ratio) * Tensor(adv)
    return ad.minimum(unclipped, clipped).mean()


def ppo_loss(
    params: FlowParams,
    spec: ModelSpec,
    trajectories,
    baselines: StepBaselines,
    cfg: PpoConfig,
    temperature: float = 1.0,
):
    """Scalar surrogate loss over a batch, differentiable on the active
    tape: the negative mean over trajectories of the per-trajectory mean
    clipped-ratio objective. Baselines are read, never written."""
    total = None
    for traj in trajectories:
        obj = _trajectory_objective(
            params, spec, traj, baselines.advantages(traj), cfg, temperature
        )
        total = obj if total is None else total + obj
    if total is None:
        raise ValueError("ppo_loss needs at least one trajectory")
    return total * Tensor(np.array(-1.0 / len(trajectories)))


def _accumulate_ppo_grads(
    params: FlowParams,
    spec: ModelSpec,
    trajectories,
    advantages,
    cfg: PpoConfig,
    temperature: float,
):
    """Gradient of the batch loss, built chunk by chunk so no single tape
    holds the whole batch. Returns (grads dict, loss value)."""
    named = params.named_tensors()
    grads = {name: np.zeros_like(t.data) for name, t in named.items()}
    scale = -1.0 / len(trajectories)
    loss_value = 0.0
    for lo in range(0, len(trajectories), cfg.chunk):
        chunk = trajectories[lo : lo + cfg.chunk]
        ad.zero_grads(named)
        with Tape() as tape:
            total = None
            for offset, traj in enumerate(chunk):
                obj = _trajectory_objective(
                    params, spec, traj, advantages[lo + offset], cfg, temperature
                )
                total = obj if total is None else total + obj
            loss = total * Tensor(np.array(scale))
            tape.backward(loss)
        loss_value += float(loss.data)
        for name, t in named.items():
            if t.grad is not None:
                grads[name] += t.grad
    ad.zero_grads(named)
    return grads, loss_value


def finetune(
    params: FlowParams,
    spec: ModelSpec,
    scorer,
    reward_cfg: RewardConfig,
    ppo_cfg: PpoConfig,
    sampler_cfg: SamplerConfig,
    iterations: int,
    rng,
    log=None,
):
    """Alternate episode collection and clipped-ratio updates.

    Returns the per-iteration mean shaped reward. Advantages for a batch
    are fixed from the baselines as collected; baselines absorb the
    batch means afterwards. The learning rate ramps linearly over the
    first `warmup` iterations. A non-finite loss aborts.
    """
    adam = AdamState()
    baselines = StepBaselines(decay=ppo_cfg.baseline_decay)
    named = params.named_tensors()
    trace = []
    for it in range(iterations):
        trajs, _failures = collect_trajectories(
            params,
            spec,
            sampler_cfg,
            reward_cfg,
            scorer,
            ppo_cfg.batch_size,
            rng,
            grid_points=ppo_cfg.grid_points,
        )
        if not trajs:
            raise GraphError("every episode in the batch failed scoring")
        mean_reward = float(np.mean([t.final_reward for t in trajs]))
        trace.append(mean_reward)
        lr = ppo_cfg.lr
        if ppo_cfg.warmup > 0:
            lr *= min(1.0, (it + 1) / ppo_cfg.warmup)
        advantages = [baselines.advantages(t) for t in trajs]
        loss_value = math.nan
        for _ in range(ppo_cfg.updates):
            grads, loss_value = _accumulate_ppo_grads(
                params, spec, trajs, advantages, ppo_cfg, sampler_cfg.temperature
            )
            if not math.isfinite(loss_value):
                raise FloatingPointError(
                    f"surrogate loss became non-finite at iteration {it}"
                )
            adam_step(named, grads, adam, lr)
        baselines.update_from_batch(trajs)
        if log is not None:
            log(it, mean_reward, loss_value)
    return trace


# ---------------------------------------------------------------------------
# property scorers


class ToyScorer:
    """Built-in deterministic scorers over the discrete graph."""

    def __init__(self, name: str, fn):
        self.name = name
        self._fn = fn

    def score(self, g: MolecularGraph) -> float:
        return float(self._fn(g))

    def close(self):
        pass


class ExecScorer:
    """External scorer child process speaking the one-record protocol:
    we write a molecule record followed by an #END line, it answers with
    exactly one decimal number per line. Anything non-numeric is a
    scorer failure."""

    def __init__(self, command: str, vocab, bonds):
        self.vocab = vocab
        self.bonds = bonds
        self._proc = subprocess.Popen(
            shlex.split(command),
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
            text=True,
            bufsize=1,
        )

    def score(self, g: MolecularGraph) -> float:
        if self._proc.poll() is not None:
            raise ScorerError("scorer process exited")
        record = write_molt([g], self.vocab, self.bonds)
        try:
            self._proc.stdin.write(record.rstrip("\n") + "\n#END\n")
            self._proc.stdin.flush()
            reply = self._proc.stdout.readline()
        except (BrokenPipeError, OSError) as exc:
            raise ScorerError(f"scorer pipe failed: {exc}")
        if not reply:
            raise ScorerError("scorer closed its output")
        try:
            return float(reply.strip())
        except ValueError:
            raise ScorerError(f"scorer replied with non-numeric {reply.strip()!r}")

    def close(self):
        if self._proc.poll() is None:
            self._proc.stdin.close()
            self._proc.wait(timeout=10)


def _ring_count(g: MolecularGraph) -> int:
    # independent cycles of a connected graph: edges - nodes + 1
    edges = len(g.bonds())
    return max(0, edges - g.n + 1)


def make_scorer(text: str, vocab, bonds):
    """Build a scorer from a --scorer style string.

    toy:atom-count | toy:ring-count-penalty | toy:atom-fraction:<symbol>
    | exec:<command>
    """
    if text.startswith("exec:"):
        return ExecScorer(text[len("exec:") :], vocab, bonds)
    if not text.startswith("toy:"):
        raise ValueError(f"unknown scorer spec {text!r}")
    body = text[len("toy:") :]
    if body == "atom-count":
        return ToyScorer(body, lambda g: g.n)
    if body == "ring-count-penalty":
        return ToyScorer(body, lambda g: -_ring_count(g))
    if body.startswith("atom-fraction:"):
        symbol = body[len("atom-fraction:") :]
        if symbol not in vocab.symbols:
            raise ValueError(f"scorer atom symbol {symbol!r} not in the vocabulary")
        want = vocab.symbols.index(symbol)
        return ToyScorer(body, lambda g: float(np.mean(g.node_types == want)))
    raise ValueError(f"unknown toy scorer {body!r}")


# ---------------------------------------------------------------------------
# constrained optimization


def subgraph_seed(
    g: MolecularGraph,
    rng,
    m_choices=(0, 1, 2, 3, 4, 5),
    window: int | None = None,
) -> MolecularGraph:
    """Random connected seed: relabel by a random breadth-first order and
    drop the last m nodes (m drawn from m_choices, clamped to n-1). With
    a window, the order is retried so remaining bond spans fit."""
    if window is not None:
        h = _reorder_for_window(g, window, rng)
    else:
        start = int(rng.integers(g.n))
        h, _ = bfs_reorder(g, start=start, rng=rng)
    m = min(int(rng.choice(np.asarray(m_choices))), g.n - 1)
    keep = g.n - m
    return MolecularGraph(h.node_types[:keep], h.categories[:keep, :keep], g.no_edge)


def graph_similarity(a: MolecularGraph, b: MolecularGraph) -> float:
    """Cosine similarity of depth-2 neighborhood-label histograms."""
    from .metrics import wl_labels

    ca = Counter(wl_labels(a, rounds=2))
    cb = Counter(wl_labels(b, rounds=2))
    dot = sum(ca[k] * cb[k] for k in ca.keys() & cb.keys())
    if dot == 0:
        return 0.0
    na = math.sqrt(sum(v * v for v in ca.values()))
    nb = math.sqrt(sum(v * v for v in cb.values()))
    return dot / (na * nb)


@dataclass
class ConstrainedResult:
    improvement: float
    similarity: float
    success: bool
    attempts: int


def optimize_constrained(
    params: FlowParams,
    spec: ModelSpec,
    molecules,
    scorer,
    delta: float,
    rounds: int,
    sampler_cfg: SamplerConfig,
    rng,
    m_choices=(0, 1, 2, 3, 4, 5),
):
    """Seeded property optimization under a similarity floor.

    Each input molecule gets `rounds` generations from random connected
    sub-graph seeds; among outputs with similarity >= delta, the best
    score improvement is reported, success meaning some qualifying
    output strictly improved. No qualifying output reports (0, 0, False).
    """
    results = []
    for mol in molecules:
        base = scorer.score(mol)
        streams = rng.spawn(rounds)
        best = None
        for r in range(rounds):
            seed = subgraph_seed(mol, streams[r], m_choices=m_choices, window=spec.window)
            sample, _ = sample_molecule(
                params, spec, sampler_cfg, streams[r], seed_graph=seed
            )
            sim = graph_similarity(sample, mol)
            if sim < delta:
                continue
            imp = scorer.score(sample) - base
            if best is None or imp > best[0]:
                best = (imp, sim)
        if best is None:
            results.append(ConstrainedResult(0.0, 0.0, False, rounds))
        else:
            results.append(ConstrainedResult(best[0], best[1], best[0] > 0.0, rounds))
    return results
