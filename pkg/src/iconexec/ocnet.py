"""Neural execution policies trained by differentiating the discrete objective.

A :class:`PolicyNet` holds ``E`` independent feed-forward policies
``t -> u(t)`` stacked along a leading axis, so several ``(theta, x)``
instances train in one batched pass.  The summed objective separates
across instances and AdamW acts elementwise, so joint training is the same
as training each policy on its own.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .checkpoint import read_container, write_container
from .errors import ConfigError, GridMismatch, NonFiniteLoss, ZeroReference
from .grid import ImpactMatrix, apply_impact
from .gt_solver import GroundTruth
from .icon import IconSurrogate, warmup_cosine
from .objective import ObjectiveParams, direct_objective, inventory_path

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PolicyConfig:
    hidden: int = 128
    n_hidden_layers: int = 2
    use_x: bool = False
    x_ref: float = 0.1
    input_scale: float = 5.0  # first-layer weight init range, in units of 1/sqrt(fan_in)

    def to_dict(self):
        return asdict(self)


class PolicyNet(nn.Module):
    """``n_instances`` GELU networks mapping normalized time (and x) to a rate."""

    def __init__(self, n_instances: int = 1, cfg: PolicyConfig = PolicyConfig()):
        super().__init__()
        self.cfg = cfg
        self.n_instances = n_instances
        sizes = [2 if cfg.use_x else 1] + [cfg.hidden] * cfg.n_hidden_layers + [1]
        self.weights = nn.ParameterList()
        self.biases = nn.ParameterList()
        for k, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            bound = (cfg.input_scale if k == 0 else 1.0) / math.sqrt(fan_in)
            self.weights.append(nn.Parameter(torch.empty(n_instances, fan_in, fan_out).uniform_(-bound, bound)))
            self.biases.append(nn.Parameter(torch.empty(n_instances, 1, fan_out).uniform_(-bound, bound)))
        self.act = nn.GELU()

    def forward(self, t: torch.Tensor, x: torch.Tensor | None = None) -> torch.Tensor:
        """``t``: times in [0, 1] of shape ``(n,)``; returns ``(E, n)`` rates."""
        h = t.reshape(1, -1, 1).expand(self.n_instances, -1, 1).to(self.weights[0].dtype)
        if self.cfg.use_x:
            if x is None:
                raise ConfigError("this policy takes the initial inventory as input")
            xs = (x.reshape(-1, 1, 1) / self.cfg.x_ref).to(h.dtype).expand(-1, h.shape[1], 1)
            h = torch.cat([h, xs], dim=-1)
        last = len(self.weights) - 1
        for k, (W, b) in enumerate(zip(self.weights, self.biases)):
            h = torch.baddbmm(b, h, W)
            if k < last:
                h = self.act(h)
        return h.squeeze(-1)


class LookupPolicy(nn.Module):
    """Frozen rate table; lets known strategies run through :func:`rollout`."""

    def __init__(self, rates):
        super().__init__()
        r = torch.as_tensor(np.atleast_2d(np.asarray(rates, dtype=float)))
        self.register_buffer("rates", r)
        self.n_instances = r.shape[0]

    def forward(self, t, x=None):
        if t.numel() != self.rates.shape[1]:
            raise GridMismatch("lookup policy evaluated on a different grid")
        return self.rates


class ExactImpact:
    """Impact through the discretized operators of each instance."""

    def __init__(self, mats):
        self.mats = list(mats)
        self.op = torch.as_tensor(np.stack([m.operator for m in self.mats]))

    def __call__(self, u: torch.Tensor) -> torch.Tensor:
        return torch.einsum("bij,bj->bi", self.op.to(u.dtype), u)


class SurrogateImpact:
    """Impact predicted by a frozen ICON surrogate."""

    def __init__(self, surrogate: IconSurrogate):
        self.surrogate = surrogate
        for p in surrogate.model.parameters():
            p.requires_grad_(False)

    def __call__(self, u: torch.Tensor) -> torch.Tensor:
        return self.surrogate(u).to(u.dtype)


@dataclass
class ControlProblem:
    """Execution problems for ``E`` instances sharing one grid.

    ``impact`` is either ``ExactImpact`` or ``SurrogateImpact``; ``mats``
    always hold the true operators used for evaluation.
    """

    params: list  # ObjectiveParams per instance
    mats: list  # ImpactMatrix per instance
    impact: object

    def __post_init__(self):
        if len(self.params) != len(self.mats):
            raise ConfigError("need one impact matrix per instance")
        grids = {p.grid for p in self.params} | {m.grid for m in self.mats}
        if len(grids) != 1:
            raise GridMismatch("all instances must share one grid")
        if isinstance(self.impact, SurrogateImpact) and self.impact.surrogate.grid != self.grid:
            raise GridMismatch("surrogate grid does not match the problem grid")

    @property
    def grid(self):
        return self.params[0].grid

    def __len__(self):
        return len(self.params)

    @classmethod
    def exact(cls, params, mats):
        return cls(list(params), list(mats), ExactImpact(mats))

    @classmethod
    def surrogate(cls, params, mats, surrogate: IconSurrogate):
        return cls(list(params), list(mats), SurrogateImpact(surrogate))


def objective_torch(u, y, x, eps, phi, rho, dt):
    """Batched discrete objective; same formula as ``direct_objective``."""
    X = x[:, None] - dt * torch.cat([torch.zeros_like(u[:, :1]), torch.cumsum(u, dim=1)], dim=1)
    running = (-y * u - eps[:, None] * u**2 - phi[:, None] * X[:, :-1] ** 2).sum(dim=1) * dt
    return running - rho * X[:, -1] ** 2


def _coeffs(problem: ControlProblem, dtype):
    ps = problem.params
    as_t = lambda vals: torch.tensor(vals, dtype=dtype)
    return (as_t([p.x for p in ps]), as_t([p.eps for p in ps]), as_t([p.phi for p in ps]),
            as_t([p.rho for p in ps]))


def policy_rates(policy, problem: ControlProblem, dtype=torch.float64) -> torch.Tensor:
    g = problem.grid
    t = torch.as_tensor(g.left_nodes / g.horizon, dtype=dtype)
    x = torch.tensor([p.x for p in problem.params], dtype=dtype)
    return policy(t, x).to(dtype)


def rollout_torch(policy, problem: ControlProblem, dtype=torch.float64):
    """Differentiable ``(u, Y, J)`` for every instance."""
    u = policy_rates(policy, problem, dtype)
    y = problem.impact(u)
    x, eps, phi, rho = _coeffs(problem, dtype)
    J = objective_torch(u, y, x, eps, phi, rho, problem.grid.dt)
    return u, y, J


@dataclass
class Rollout:
    u: np.ndarray
    X: np.ndarray
    Y: np.ndarray
    J: np.ndarray


def rollout(policy, problem: ControlProblem) -> Rollout:
    """Rates, inventory, impact (from the problem's impact source) and objective."""
    with torch.no_grad():
        u, y, _ = rollout_torch(policy, problem)
    u = u.numpy()
    y = y.double().numpy()
    X = np.stack([inventory_path(p, ui) for p, ui in zip(problem.params, u)])
    J = np.array([direct_objective(p, m, ui, y=yi)
                  for p, m, ui, yi in zip(problem.params, problem.mats, u, y)])
    return Rollout(u, X, y, J)


# -- evaluation --------------------------------------------------------------

@dataclass
class PolicyErrors:
    u: float
    X: float
    Y: float
    objective: float
    J_policy: float
    J_star: float
    terminal_inventory: float


def _rel(a, b):
    from .report import rel_l2

    try:
        return rel_l2(a, b)
    except ZeroReference:
        return float("nan")  # undefined against a zero reference (e.g. lambda = 0)


def evaluate_policy(policy, problem: ControlProblem, gts) -> list[PolicyErrors]:
    """Relative errors of each instance's policy against its ground truth.

    A component whose reference path is identically zero reports NaN.

    The policy's ``X`` and ``Y`` paths and its objective value are computed
    with the true impact operator, whatever source the policy trained on.
    """
    gts = list(gts) if not isinstance(gts, GroundTruth) else [gts]
    if len(gts) != len(problem):
        raise GridMismatch("need one ground truth per instance")
    with torch.no_grad():
        u = policy_rates(policy, problem).numpy()
    out = []
    for p, m, ui, gt in zip(problem.params, problem.mats, u, gts):
        if gt.u_star.shape != ui.shape:
            raise GridMismatch("ground truth lives on a different grid")
        X = inventory_path(p, ui)
        Y = apply_impact(m, ui)
        J = direct_objective(p, m, ui)
        out.append(PolicyErrors(
            u=_rel(ui, gt.u_star), X=_rel(X, gt.x_path), Y=_rel(Y, gt.y_path),
            objective=abs(J - gt.value) / abs(gt.value), J_policy=J, J_star=gt.value,
            terminal_inventory=float(X[-1])))
    return out


# -- training ----------------------------------------------------------------

@dataclass(frozen=True)
class OcnetTrainConfig:
    iterations: int = 10_000
    lr: float = 1e-3
    weight_decay: float = 1e-2
    warmup_frac: float = 0.05
    eval_every: int = 500
    dtype: str = "float64"

    def to_dict(self):
        return asdict(self)


@dataclass
class OcnetHistory:
    steps: list = field(default_factory=list)
    objective: list = field(default_factory=list)  # mean training objective per instance
    best_objective: list = field(default_factory=list)
    err_u: list = field(default_factory=list)
    err_X: list = field(default_factory=list)
    err_Y: list = field(default_factory=list)
    err_J: list = field(default_factory=list)


def train_ocnet(problem: ControlProblem, cfg: OcnetTrainConfig = OcnetTrainConfig(),
                seed: int = 0, gts=None, policy_cfg: PolicyConfig = PolicyConfig(),
                policy: PolicyNet | None = None):
    """Maximize the summed objective over policy parameters only.

    Returns ``(policy, history)``; the policy returned carries the
    parameters of the best training objective seen at evaluation points.
    ``gts`` (ground truths per instance) enables error curves.
    """
    dtype = getattr(torch, cfg.dtype)
    torch.manual_seed(seed)
    if policy is None:
        policy = PolicyNet(len(problem), policy_cfg)
    policy = policy.to(dtype)
    opt = torch.optim.AdamW(policy.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    sched = torch.optim.lr_scheduler.LambdaLR(
        opt, lambda s: warmup_cosine(s, cfg.iterations, cfg.warmup_frac))
    hist = OcnetHistory()
    best_J = np.full(len(problem), -np.inf)
    best_state = [None] * len(problem)

    def snapshot(J_now):
        for e in np.flatnonzero(J_now > best_J):
            best_J[e] = J_now[e]
            best_state[e] = [p.detach()[e].clone() for p in policy.parameters()]

    for it in range(cfg.iterations):
        _, _, J = rollout_torch(policy, problem, dtype)
        loss = -J.sum()
        if not torch.isfinite(loss):
            raise NonFiniteLoss(f"non-finite policy objective at iteration {it} (seed {seed})")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        sched.step()
        last = it == cfg.iterations - 1
        if (cfg.eval_every and (it + 1) % cfg.eval_every == 0) or last:
            with torch.no_grad():
                J_now = rollout_torch(policy, problem, dtype)[2].double().numpy()
            snapshot(J_now)
            hist.steps.append(it + 1)
            hist.objective.append(float(J_now.mean()))
            hist.best_objective.append(float(best_J.mean()))
            if gts is not None:
                errs = evaluate_policy(policy, problem, gts)
                hist.err_u.append(float(np.mean([e.u for e in errs])))
                hist.err_X.append(float(np.mean([e.X for e in errs])))
                hist.err_Y.append(float(np.mean([e.Y for e in errs])))
                hist.err_J.append(float(np.mean([e.objective for e in errs])))
            log.debug("ocnet it %d J %.6e", it + 1, hist.objective[-1])
    with torch.no_grad():
        for e, state in enumerate(best_state):
            if state is None:
                continue
            for p, v in zip(policy.parameters(), state):
                p[e] = v
    return policy, hist


# -- checkpoints -------------------------------------------------------------

OCNET_MAGIC = b"OCNT"


def save_policy(path, policy: PolicyNet, extra: dict | None = None):
    config = {"policy": policy.cfg.to_dict(), "n_instances": policy.n_instances}
    if extra:
        config.update(extra)
    tensors = {k: v.detach().cpu().float().numpy() for k, v in policy.state_dict().items()}
    write_container(path, OCNET_MAGIC, config, tensors)


def load_policy(path, dtype=torch.float64):
    config, tensors = read_container(path, OCNET_MAGIC)
    policy = PolicyNet(config["n_instances"], PolicyConfig(**config["policy"]))
    policy.load_state_dict({k: torch.from_numpy(v) for k, v in tensors.items()})
    return policy.to(dtype), config
