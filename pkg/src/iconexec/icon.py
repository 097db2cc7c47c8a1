"""In-context operator network for the impact operator ``u -> Y``.

A prompt holds ``M`` example pairs ``(u^m, Y^m)``, a question rate ``u``
and the query times at which ``Y`` is wanted.  Tokens are

* ``ExampleFused``: ``(t, u^m(t), Y^m(t))`` for every example node,
* ``QuestionCond``: ``(t, u(t), 0)``,
* ``Query``: ``(t, 0, 0)``,

with the role one-hot encoded next to them.  Time is a token feature; no
positional encoding is used, so examples enter as an unordered set.

Attention is time-causal: a token may attend tokens at earlier or equal
times, never a Query token.  In the default ``per_example`` mode an
example token additionally only sees tokens of its own example, so the
representation of the context does not depend on the question.

Rates are divided by ``max |u|`` over the examples and impacts by
``max |Y|`` over the examples; predictions are scaled back by the latter.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import read_container, write_container
from .datagen import TrajectoryBank
from .errors import ConfigError, ContextOverflow, NonFiniteLoss, PromptShapeMismatch
from .grid import TimeGrid

log = logging.getLogger(__name__)

ROLE_EXAMPLE, ROLE_QUESTION, ROLE_QUERY = 0, 1, 2
N_TOKEN_FEATURES = 6  # t, u, y, three role flags
MASK_MODES = ("per_example", "global")


# -- prompts and tokens ------------------------------------------------------

@dataclass(eq=False)
class Prompt:
    """``examples`` is a list of ``(times, u, y)`` triples."""

    examples: list
    question_t: np.ndarray
    question_u: np.ndarray
    query_times: np.ndarray
    horizon: float = 1.0

    def __post_init__(self):
        if len(self.examples) < 1:
            raise PromptShapeMismatch("a prompt needs at least one example")
        ex = []
        for k, (t, u, y) in enumerate(self.examples):
            t, u, y = (np.asarray(a, dtype=float) for a in (t, u, y))
            if not (t.ndim == 1 and t.shape == u.shape == y.shape and t.size):
                raise PromptShapeMismatch(f"example {k}: times/u/y must be equal-length 1-d arrays")
            ex.append((t, u, y))
        self.examples = ex
        self.question_t = np.asarray(self.question_t, dtype=float)
        self.question_u = np.asarray(self.question_u, dtype=float)
        self.query_times = np.asarray(self.query_times, dtype=float)
        if self.question_t.shape != self.question_u.shape or self.question_t.ndim != 1:
            raise PromptShapeMismatch("question times and rates must match")
        if self.query_times.ndim != 1 or not self.query_times.size:
            raise PromptShapeMismatch("at least one query time is required")
        tol = 1e-12 * self.horizon
        for arr in [self.question_t, self.query_times] + [e[0] for e in ex]:
            if arr.size and (arr.min() < -tol or arr.max() > self.horizon + tol):
                raise PromptShapeMismatch(f"times must lie in [0, {self.horizon}]")

    @property
    def n_examples(self) -> int:
        return len(self.examples)

    def structure(self) -> tuple:
        """Hashable description of token layout (for batching)."""
        return (tuple(e[0].tobytes() for e in self.examples), self.question_t.tobytes(),
                self.query_times.tobytes())


@dataclass(eq=False)
class Tokens:
    features: np.ndarray  # (L, 6)
    mask: np.ndarray  # (L, L) bool, mask[p, q]: p may attend q
    query_index: np.ndarray
    question_index: np.ndarray
    u_scale: float
    y_scale: float


def _scale(values) -> float:
    m = float(np.max(np.abs(values))) if len(values) else 0.0
    return m if m > 0 and math.isfinite(m) else 1.0


def prompt_scales(prompt: Prompt) -> tuple[float, float]:
    u_scale = _scale(np.concatenate([e[1] for e in prompt.examples]))
    y_scale = _scale(np.concatenate([e[2] for e in prompt.examples]))
    return u_scale, y_scale


def build_mask(times, roles, groups, mode: str = "per_example", horizon: float = 1.0) -> np.ndarray:
    """Attention mask from token times, roles and example membership."""
    if mode not in MASK_MODES:
        raise ConfigError(f"unknown mask mode {mode!r}")
    times = np.asarray(times, dtype=float)
    tol = 1e-9 * horizon
    allowed = (times[None, :] <= times[:, None] + tol) & (roles[None, :] != ROLE_QUERY)
    if mode == "per_example":
        is_ex = roles == ROLE_EXAMPLE
        same = groups[:, None] == groups[None, :]
        allowed &= ~is_ex[:, None] | (is_ex[None, :] & same)
    return allowed


def tokenize(prompt: Prompt, mode: str = "per_example", scales=None) -> Tokens:
    """Token features, attention mask and normalization scales for a prompt.

    ``scales`` pins ``(u_scale, y_scale)`` instead of deriving them from the
    examples.
    """
    u_scale, y_scale = prompt_scales(prompt) if scales is None else scales
    rows, roles, groups = [], [], []
    for k, (t, u, y) in enumerate(prompt.examples):
        rows.append(np.stack([t, u / u_scale, y / y_scale], axis=1))
        roles.append(np.full(t.size, ROLE_EXAMPLE))
        groups.append(np.full(t.size, k))
    nq = prompt.question_t.size
    rows.append(np.stack([prompt.question_t, prompt.question_u / u_scale, np.zeros(nq)], axis=1))
    roles.append(np.full(nq, ROLE_QUESTION))
    groups.append(np.full(nq, -1))
    nk = prompt.query_times.size
    rows.append(np.stack([prompt.query_times, np.zeros(nk), np.zeros(nk)], axis=1))
    roles.append(np.full(nk, ROLE_QUERY))
    groups.append(np.full(nk, -2))

    base = np.concatenate(rows)
    roles = np.concatenate(roles)
    groups = np.concatenate(groups)
    feats = np.concatenate([base, np.eye(3)[roles]], axis=1)
    mask = build_mask(base[:, 0], roles, groups, mode, prompt.horizon)
    query_index = np.flatnonzero(roles == ROLE_QUERY)
    if not mask[query_index].any(axis=1).all():
        raise PromptShapeMismatch("a query time precedes every condition token")
    return Tokens(feats, mask, query_index, np.flatnonzero(roles == ROLE_QUESTION),
                  float(u_scale), float(y_scale))


def subsample(n: int, stride: int) -> np.ndarray:
    return np.arange(0, n, max(1, int(stride)))


def make_prompt(grid: TimeGrid, ex_us, ex_ys, question_u, example_stride: int = 1,
                query_times=None) -> Prompt:
    """Prompt on ``grid`` whose examples are sampled every ``example_stride`` nodes."""
    t = grid.left_nodes
    idx = subsample(grid.n_steps, example_stride)
    examples = [(t[idx], np.asarray(u)[idx], np.asarray(y)[idx]) for u, y in zip(ex_us, ex_ys)]
    q = t if query_times is None else query_times
    return Prompt(examples, t, question_u, q, grid.horizon)


# -- model -------------------------------------------------------------------

@dataclass(frozen=True)
class IconConfig:
    n_layers: int = 3
    n_heads: int = 4
    d_model: int = 64
    head_dim: int | None = None
    widening: int = 4
    n_time_freqs: int = 8
    context_limit: int = 2048
    mask_mode: str = "per_example"

    def __post_init__(self):
        if self.head_dim is None:
            if self.d_model % self.n_heads:
                raise ConfigError("d_model must be divisible by n_heads when head_dim is unset")
            object.__setattr__(self, "head_dim", self.d_model // self.n_heads)
        if self.mask_mode not in MASK_MODES:
            raise ConfigError(f"mask_mode must be one of {MASK_MODES}")
        for name in ("n_layers", "n_heads", "d_model", "head_dim", "widening", "context_limit"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")

    @classmethod
    def large(cls) -> "IconConfig":
        return cls(n_layers=6, n_heads=8, d_model=256, head_dim=256, widening=4)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "IconConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown ICON config keys: {sorted(unknown)}")
        return cls(**d)


class Attention(nn.Module):
    def __init__(self, d_model, n_heads, head_dim):
        super().__init__()
        self.n_heads, self.head_dim = n_heads, head_dim
        self.qkv = nn.Linear(d_model, 3 * n_heads * head_dim)
        self.out = nn.Linear(n_heads * head_dim, d_model)

    def project(self, x):
        B, L, _ = x.shape
        return self.qkv(x).view(B, L, 3, self.n_heads, self.head_dim).permute(2, 0, 3, 1, 4)

    def forward(self, x, mask, ctx_kv=None):
        """``ctx_kv``: cached keys/values of tokens placed before ``x``."""
        B, L, _ = x.shape
        q, k, v = self.project(x)
        if ctx_kv is not None:
            k = torch.cat([ctx_kv[0], k], dim=2)
            v = torch.cat([ctx_kv[1], v], dim=2)
        a = F.scaled_dot_product_attention(q, k, v, attn_mask=mask)
        return self.out(a.transpose(1, 2).reshape(B, L, -1))


class Block(nn.Module):
    def __init__(self, cfg: IconConfig):
        super().__init__()
        d = cfg.d_model
        self.ln1 = nn.LayerNorm(d)
        self.attn = Attention(d, cfg.n_heads, cfg.head_dim)
        self.ln2 = nn.LayerNorm(d)
        self.ff = nn.Sequential(nn.Linear(d, cfg.widening * d), nn.GELU(), nn.Linear(cfg.widening * d, d))

    def forward(self, x, mask, ctx_kv=None):
        x = x + self.attn(self.ln1(x), mask, ctx_kv)
        return x + self.ff(self.ln2(x))


class IconModel(nn.Module):
    def __init__(self, cfg: IconConfig = IconConfig()):
        super().__init__()
        self.cfg = cfg
        self.register_buffer("freqs", math.pi * torch.arange(1, cfg.n_time_freqs + 1, dtype=torch.float32))
        self.embed = nn.Linear(N_TOKEN_FEATURES + 2 * cfg.n_time_freqs, cfg.d_model)
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.n_layers))
        self.ln_f = nn.LayerNorm(cfg.d_model)
        self.head = nn.Linear(cfg.d_model, 1)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def _embed(self, feats):
        ang = feats[..., :1] * self.freqs.to(feats.dtype)
        return self.embed(torch.cat([feats, torch.sin(ang), torch.cos(ang)], dim=-1))

    @staticmethod
    def _additive(mask, dtype):
        if mask.dim() == 3:
            mask = mask[:, None]
        if mask.dtype == torch.bool:
            mask = torch.zeros(mask.shape, dtype=dtype).masked_fill(~mask, float("-inf"))
        return mask

    def forward(self, feats: torch.Tensor, mask: torch.Tensor, cache=None) -> torch.Tensor:
        """Normalized outputs at every token: ``(B, L, 6) -> (B, L)``.

        With a ``cache`` from :meth:`context_cache`, ``feats`` holds only the
        tokens after the cached ones and ``mask`` has shape
        ``(B, L, L_cached + L)``.
        """
        n_ctx = 0 if cache is None else cache[0][0].shape[2]
        if feats.shape[1] + n_ctx > self.cfg.context_limit:
            raise ContextOverflow(f"{feats.shape[1] + n_ctx} tokens exceed the context limit "
                                  f"{self.cfg.context_limit}")
        h = self._embed(feats)
        mask = self._additive(mask, h.dtype)
        for k, blk in enumerate(self.blocks):
            h = blk(h, mask, None if cache is None else cache[k])
        return self.head(self.ln_f(h)).squeeze(-1)

    def context_cache(self, feats: torch.Tensor, mask: torch.Tensor):
        """Per-layer keys and values of a token prefix that attends only itself."""
        h = self._embed(feats)
        mask = self._additive(mask, h.dtype)
        cache = []
        for blk in self.blocks:
            _, k, v = blk.attn.project(blk.ln1(h))
            cache.append((k, v))
            h = blk(h, mask)
        return cache

    @property
    def dtype(self):
        return self.embed.weight.dtype

    def n_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())


def _batch(tokens: Sequence[Tokens], dtype):
    feats = torch.as_tensor(np.stack([t.features for t in tokens]), dtype=dtype)
    mask = torch.as_tensor(np.stack([t.mask for t in tokens]))
    return feats, mask


def forward(model: IconModel, prompts: Prompt | Sequence[Prompt], scales=None) -> np.ndarray:
    """Predicted ``Y`` at each prompt's query times.

    Prompts in a sequence must share one token layout.
    """
    single = isinstance(prompts, Prompt)
    prompts = [prompts] if single else list(prompts)
    toks = [tokenize(p, model.cfg.mask_mode, scales) for p in prompts]
    if len({t.features.shape for t in toks}) != 1:
        raise PromptShapeMismatch("prompts in one batch must share their token layout")
    feats, mask = _batch(toks, model.dtype)
    with torch.no_grad():
        out = model(feats, mask)
    q = toks[0].query_index
    y_scale = np.array([t.y_scale for t in toks])
    pred = out[:, q].double().numpy() * y_scale[:, None]
    return pred[0] if single else pred


class IconSurrogate:
    """ICON with frozen contexts acting as a differentiable impact operator.

    ``contexts`` is a list of ``(ex_us, ex_ys)`` pairs, one per batch row,
    all on ``grid``.  Calling with rates ``u`` of shape ``(B, N)`` returns
    predicted impacts at the left nodes with the same shape; gradients flow
    to ``u`` but the model itself should be frozen by the caller.
    """

    def __init__(self, model: IconModel, contexts, grid: TimeGrid, example_stride: int = 1):
        self.model = model
        self.grid = grid
        n = grid.n_steps
        toks = []
        for ex_us, ex_ys in contexts:
            p = make_prompt(grid, ex_us, ex_ys, np.zeros(n), example_stride)
            toks.append(tokenize(p, model.cfg.mask_mode))
        self.tokens = toks
        feats, mask = _batch(toks, model.dtype)
        self.feats = feats
        self.mask = mask
        self.q_index = torch.as_tensor(toks[0].question_index)
        self.k_index = torch.as_tensor(toks[0].query_index)
        dt = model.dtype
        self.u_scale = torch.tensor([t.u_scale for t in toks], dtype=dt)
        self.y_scale = torch.tensor([t.y_scale for t in toks], dtype=dt)
        qs = int(self.q_index[0])
        self.cache = None
        if not self.mask[:, :qs, qs:].any():
            # examples never see the question: reuse their keys and values
            with torch.no_grad():
                self.cache = model.context_cache(self.feats[:, :qs], self.mask[:, :qs, :qs])

    def __len__(self):
        return len(self.tokens)

    def __call__(self, u: torch.Tensor) -> torch.Tensor:
        u = u.to(self.model.dtype)
        if u.dim() == 1:
            return self(u[None])[0]
        if u.shape != (len(self), self.grid.n_steps):
            raise PromptShapeMismatch(f"expected rates of shape {(len(self), self.grid.n_steps)}")
        qs, qe = int(self.q_index[0]), int(self.q_index[-1]) + 1
        un = u / self.u_scale[:, None]
        col = torch.zeros_like(self.feats[:, qs:qe, :])
        col[..., 1] = 1.0
        q_feats = self.feats[:, qs:qe, :] * (1 - col) + un[..., None] * col
        if self.cache is not None:
            feats = torch.cat([q_feats, self.feats[:, qe:]], dim=1)
            out = self.model(feats, self.mask[:, qs:], cache=self.cache)
            return out[:, self.k_index - qs] * self.y_scale[:, None]
        feats = torch.cat([self.feats[:, :qs], q_feats, self.feats[:, qe:]], dim=1)
        out = self.model(feats, self.mask)
        return out[:, self.k_index] * self.y_scale[:, None]


def surrogate_path(model: IconModel, context, u, grid: TimeGrid, example_stride: int = 1,
                   with_grad: bool = False):
    """Whole predicted impact path for the rate ``u`` given one context.

    Returns ``Yhat`` (and the Jacobian ``dYhat/du`` when ``with_grad``).
    """
    sur = IconSurrogate(model, [context], grid, example_stride)
    ut = torch.as_tensor(np.asarray(u, dtype=float), dtype=model.dtype)
    if not with_grad:
        with torch.no_grad():
            return sur(ut).double().numpy()
    jac = torch.autograd.functional.jacobian(sur, ut)
    with torch.no_grad():
        y = sur(ut)
    return y.double().numpy(), jac.double().numpy()


# -- training ----------------------------------------------------------------

@dataclass(frozen=True)
class IconTrainConfig:
    steps: int = 20_000
    batch_size: int = 8
    n_examples: int = 5
    example_stride: int = 4
    lr: float = 1e-3
    weight_decay: float = 1e-2
    warmup_frac: float = 0.05
    grad_clip: float | None = 1.0
    eval_every: int = 500
    n_eval_prompts: int = 64
    train_queries: int | None = 25  # random query subset per step; None uses every node

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "IconTrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown ICON training keys: {sorted(unknown)}")
        return cls(**d)


def warmup_cosine(step: int, total: int, warmup_frac: float) -> float:
    """Learning-rate multiplier: linear warmup, then cosine decay to zero."""
    warm = max(1, int(round(warmup_frac * total)))
    if step < warm:
        return (step + 1) / warm
    progress = (step - warm) / max(1, total - warm)
    return 0.5 * (1.0 + math.cos(math.pi * min(1.0, progress)))


def sample_prompt_arrays(bank: TrajectoryBank, rng: np.random.Generator, batch_size: int,
                         n_examples: int):
    """Pick records, one question trajectory and ``n_examples`` others each."""
    n_traj = bank.us.shape[1]
    if n_traj < n_examples + 1:
        raise ConfigError(f"records hold {n_traj} trajectories, need {n_examples + 1}")
    rec = rng.integers(len(bank), size=batch_size)
    picks = np.stack([rng.permutation(n_traj)[: n_examples + 1] for _ in range(batch_size)])
    q = picks[:, 0]
    ex = picks[:, 1:]
    r = rec[:, None]
    return (bank.us[r, ex], bank.ys[r, ex], bank.us[rec, q], bank.ys[rec, q], rec)


def prompts_from_arrays(grid, ex_us, ex_ys, q_us, example_stride, query_times=None):
    return [make_prompt(grid, eu, ey, qu, example_stride, query_times)
            for eu, ey, qu in zip(ex_us, ex_ys, q_us)]


def batch_tensors(model: IconModel, prompts, targets):
    toks = [tokenize(p, model.cfg.mask_mode) for p in prompts]
    feats, mask = _batch(toks, model.dtype)
    y_scale = np.array([t.y_scale for t in toks])
    tgt = torch.as_tensor(np.asarray(targets) / y_scale[:, None], dtype=model.dtype)
    return feats, mask, torch.as_tensor(toks[0].query_index), tgt, y_scale


def rel_l2_rows(pred: np.ndarray, truth: np.ndarray) -> np.ndarray:
    return np.linalg.norm(pred - truth, axis=-1) / np.linalg.norm(truth, axis=-1)


@dataclass
class EvalPrompts:
    """Fixed prompts with their exact answers."""

    prompts: list
    truth: np.ndarray
    thetas: list = field(default_factory=list)


def fixed_eval_prompts(bank: TrajectoryBank, grid: TimeGrid, n: int, n_examples: int,
                       example_stride: int, seed: int) -> EvalPrompts:
    rng = np.random.default_rng([int(seed), 7919])
    n = min(n, len(bank)) if n > 0 else len(bank)
    recs = rng.permutation(len(bank))[:n]
    prompts, truth, thetas = [], [], []
    for r in recs:
        perm = rng.permutation(bank.us.shape[1])[: n_examples + 1]
        q, ex = perm[0], perm[1:]
        prompts.append(make_prompt(grid, bank.us[r, ex], bank.ys[r, ex], bank.us[r, q], example_stride))
        truth.append(bank.ys[r, q])
        thetas.append(bank.thetas[r] if bank.thetas else None)
    return EvalPrompts(prompts, np.array(truth), thetas)


def evaluate_prompts(model: IconModel, ev: EvalPrompts, chunk: int = 32) -> np.ndarray:
    """Relative l2 error of each prompt's prediction."""
    preds = []
    for i in range(0, len(ev.prompts), chunk):
        preds.append(forward(model, ev.prompts[i:i + chunk]))
    return rel_l2_rows(np.concatenate(preds), ev.truth)


@dataclass
class TrainHistory:
    steps: list = field(default_factory=list)
    train_loss: list = field(default_factory=list)
    train_rel: list = field(default_factory=list)
    test_rel: list = field(default_factory=list)

    def rows(self):
        return list(zip(self.steps, self.train_loss, self.train_rel, self.test_rel))


def train_icon(bank: TrajectoryBank, grid: TimeGrid, cfg: IconConfig = IconConfig(),
               tcfg: IconTrainConfig = IconTrainConfig(), seed: int = 0,
               test_bank: TrajectoryBank | None = None, callback=None):
    """Train a fresh model; returns ``(model, history)``.

    Runs are deterministic for fixed ``(data, configs, seed)`` on CPU.
    """
    torch.manual_seed(seed)
    model = IconModel(cfg)
    opt = torch.optim.AdamW(model.parameters(), lr=tcfg.lr, weight_decay=tcfg.weight_decay)
    sched = torch.optim.lr_scheduler.LambdaLR(
        opt, lambda s: warmup_cosine(s, tcfg.steps, tcfg.warmup_frac))
    rng = np.random.default_rng([int(seed), 1])
    test_ev = None
    if test_bank is not None and tcfg.n_eval_prompts:
        test_ev = fixed_eval_prompts(test_bank, grid, tcfg.n_eval_prompts, tcfg.n_examples,
                                     tcfg.example_stride, seed)
    hist = TrainHistory()
    window_loss, window_rel = [], []
    for step in range(tcfg.steps):
        ex_us, ex_ys, q_us, q_ys, _ = sample_prompt_arrays(bank, rng, tcfg.batch_size, tcfg.n_examples)
        qt = None
        if tcfg.train_queries and tcfg.train_queries < grid.n_steps:
            sel = np.sort(rng.choice(grid.n_steps, tcfg.train_queries, replace=False))
            qt, q_ys = grid.left_nodes[sel], q_ys[:, sel]
        prompts = prompts_from_arrays(grid, ex_us, ex_ys, q_us, tcfg.example_stride, qt)
        feats, mask, kidx, tgt, y_scale = batch_tensors(model, prompts, q_ys)
        model.train()
        pred = model(feats, mask)[:, kidx]
        loss = F.mse_loss(pred, tgt)
        if not torch.isfinite(loss):
            raise NonFiniteLoss(f"non-finite ICON loss at step {step} (seed {seed})")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        if tcfg.grad_clip:
            nn.utils.clip_grad_norm_(model.parameters(), tcfg.grad_clip)
        opt.step()
        sched.step()
        with torch.no_grad():
            window_loss.append(loss.item())
            window_rel.append(float(rel_l2_rows(pred.double().numpy(), tgt.double().numpy()).mean()))
        last = step == tcfg.steps - 1
        if (tcfg.eval_every and (step + 1) % tcfg.eval_every == 0) or last:
            model.eval()
            test_rel = float(evaluate_prompts(model, test_ev).mean()) if test_ev else float("nan")
            hist.steps.append(step + 1)
            hist.train_loss.append(float(np.mean(window_loss)))
            hist.train_rel.append(float(np.mean(window_rel)))
            hist.test_rel.append(test_rel)
            log.info("icon step %d loss %.3e train rel %.4f test rel %.4f",
                     step + 1, hist.train_loss[-1], hist.train_rel[-1], test_rel)
            if callback is not None:
                callback(step + 1, model, hist)
            window_loss, window_rel = [], []
    model.eval()
    return model, hist


# -- checkpoints -------------------------------------------------------------

ICON_MAGIC = b"ICON"


def save_icon(path, model: IconModel, extra: dict | None = None):
    config = {"model": model.cfg.to_dict()}
    if extra:
        config.update(extra)
    tensors = {k: v.detach().cpu().float().numpy() for k, v in model.state_dict().items()}
    write_container(path, ICON_MAGIC, config, tensors)


def load_icon(path, dtype=torch.float32):
    """Returns ``(model, config_dict)``."""
    config, tensors = read_container(path, ICON_MAGIC)
    model = IconModel(IconConfig.from_dict(config["model"]))
    state = {k: torch.from_numpy(v) for k, v in tensors.items()}
    model.load_state_dict(state)
    model.to(dtype).eval()
    return model, config
