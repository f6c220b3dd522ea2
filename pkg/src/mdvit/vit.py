"""A tiny vision transformer with prunable heads, neurons and tokens.

Weights are a flat ``dict`` from parameter name to array. The forward pass
reads the architecture off the weight shapes, so a pruned model is simply a
weights dict with fewer heads or FFN columns. Values may be plain arrays or
:class:`~mdvit.tensor.Tensor` objects; the latter lets supernet training
select sub-weights inside the autodiff graph so gradients land on the shared
parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .config import PruningPolicy, VitConfig
from .hsic import KernelConfig, gram
from .pruning import arg_top_k, score_heads, score_neurons, score_tokens, select_tokens
from .tensor import Tensor

LN_EPS = 1e-6


def layer_names(l: int) -> dict[str, str]:
    p = f"blocks.{l}."
    return {k: p + k for k in ("ln1.g", "ln1.b", "attn.wq", "attn.wk", "attn.wv", "attn.wo",
                              "ln2.g", "ln2.b", "ffn.w1", "ffn.b1", "ffn.w2", "ffn.b2")}


def init_weights(cfg: VitConfig, seed: int = 0) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    d, h, dh, f = cfg.embed_dim, cfg.heads, cfg.head_dim, cfg.ffn_dim

    def dense(*shape, fan_in):
        return rng.normal(0.0, fan_in**-0.5, size=shape)

    w = {
        "patch.w": dense(cfg.patch_dim, d, fan_in=cfg.patch_dim),
        "patch.b": np.zeros(d),
        "cls": rng.normal(0.0, 0.02, size=d),
        "pos": rng.normal(0.0, 0.02, size=(cfg.seq_len, d)),
    }
    for l in range(cfg.layers):
        n = layer_names(l)
        w[n["ln1.g"]], w[n["ln1.b"]] = np.ones(d), np.zeros(d)
        w[n["attn.wq"]] = dense(h, d, dh, fan_in=d)
        w[n["attn.wk"]] = dense(h, d, dh, fan_in=d)
        w[n["attn.wv"]] = dense(h, d, dh, fan_in=d)
        w[n["attn.wo"]] = dense(h, dh, d, fan_in=d)
        w[n["ln2.g"]], w[n["ln2.b"]] = np.ones(d), np.zeros(d)
        w[n["ffn.w1"]] = dense(d, f, fan_in=d)
        w[n["ffn.b1"]] = np.zeros(f)
        w[n["ffn.w2"]] = dense(f, d, fan_in=f)
        w[n["ffn.b2"]] = np.zeros(d)
    w["norm.g"], w["norm.b"] = np.ones(d), np.zeros(d)
    w["head.w"] = dense(d, cfg.num_classes, fan_in=d)
    w["head.b"] = np.zeros(cfg.num_classes)
    return w


@dataclass
class FeatureTrace:
    """Per-layer intermediate features captured during a forward pass."""

    ffn: list[np.ndarray] = field(default_factory=list)         # (B, N_l', d'_l) post-activation
    heads: list[np.ndarray] = field(default_factory=list)       # (B, N_l, H_l, d_h)
    tsl_inputs: list[np.ndarray] = field(default_factory=list)  # (B, N_l, d)
    tokens: list[np.ndarray] = field(default_factory=list)      # kept indices into the TSL input
    attention: list[np.ndarray] = field(default_factory=list)   # (H_l, N_l, N_l) batch-mean maps
    logits: np.ndarray | None = None


def patchify(cfg: VitConfig, images: np.ndarray) -> np.ndarray:
    """(B, C, S, S) images -> (B, num_patches, C * p * p) row-major patch vectors."""
    x = np.asarray(images, dtype=np.float64)
    if x.ndim != 4 or x.shape[1:] != (cfg.channels, cfg.image_size, cfg.image_size):
        raise ValueError(f"images must be (B, {cfg.channels}, {cfg.image_size}, {cfg.image_size}), got {x.shape}")
    b, c, s, p = x.shape[0], cfg.channels, cfg.image_size, cfg.patch_size
    g = s // p
    x = x.reshape(b, c, g, p, g, p).transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(b, g * g, c * p * p)


def _widths(weights, l: int) -> tuple[int, int]:
    n = layer_names(l)
    return np.shape(_raw(weights[n["attn.wq"]]))[0], np.shape(_raw(weights[n["ffn.w1"]]))[1]


def _raw(x):
    return x.data if isinstance(x, Tensor) else x


def check_widths(cfg: VitConfig, weights, policy: PruningPolicy) -> None:
    policy.validate(cfg)
    for l, (h, f) in enumerate(zip(policy.heads_kept(cfg), policy.neurons_kept(cfg))):
        wh, wf = _widths(weights, l)
        if (wh, wf) != (h, f):
            raise ValueError(f"layer {l}: weights have {wh} heads / {wf} neurons but policy keeps {h} / {f}")


def forward(cfg: VitConfig, weights, policy: PruningPolicy, images: np.ndarray, capture: bool = False,
            tokens: list | None = None, output_gram: np.ndarray | None = None,
            kernel: KernelConfig = KernelConfig()):
    """Logits of the (possibly pruned) model, plus a :class:`FeatureTrace` when ``capture``.

    ``weights`` must already have the head and neuron counts the policy keeps
    (see :func:`select_subweights`). Token selection layers use the fixed
    per-layer indices in ``tokens`` when given; otherwise they rank tokens by
    dependency against ``output_gram``, which defaults to the Gram matrix of
    this model's own logits with sequence reduction switched off.
    """
    check_widths(cfg, weights, policy)
    counts = policy.token_counts(cfg)
    if tokens is not None and len(tokens) != cfg.layers:
        raise ValueError(f"need token indices for {cfg.layers} layers, got {len(tokens)}")
    if tokens is None and output_gram is None and any(k < n for n, k in counts):
        no_seq = PruningPolicy(policy.neuron, policy.head, np.zeros(cfg.layers))
        with T.paused_macs():
            ref = forward(cfg, weights, no_seq, images)
        output_gram = gram(ref.data, kernel)

    w = {k: v if isinstance(v, Tensor) else Tensor(v) for k, v in weights.items()}
    trace = FeatureTrace() if capture else None
    patches = patchify(cfg, images)
    b = patches.shape[0]
    d = cfg.embed_dim
    scale = 1.0 / math.sqrt(cfg.head_dim)

    x = T.add(T.matmul(Tensor(patches), w["patch.w"]), w["patch.b"])
    cls = T.broadcast_to(T.reshape(w["cls"], (1, 1, d)), (b, 1, d))
    x = T.add(T.concat([cls, x], axis=1), w["pos"])

    for l, (n_in, n_keep) in enumerate(counts):
        n = layer_names(l)
        assert x.shape[1] == n_in
        h = T.layernorm(x, w[n["ln1.g"]], w[n["ln1.b"]], LN_EPS)
        heads = w[n["attn.wq"]].shape[0]
        q, k, v = (_split_heads(T.matmul(h, _fold_in(w[n[key]])), heads)
                   for key in ("attn.wq", "attn.wk", "attn.wv"))
        att = T.softmax_rows(T.mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), scale))
        o = T.matmul(att, v)  # (B, H, N, dh)
        # per-head output projections summed over heads == one matmul on concatenated heads
        cat = T.reshape(T.transpose(o, (0, 2, 1, 3)), (b, n_in, -1))
        x = T.add(x, T.matmul(cat, _fold_out(w[n["attn.wo"]])))
        if capture:
            trace.heads.append(o.data.transpose(0, 2, 1, 3).copy())
            trace.attention.append(att.data.mean(axis=0))
            trace.tsl_inputs.append(x.data)

        if tokens is not None:
            keep = np.asarray(tokens[l], dtype=np.int64)
            if len(keep) != n_keep:
                raise ValueError(f"layer {l}: {len(keep)} fixed token indices but policy keeps {n_keep}")
        elif n_keep < n_in:
            keep = select_tokens(score_tokens(x.data, output_gram, kernel), n_keep)
        else:
            keep = np.arange(n_in)
        if len(keep) < n_in:
            x = T.gather_rows(x, keep)
        if capture:
            trace.tokens.append(keep)

        h = T.layernorm(x, w[n["ln2.g"]], w[n["ln2.b"]], LN_EPS)
        z = T.gelu(T.add(T.matmul(h, w[n["ffn.w1"]]), w[n["ffn.b1"]]))
        if capture:
            trace.ffn.append(z.data)
        x = T.add(x, T.add(T.matmul(z, w[n["ffn.w2"]]), w[n["ffn.b2"]]))

    x = T.layernorm(x, w["norm.g"], w["norm.b"], LN_EPS)
    cls_out = T.reshape(T.take(x, [0], axis=1), (b, d))
    logits = T.add(T.matmul(cls_out, w["head.w"]), w["head.b"])
    if capture:
        trace.logits = logits.data
        return logits, trace
    return logits


def _fold_in(w: Tensor) -> Tensor:
    """(H, d, dh) per-head projections -> (d, H * dh)."""
    h, d, dh = w.shape
    return T.reshape(T.transpose(w, (1, 0, 2)), (d, h * dh))


def _fold_out(w: Tensor) -> Tensor:
    """(H, dh, d) per-head output projections -> (H * dh, d)."""
    h, dh, d = w.shape
    return T.reshape(w, (h * dh, d))


def _split_heads(x: Tensor, heads: int) -> Tensor:
    """(B, N, H * dh) -> (B, H, N, dh)."""
    b, n, hd = x.shape
    return T.transpose(T.reshape(x, (b, n, heads, hd // heads)), (0, 2, 1, 3))


def _take(x, idx, axis: int):
    if isinstance(x, Tensor):
        return T.take(x, idx, axis)
    return np.take(x, np.asarray(idx, dtype=np.int64), axis=axis)


def select_by_plan(weights, neurons: list, heads: list) -> dict:
    """Sub-weights keeping the given neuron and head indices per layer; all else shared."""
    out = dict(weights)
    for l, (ni, hi) in enumerate(zip(neurons, heads)):
        n = layer_names(l)
        wh, wf = _widths(weights, l)
        if len(hi) < 1 or len(ni) < 1:
            raise ValueError(f"layer {l}: must retain at least one head and one neuron")
        if len(hi) != wh:
            for key in ("attn.wq", "attn.wk", "attn.wv", "attn.wo"):
                out[n[key]] = _take(weights[n[key]], hi, 0)
        if len(ni) != wf:
            out[n["ffn.w1"]] = _take(weights[n["ffn.w1"]], ni, 1)
            out[n["ffn.b1"]] = _take(weights[n["ffn.b1"]], ni, 0)
            out[n["ffn.w2"]] = _take(weights[n["ffn.w2"]], ni, 0)
    return out


def select_subweights(cfg: VitConfig, weights, policy: PruningPolicy,
                      neuron_scores: list, head_scores: list) -> dict:
    """Keep the top-scoring neurons and heads of each layer as the policy dictates.

    Layers whose weights already have the policy's widths are passed through,
    which makes the selection idempotent.
    """
    policy.validate(cfg)
    neurons, heads = [], []
    for l, (hk, fk) in enumerate(zip(policy.heads_kept(cfg), policy.neurons_kept(cfg))):
        wh, wf = _widths(weights, l)
        if fk < 1 or hk < 1:
            raise ValueError(f"layer {l}: retained count below 1")
        neurons.append(np.arange(wf) if wf == fk else arg_top_k(neuron_scores[l], fk))
        heads.append(np.arange(wh) if wh == hk else arg_top_k(head_scores[l], hk))
    return select_by_plan(weights, neurons, heads)


# -- training ------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 64
    clip_norm: float = 1.0


class _Sgd:
    """Momentum SGD with cosine learning-rate decay and global-norm clipping."""

    def __init__(self, params: dict[str, np.ndarray], tcfg: TrainConfig, steps: int):
        self.params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
        self.buf = {k: np.zeros_like(v) for k, v in self.params.items()}
        self.tcfg = tcfg
        self.steps = steps
        self.t = 0

    def step(self, grads: dict[str, np.ndarray]) -> None:
        c = self.tcfg
        lr = c.lr * 0.5 * (1.0 + math.cos(math.pi * self.t / self.steps))
        norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
        clip = min(1.0, c.clip_norm / (norm + 1e-12)) if c.clip_norm else 1.0
        for k, p in self.params.items():
            g = grads.get(k)
            g = np.zeros_like(p) if g is None else g * clip
            if c.weight_decay and p.ndim > 1:
                g = g + c.weight_decay * p
            self.buf[k] = c.momentum * self.buf[k] + g
            self.params[k] = p - lr * self.buf[k]
        self.t += 1


def _loss_and_grads(cfg, params, policy, xb, yb, neurons=None, heads=None, tokens=None, output_gram=None,
                    kernel=KernelConfig()):
    leaves = {k: Tensor(v, requires_grad=True) for k, v in params.items()}
    with T.Tape() as tape:
        w = leaves if neurons is None else select_by_plan(leaves, neurons, heads)
        logits = forward(cfg, w, policy, xb, tokens=tokens, output_gram=output_gram, kernel=kernel)
        loss = T.cross_entropy(logits, yb)
    tape.backward(loss)
    return loss.item(), {k: t.grad for k, t in leaves.items() if t.grad is not None}


def supernet_train(cfg: VitConfig, images: np.ndarray, labels: np.ndarray, budget: float, steps: int,
                   tcfg: TrainConfig = TrainConfig(), seed: int = 0, rho_max=0.9, dims=("neuron", "head", "seq"),
                   kernel: KernelConfig = KernelConfig(), init: dict | None = None,
                   log: list | None = None) -> dict[str, np.ndarray]:
    """Train shared weights under policies drawn from the budget-constrained sampler.

    Each step draws one policy, ranks neurons/heads/tokens by dependency on
    the current batch, and updates the shared parameters through the selected
    sub-model only.
    """
    from .flops import min_cost
    from .search import PolicySampler

    sampler = PolicySampler(cfg, budget, rho_max, dims, seed=[seed, 1])
    rng = np.random.default_rng([seed, 2])
    opt = _Sgd(init if init is not None else init_weights(cfg, seed), tcfg, steps)
    full = PruningPolicy.zeros(cfg.layers)
    for _ in range(steps):
        idx = rng.choice(len(labels), size=min(tcfg.batch_size, len(labels)), replace=False)
        xb, yb = images[idx], labels[idx]
        policy = sampler.sample()
        neurons = heads = output_gram = None
        if not policy.is_zero():
            logits, trace = forward(cfg, opt.params, full, xb, capture=True)
            output_gram = gram(logits.data, kernel)
            neurons = [arg_top_k(score_neurons(trace, l, output_gram, kernel), k)
                       for l, k in enumerate(policy.neurons_kept(cfg))]
            heads = [arg_top_k(score_heads(trace, l, output_gram, kernel), k)
                     for l, k in enumerate(policy.heads_kept(cfg))]
        loss, grads = _loss_and_grads(cfg, opt.params, policy, xb, yb, neurons, heads,
                                      output_gram=output_gram, kernel=kernel)
        if log is not None:
            log.append(loss)
        opt.step(grads)
    return opt.params


def finetune(cfg: VitConfig, weights: dict, policy: PruningPolicy, images: np.ndarray, labels: np.ndarray,
             steps: int, tcfg: TrainConfig = TrainConfig(), seed: int = 0, tokens: list | None = None,
             kernel: KernelConfig = KernelConfig(), log: list | None = None) -> dict[str, np.ndarray]:
    """Supervised training of a fixed pruned architecture (weights already sub-selected)."""
    check_widths(cfg, weights, policy)
    rng = np.random.default_rng([seed, 3])
    opt = _Sgd(weights, tcfg, steps)
    for _ in range(steps):
        idx = rng.choice(len(labels), size=min(tcfg.batch_size, len(labels)), replace=False)
        loss, grads = _loss_and_grads(cfg, opt.params, policy, images[idx], labels[idx], tokens=tokens,
                                      kernel=kernel)
        if log is not None:
            log.append(loss)
        opt.step(grads)
    return opt.params


def predict(cfg: VitConfig, weights, policy: PruningPolicy, images: np.ndarray, tokens: list | None = None,
            batch_size: int = 256, kernel: KernelConfig = KernelConfig()) -> np.ndarray:
    out = []
    for i in range(0, len(images), batch_size):
        out.append(forward(cfg, weights, policy, images[i:i + batch_size], tokens=tokens, kernel=kernel).data)
    return np.concatenate(out) if out else np.zeros((0, cfg.num_classes))


def evaluate(cfg: VitConfig, weights, policy: PruningPolicy, images: np.ndarray, labels: np.ndarray,
             tokens: list | None = None, batch_size: int = 256, kernel: KernelConfig = KernelConfig()) -> float:
    """Top-1 accuracy on a split. Pass fixed ``tokens`` for batch-size-independent results."""
    if len(labels) == 0:
        raise ValueError("cannot evaluate on an empty split")
    logits = predict(cfg, weights, policy, images, tokens, batch_size, kernel)
    return float(np.mean(logits.argmax(axis=1) == np.asarray(labels)))
