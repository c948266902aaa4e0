"""Invariant suites, one per acceptance criterion id (1-10).

Each suite returns a :class:`CheckResult`. ``quick=True`` shrinks case counts
and training budgets so the whole set runs in about a minute; the thresholds
of suites 8 and 9 only apply at full scale, so their quick variants check the
direction of the effect instead.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np

from .bench import run_bench
from .corpus import gen_corpus
from .speculator import Speculator, SpeculatorConfig, attention_decoder
from .target import TargetConfig, TargetModel, vanilla_decode
from .tensor import (
    Graph,
    Tensor,
    concat,
    cosine_similarity,
    log_softmax,
    matmul,
    rms_norm,
    rope,
    silu,
    smooth_l1,
    soft_cross_entropy,
    softmax,
)
from .train import DistillBatch, TrainConfig, distill_loss, extract_teacher, train, train_target
from .tree import TokenTree, build_mask, compress_mask, expand, leaf_paths
from .verify import _verify_mask, spec_decode_loop, verify_sampled

__all__ = [
    "CheckResult",
    "SUITES",
    "run_suite",
    "run_all",
    "EfficacySetup",
    "efficacy_runs",
    "fd_relative_error",
    "ad_transcription",
]


@dataclass
class CheckResult:
    id: int
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0
    metrics: dict = field(default_factory=dict)

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] criterion {self.id:>2} {self.name}: {self.detail} ({self.seconds:.1f}s)"


# ------------------------------------------------------------------ 1 lossless


def random_case(rng: np.random.Generator, dtype: str = "float64"):
    """A small random (target, speculator, prompt, tree shape) case."""
    heads = int(rng.choice([1, 2, 4]))
    dh = int(rng.choice([4, 8]))
    cfg = TargetConfig(
        vocab_size=int(rng.integers(8, 65)),
        hidden_size=heads * dh,
        num_heads=heads,
        num_layers=int(rng.integers(1, 3)),
        max_seq_len=160,
        dtype=dtype,
    )
    target = TargetModel.random(cfg, int(rng.integers(1 << 30)))
    n = int(rng.integers(1, 6))
    scfg = SpeculatorConfig(num_heads=n, augment_layers=int(rng.integers(0, 3)),
                            init_noise=float(rng.choice([0.0, 0.01, 0.5])))
    spec = Speculator.create(target, scfg, int(rng.integers(1 << 30)))
    if rng.random() < 0.3:
        # garbage weights
        for p in spec.weights.values():
            p.data = rng.standard_normal(p.shape).astype(p.dtype)
    depth = int(rng.integers(0, n + 1))
    shape = [int(rng.integers(1, 4)) for _ in range(depth)]
    prompt = rng.integers(0, cfg.vocab_size, size=int(rng.integers(1, 12))).tolist()
    return target, spec, prompt, shape


def check_lossless(quick: bool = False, cases: int | None = None, max_new: int = 64) -> CheckResult:
    cases = cases or (20 if quick else 200)
    rng = np.random.default_rng(1234)
    bad = []
    for c in range(cases):
        target, spec, prompt, shape = random_case(rng)
        ref = vanilla_decode(target, prompt, max_new)
        out, _ = spec_decode_loop(target, spec, prompt, max_new, 0.0, shape,
                                  compressed_mask=bool(rng.random() < 0.5))
        if out != ref:
            bad.append(c)
    return CheckResult(1, "lossless greedy decoding", not bad,
                       f"{cases - len(bad)}/{cases} cases identical to vanilla decode", metrics={"mismatches": bad})


# ------------------------------------------------------------------ 2 sampled distribution


def single_step_marginal(target: TargetModel, spec: Speculator, prompt, tree_shape, trials: int,
                         rng: np.random.Generator, temperature: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Counts of the first token emitted by one draft+verify step after ``prompt``,
    plus the exact target distribution at that position."""
    prompt = list(prompt)
    if len(prompt) < 2:
        raise ValueError("need a prompt of at least two tokens")
    base = target.new_cache()
    logits, hidden = target.forward(prompt, base)
    p = softmax(Tensor(logits[-1].astype(np.float64)), temperature).data
    # the last prompt token is the anchor: the target cache holds what precedes
    # it and the drafter has seen each earlier hidden state with its successor
    base.rollback(len(prompt) - 1)
    spec.start(prompt)
    spec.observe(hidden[:-1], prompt[1:])
    memo: dict[tuple, np.ndarray] = {}
    counts = np.zeros(target.config.vocab_size, dtype=np.int64)

    for _ in range(trials):
        tree = spec.propose(tree_shape, temperature, rng)
        key = tuple(tree.tokens.tolist()) + tuple(tree.parents.tolist())
        probs = memo.get(key)
        if probs is None:
            cache = base.copy()
            block = np.concatenate([[prompt[-1]], tree.tokens]).astype(np.int64)
            lg, _ = target.forward(block, cache, mask=_verify_mask(tree, False))
            probs = softmax(Tensor(lg.astype(np.float64)), temperature).data
            memo[key] = probs
        res = verify_sampled(tree, probs, rng)
        counts[res.tokens[0]] += 1
    return counts, p


def distribution_case(seed: int = 7):
    cfg = TargetConfig(vocab_size=16, hidden_size=16, num_heads=2, num_layers=1, max_seq_len=64, dtype="float64")
    target = TargetModel.random(cfg, seed)
    # strong noise: the draft distribution is far from the target's, so rejections matter
    spec = Speculator.create(target, SpeculatorConfig(num_heads=2, augment_layers=1, init_noise=0.5), seed + 1)
    return target, spec, [3, 1, 4, 1, 5]


def check_distribution(quick: bool = False, trials: int | None = None) -> CheckResult:
    from scipy.stats import chisquare

    trials = trials or (10_000 if quick else 100_000)
    target, spec, prompt = distribution_case()
    rng = np.random.default_rng(99)
    # one level of three i.i.d. children: the first emitted token only meets the root level
    counts, p = single_step_marginal(target, spec, prompt, (3,), trials, rng)
    emp = counts / trials
    tv = 0.5 * float(np.abs(emp - p).sum())
    # pool sparse categories so every expected count is >= 5
    exp = p * trials
    keep = exp >= 5
    f_obs = np.append(counts[keep], counts[~keep].sum())
    f_exp = np.append(exp[keep], exp[~keep].sum())
    if f_exp[-1] == 0:
        f_obs, f_exp = f_obs[:-1], f_exp[:-1]
    pval = float(chisquare(f_obs, f_exp).pvalue)
    tv_tol = 0.015 if not quick else 0.03
    ok = tv <= tv_tol and pval > 0.01
    return CheckResult(2, "distribution preservation", ok,
                       f"TV {tv:.4f} (<= {tv_tol}), chi-square p {pval:.3f} (> 0.01), {trials} trials",
                       metrics={"tv": tv, "p_value": pval})


# ------------------------------------------------------------------ 3 gradients


def fd_relative_error(fn, params: list[np.ndarray], h: float = 1e-5, max_coords: int | None = None,
                      rng: np.random.Generator | None = None) -> float:
    """Max over params of ``max|analytic - numeric| / max(max|numeric|, 1e-8)``.

    ``fn(tensors) -> scalar Tensor`` is evaluated inside a Graph for the
    analytic gradient and on perturbed float64 copies for central differences.
    """
    ts = [Tensor(np.array(p, dtype=np.float64), requires_grad=True) for p in params]
    with Graph() as g:
        loss = fn(ts)
    g.backward(loss)
    worst = 0.0
    for t in ts:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = (rng or np.random.default_rng(0)).choice(flat.size, size=max_coords, replace=False)
        num = np.zeros(len(coords))
        for j, c in enumerate(coords):
            old = flat[c]
            flat[c] = old + h
            up = float(fn(ts).data)
            flat[c] = old - h
            dn = float(fn(ts).data)
            flat[c] = old
            num[j] = (up - dn) / (2 * h)
        a = analytic.reshape(-1)[coords]
        err = float(np.max(np.abs(a - num))) / max(float(np.max(np.abs(num))), 1e-8)
        worst = max(worst, err)
    return worst


def _proj(out: Tensor, r: np.ndarray) -> Tensor:
    return (out * Tensor(r)).sum()


def kernel_cases(rng: np.random.Generator) -> dict:
    """name -> (fn(tensors) -> scalar, list of inputs). Scalar losses project
    outputs on a fixed random direction so every output entry matters."""
    r = lambda *s: rng.standard_normal(s)  # noqa: E731
    R = {k: r(*s) for k, s in {"a": (3, 4), "m": (3, 5), "b3": (2, 3, 5), "rn": (3, 6), "sm": (4, 6),
                                 "rope": (2, 3, 4), "cos": (3, 4), "cat": (3, 7), "sil": (3, 4),
                                 "take": (2, 4), "t": (4, 3), "red": (3,)}.items()}
    cos, sin = np.cos(r(3, 4)), np.sin(r(3, 4))
    mask = rng.random((4, 6)) < 0.7
    mask[:, 0] = True
    probs = softmax(Tensor(r(4, 6))).data
    wrow = rng.random(4)
    # smooth_l1: keep |a-b| away from the kink at beta
    a_sl = r(4, 6)
    b_sl = a_sl + rng.choice([-1, 1], size=(4, 6)) * rng.choice([0.3, 0.6, 1.6, 2.5], size=(4, 6))
    idx = np.array([2, 0, 2, 1])
    return {
        "add": (lambda t: _proj(t[0] + t[1], R["a"]), [r(3, 4), r(4)]),
        "sub": (lambda t: _proj(t[0] - t[1], R["a"]), [r(3, 4), r(3, 4)]),
        "mul": (lambda t: _proj(t[0] * t[1], R["a"]), [r(3, 4), r(1, 4)]),
        "scale": (lambda t: _proj(t[0] * 2.5 / 3.0, R["a"]), [r(3, 4)]),
        "silu": (lambda t: _proj(silu(t[0]), R["sil"]), [r(3, 4)]),
        "matmul": (lambda t: _proj(matmul(t[0], t[1]), R["m"]), [r(3, 4), r(4, 5)]),
        "matmul_flat": (lambda t: _proj(matmul(t[0], t[1]), R["b3"]), [r(2, 3, 4), r(4, 5)]),
        "matmul_batched": (lambda t: _proj(matmul(t[0], t[1]), R["b3"]), [r(2, 3, 4), r(2, 4, 5)]),
        "sum": (lambda t: _proj(t[0].sum(axis=1), R["red"]), [r(3, 4)]),
        "mean": (lambda t: _proj(t[0].mean(axis=1), R["red"]), [r(3, 4)]),
        "reshape": (lambda t: _proj(t[0].reshape(4, 3), R["t"]), [r(3, 4)]),
        "transpose": (lambda t: _proj(t[0].T, R["t"]), [r(3, 4)]),
        "take": (lambda t: _proj(t[0][idx[:2]], R["take"]), [r(3, 4)]),
        "take_repeat": (lambda t: _proj(t[0][np.array([1, 1])], R["take"]), [r(3, 4)]),
        "concat": (lambda t: _proj(concat([t[0], t[1]], axis=-1), R["cat"]), [r(3, 4), r(3, 3)]),
        "rms_norm": (lambda t: _proj(rms_norm(t[0], t[1], 1e-5), R["rn"]), [r(3, 6), r(6)]),
        "softmax": (lambda t: _proj(softmax(t[0]), R["sm"]), [r(4, 6)]),
        "softmax_temperature": (lambda t: _proj(softmax(t[0], 0.7), R["sm"]), [r(4, 6)]),
        "softmax_masked": (lambda t: _proj(softmax(t[0], mask=mask), R["sm"]), [r(4, 6)]),
        "log_softmax": (lambda t: _proj(log_softmax(t[0]), R["sm"]), [r(4, 6)]),
        "rope": (lambda t: _proj(rope(t[0], cos, sin), R["rope"]), [r(2, 3, 4)]),
        "cosine_similarity": (lambda t: _proj(cosine_similarity(t[0], t[1]), R["red"]), [r(3, 4), r(3, 4)]),
        "smooth_l1": (lambda t: smooth_l1(t[0], t[1]), [a_sl, b_sl]),
        "smooth_l1_weighted": (lambda t: smooth_l1(t[0], t[1], weight=wrow), [a_sl, b_sl]),
        "soft_cross_entropy": (lambda t: soft_cross_entropy(probs, t[0]), [r(4, 6)]),
        "soft_cross_entropy_weighted": (lambda t: soft_cross_entropy(probs, t[0], weight=wrow), [r(4, 6)]),
        "attention_decoder": (
            lambda t: _proj(attention_decoder(t[0], t[1], dict(zip(("norm", "wq", "bq", "wk", "bk", "wv", "bv"), t[2:])), 2, 1e-5), R["a"]),
            [r(3, 4), r(3, 4), r(4), r(4, 4), r(4), r(4, 4), r(4), r(4, 4), r(4)],
        ),
    }


def tiny_distill_setup(seed: int = 0, num_heads: int = 3):
    cfg = TargetConfig(vocab_size=11, hidden_size=8, num_heads=2, num_layers=2, max_seq_len=32, dtype="float64")
    target = TargetModel.random(cfg, seed)
    spec = Speculator.create(target, SpeculatorConfig(num_heads=num_heads, augment_layers=1, init_noise=0.3), seed)
    tokens = np.random.default_rng(seed).integers(0, 11, size=(2, 7))
    batch = next(extract_teacher(target, tokens))
    return target, spec, batch


def end_to_end_error(seed: int = 0, max_coords: int | None = None) -> float:
    target, spec, batch = tiny_distill_setup(seed)
    names = list(spec.weights)
    cfg = TrainConfig(num_heads=spec.config.num_heads)

    def fn(ts):
        saved = dict(spec.weights)
        spec.weights.update(dict(zip(names, ts)))
        try:
            fcs, logits = spec.forward_train(batch.tokens, batch.hidden)
            loss, _ = distill_loss(fcs, logits, batch, target.weights["final_norm"], cfg, eps=target.config.rms_eps)
        finally:
            spec.weights.update(saved)
        return loss

    return fd_relative_error(fn, [spec.weights[k].data for k in names], max_coords=max_coords)


def check_gradients(quick: bool = False) -> CheckResult:
    sets = 3 if quick else 20
    worst: dict[str, float] = {}
    for s in range(sets):
        for name, (fn, inputs) in kernel_cases(np.random.default_rng(s)).items():
            worst[name] = max(worst.get(name, 0.0), fd_relative_error(fn, inputs))
    k_max = max(worst.values())
    e2e = end_to_end_error(0, max_coords=8 if quick else None)
    ok = k_max <= 1e-4 and e2e <= 1e-3
    return CheckResult(3, "gradient correctness", ok,
                       f"{len(worst)} kernels x {sets} sets max rel err {k_max:.2e} (<= 1e-4); "
                       f"distill_loss end-to-end {e2e:.2e} (<= 1e-3)",
                       metrics={"kernels": worst, "end_to_end": e2e})


# ------------------------------------------------------------------ 4 masks


def random_tree(rng: np.random.Generator, max_nodes: int = 64, vocab: int = 50) -> TokenTree:
    n = int(rng.integers(1, max_nodes + 1))
    parents = [int(rng.integers(-1, i)) for i in range(n)]
    return TokenTree(rng.integers(0, vocab, size=n), parents)


def check_masks(quick: bool = False) -> CheckResult:
    rng = np.random.default_rng(4)
    trees = 50 if quick else 500
    bad_expand = bad_path = 0
    for _ in range(trees):
        tree = random_tree(rng)
        m = build_mask(tree)
        if not np.array_equal(expand(compress_mask(tree), len(tree)), m):
            bad_expand += 1
        has_child = np.zeros(len(tree), dtype=bool)
        has_child[tree.parents[tree.parents >= 0]] = True
        for leaf in np.flatnonzero(~has_child):
            path = tree.path(int(leaf))
            sub = m[np.ix_(path, path)]
            if not np.array_equal(sub, np.tril(np.ones((len(path), len(path)), dtype=bool))):
                bad_path += 1
        if len(leaf_paths(tree)) != int((~has_child).sum()):
            bad_path += 1
    ok = bad_expand == 0 and bad_path == 0
    return CheckResult(4, "mask equivalence", ok,
                       f"{trees} trees: expand(compress) mismatches {bad_expand}, path-mask mismatches {bad_path}")


# ------------------------------------------------------------------ 5 attention decoder


def _rms_row(v, w, eps):
    ms = sum(float(a) * float(a) for a in v) / len(v)
    return [float(a) / math.sqrt(ms + eps) * float(b) for a, b in zip(v, w)]


def _cos(a, b, eps=1e-8):
    dot = sum(float(x) * float(y) for x, y in zip(a, b))
    na = math.sqrt(sum(float(x) ** 2 for x in a))
    nb = math.sqrt(sum(float(y) ** 2 for y in b))
    return dot / max(na * nb, eps)


def _linear(v, wmat, bias):
    # nn.Linear with the weight stored as [in, out]
    return [sum(float(v[i]) * float(wmat[i][j]) for i in range(len(v))) + float(bias[j]) for j in range(len(bias))]


def ad_transcription(x: np.ndarray, y: np.ndarray, w: dict[str, np.ndarray], head_size: int, eps: float) -> np.ndarray:
    """Pure-Python transcription of the reference AttentionDecoder.forward for rows of x, y."""
    hidden = x.shape[-1]
    head_dim = hidden // head_size
    out = []
    for xr, yr in zip(x.reshape(-1, hidden), y.reshape(-1, hidden)):
        res = list(xr)
        xn = _rms_row(xr, w["norm"], eps)
        x_q = _linear(xn, w["wq"], w["bq"])
        y_k = _linear(yr, w["wk"], w["bk"])
        v = _linear(yr, w["wv"], w["bv"])
        row = []
        for h in range(head_size):
            sl = slice(h * head_dim, (h + 1) * head_dim)
            att = _cos(x_q[sl], y_k[sl])
            row.extend(vi * att for vi in v[sl])
        out.append([a + b for a, b in zip(res, row)])
    return np.asarray(out).reshape(x.shape)


ALLOWED_AD_OPS = {"rms_norm", "matmul", "add", "reshape", "cosine_similarity", "mul"}


def check_attention_decoder(quick: bool = False) -> CheckResult:
    rng = np.random.default_rng(5)
    cases = 20 if quick else 100
    worst = 0.0
    structural = True
    for _ in range(cases):
        heads = int(rng.choice([1, 2, 4]))
        d = heads * int(rng.choice([2, 4, 8]))
        rows = int(rng.integers(1, 5))
        x, y = rng.standard_normal((rows, d)), rng.standard_normal((rows, d))
        w = {"norm": rng.standard_normal(d), "wq": rng.standard_normal((d, d)), "bq": rng.standard_normal(d),
             "wk": rng.standard_normal((d, d)), "bk": rng.standard_normal(d),
             "wv": rng.standard_normal((d, d)), "bv": rng.standard_normal(d)}
        tw = {k: Tensor(v, requires_grad=True) for k, v in w.items()}
        with Graph() as g:
            got = attention_decoder(Tensor(x, requires_grad=True), Tensor(y), tw, heads, 1e-5)
        ops = set(g.op_names())
        structural &= "silu" not in ops and ops <= ALLOWED_AD_OPS
        ref = ad_transcription(x, y, w, heads, 1e-5)
        worst = max(worst, float(np.max(np.abs(got.data - ref))))
    ok = worst <= 1e-6 and structural
    return CheckResult(5, "attention decoder conformance", ok,
                       f"{cases} cases max abs diff {worst:.2e} (<= 1e-6); no activation in graph: {structural}")


# ------------------------------------------------------------------ 6 loss


def hand_built_loss_case():
    """Two heads, B = 1, T = 4, V = 3, d = 2, written out by hand."""
    tokens = np.array([[0, 2, 1, 0]])
    probs = np.array([[[0.2, 0.5, 0.3], [0.1, 0.1, 0.8], [0.6, 0.3, 0.1], [0.25, 0.25, 0.5]]])
    hidden = np.array([[[0.5, -1.0], [1.5, 0.25], [-0.75, 2.0], [0.0, 1.0]]])
    fc0 = np.array([[[0.4, -0.9], [1.2, 0.6], [-2.0, 2.5]]])
    fc1 = np.array([[[3.0, -0.1], [0.3, 0.2]]])
    lg0 = np.array([[[0.1, 0.2, -0.3], [1.0, -1.0, 0.5], [0.0, 2.0, 0.0]]])
    lg1 = np.array([[[-0.5, 0.5, 1.5], [2.0, 1.0, 0.0]]])
    norm_w = np.array([1.1, 0.9])
    batch = DistillBatch(tokens, hidden, probs, np.ones((1, 4), dtype=bool))
    return batch, [fc0, fc1], [lg0, lg1], norm_w


def scalar_loss_oracle(batch, fcs, logits, norm_w, w_reg, decay, eps=1e-5, beta=1.0):
    total = 0.0
    T = batch.tokens.shape[1]
    for i in range(len(fcs)):
        cls = reg = 0.0
        m = T - 1 - i
        for t in range(m):
            p = batch.probs[0][t + 1 + i]
            z = logits[i][0][t]
            mx = max(z)
            lse = mx + math.log(sum(math.exp(v - mx) for v in z))
            cls += -sum(pv * (zv - lse) for pv, zv in zip(p, z))
            hn = _rms_row(fcs[i][0][t], norm_w, eps)
            ht = batch.hidden[0][t + 1 + i]
            row = 0.0
            for a, b in zip(ht, hn):
                dlt = abs(a - b)
                row += 0.5 * dlt * dlt / beta if dlt < beta else dlt - 0.5 * beta
            reg += row / len(ht)
        total += (cls / m + w_reg * reg / m) * decay ** i
    return total


def check_loss(quick: bool = False) -> CheckResult:
    batch, fcs, logits, norm_w = hand_built_loss_case()
    cfg = TrainConfig(num_heads=2)
    loss, _ = distill_loss([Tensor(f) for f in fcs], [Tensor(lg) for lg in logits], batch, Tensor(norm_w), cfg)
    ref = scalar_loss_oracle(batch, fcs, logits, norm_w, 10.0, 0.7)
    diff = abs(float(loss.data) - ref)
    dump = TrainConfig().to_dict()
    defaults = dump["w_reg"] == 10.0 and dump["decay"] == 0.7
    ok = diff <= 1e-6 and defaults
    return CheckResult(6, "loss conformance", ok,
                       f"2-head case |loss - oracle| {diff:.2e} (<= 1e-6); defaults w_reg={dump['w_reg']} "
                       f"decay={dump['decay']}")


# ------------------------------------------------------------------ 7 init


def check_init(quick: bool = False) -> CheckResult:
    tcfg = TargetConfig(vocab_size=64, hidden_size=32, num_heads=4, num_layers=3, max_seq_len=32)
    target = TargetModel.random(tcfg, 3)
    d = tcfg.hidden_size
    eye, zero = np.eye(d), np.zeros((d, d))
    clean = Speculator.create(target, SpeculatorConfig(init_noise=0.0), 0)
    w = {k: v.data for k, v in clean.weights.items()}
    problems = []

    def exact(name, arr, ref):
        if not np.array_equal(arr, np.asarray(ref, dtype=arr.dtype)):
            problems.append(name)

    exact("head0_fc", w["head0_fc"], eye)
    for ad in ("ad1", "ad2"):
        exact(f"{ad}.wq", w[f"{ad}.wq"], eye)
        exact(f"{ad}.wk", w[f"{ad}.wk"], eye)
        exact(f"{ad}.wv", w[f"{ad}.wv"], zero)
        for b in ("bq", "bk", "bv"):
            exact(f"{ad}.{b}", w[f"{ad}.{b}"], np.zeros(d))
        exact(f"{ad}.norm", w[f"{ad}.norm"], target.weights["final_norm"].data)
    for i in range(1, clean.config.num_heads):
        exact(f"head{i}_fc", w[f"head{i}_fc"], np.concatenate([eye, zero]))
    last = tcfg.num_layers - 1
    for j in range(clean.config.augment_layers):
        for k in ("wq", "wk", "wv", "wo", "w_gate", "w_up", "w_down", "attn_norm", "mlp_norm"):
            exact(f"augment.{j}.{k}", w[f"augment.{j}.{k}"], target.weights[f"layers.{last}.{k}"].data)
    exact("norm_final", w["norm_final"], target.weights["final_norm"].data)
    lm = target.weights["lm_head"].data
    emb_ok = all(np.array_equal(clean.embedding[v], lm[:, v]) for v in range(tcfg.vocab_size))

    noisy = Speculator.create(target, SpeculatorConfig(), 11)
    nw = {k: v.data.astype(np.float64) for k, v in noisy.weights.items()}
    parts = [nw["head0_fc"] - eye]
    for ad in ("ad1", "ad2"):
        parts += [nw[f"{ad}.wq"] - eye, nw[f"{ad}.wk"] - eye, nw[f"{ad}.wv"]]
    for i in range(1, noisy.config.num_heads):
        parts.append(nw[f"head{i}_fc"] - np.concatenate([eye, zero]))
    noise = np.concatenate([p.reshape(-1) for p in parts])
    # float32 storage rounds I + u; allow that rounding on top of the bound
    bound_ok = float(np.max(np.abs(noise))) <= 0.01 + 1e-7
    mean_ok = abs(float(noise.mean())) < 0.002 and noise.size >= 10_000
    ok = not problems and emb_ok and bound_ok and mean_ok
    detail = (f"exact identities/zeros: {'ok' if not problems else problems}; embedding == lm_head.T: {emb_ok}; "
              f"noise max {np.max(np.abs(noise)):.4f} (<= 0.01), |mean| {abs(noise.mean()):.5f} over {noise.size}")
    return CheckResult(7, "init conformance", ok, detail)


# ------------------------------------------------------------------ 8 / 9 training efficacy


@dataclass(frozen=True)
class EfficacySetup:
    """Desk-scale conditions shared by the training-efficacy and ablation suites."""

    vocab_size: int = 64
    hidden_size: int = 128
    num_layers: int = 4
    num_heads: int = 4
    corpus_len: int = 200_000
    corpus_seed: int = 0
    # sharper successor distributions give near-ties less often; see README
    markov_support: int = 4
    markov_concentration: float = 0.1
    target_steps: int = 1500
    target_lr: float = 3e-3
    steps: int = 20_000
    batch_size: int = 2
    seq_len: int = 32
    seeds: tuple = (0, 1, 2)
    eval_prompts: int = 16
    prompt_len: int = 16
    max_new: int = 64
    tree: tuple = (4, 2, 2, 1, 1)

    def quick(self) -> EfficacySetup:
        return replace(self, corpus_len=40_000, target_steps=300, steps=600, seeds=(0,), eval_prompts=4)


@lru_cache(maxsize=4)
def efficacy_world(setup: EfficacySetup):
    """(target, training corpus, held-out prompts); the target is pretrained on the corpus."""
    ids, src = gen_corpus("markov", setup.corpus_seed, vocab_size=setup.vocab_size, length=setup.corpus_len,
                          support=setup.markov_support, concentration=setup.markov_concentration)
    held = src.sample(setup.eval_prompts * setup.prompt_len, np.random.default_rng(setup.corpus_seed + 1000))
    prompts = held.reshape(setup.eval_prompts, setup.prompt_len).tolist()
    tcfg = TargetConfig(vocab_size=setup.vocab_size, hidden_size=setup.hidden_size, num_heads=setup.num_heads,
                        num_layers=setup.num_layers, max_seq_len=max(256, setup.prompt_len + setup.max_new + 16))
    target = TargetModel.random(tcfg, setup.corpus_seed)
    pre = TrainConfig(batch_size=16, seq_len=32, steps=setup.target_steps, warmup=100, lr=setup.target_lr,
                      min_lr=setup.target_lr / 10, weight_decay=0.0, log_every=10**9, seed=setup.corpus_seed)
    train_target(target, ids, pre)
    return target, ids, prompts


def extra_per_step(target, spec, prompts, setup: EfficacySetup) -> float:
    return run_bench(target, prompts, "spec", spec, setup.max_new, setup.tree).extra_tokens_per_step


_RUNS: dict = {}


def efficacy_runs(setup: EfficacySetup, augment_layers: int = 2, w_reg: float = 10.0) -> list[dict]:
    """Train one speculator per seed; returns per-seed init/trained extra tokens per step."""
    key = (setup, augment_layers, w_reg)
    if key in _RUNS:
        return _RUNS[key]
    target, ids, prompts = efficacy_world(setup)
    out = []
    for seed in setup.seeds:
        t0 = time.perf_counter()
        spec = Speculator.create(target, SpeculatorConfig(augment_layers=augment_layers), seed)
        init = extra_per_step(target, spec, prompts, setup)
        cfg = TrainConfig(w_reg=w_reg, steps=setup.steps, batch_size=setup.batch_size, seq_len=setup.seq_len,
                          seed=seed, log_every=10**9)
        train(spec, ids, cfg)
        out.append({"seed": seed, "init": init, "trained": extra_per_step(target, spec, prompts, setup),
                    "seconds": time.perf_counter() - t0})
    _RUNS[key] = out
    return out


def check_efficacy(quick: bool = False) -> CheckResult:
    setup = EfficacySetup().quick() if quick else EfficacySetup()
    t0 = time.perf_counter()
    runs = efficacy_runs(setup)
    minutes = (time.perf_counter() - t0) / 60
    init = float(np.mean([r["init"] for r in runs]))
    trained = float(np.mean([r["trained"] for r in runs]))
    ratio = trained / init if init > 0 else math.inf
    if quick:
        ok = trained > init
        detail = f"quick: trained {trained:.3f} > init {init:.3f} extra tokens/step ({setup.steps} steps)"
    else:
        ok = trained >= 1.5 and ratio >= 3.0 and minutes <= 30.0
        per_seed = ", ".join(f"{r['trained']:.2f}" for r in runs)
        detail = (f"trained {trained:.3f} extra tokens/step (>= 1.5; seeds {per_seed}), {ratio:.1f}x init "
                  f"{init:.3f} (>= 3x), {len(runs)} seeds in {minutes:.1f} min (<= 30)")
    return CheckResult(8, "training efficacy", ok, detail,
                       metrics={"runs": runs, "minutes": minutes, "trained": trained, "init": init})


def check_ablation(quick: bool = False) -> CheckResult:
    setup = EfficacySetup().quick() if quick else EfficacySetup()
    base = float(np.mean([r["trained"] for r in efficacy_runs(setup)]))
    no_aug = float(np.mean([r["trained"] for r in efficacy_runs(setup, augment_layers=0)]))
    no_reg = float(np.mean([r["trained"] for r in efficacy_runs(setup, w_reg=0.0)]))
    ok = base >= no_aug and base >= no_reg
    return CheckResult(9, "ablation direction", ok,
                       f"augment 2 vs 0: {base:.3f} vs {no_aug:.3f}; w_reg 10 vs 0: {base:.3f} vs {no_reg:.3f}",
                       metrics={"base": base, "no_augment": no_aug, "no_reg": no_reg})


# ------------------------------------------------------------------ 10 oracle bound


def check_oracle(quick: bool = False) -> CheckResult:
    cfg = TargetConfig(vocab_size=64, hidden_size=32, num_heads=4, num_layers=2, max_seq_len=128, dtype="float64")
    target = TargetModel.random(cfg, 10)
    rng = np.random.default_rng(10)
    prompts = [rng.integers(0, 64, size=int(rng.integers(1, 10))).tolist() for _ in range(3 if quick else 8)]
    # 1 prefill token + 10 full steps of 6 tokens
    rep = run_bench(target, prompts, "oracle", max_new=61, tree_shape=(1, 1, 1, 1, 1))
    van = run_bench(target, prompts, "vanilla", max_new=61)
    ok = rep.extra_tokens_per_step == 5.0 and van.extra_tokens_per_step == 0.0
    return CheckResult(10, "oracle speculator bound", ok,
                       f"oracle chain depth 5: {rep.extra_tokens_per_step} extra tokens/step (== 5); "
                       f"vanilla: {van.extra_tokens_per_step}")


SUITES = {
    1: ("lossless", check_lossless),
    2: ("distribution", check_distribution),
    3: ("gradients", check_gradients),
    4: ("masks", check_masks),
    5: ("attention-decoder", check_attention_decoder),
    6: ("loss", check_loss),
    7: ("init", check_init),
    8: ("efficacy", check_efficacy),
    9: ("ablation", check_ablation),
    10: ("oracle", check_oracle),
}


def run_suite(cid: int, quick: bool = False) -> CheckResult:
    if cid not in SUITES:
        raise KeyError(f"no suite for criterion {cid}")
    t0 = time.perf_counter()
    try:
        res = SUITES[cid][1](quick=quick)
    except Exception as exc:  # a crashing suite is a failing suite
        res = CheckResult(cid, SUITES[cid][0], False, f"error: {type(exc).__name__}: {exc}")
    res.seconds = time.perf_counter() - t0
    return res


def run_all(ids=None, quick: bool = False) -> list[CheckResult]:
    return [run_suite(i, quick) for i in (ids or sorted(SUITES))]
