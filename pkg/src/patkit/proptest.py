"""Named, seed-replayable invariant checks.

Each property is a function ``check(rng, trials) -> Outcome``. Per-case
properties run ``trials`` independent cases, each from its own derived
seed, so a failing case can be replayed alone with ``replay``.
Statistical properties interpret ``trials`` as the Monte-Carlo sample count.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .attention import GsaLayer, MhaLayer, channel_shuffle, group_attn, gsa, mha, nonlinear_self_attn
from .core import tensor as T
from .core.gradcheck import grad_check
from .embedding import ArpeLayer, arpe
from .geometry import dilated_neighbor_sample, fps, knn, pairwise_sq_dist
from .sampling import GssLayer, SamplerConfig, gss, gumbel_noise, gumbel_softmax


@dataclass
class Outcome:
    ok: bool
    detail: dict = field(default_factory=dict)


@dataclass
class Property:
    name: str
    check: Callable[[np.random.Generator], Outcome]
    trials: int
    statistical: bool = False
    doc: str = ""


@dataclass
class PropertyResult:
    name: str
    trials: int
    failures: list
    seconds: float

    @property
    def passed(self) -> bool:
        return not self.failures


REGISTRY: dict[str, Property] = {}


def register(name: str, trials: int = 20, statistical: bool = False):
    def deco(fn):
        REGISTRY[name] = Property(name, fn, trials, statistical, (fn.__doc__ or "").strip())
        return fn

    return deco


def case_seed(base: int, i: int) -> int:
    return int(np.random.SeedSequence([base, i]).generate_state(1)[0])


def _to_json(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.floating,)):
        return float(v)
    if isinstance(v, dict):
        return {k: _to_json(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_to_json(x) for x in v]
    return v


def _maxdiff(a, b) -> float:
    return float(np.max(np.abs(np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64))))


def _random_perm_case(rng, n_range=(4, 64), c_choices=(8, 16, 32), g_choices=(1, 2, 4, 8)):
    n = int(rng.integers(n_range[0], n_range[1] + 1))
    c = int(rng.choice(c_choices))
    g = int(rng.choice([g for g in g_choices if c % g == 0]))
    return n, c, g


# -- equivariance / invariance ---------------------------------------------------------


def _equivariance(op, rng, dtype, tol):
    n, c, g = _random_perm_case(rng)
    with T.precision(dtype):
        layer_rng = np.random.default_rng(rng.integers(2**31))
        x = rng.uniform(-2, 2, size=(n, c))
        perm = rng.permutation(n)
        with T.no_grad():
            f = op(c, g, layer_rng)
            y = f(T.Tensor(x)).data
            yp = f(T.Tensor(x[perm])).data
    dev = _maxdiff(yp, y[perm])
    return Outcome(dev < tol, {"n": n, "c": c, "g": g, "max_dev": dev, "tol": tol})


def _gsa_op(c, g, rng):
    layer = GsaLayer(c, g, rng)
    return lambda x: gsa(x, layer)


@register("gsa-equivariance", trials=100)
def prop_gsa_equivariance(rng) -> Outcome:
    """gsa(P X) = P gsa(X) at 32-bit (1e-5) and 64-bit (1e-10)."""
    s32, s64 = rng.integers(2**63, size=2)
    a = _equivariance(_gsa_op, np.random.default_rng(s32), np.float32, 1e-5)
    b = _equivariance(_gsa_op, np.random.default_rng(s64), np.float64, 1e-10)
    return Outcome(a.ok and b.ok, {"f32": a.detail, "f64": b.detail})


@register("mha-equivariance", trials=30)
def prop_mha_equivariance(rng) -> Outcome:
    """mha(P X) = P mha(X) at 32-bit within 1e-5."""

    def op(c, g, r):
        layer = MhaLayer(c, g, r)
        return lambda x: mha(x, layer)

    return _equivariance(op, rng, np.float32, 1e-5)


@register("group-attn-equivariance", trials=30)
def prop_group_attn_equivariance(rng) -> Outcome:
    """Group attention and non-linear self-attention commute with row permutations."""

    def op(c, g, r):
        layer = GsaLayer(c, g, r)
        return lambda x: T.concat([group_attn(x, layer), nonlinear_self_attn(x)], axis=-1)

    return _equivariance(op, rng, np.float32, 1e-5)


@register("arpe-equivariance", trials=10)
def prop_arpe_equivariance(rng) -> Outcome:
    """With deterministic neighbours, arpe(P X) = P arpe(X) at 32-bit within 1e-5."""
    n = int(rng.integers(8, 48))
    layer = ArpeLayer(3, 32, np.random.default_rng(rng.integers(2**31)), k=min(8, n - 1))
    layer.eval()
    pts = rng.uniform(-1, 1, size=(n, 3))
    perm = rng.permutation(n)
    with T.no_grad():
        y = arpe(pts, layer).data
        yp = arpe(pts[perm], layer).data
    dev = _maxdiff(yp, y[perm])
    return Outcome(dev < 1e-5, {"n": n, "max_dev": dev})


@register("gss-invariance", trials=100)
def prop_gss_invariance(rng) -> Outcome:
    """Zero-noise inference GSS selects the same row multiset under any permutation."""
    n = int(rng.integers(4, 64))
    c = int(rng.choice([8, 16, 32]))
    n_out = int(rng.integers(1, n + 1))
    with T.precision(np.float64):
        layer = GssLayer(c, n_out, np.random.default_rng(rng.integers(2**31)))
        x = rng.normal(size=(n, c))
        perm = rng.permutation(n)
        cfg = SamplerConfig(mode="infer")
        y, _ = gss(x, layer, cfg)
        yp, _ = gss(x[perm], layer, cfg)
    a = np.array(sorted(map(tuple, y.data)))
    b = np.array(sorted(map(tuple, yp.data)))
    ok = np.array_equal(a, b)
    return Outcome(ok, {"n": n, "c": c, "n_out": n_out})


def gss_selection_gap(rng, draws: int, n: int = 6, c: int = 4, n_out: int = 2) -> float:
    """L-inf gap between train-mode selection frequencies for X and P X (relabelled)."""
    layer = GssLayer(c, n_out, rng)
    x = rng.normal(size=(n, c))
    perm = rng.permutation(n)
    logits = layer.weight.data.astype(np.float64) @ x.T
    logits_p = layer.weight.data.astype(np.float64) @ x[perm].T
    pick = np.argmax(logits[None] + gumbel_noise((draws, n_out, n), rng), axis=-1)
    pick_p = perm[np.argmax(logits_p[None] + gumbel_noise((draws, n_out, n), rng), axis=-1)]
    freq = np.stack([np.bincount(pick[:, s], minlength=n) for s in range(n_out)]) / draws
    freq_p = np.stack([np.bincount(pick_p[:, s], minlength=n) for s in range(n_out)]) / draws
    return float(np.abs(freq - freq_p).max())


@register("gss-train-distribution", trials=10_000, statistical=True)
def prop_gss_train_distribution(rng, trials: int = 10_000) -> Outcome:
    """Train-mode selection histograms under X and P X match within 0.02."""
    gap = gss_selection_gap(rng, trials)
    return Outcome(gap <= 0.02, {"gap": gap, "draws": trials})


@register("model-invariance", trials=3)
def prop_model_invariance(rng) -> Outcome:
    """Inference logits of a GSS-only classifier are invariant to point order."""
    from .model import PATConfig, build_classifier, parse_plan

    n = 32
    cfg = PATConfig(n_points=n, c=32, g=4, k=8, downsample_plan=parse_plan("gss16,gss8"), mlp_sizes=[16], m=3)
    model = build_classifier(cfg, np.random.default_rng(rng.integers(2**31))).eval()
    pts = rng.uniform(-1, 1, size=(n, 3))
    perm = rng.permutation(n)
    with T.no_grad():
        a = np.sort(model(pts).data, axis=0)
        b = np.sort(model(pts[perm]).data, axis=0)
    dev = _maxdiff(a, b)
    return Outcome(dev < 1e-5, {"max_dev": dev})


@register("segmenter-equivariance", trials=3)
def prop_segmenter_equivariance(rng) -> Outcome:
    """Per-point segmentation logits permute with the input."""
    from .model import PATConfig, build_segmenter

    n = 32
    cfg = PATConfig(task="segment", n_points=n, c=32, g=4, k=8, n_gsa=2, downsample_plan=[], mlp_sizes=[16], m=3)
    model = build_segmenter(cfg, np.random.default_rng(rng.integers(2**31))).eval()
    pts = rng.uniform(-1, 1, size=(n, 3))
    perm = rng.permutation(n)
    with T.no_grad():
        y = model(pts).data
        yp = model(pts[perm]).data
    dev = _maxdiff(yp, y[perm])
    return Outcome(dev < 1e-5, {"max_dev": dev})


# -- gradients ------------------------------------------------------------------------------


def gradient_suite(rng) -> dict[str, float]:
    """Max relative finite-difference error per operator at 64-bit."""
    with T.precision(np.float64):
        return _gradient_suite(rng)


def _gradient_suite(rng) -> dict[str, float]:
    out = {}

    def run(name, fn, inputs, wrt=()):
        out[name] = grad_check(fn, inputs, wrt=wrt).max_rel_error

    u = lambda *s: rng.uniform(-2, 2, size=s)  # noqa: E731
    pos = lambda *s: rng.uniform(0.5, 2, size=s)  # noqa: E731
    w = T.Tensor(u(3, 4))
    run("add", lambda a, b: (T.add(a, b) * w).sum(), [u(3, 4), u(1, 4)])
    run("sub", lambda a, b: (T.sub(a, b) * w).sum(), [u(3, 4), u(3, 1)])
    run("mul", lambda a, b: (T.mul(a, b) * w).sum(), [u(3, 4), u(3, 4)])
    run("div", lambda a, b: (T.div(a, b) * w).sum(), [u(3, 4), pos(3, 4)])
    run("neg", lambda a: (T.neg(a) * w).sum(), [u(3, 4)])
    run("exp", lambda a: (T.exp(a) * w).sum(), [u(3, 4)])
    run("log", lambda a: (T.log(a) * w).sum(), [pos(3, 4)])
    run("elu", lambda a: (T.elu(a) * w).sum(), [u(3, 4)])
    w1 = T.Tensor(u(2, 3, 5))
    run("matmul", lambda a, b: (T.matmul(a, b) * w1).sum(), [u(2, 3, 4), u(4, 5)])
    w2 = T.Tensor(u(2, 3, 5))
    run("matmul-batched", lambda a, b: (T.matmul(a, b) * w2).sum(), [u(2, 3, 4), u(2, 4, 5)])
    w3 = T.Tensor(u(3, 5))
    run("sum", lambda a: (T.reduce(a, "sum", axis=1) * w3).sum(), [u(3, 4, 5)])
    w4 = T.Tensor(u(4))
    run("mean", lambda a: (T.reduce(a, "mean", axis=(0, 2)) * w4).sum(), [u(3, 4, 5)])
    w5 = T.Tensor(u(3, 5))
    run("max", lambda a: (T.reduce(a, "max", axis=1) * w5).sum(), [u(3, 4, 5)])
    w6 = T.Tensor(u(4, 3))
    run("reshape", lambda a: (T.reshape(a, (4, 3)) * w6).sum(), [u(3, 4)])
    w7 = T.Tensor(u(4, 2, 3))
    run("transpose", lambda a: (T.transpose(a, (2, 0, 1)) * w7).sum(), [u(2, 3, 4)])
    w8 = T.Tensor(u(3, 7))
    run("concat", lambda a, b: (T.concat([a, b], axis=-1) * w8).sum(), [u(3, 4), u(3, 3)])
    w9 = T.Tensor(u(2, 3, 4))
    run("stack", lambda a, b: (T.stack([a, b], axis=0) * w9).sum(), [u(3, 4), u(3, 4)])
    idx = np.array([[2, 0, 2], [1, 1, 3]])
    w10 = T.Tensor(u(2, 3, 5))
    run("gather", lambda a: (T.gather_rows(a, idx) * w10).sum(), [u(2, 4, 5)])
    w11 = T.Tensor(u(3, 2))
    run("getitem", lambda a: (a[:, 1:3] * w11).sum(), [u(3, 4)])
    run("softmax", lambda a: (T.softmax(a, axis=-1) * w).sum(), [u(3, 4)])
    run("log-softmax", lambda a: (T.log_softmax(a, axis=-1) * w).sum(), [u(3, 4)])
    labels = rng.integers(0, 4, size=3)
    run("cross-entropy", lambda a: T.cross_entropy(a, labels), [u(3, 4)])
    gw = u(8)
    w12 = T.Tensor(u(2, 5, 8))
    run(
        "group-norm",
        lambda a, s, b: (T.group_norm(a, 4, s, b) * w12).sum(),
        [u(2, 5, 8), u(8), u(8)],
    )
    w13 = T.Tensor(u(5, 8))
    run("layer-norm", lambda a, s, b: (T.layer_norm(a, s, b) * w13).sum(), [u(5, 8), gw, u(8)])
    w14 = T.Tensor(u(5, 8))
    run("shuffle", lambda a: (channel_shuffle(a, 4) * w14).sum(), [u(5, 8)])
    w15 = T.Tensor(u(6, 4))
    run("nonlinear-attn", lambda a: (nonlinear_self_attn(a) * w15).sum(), [u(6, 4)])
    layer = GsaLayer(16, 4, np.random.default_rng(rng.integers(2**31)))
    w16 = T.Tensor(u(8, 16))
    run("gsa", lambda a: (gsa(a, layer) * w16).sum(), [u(8, 16)], wrt=layer.parameters())
    noise = gumbel_noise((3, 5), rng)
    w17 = T.Tensor(u(3, 5))
    run(
        "gumbel-softmax",
        lambda a: (gumbel_softmax(a, 0.5, noise=noise) * w17).sum(),
        [u(3, 5)],
    )
    return out


@register("gradients", trials=1)
def prop_gradients(rng) -> Outcome:
    """Every differentiable op, the GSA block and gumbel_softmax pass finite differences at 1e-4."""
    errs = gradient_suite(rng)
    bad = {k: v for k, v in errs.items() if not v < 1e-4}
    return Outcome(not bad, {"failing": bad, "checked": len(errs)})


# -- sampling statistics ------------------------------------------------------------------


def gumbel_max_gap(probs: np.ndarray, draws: int, rng) -> float:
    logits = np.log(probs)
    idx = np.argmax(logits[None] + gumbel_noise((draws, len(probs)), rng), axis=-1)
    freq = np.bincount(idx, minlength=len(probs)) / draws
    return float(np.abs(freq - probs).max())


@register("gumbel-unbiased", trials=100_000, statistical=True)
def prop_gumbel_unbiased(rng, trials: int = 100_000) -> Outcome:
    """Gumbel-Max frequencies match Cat(s) within 0.01 for s=(.2,.5,.3) and 3 random s."""
    dists = [np.array([0.2, 0.5, 0.3])]
    for m in rng.integers(2, 9, size=3):
        dists.append(rng.dirichlet(np.ones(m)))
    gaps = [gumbel_max_gap(p, trials, rng) for p in dists]
    return Outcome(max(gaps) <= 0.01, {"gaps": gaps, "draws": trials})


SATURATION_GAP = 0.01


def _entropy(p: np.ndarray) -> np.ndarray:
    return -(p * np.log(np.clip(p, 1e-300, None))).sum(axis=-1)


@register("anneal-saturation", trials=20)
def prop_anneal_saturation(rng) -> Outcome:
    """tau=1e-3 saturates rows (max >= 0.999); entropy falls as tau falls."""
    m = int(rng.integers(2, 9))
    while True:
        # fixtures need a clear winner per row: a top-2 gap d saturates once
        # (m - 1) exp(-d / tau) <= 1e-3, i.e. d >= ~0.009 at tau = 1e-3
        logits = rng.normal(size=(4, m))
        noise = gumbel_noise(logits.shape, rng)
        top2 = np.sort(logits + noise, axis=-1)[:, -2:]
        if np.all(top2[:, 1] - top2[:, 0] >= SATURATION_GAP):
            break
    with T.precision(np.float64):
        sharp = gumbel_softmax(logits, 1e-3, noise=noise).data
        ents = [_entropy(gumbel_softmax(logits, t, noise=noise).data) for t in (1.0, 0.5, 0.1, 0.01)]
    monotone = all(np.all(b <= a + 1e-12) for a, b in zip(ents, ents[1:]))
    ok = bool(sharp.max(axis=-1).min() >= 0.999) and monotone
    return Outcome(ok, {"min_row_max": float(sharp.max(axis=-1).min()), "monotone": monotone})


@register("softmax-rows", trials=20)
def prop_softmax_rows(rng) -> Outcome:
    """Softmax and gumbel-softmax rows sum to 1 within 1e-6 and ignore row shifts."""
    x = rng.uniform(-5, 5, size=(6, int(rng.integers(2, 12))))
    with T.precision(np.float64):
        a = T.softmax(x).data
        b = T.softmax(x + rng.uniform(-50, 50, size=(6, 1))).data
        gs = gumbel_softmax(x, float(rng.uniform(0.01, 2)), rng=rng).data
    ok = _maxdiff(a.sum(-1), 1) < 1e-6 and _maxdiff(gs.sum(-1), 1) < 1e-6 and _maxdiff(a, b) < 1e-10
    return Outcome(ok, {"shift_dev": _maxdiff(a, b)})


# -- channel shuffle, geometry -----------------------------------------------------------


def shuffle_failures(max_c: int = 24) -> list[tuple[int, int]]:
    bad = []
    for c in range(1, max_c + 1):
        x = np.arange(c, dtype=np.float64)[None]
        for g in range(1, c + 1):
            if c % g:
                continue
            cg = c // g
            y = channel_shuffle(T.Tensor(x, dtype=np.float64), g).data[0]
            expect = np.array([i * cg + j for j in range(cg) for i in range(g)], dtype=np.float64)
            back = channel_shuffle(T.Tensor(y[None], dtype=np.float64), cg).data[0]
            if not (np.array_equal(y, expect) and np.array_equal(back, x[0])):
                bad.append((c, g))
    return bad


@register("shuffle-bijection", trials=1)
def prop_shuffle(rng) -> Outcome:
    """Exhaustive c <= 24: output follows the index formula; shuffle(c/g) inverts shuffle(g)."""
    bad = shuffle_failures()
    return Outcome(not bad, {"failing": bad})


FPS_WITNESS = np.array([[0.0, 0, 0], [1, 0, 0], [2, 0, 0], [9, 0, 0]])


@register("fps-start-witness", trials=1)
def prop_fps_witness(rng) -> Outcome:
    """x in {0,1,2,9}, n_out=3: start 0 gives [0,3,2], start 1 gives [1,3,0]."""
    a, b = fps(FPS_WITNESS, 3, 0).tolist(), fps(FPS_WITNESS, 3, 1).tolist()
    return Outcome(a == [0, 3, 2] and b == [1, 3, 0] and set(a) != set(b), {"start0": a, "start1": b})


@register("fps-covariance", trials=20)
def prop_fps_covariance(rng) -> Outcome:
    """Relabelling points (and the start index) relabels the FPS output."""
    n = int(rng.integers(3, 40))
    pts = rng.normal(size=(n, 3))
    perm = rng.permutation(n)
    k = int(rng.integers(1, n + 1))
    start = int(rng.integers(n))
    a = fps(pts, k, start)
    inv = np.argsort(perm)
    b = fps(pts[perm], k, int(inv[start]))
    return Outcome(np.array_equal(perm[b], a), {"n": n, "k": k})


@register("knn-dilated", trials=20)
def prop_knn_dilated(rng) -> Outcome:
    """pool = K dilated sampling equals kNN; neighbour rows exclude self and are distinct."""
    n = int(rng.integers(3, 40))
    pts = rng.normal(size=(n, 3))
    k = int(rng.integers(1, n))
    a = knn(pts, k).indices
    b = dilated_neighbor_sample(pts, k, 1.0, 10**9, rng).indices
    rows_ok = all(p not in row and len(set(row)) == k for p, row in enumerate(a))
    same = all(set(x) == set(y) for x, y in zip(a, b))
    return Outcome(rows_ok and same, {"n": n, "k": k})


@register("distance-symmetry", trials=20)
def prop_distance(rng) -> Outcome:
    """Squared distances are symmetric, zero on the diagonal and translation invariant."""
    pts = rng.normal(size=(int(rng.integers(1, 30)), 3 + int(rng.integers(0, 3))))
    d = pairwise_sq_dist(pts)
    shifted = pts.copy()
    shifted[:, :3] += rng.normal(size=3)
    ok = np.array_equal(d, d.T) and not np.any(np.diag(d)) and _maxdiff(d, pairwise_sq_dist(shifted)) < 1e-9
    return Outcome(bool(ok), {})


# -- runner ----------------------------------------------------------------------------


def select(only: Optional[list[str]] = None) -> list[Property]:
    if not only:
        return list(REGISTRY.values())
    unknown = [n for n in only if n not in REGISTRY]
    if unknown:
        raise KeyError(f"unknown properties: {', '.join(unknown)}")
    return [REGISTRY[n] for n in only]


def run_property(prop: Property, seed: int = 0, trials: Optional[int] = None, replay: Optional[int] = None):
    start = time.perf_counter()
    n = trials if trials is not None else prop.trials
    failures = []
    if prop.statistical:
        s = replay if replay is not None else case_seed(seed, 0)
        out = prop.check(np.random.default_rng(s), n)
        if not out.ok:
            failures.append({"seed": s, **out.detail})
        n = 1
    else:
        seeds = [replay] if replay is not None else [case_seed(seed, i) for i in range(n)]
        for s in seeds:
            out = prop.check(np.random.default_rng(s))
            if not out.ok:
                failures.append({"seed": s, **out.detail})
        n = len(seeds)
    return PropertyResult(prop.name, n, failures, time.perf_counter() - start)


def run_suite(
    only: Optional[list[str]] = None,
    seed: int = 0,
    trials: Optional[int] = None,
    replay: Optional[int] = None,
    dump_dir=None,
) -> list[PropertyResult]:
    results = [run_property(p, seed, trials, replay) for p in select(only)]
    if dump_dir is not None:
        dump = Path(dump_dir)
        for r in results:
            if r.failures:
                dump.mkdir(parents=True, exist_ok=True)
                path = dump / f"{r.name}.json"
                path.write_text(json.dumps(_to_json({"property": r.name, "failures": r.failures}), indent=2))
    return results


def format_report(results: list[PropertyResult]) -> str:
    lines = []
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        line = f"{status} {r.name:<24} cases={r.trials:<6} {r.seconds:7.2f}s"
        if r.failures:
            first = r.failures[0]
            line += f"  first failing seed={first['seed']} (replay with --only {r.name} --replay {first['seed']})"
        lines.append(line)
    return "\n".join(lines)
