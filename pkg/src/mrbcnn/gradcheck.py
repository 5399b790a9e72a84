"""Finite-difference verification of every differentiable op and the full network."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import bilinear, layers, losses, network
from .layers import ParamStore
from .network import NetworkConfig
from .rng import Stream
from .tensor import Tensor, backward, finite_difference_grad, mul, relative_error, sum_all

TOLERANCE = 1e-4
EPS = 1e-6


def gradcheck_config(variant: str = "mr-bcnn") -> NetworkConfig:
    """Down-scaled network: 40x24 input, 8 channels, 2x2 feature maps."""
    return NetworkConfig(
        variant=variant,
        input_h=40,
        input_w=24,
        part_height=24,
        part_stride=8,
        conv1_channels=8,
        conv2_channels=8,
        cell_h=1,
        cell_w=1,
        embedding_dim=16,
        dropout_p=0.5,
    )


@dataclass
class CheckResult:
    group: str
    name: str
    max_rel_err: float
    n_checked: int
    tol: float = TOLERANCE

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol


@dataclass
class GradcheckReport:
    results: list[CheckResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def names(self, group: str) -> set[str]:
        return {r.name for r in self.results if r.group == group}

    def worst(self) -> CheckResult:
        return max(self.results, key=lambda r: r.max_rel_err)

    def lines(self) -> list[str]:
        out = []
        for r in self.results:
            flag = "ok  " if r.passed else "FAIL"
            out.append(f"{flag} {r.group:<10} {r.name:<24} max_rel_err={r.max_rel_err:.3e} n={r.n_checked}")
        return out


def _uniform(gen, shape, lo=-1.0, hi=1.0, away_from_zero=0.0):
    x = gen.uniform(lo, hi, size=shape)
    if away_from_zero:
        small = np.abs(x) < away_from_zero
        x[small] = np.copysign(away_from_zero + gen.uniform(0, 0.1, size=small.sum()), x[small] + 1e-300)
    return x


def check_op(group: str, name: str, fn, inputs: list[np.ndarray], gen, eps: float = EPS) -> CheckResult:
    """Compare analytic and central-difference gradients of ``sum(fn(*inputs) * R)``
    for a fixed random ``R``, w.r.t. every input."""
    probe = fn(*[Tensor(a) for a in inputs])
    proj = Tensor(gen.standard_normal(probe.shape))

    def scalar(*ts):
        return sum_all(mul(fn(*ts), proj))

    worst, count = 0.0, 0
    for k in range(len(inputs)):
        ts = [Tensor(a, requires_grad=(i == k)) for i, a in enumerate(inputs)]
        gm = backward(scalar(*ts))
        analytic = gm.get(ts[k], np.zeros(inputs[k].shape))

        def f(t, k=k):
            args = [Tensor(a) for a in inputs]
            args[k] = t
            return scalar(*args)

        numeric = finite_difference_grad(f, inputs[k], eps)
        worst = max(worst, relative_error(analytic, numeric))
        count += inputs[k].size
    return CheckResult(group, name, worst, count)


def layer_checks(seed: int = 0) -> list[CheckResult]:
    gen = Stream(seed).split("gradcheck", "layers").gen
    out = []
    conv7 = lambda x, w, b: layers.conv2d(x, w, b)  # noqa: E731
    out.append(check_op("layer", "conv7", conv7,
                        [_uniform(gen, (2, 3, 10, 9)), _uniform(gen, (3, 3, 7, 7)), _uniform(gen, (3,))], gen))
    out.append(check_op("layer", "conv5", conv7,
                        [_uniform(gen, (2, 4, 8, 7)), _uniform(gen, (3, 4, 5, 5)), _uniform(gen, (3,))], gen))
    out.append(check_op("layer", "relu", layers.relu, [_uniform(gen, (3, 5, 4), away_from_zero=1e-3)], gen))
    pool_in = gen.permutation(np.linspace(-1, 1, 2 * 3 * 7 * 5)).reshape(2, 3, 7, 5)
    out.append(check_op("layer", "maxpool", layers.maxpool2, [pool_in], gen))
    out.append(check_op("layer", "fc", layers.fc,
                        [_uniform(gen, (4, 6)), _uniform(gen, (5, 6)), _uniform(gen, (5,))], gen))
    out.append(check_op("layer", "dropout-eval", lambda x: layers.dropout(x, 0.5, None, False),
                        [_uniform(gen, (4, 6))], gen))
    out.append(check_op("layer", "dropout-train",
                        lambda x: layers.dropout(x, 0.5, Stream(seed).split("mask"), True),
                        [_uniform(gen, (4, 6))], gen))
    out.append(check_op("layer", "bilinear_outer", bilinear.bilinear_outer,
                        [_uniform(gen, (2, 3, 4, 3)), _uniform(gen, (2, 4, 4, 3))], gen))
    grid = bilinear.make_region_grid(5, 4, 2, 3)
    out.append(check_op("layer", "region_pool", lambda m: bilinear.region_pool(m, grid).matrix,
                        [_uniform(gen, (2, 6, 5, 4))], gen))
    out.append(check_op("layer", "assemble",
                        lambda a, b, c: bilinear.assemble_descriptor(
                            [bilinear.BilinearDescriptor(p, t) for p, t in zip(bilinear.PART_NAMES, (a, b, c))]),
                        [_uniform(gen, (2, 3, 4)) for _ in range(3)], gen))
    out.append(check_op("layer", "signed_sqrt_l2",
                        lambda m: bilinear.signed_sqrt_l2(bilinear.BilinearDescriptor("p", m)).matrix,
                        [_uniform(gen, (3, 5), away_from_zero=1e-2)], gen))
    out.append(check_op("layer", "cosine_matrix", network.cosine_matrix, [_uniform(gen, (5, 4))], gen))
    return out


def loss_checks(seed: int = 0) -> list[CheckResult]:
    gen = Stream(seed).split("gradcheck", "losses").gen
    matching = np.array([1, 1, 0, 0, 0, 1, 0, 0, 1, 0, 0, 0], dtype=bool)
    spec = losses.HistogramSpec(20)
    nodes = spec.nodes
    sims = gen.uniform(-0.95, 0.95, size=matching.size)
    # keep every similarity away from the kernel's kinks at the nodes
    near = np.min(np.abs(sims[:, None] - nodes[None, :]), axis=1) < 1e-3
    sims[near] += 2e-3
    hist = lambda s: losses.histogram_loss(losses.PairSet(s, matching), spec)  # noqa: E731
    dev = lambda s: losses.binomial_deviance(losses.PairSet(s, matching))  # noqa: E731
    return [
        check_op("loss", "histogram", hist, [sims], gen),
        check_op("loss", "binomial", dev, [sims], gen),
    ]


def network_checks(
    config: NetworkConfig, loss: str, seed: int = 0, directions: int = 3, eps: float = EPS
) -> list[CheckResult]:
    """Directional-derivative checks of ``loss(embed(images))`` for every parameter tensor."""
    root = Stream(seed).split("gradcheck", "network", config.variant)
    params = network.init_params(config, root.split("init"))
    gen = root.split("inputs").gen
    images = gen.uniform(0.0, 1.0, size=(6, 3, config.input_h, config.input_w))
    ids = np.array([0, 0, 1, 1, 2, 2])
    loss_fn = losses.make_loss(loss, n_bins=20)

    def value(store: ParamStore) -> Tensor:
        emb = network.embed(Tensor(images), store, config, train=True, stream=root.split("dropout"))
        return loss_fn(losses.pairs_from_embeddings(emb, ids))

    gm = backward(value(params))
    out = []
    for name, t in params.params.items():
        g = gm.get(t, np.zeros(t.shape))
        analytic, numeric = [], []
        for _ in range(directions):
            v = gen.standard_normal(t.shape)
            v /= np.linalg.norm(v)
            vals = []
            for sign in (1.0, -1.0):
                trial = ParamStore(dict(params.params), params.momentum)
                trial.params[name] = Tensor(t.data + sign * eps * v)
                vals.append(value(trial).item())
            numeric.append((vals[0] - vals[1]) / (2 * eps))
            analytic.append(float(np.sum(g * v)))
        out.append(CheckResult(loss, name, relative_error(np.array(analytic), np.array(numeric)), directions))
    return out


def run_gradcheck(seed: int = 0, config: NetworkConfig | None = None) -> GradcheckReport:
    config = config or gradcheck_config()
    report = GradcheckReport()
    report.results.extend(layer_checks(seed))
    report.results.extend(loss_checks(seed))
    for loss in ("histogram", "binomial"):
        report.results.extend(network_checks(config, loss, seed))
    return report
