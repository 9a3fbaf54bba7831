"""GAN objectives and discriminator regularizers.

The two-player losses come in a non-saturating (softplus) and a hinge
flavor. The gradient-gap penalty drives the squared difference between the
input-gradient norms of the discriminator at real and generated samples to
zero, optionally smoothing each side's norm with an exponential moving
average before taking the gap. GP-1, R1/R2 and DRAGAN penalties are included
for comparison studies, plus the real/fake pairing strategies the gap
penalty is evaluated under.

Discriminators are passed as callables ``d_apply(tape, x_node) -> score
node`` so penalties stay independent of the network implementation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Node, Tape, backward

LOSS_FAMILIES = ("nonsaturating_js", "hinge")
REGULARIZER_KINDS = ("none", "dig", "gp1", "r1", "r2", "dragan")
PAIRING_STRATEGIES = ("random", "same_class", "gradient_magnitude")
DIG_MODES = ("blend_then_gap", "mean_then_gap")


class NonFiniteNormError(RuntimeError):
    """A gradient norm came out non-finite; the run should be flagged."""


class PairingError(ValueError):
    """Pairing strategy cannot be applied to the given batches."""


def _mean_scalars(tape: Tape, nodes: list[Node]) -> Node:
    acc = nodes[0]
    for n in nodes[1:]:
        acc = tape.add(acc, n)
    return tape.scalar_mul(acc, 1.0 / len(nodes)) if len(nodes) > 1 else acc


def _mean(tape: Tape, scores) -> Node:
    """Mean of a batched (n,1) node or of a list of scalar nodes."""
    if isinstance(scores, Node):
        if scores.value.size == 0:
            raise ValueError("empty batch")
        return tape.mean(scores) if scores.value.size > 1 else scores
    scores = list(scores)
    if not scores:
        raise ValueError("empty batch")
    return _mean_scalars(tape, scores)


def _apply_loss(tape: Tape, family: str, t) -> "Node | list[Node]":
    """Per-sample discriminator-side loss l_D(t); t is a node or node list."""
    if family == "nonsaturating_js":
        f = tape.softplus
    elif family == "hinge":
        one = tape.scalar(1.0)

        def f(x):
            return tape.max_with_constant(tape.broadcast_add(x, one), 0.0)
    else:
        raise ValueError(f"unknown loss family {family!r}")
    if isinstance(t, Node):
        return f(t)
    return [f(x) for x in t]


def _neg(tape: Tape, t):
    if isinstance(t, Node):
        return tape.scalar_mul(t, -1.0)
    return [tape.scalar_mul(x, -1.0) for x in t]


def generator_loss(tape: Tape, family: str, d_of_fake) -> Node:
    """Mean over the batch of l_G(-D(G(z))).

    ``d_of_fake`` is a batched (n,1) score node or a list of scalar score
    nodes. Non-saturating: l_G(t) = log(1+exp(t)); hinge: l_G(t) = t.
    """
    neg = _neg(tape, d_of_fake)
    if family == "nonsaturating_js":
        neg = _apply_loss(tape, family, neg)
    elif family != "hinge":
        raise ValueError(f"unknown loss family {family!r}")
    return _mean(tape, neg)


def discriminator_loss(tape: Tape, family: str, d_of_real, d_of_fake) -> Node:
    """mean l_D(-D(x_R)) + mean l_D(D(x_F)); batches may differ in size."""
    real_term = _mean(tape, _apply_loss(tape, family, _neg(tape, d_of_real)))
    fake_term = _mean(tape, _apply_loss(tape, family, d_of_fake))
    return tape.add(real_term, fake_term)


# --- input-gradient norms ----------------------------------------------------


def scores_and_input_grad_norms(tape: Tape, d_apply, xs: np.ndarray
                                ) -> tuple[list[Node], list[Node]]:
    """Discriminator scores and ||dD/dx_i||_2 per sample, both as nodes.

    Each sample becomes its own leaf so the per-sample input gradient is
    well defined; one backward pass over the summed scores recovers all of
    them (the per-sample subgraphs are disjoint above the sum). Norms are
    recorded with the graph kept, so they are differentiable w.r.t. the
    discriminator parameters.
    """
    xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
    leaves = [tape.leaf(xs[i:i + 1]) for i in range(xs.shape[0])]
    scores = []
    for leaf in leaves:
        s = d_apply(tape, leaf)
        if s.value.size != 1:
            raise ValueError(
                f"discriminator must emit one scalar per sample, got {s.shape}")
        scores.append(s)
    total = scores[0]
    for s in scores[1:]:
        total = tape.add(total, s)
    grads = backward(tape, total, leaves, create_graph=True)
    norms = [tape.l2_norm(grads[leaf.nid]) for leaf in leaves]
    return scores, norms


def input_grad_norms(tape: Tape, d_apply, xs: np.ndarray) -> list[Node]:
    """Per-sample L2 norms of the discriminator's input gradient."""
    return scores_and_input_grad_norms(tape, d_apply, xs)[1]


# --- pairing -----------------------------------------------------------------


def pair_samples(strategy: str, reals, fakes, labels=None, norms=None,
                 rng: np.random.Generator | None = None) -> list[tuple[int, int]]:
    """Match each real sample to one fake sample (a bijection on indices).

    random: uniformly random bijection. same_class: random bijection
    restricted to equal labels (``labels`` is a (real_labels, fake_labels)
    pair). gradient_magnitude: both sides sorted ascending by gradient norm
    and matched rank-to-rank (``norms`` is a (real_norms, fake_norms) pair).
    """
    n = len(reals)
    if len(fakes) != n:
        raise PairingError(f"need equal batch sizes, got {n} reals vs {len(fakes)} fakes")
    if n == 0:
        raise PairingError("empty batch")
    if strategy == "random":
        if rng is None:
            raise PairingError("random pairing needs an rng")
        perm = rng.permutation(n)
        return [(i, int(perm[i])) for i in range(n)]
    if strategy == "same_class":
        if labels is None:
            raise PairingError("same_class pairing needs labels for both sides")
        real_labels, fake_labels = labels
        by_class: dict = {}
        for i, c in enumerate(real_labels):
            by_class.setdefault(c, ([], []))[0].append(i)
        for j, c in enumerate(fake_labels):
            by_class.setdefault(c, ([], []))[1].append(j)
        deficits = {c: (len(r), len(f)) for c, (r, f) in by_class.items()
                    if len(r) != len(f)}
        if deficits:
            detail = ", ".join(f"class {c!r}: {r} real vs {f} fake"
                               for c, (r, f) in sorted(deficits.items(), key=str))
            raise PairingError(f"class counts differ ({detail})")
        pairs = []
        for c in sorted(by_class, key=str):
            r_idx, f_idx = by_class[c]
            shuffled = rng.permutation(len(f_idx)) if rng is not None else range(len(f_idx))
            pairs.extend((r_idx[k], f_idx[int(s)]) for k, s in enumerate(shuffled))
        pairs.sort()
        return pairs
    if strategy == "gradient_magnitude":
        if norms is None:
            raise PairingError("gradient_magnitude pairing needs norms for both sides")
        real_norms, fake_norms = norms
        r_order = np.argsort(np.asarray(real_norms, dtype=float), kind="stable")
        f_order = np.argsort(np.asarray(fake_norms, dtype=float), kind="stable")
        return [(int(r), int(f)) for r, f in zip(r_order, f_order)]
    raise PairingError(f"unknown pairing strategy {strategy!r}")


# --- gradient-gap penalty ----------------------------------------------------


@dataclass(frozen=True)
class EmaState:
    """Per-side moving averages of the observed gradient norms.

    ``t == 0`` means uninitialized: the first update adopts the observed
    norm exactly; afterwards g <- g + alpha * (observed - g), a form whose
    fixed point under a constant stream is exact in floating point.
    """

    alpha: float
    g_real: float = 0.0
    g_fake: float = 0.0
    t: int = 0

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError(f"alpha must be in (0, 1], got {self.alpha}")

    def blended(self, side_prev: float, observed: float) -> float:
        if self.t == 0:
            return observed
        return side_prev + self.alpha * (observed - side_prev)


def _blend_node(tape: Tape, ema: EmaState, prev: float, norm: Node) -> Node:
    """EMA blend as a node; history enters as a constant, so only the
    current norm carries derivative information (scaled by alpha)."""
    if ema.t == 0:
        return norm
    delta = tape.broadcast_add(norm, tape.scalar(-prev))
    return tape.broadcast_add(tape.scalar_mul(delta, ema.alpha), tape.scalar(prev))


def dig_penalty(tape: Tape, norms_real: list[Node], norms_fake: list[Node],
                pairs: list[tuple[int, int]], ema: EmaState,
                mode: str = "blend_then_gap") -> tuple[Node, EmaState]:
    """Squared gap between (EMA-smoothed) per-side gradient norms.

    blend_then_gap: each pair's two norms are blended with the side's
    running average, and the penalty is the mean squared gap over pairs.
    mean_then_gap: each side's batch-mean norm is blended first and the
    penalty is the single squared gap of the two blended means.

    Returns the penalty node and the advanced EMA state (advanced with the
    batch-mean observed norms, as plain floats).
    """
    if mode not in DIG_MODES:
        raise ValueError(f"unknown dig mode {mode!r}")
    obs_r = [n.item() for n in norms_real]
    obs_f = [n.item() for n in norms_fake]
    if not all(np.isfinite(obs_r)) or not all(np.isfinite(obs_f)):
        raise NonFiniteNormError("non-finite gradient norm in gap penalty")

    if mode == "mean_then_gap":
        g_r = _blend_node(tape, ema, ema.g_real, _mean_scalars(tape, norms_real))
        g_f = _blend_node(tape, ema, ema.g_fake, _mean_scalars(tape, norms_fake))
        penalty = tape.square(tape.sub(g_r, g_f))
    else:
        sq_gaps = []
        for ri, fi in pairs:
            g_r = _blend_node(tape, ema, ema.g_real, norms_real[ri])
            g_f = _blend_node(tape, ema, ema.g_fake, norms_fake[fi])
            sq_gaps.append(tape.square(tape.sub(g_r, g_f)))
        penalty = _mean_scalars(tape, sq_gaps)

    new_state = EmaState(
        alpha=ema.alpha,
        g_real=ema.blended(ema.g_real, float(np.mean(obs_r))),
        g_fake=ema.blended(ema.g_fake, float(np.mean(obs_f))),
        t=ema.t + 1,
    )
    return penalty, new_state


def raw_gap_value(norms_real, norms_fake) -> float:
    """Unblended reporting gap: squared difference of the per-side mean
    norms (what the trajectory log records as R)."""
    mr = float(np.mean([n.item() if isinstance(n, Node) else n for n in norms_real]))
    mf = float(np.mean([n.item() if isinstance(n, Node) else n for n in norms_fake]))
    return (mr - mf) ** 2


# --- comparison penalties ----------------------------------------------------


def _unit_gradient_penalty(tape: Tape, d_apply, points: np.ndarray) -> Node:
    """mean (||dD/dx|| - 1)^2 over the given points."""
    norms = input_grad_norms(tape, d_apply, points)
    one = tape.scalar(1.0)
    sq = [tape.square(tape.sub(n, one)) for n in norms]
    return _mean_scalars(tape, sq)


def gp1_penalty(tape: Tape, d_apply, reals: np.ndarray, fakes: np.ndarray,
                rng: np.random.Generator) -> Node:
    """Unit-gradient penalty at per-sample random interpolates of
    real and fake points (one interpolation coefficient per sample)."""
    reals = np.atleast_2d(np.asarray(reals, dtype=np.float64))
    fakes = np.atleast_2d(np.asarray(fakes, dtype=np.float64))
    if reals.shape != fakes.shape:
        raise ValueError(f"real/fake shapes differ: {reals.shape} vs {fakes.shape}")
    u = rng.uniform(size=(reals.shape[0], 1))
    mixed = u * reals + (1.0 - u) * fakes
    return _unit_gradient_penalty(tape, d_apply, mixed)


def gradient_norm_sq_penalty(tape: Tape, d_apply, batch: np.ndarray) -> Node:
    """mean ||dD/dx||^2 over the batch (zero-gradient penalty)."""
    norms = input_grad_norms(tape, d_apply, batch)
    return _mean_scalars(tape, [tape.square(n) for n in norms])


def r1_penalty(tape: Tape, d_apply, reals: np.ndarray) -> Node:
    return gradient_norm_sq_penalty(tape, d_apply, reals)


def r2_penalty(tape: Tape, d_apply, fakes: np.ndarray) -> Node:
    return gradient_norm_sq_penalty(tape, d_apply, fakes)


def dragan_penalty(tape: Tape, d_apply, reals: np.ndarray, noise_std: float,
                   rng: np.random.Generator) -> Node:
    """Unit-gradient penalty on a Gaussian neighborhood of the real data."""
    if noise_std <= 0:
        raise ValueError(f"noise_std must be positive, got {noise_std}")
    reals = np.atleast_2d(np.asarray(reals, dtype=np.float64))
    jittered = reals + rng.normal(0.0, noise_std, size=reals.shape)
    return _unit_gradient_penalty(tape, d_apply, jittered)


def regularized_d_loss(tape: Tape, l_d: Node, penalty: Node, lam: float) -> Node:
    """L_D + lambda * R."""
    if lam < 0:
        raise ValueError(f"lambda must be nonnegative, got {lam}")
    return tape.add(l_d, tape.scalar_mul(penalty, lam))
