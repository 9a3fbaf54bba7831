"""Alternating GAN training on synthetic point datasets.

The default configuration is the two-point task: real data {0, 4}, a
4-weight-layer tanh generator fed by two fixed latent codes, a 4-weight-layer
sigmoid-hidden discriminator with an unbounded output score, one
discriminator step then one generator step per iteration, and Adam with
beta1 = 0.9 at learning rate 0.01 for 10k iterations. Runs are fully
deterministic given the config seed: initialization, latents, pairing and
regularizer noise each draw from an independent child stream of the seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import ganreg, nn
from .autodiff import Tape, backward
from .nn import ConfigError, MlpConfig, MlpParams

OPTIMIZERS = ("adam", "sgd_momentum")
LATENT_KINDS = ("fixed", "gaussian", "uniform")


class DivergenceError(RuntimeError):
    """Training produced non-finite values or runaway parameters."""


class ExperimentDependencyError(RuntimeError):
    """An experiment stage is missing a required prior artifact."""


class ExperimentPreconditionError(RuntimeError):
    """An experiment's validity precondition does not hold."""


@dataclass(frozen=True)
class Dataset:
    """Real data points (n x width) with optional per-point labels."""

    points: np.ndarray
    labels: tuple | None = None

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=np.float64))
        if pts.size == 0 or not np.all(np.isfinite(pts)):
            raise ConfigError("dataset must be nonempty and finite")
        object.__setattr__(self, "points", pts)
        if self.labels is not None and len(self.labels) != pts.shape[0]:
            raise ConfigError("one label per data point required")


TWO_POINT_DATASET = Dataset(np.array([[0.0], [4.0]]))


@dataclass(frozen=True)
class GanConfig:
    """Everything a run depends on; all fields surface in manifests."""

    loss_family: str = "nonsaturating_js"
    regularizer: str = "none"
    lam: float = 0.0
    alpha: float = 1.0
    dig_mode: str = "blend_then_gap"
    dragan_noise_std: float = 0.0  # 0 means: 0.5 * per-coordinate std of reals
    lr: float = 0.01
    optimizer: str = "adam"
    momentum: float = 0.9
    iterations: int = 10_000
    seed: int = 0
    batch_per_side: int = 2
    latent_dim: int = 1
    latent_kind: str = "fixed"
    n_fake: int = 2
    gen_widths: tuple[int, ...] = (1, 5, 5, 5, 1)
    gen_hidden_activation: str = "tanh"
    gen_output_activation: str = "tanh"
    output_scale: float = 5.0
    disc_widths: tuple[int, ...] = (1, 10, 10, 10, 1)
    disc_hidden_activation: str = "sigmoid"
    disc_output_activation: str = "identity"
    # Spread the first-layer bias transition points of a freshly initialized
    # discriminator uniformly over the data span (N(data) +- 1). With zero
    # biases every sigmoid unit switches at x=0 and the discriminator starts
    # blind around any mode away from the origin.
    disc_init_bias_spread: int = 1
    pairing: str = "random"
    log_stride: int = 10
    coverage_eps: float = 0.25
    max_abs_param: float = 1e6

    def __post_init__(self):
        object.__setattr__(self, "gen_widths", tuple(self.gen_widths))
        object.__setattr__(self, "disc_widths", tuple(self.disc_widths))
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if self.lr <= 0:
            raise ConfigError("learning rate must be positive")
        if not 0.0 < self.alpha <= 1.0:
            raise ConfigError("alpha must be in (0, 1]")
        if self.lam < 0:
            raise ConfigError("lambda must be nonnegative")
        if self.loss_family not in ganreg.LOSS_FAMILIES:
            raise ConfigError(f"loss_family must be one of {ganreg.LOSS_FAMILIES}")
        if self.regularizer not in ganreg.REGULARIZER_KINDS:
            raise ConfigError(f"regularizer must be one of {ganreg.REGULARIZER_KINDS}")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}")
        if self.latent_kind not in LATENT_KINDS:
            raise ConfigError(f"latent_kind must be one of {LATENT_KINDS}")
        if self.pairing not in ganreg.PAIRING_STRATEGIES:
            raise ConfigError(f"pairing must be one of {ganreg.PAIRING_STRATEGIES}")
        if self.dig_mode not in ganreg.DIG_MODES:
            raise ConfigError(f"dig_mode must be one of {ganreg.DIG_MODES}")
        if self.log_stride < 1:
            raise ConfigError("log_stride must be >= 1")
        if self.batch_per_side < 1:
            raise ConfigError("batch_per_side must be >= 1")
        if self.gen_widths[0] != self.latent_dim:
            raise ConfigError("generator input width must equal latent_dim")
        if self.disc_widths[-1] != 1 or self.gen_widths[-1] != self.disc_widths[0]:
            raise ConfigError("generator output width must feed a scalar discriminator")

    @property
    def gen_config(self) -> MlpConfig:
        return MlpConfig(self.gen_widths, self.gen_hidden_activation,
                         self.gen_output_activation)

    @property
    def disc_config(self) -> MlpConfig:
        return MlpConfig(self.disc_widths, self.disc_hidden_activation,
                         self.disc_output_activation)

    @property
    def effective_regularizer(self) -> str:
        """lambda = 0 turns any regularizer into none, exactly."""
        return "none" if self.lam == 0.0 else self.regularizer


def paper_toy_config(regularizer: str = "none", seed: int = 0, **overrides) -> GanConfig:
    """Two-point task defaults; dig gets lambda=1, alpha=1."""
    base = dict(regularizer=regularizer, seed=seed)
    if regularizer == "dig":
        base.update(lam=1.0, alpha=1.0)
    elif regularizer != "none":
        base.update(lam=1.0)
    base.update(overrides)
    return GanConfig(**base)


@dataclass
class TrajectoryLog:
    """Per logged iteration: generated points, per-side mean gradient norms,
    the unblended reporting gap, both losses and mean scores."""

    iterations: list[int] = field(default_factory=list)
    fakes: list[np.ndarray] = field(default_factory=list)
    norm_real: list[float] = field(default_factory=list)
    norm_fake: list[float] = field(default_factory=list)
    gap: list[float] = field(default_factory=list)
    loss_d: list[float] = field(default_factory=list)
    loss_g: list[float] = field(default_factory=list)
    d_real_mean: list[float] = field(default_factory=list)
    d_fake_mean: list[float] = field(default_factory=list)
    diverged: bool = False
    diverged_at: int | None = None
    stop_reason: str = "completed"

    def append(self, it, fakes, nr, nf, gap, ld, lg, dr, df):
        self.iterations.append(it)
        self.fakes.append(np.array(fakes))
        self.norm_real.append(nr)
        self.norm_fake.append(nf)
        self.gap.append(gap)
        self.loss_d.append(ld)
        self.loss_g.append(lg)
        self.d_real_mean.append(dr)
        self.d_fake_mean.append(df)

    def __len__(self):
        return len(self.iterations)

    def csv_header(self) -> str:
        n = self.fakes[0].shape[0] if self.fakes else 2
        fake_cols = ",".join(f"fake_{i}" for i in range(n))
        return (f"iter,{fake_cols},norm_R,norm_F,R,L_D,L_G,"
                "D_real_mean,D_fake_mean")

    def to_csv(self) -> str:
        rows = [self.csv_header()]
        for i, it in enumerate(self.iterations):
            fakes = ",".join(f"{v:.17g}" for v in self.fakes[i].ravel())
            rows.append(
                f"{it},{fakes},{self.norm_real[i]:.17g},{self.norm_fake[i]:.17g},"
                f"{self.gap[i]:.17g},{self.loss_d[i]:.17g},{self.loss_g[i]:.17g},"
                f"{self.d_real_mean[i]:.17g},{self.d_fake_mean[i]:.17g}")
        return "\n".join(rows) + "\n"


@dataclass
class TrainResult:
    config: GanConfig
    gen: MlpParams
    disc: MlpParams
    log: TrajectoryLog
    init_gen: MlpParams
    init_disc: MlpParams
    final_fakes: np.ndarray


@dataclass
class CoverageReport:
    covered: list[bool]
    nearest: list[float]
    covered_modes: int
    trapped: bool
    trapped_mode: int | None


def coverage(points, modes, eps: float) -> CoverageReport:
    """Which target modes have a generated point within eps; trapped means
    every generated point sits within eps of one single covered mode."""
    if eps <= 0:
        raise ConfigError("eps must be positive")
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    modes = np.atleast_2d(np.asarray(modes, dtype=float))
    covered, nearest = [], []
    for m in modes:
        d = np.linalg.norm(pts - m, axis=1)
        nearest.append(float(d.min()))
        covered.append(bool(d.min() <= eps))
    n_covered = sum(covered)
    trapped = False
    trapped_mode = None
    if n_covered == 1:
        idx = covered.index(True)
        if np.all(np.linalg.norm(pts - modes[idx], axis=1) <= eps):
            trapped = True
            trapped_mode = idx
    return CoverageReport(covered, nearest, n_covered, trapped, trapped_mode)


def _spread_first_layer_biases(params: MlpParams, points: np.ndarray,
                               rng: np.random.Generator) -> None:
    """Place each first-layer unit's transition point x* = -b/w uniformly
    over the data span widened by one unit on each side. Only meaningful for
    width-1 data; wider data keeps the plain zero-bias initialization."""
    if points.shape[1] != 1:
        return
    lo, hi = float(points.min()) - 1.0, float(points.max()) + 1.0
    w = params.weights[0]
    xstar = rng.uniform(lo, hi, size=(1, w.shape[0]))
    params.biases[0][...] = -(w.T * xstar)


def perturb_params(params: MlpParams, variance: float, seed) -> MlpParams:
    """Add i.i.d. Gaussian noise of the given variance to every parameter."""
    if variance < 0:
        raise ConfigError("variance must be nonnegative")
    rng = np.random.default_rng(seed)
    std = math.sqrt(variance)
    out = params.copy()
    for t in out.flat():
        t += rng.normal(0.0, std, size=t.shape)
    return out


# --- the training loop -------------------------------------------------------


class _Run:
    """Mutable state of one training run; single-threaded."""

    def __init__(self, config: GanConfig, dataset: Dataset,
                 init_g: MlpParams | None = None, init_d: MlpParams | None = None):
        if config.pairing == "same_class":
            raise ConfigError(
                "same_class pairing needs labeled fakes; the unconditional "
                "toy generator has none")
        if dataset.points.shape[1] != config.disc_widths[0]:
            raise ConfigError(
                f"data width {dataset.points.shape[1]} != discriminator input "
                f"width {config.disc_widths[0]}")
        self.cfg = config
        self.data = dataset
        ss = np.random.SeedSequence(config.seed)
        kids = ss.spawn(7)
        self.init_g = init_g.copy() if init_g else nn.mlp_init(config.gen_config, kids[0])
        if init_d is not None:
            self.init_d = init_d.copy()
        else:
            self.init_d = nn.mlp_init(config.disc_config, kids[1])
            if config.disc_init_bias_spread:
                _spread_first_layer_biases(self.init_d, dataset.points,
                                           np.random.default_rng(kids[6]))
        self.g = self.init_g.copy()
        self.d = self.init_d.copy()
        self.latent_rng = np.random.default_rng(kids[2])
        self.pairing_rng = np.random.default_rng(kids[3])
        self.reg_rng = np.random.default_rng(kids[4])
        self.data_rng = np.random.default_rng(kids[5])
        self.ema = ganreg.EmaState(alpha=config.alpha)
        self.g_opt = self._opt_state(self.g)
        self.d_opt = self._opt_state(self.d)
        if config.latent_kind == "fixed":
            if config.latent_dim == 1 and config.n_fake == 2:
                self.codes = np.array([[-1.0], [1.0]])
            else:
                self.codes = self.latent_rng.standard_normal(
                    (config.n_fake, config.latent_dim))
        else:
            self.codes = None
        std = config.dragan_noise_std
        self.dragan_std = std if std > 0 else 0.5 * float(
            np.mean(np.std(dataset.points, axis=0)))

    def _opt_state(self, params):
        if self.cfg.optimizer == "adam":
            return nn.AdamState.init(params, beta1=self.cfg.momentum)
        return nn.MomentumState.init(params, momentum=self.cfg.momentum)

    def _step(self, params, grads, state):
        if self.cfg.optimizer == "adam":
            return nn.adam_step(params, grads, state, self.cfg.lr)
        return nn.sgd_momentum_step(params, grads, state, self.cfg.lr)

    @staticmethod
    def _draw_rows(rng, pool: np.ndarray, n: int) -> np.ndarray:
        """n rows from pool: a random subset when possible, otherwise with
        replacement. A batch matching the pool size visits every row."""
        if n <= pool.shape[0]:
            return pool[rng.permutation(pool.shape[0])[:n]]
        return pool[rng.integers(0, pool.shape[0], size=n)]

    def latents(self) -> np.ndarray:
        """One training batch of latent codes (batch_per_side rows)."""
        cfg = self.cfg
        n = cfg.batch_per_side
        if cfg.latent_kind == "fixed":
            return self._draw_rows(self.latent_rng, self.codes, n)
        if cfg.latent_kind == "gaussian":
            return self.latent_rng.standard_normal((n, cfg.latent_dim))
        return self.latent_rng.uniform(-1.0, 1.0, (n, cfg.latent_dim))

    def real_batch(self) -> np.ndarray:
        return self._draw_rows(self.data_rng, self.data.points,
                               self.cfg.batch_per_side)

    def gen_eval(self, z: np.ndarray) -> np.ndarray:
        return nn.mlp_eval(self.cfg.gen_config, self.g, z) * self.cfg.output_scale

    def curve_points(self, train_fakes: np.ndarray) -> np.ndarray:
        """Generator outputs tracked in the trajectory log: all fixed codes
        (the persistent curves of the two-point task), or this iteration's
        training fakes when latents are resampled."""
        if self.codes is not None:
            return self.gen_eval(self.codes)
        return train_fakes

    def _raw_input_grad_norms(self, tape, score_sum, x_leaf) -> np.ndarray:
        g = backward(tape, score_sum, [x_leaf])[x_leaf.nid]
        return np.linalg.norm(g, axis=1)

    def d_step(self, reals: np.ndarray, fakes: np.ndarray, want_telemetry: bool):
        """One discriminator update on the regularized objective. Returns
        telemetry (norm means, gap, loss, score means) or None."""
        cfg = self.cfg
        tape = Tape()
        d_leaves = nn.params_to_leaves(tape, self.d)

        def d_apply(tp, x):
            return nn.mlp_forward(tp, cfg.disc_config, d_leaves, x)

        reg = cfg.effective_regularizer
        telemetry = None
        if reg == "dig":
            s_r, n_r = ganreg.scores_and_input_grad_norms(tape, d_apply, reals)
            s_f, n_f = ganreg.scores_and_input_grad_norms(tape, d_apply, fakes)
            norms = ([n.item() for n in n_r], [n.item() for n in n_f])
            pairs = ganreg.pair_samples(cfg.pairing, reals, fakes, norms=norms,
                                        rng=self.pairing_rng)
            penalty, self.ema = ganreg.dig_penalty(tape, n_r, n_f, pairs,
                                                   self.ema, cfg.dig_mode)
            loss = ganreg.discriminator_loss(tape, cfg.loss_family, s_r, s_f)
            objective = ganreg.regularized_d_loss(tape, loss, penalty, cfg.lam)
            if want_telemetry:
                telemetry = self._telemetry(norms[0], norms[1], loss, s_r, s_f)
        else:
            real_leaf = tape.leaf(reals)
            fake_leaf = tape.leaf(fakes)
            s_r = d_apply(tape, real_leaf)
            s_f = d_apply(tape, fake_leaf)
            loss = ganreg.discriminator_loss(tape, cfg.loss_family, s_r, s_f)
            if reg == "none":
                objective = loss
            elif reg == "gp1":
                pen = ganreg.gp1_penalty(tape, d_apply, reals, fakes, self.reg_rng)
                objective = ganreg.regularized_d_loss(tape, loss, pen, cfg.lam)
            elif reg == "r1":
                pen = ganreg.r1_penalty(tape, d_apply, reals)
                objective = ganreg.regularized_d_loss(tape, loss, pen, cfg.lam)
            elif reg == "r2":
                pen = ganreg.r2_penalty(tape, d_apply, fakes)
                objective = ganreg.regularized_d_loss(tape, loss, pen, cfg.lam)
            else:  # dragan
                pen = ganreg.dragan_penalty(tape, d_apply, reals,
                                            self.dragan_std, self.reg_rng)
                objective = ganreg.regularized_d_loss(tape, loss, pen, cfg.lam)
            if want_telemetry:
                nr = self._raw_input_grad_norms(tape, tape.sum(s_r), real_leaf)
                nf = self._raw_input_grad_norms(tape, tape.sum(s_f), fake_leaf)
                telemetry = self._telemetry(nr, nf, loss, s_r, s_f)

        if not np.isfinite(objective.item()):
            raise DivergenceError("non-finite discriminator objective")
        grads = backward(tape, objective, d_leaves.flat())
        flat = [grads[leaf.nid] for leaf in d_leaves.flat()]
        self.d, self.d_opt = self._step(self.d, flat, self.d_opt)
        self._grad_inf = max(float(np.max(np.abs(g))) for g in flat)
        return telemetry

    @staticmethod
    def _telemetry(norms_r, norms_f, loss_node, s_r, s_f):
        def mean_scores(s):
            if isinstance(s, list):
                return float(np.mean([x.item() for x in s]))
            return float(np.mean(s.value))
        mr, mf = float(np.mean(norms_r)), float(np.mean(norms_f))
        return {
            "norm_real": mr,
            "norm_fake": mf,
            "gap": (mr - mf) ** 2,
            "loss_d": loss_node.item(),
            "d_real_mean": mean_scores(s_r),
            "d_fake_mean": mean_scores(s_f),
        }

    def g_step(self, z: np.ndarray) -> float:
        """One generator update on the plain GAN loss (never regularized)."""
        cfg = self.cfg
        tape = Tape()
        g_leaves = nn.params_to_leaves(tape, self.g)
        out = nn.mlp_forward(tape, cfg.gen_config, g_leaves, tape.leaf(z))
        fakes = tape.scalar_mul(out, cfg.output_scale)
        scores = nn.mlp_forward(tape, cfg.disc_config, self.d, fakes)
        loss = ganreg.generator_loss(tape, cfg.loss_family, scores)
        val = loss.item()
        if not np.isfinite(val):
            raise DivergenceError("non-finite generator loss")
        grads = backward(tape, loss, g_leaves.flat())
        flat = [grads[leaf.nid] for leaf in g_leaves.flat()]
        self.g, self.g_opt = self._step(self.g, flat, self.g_opt)
        return val

    def check_params_bounded(self):
        if max(self.g.max_abs(), self.d.max_abs()) > self.cfg.max_abs_param:
            raise DivergenceError("parameter magnitude exceeded bound")


def train(config: GanConfig, dataset: Dataset = TWO_POINT_DATASET,
          init_g: MlpParams | None = None,
          init_d: MlpParams | None = None) -> TrainResult:
    """Run the alternating dynamics; deterministic in the config seed.

    A non-finite loss or runaway parameters stop the run early and mark the
    log as diverged at the offending iteration.
    """
    run = _Run(config, dataset, init_g, init_d)
    log = TrajectoryLog()
    for it in range(config.iterations):
        z = run.latents()
        reals = run.real_batch()
        fakes = run.gen_eval(z)
        want_log = it % config.log_stride == 0
        try:
            tele = run.d_step(reals, fakes, want_telemetry=want_log)
            loss_g = run.g_step(z)
            run.check_params_bounded()
        except (DivergenceError, nn.NonFiniteGradientError,
                ganreg.NonFiniteNormError) as e:
            log.diverged = True
            log.diverged_at = it
            log.stop_reason = f"diverged at iteration {it}: {e}"
            break
        if want_log:
            log.append(it, run.curve_points(fakes).ravel(),
                       tele["norm_real"], tele["norm_fake"],
                       tele["gap"], tele["loss_d"], loss_g,
                       tele["d_real_mean"], tele["d_fake_mean"])
    final_fakes = run.curve_points(run.gen_eval(run.latents()))
    return TrainResult(config, run.g, run.d, log, run.init_g, run.init_d,
                       final_fakes)


def train_discriminator_to_optimality(
        config: GanConfig, dataset: Dataset, fixed_g: MlpParams,
        init_d: MlpParams, grad_tol: float = 1e-6,
        max_steps: int = 50_000) -> tuple[MlpParams, dict]:
    """Discriminator-only training on the regularized objective with the
    generator held fixed, until the parameter-gradient L-infinity norm
    drops below ``grad_tol`` or ``max_steps`` is hit."""
    run = _Run(config, dataset, init_g=fixed_g, init_d=init_d)
    stop_reason = "step_cap"
    steps = 0
    for step in range(max_steps):
        z = run.latents()
        reals = run.real_batch()
        fakes = run.gen_eval(z)
        run.d_step(reals, fakes, want_telemetry=False)
        run.check_params_bounded()
        steps = step + 1
        if run._grad_inf < grad_tol:
            stop_reason = "grad_tol"
            break
    fakes = run.curve_points(run.gen_eval(run.latents()))
    gap = discriminator_norm_gap(config, run.d, dataset.points, fakes)
    info = {"steps": steps, "stop_reason": stop_reason,
            "grad_inf": run._grad_inf, "norm_gap": gap}
    return run.d, info


def discriminator_norm_gap(config: GanConfig, d_params: MlpParams,
                           reals: np.ndarray, fakes: np.ndarray) -> float:
    """|mean ||dD/dx_R|| - mean ||dD/dx_F|||, the unsquared reporting gap."""
    tape = Tape()

    def d_apply(tp, x):
        return nn.mlp_forward(tp, config.disc_config, d_params, x)

    n_r = ganreg.input_grad_norms(tape, d_apply, reals)
    n_f = ganreg.input_grad_norms(tape, d_apply, fakes)
    return abs(float(np.mean([n.item() for n in n_r]))
               - float(np.mean([n.item() for n in n_f])))


def trapping_iteration(log: TrajectoryLog, modes, eps: float
                       ) -> tuple[int | None, int | None]:
    """First logged iteration of the final contiguous stretch in which all
    generated points stay within eps of one single mode. (None, None) if
    the run does not end trapped."""
    if not log.iterations:
        return None, None
    modes = np.atleast_2d(np.asarray(modes, dtype=float))
    final = coverage(log.fakes[-1].reshape(len(log.fakes[-1]), -1), modes, eps)
    if not final.trapped:
        return None, None
    m = modes[final.trapped_mode]
    start = len(log.iterations) - 1
    for i in range(len(log.iterations) - 1, -1, -1):
        pts = log.fakes[i].reshape(len(log.fakes[i]), -1)
        if np.all(np.linalg.norm(pts - m, axis=1) <= eps):
            start = i
        else:
            break
    return log.iterations[start], final.trapped_mode
