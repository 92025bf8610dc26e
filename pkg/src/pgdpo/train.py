"""Policy-gradient training by backpropagation through the simulator.

Each iteration samples fresh initial states, rolls the current policy
forward over a Monte Carlo batch, differentiates the mean realized reward
through the whole rollout, and takes an Adam ascent step.  The policy reads
its state inputs through detached copies, so the same backward pass that
feeds the optimizer is also the adjoint recursion the projection stage
consumes later.

Two policy forms are supported.  ``direct`` trains the network as the whole
control.  ``residual`` adds the network on top of the analytic myopic rule
and trains only the network, which leaves it the far easier job of learning
the hedging correction.

Variance devices stack in fixed combinations: antithetic path pairing,
a myopic-rollout control variate applied to the traced reward (the gradient
is unaffected because the control policy is parameter-free), and Richardson
extrapolation across a coupled fine/coarse grid pair, which cancels the
first-order time-discretization bias of both the reward and its gradient.

The per-iteration batch is simulated in fixed 256-path chunks that may run
on a thread pool; gradients are reduced in a fixed order, so results are
identical for every thread count.
"""

import os

import numpy as np

from . import evaluation, nets, sim
from . import tape as T
from .parallel import map_chunks
from .rng import substream

MODES = ("direct", "residual")
DEVICES = ("none", "antithetic", "antithetic+cv", "antithetic+cv+richardson")
CSV_HEADER = "iteration,method,rmse_total,rmse_myopic,rmse_hedging,mean_J,seconds"
CV_CALIBRATION_PATHS = 1 << 16


class TrainError(Exception):
    pass


class TrainConfig:
    """Knobs for one training run; defaults follow the reference recipe."""

    __slots__ = ("iterations", "batch", "steps", "lr", "lr_schedule", "seed",
                 "mode", "variance_reduction", "eval_every", "hidden", "clip",
                 "threads")

    def __init__(self, iterations=10000, batch=1000, steps=20, lr=1e-5,
                 lr_schedule="constant", seed=0, mode="direct",
                 variance_reduction="antithetic", eval_every=200,
                 hidden=(64, 64, 64), clip=None, threads=None):
        if iterations < 1 or steps < 1 or eval_every < 1:
            raise TrainError("iterations, steps, and eval_every must be positive")
        if mode not in MODES:
            raise TrainError(f"mode must be one of {MODES}")
        if variance_reduction not in DEVICES:
            raise TrainError(f"variance_reduction must be one of {DEVICES}")
        if "antithetic" in variance_reduction:
            if batch < 2 or batch % 2:
                raise TrainError("antithetic batches must be even and at least 2")
        elif batch < 1:
            raise TrainError("batch must be positive")
        self.iterations = int(iterations)
        self.batch = int(batch)
        self.steps = int(steps)
        self.lr = float(lr)
        if lr_schedule not in ("constant", "multistep"):
            raise TrainError("lr_schedule must be 'constant' or 'multistep'")
        self.lr_schedule = lr_schedule
        self.seed = int(seed)
        self.mode = mode
        self.variance_reduction = variance_reduction
        self.eval_every = int(eval_every)
        self.hidden = tuple(int(h) for h in hidden)
        self.clip = None if clip is None else float(clip)
        self.threads = threads

    def to_dict(self):
        return {
            "iterations": self.iterations, "batch": self.batch,
            "steps": self.steps, "lr": self.lr, "lr_schedule": self.lr_schedule,
            "seed": self.seed, "mode": self.mode,
            "variance_reduction": self.variance_reduction,
            "eval_every": self.eval_every, "hidden": list(self.hidden),
            "clip": self.clip,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    @property
    def antithetic(self):
        return "antithetic" in self.variance_reduction

    @property
    def control_variate(self):
        return "cv" in self.variance_reduction

    @property
    def richardson(self):
        return "richardson" in self.variance_reduction


class TrainTrace:
    """Per-eval records of one run; rows share the rmse.csv schema."""

    def __init__(self, method):
        self.method = method
        self.rows = []

    def append(self, iteration, mean_j, rmse=None):
        if self.rows and iteration <= self.rows[-1]["iteration"]:
            raise TrainError("trace iterations must be strictly increasing")
        total, myo, hed = rmse if rmse is not None else (np.nan, np.nan, np.nan)
        self.rows.append({
            "iteration": int(iteration),
            "rmse_total": float(total),
            "rmse_myopic": float(myo),
            "rmse_hedging": float(hed),
            "mean_J": float(mean_j),
            "seconds": 0.0,
        })

    def to_csv(self, path, comment=None):
        with open(path, "w") as f:
            if comment:
                f.write(f"# {comment}\n")
            f.write(CSV_HEADER + "\n")
            for r in self.rows:
                f.write(",".join([
                    str(r["iteration"]), self.method,
                    repr(r["rmse_total"]), repr(r["rmse_myopic"]),
                    repr(r["rmse_hedging"]), repr(r["mean_J"]),
                    repr(r["seconds"]),
                ]) + "\n")


def policy_spec(cfg, p):
    return nets.MlpSpec(2 + p.k, cfg.hidden, p.n)


def policy_maker(params, p, mode="direct", myopic_fn=None):
    """callable(tape) -> simulator policy closure for the trained network.

    The residual form adds the analytic myopic rule as a constant (gradient
    free) term on top of the network output.
    """
    if mode not in MODES:
        raise TrainError(f"mode must be one of {MODES}")
    if mode == "residual" and myopic_fn is None:
        myopic_fn = evaluation.myopic_rule(p)

    def maker(tape):
        mlp = nets.TapeMlp(tape, params, block_dims=[1, 1, p.k])
        inner = sim.mlp_policy(mlp)
        if mode == "direct":
            return inner

        def policy(tp, step, t_col, X, Y):
            nn = inner(tp, step, t_col, X, Y)
            base = tp.leaf(myopic_fn(t_col, X.value, Y.value))
            return T.record(tp, "add", nn, base)

        return policy

    return maker


def policy_fn_np(params, p, mode="direct", myopic_fn=None):
    """Plain-array policy (t_col, X, Y) -> (M, n) for grid evaluation."""
    if mode == "residual" and myopic_fn is None:
        myopic_fn = evaluation.myopic_rule(p)

    def fn(t_col, X, Y):
        out = nets.forward_np(params, np.concatenate([t_col, X, Y], axis=1))
        if mode == "residual":
            out = out + myopic_fn(t_col, X, Y)
        return out

    return fn


def _bequest_values(p, t0, x_T):
    w = p.kappa * np.exp(-p.delta * (p.T - t0[:, 0]))
    return w * sim.utility_np(x_T[:, 0], p.gamma)


def _calibrate_cv(p, myopic_fn, steps, seed, threads=None):
    """Mean myopic-rollout reward over the initial-state distribution.

    One-off Monte Carlo with its own streams; the estimate anchors the
    control variate so the traced mean reward stays (near-)unbiased.
    """

    def work(lo, hi):
        m = hi - lo
        rng = substream(seed, "cv-calib-states", lo)
        states = sim.sample_initial(m, p, rng)
        t0, x0, y0 = sim.stack_initial(states)
        z = sim.draw_normals(seed, "cv-calib-paths", lo, m, steps, p.n + p.k)
        x_T, _ = sim.simulate_np(myopic_fn, t0, x0, y0, steps, p, z)
        return _bequest_values(p, t0, x_T)

    vals = np.concatenate(map_chunks(work, CV_CALIBRATION_PATHS, threads=threads))
    return float(vals.mean())


def _states_for_iteration(cfg, p, iteration, m_base):
    rng = substream(cfg.seed, "train-states", iteration)
    return sim.sample_initial(m_base, p, rng)


def batch_pass(params, cfg, p, iteration, myopic_fn=None):
    """One full-batch rollout: (j_values, j_cv_values, grad_arrays).

    grad_arrays hold the gradient of sum(J) over the batch with respect to
    the parameter arrays; divide by the row count for the mean-reward
    gradient.  j_cv_values is None without the control-variate device.
    Exposed so tests can probe the raw gradient estimator.
    """
    if cfg.mode == "residual" and myopic_fn is None:
        myopic_fn = evaluation.myopic_rule(p)
    m_base = cfg.batch // 2 if cfg.antithetic else cfg.batch
    draw_steps = 2 * cfg.steps if cfg.richardson else cfg.steps
    states_all = _states_for_iteration(cfg, p, iteration, m_base)
    stream = f"train-paths-{iteration}"
    cv_fn = evaluation.myopic_rule(p) if cfg.control_variate else None

    def work(lo, hi):
        states = states_all[lo:hi]
        z = sim.draw_normals(cfg.seed, stream, lo, hi - lo, draw_steps, p.n + p.k)
        if cfg.antithetic:
            states, z = sim.antithetic_states_and_normals(states, z)
        tape = T.Tape()
        mlp = nets.TapeMlp(tape, params, block_dims=[1, 1, p.k])
        inner = sim.mlp_policy(mlp)
        if cfg.mode == "residual":
            def policy(tp, step, t_col, X, Y):
                nn = inner(tp, step, t_col, X, Y)
                return T.record(tp, "add", nn, tp.leaf(myopic_fn(t_col, X.value, Y.value)))
        else:
            policy = inner
        if cfg.richardson:
            fine, coarse = sim.simulate_richardson(policy, states, cfg.steps, p, tape, z)
            J = sim.richardson_combine(sim.realized_reward(coarse),
                                       sim.realized_reward(fine), True)
        else:
            traj = sim.simulate(policy, states, cfg.steps, p, tape, z)
            J = sim.realized_reward(traj)
        j_sum = T.record(tape, "sum", J)
        grads = T.backward(j_sum, mlp.wrt_leaves())
        garr = mlp.collect_grads(grads)
        j_cv = None
        if cv_fn is not None:
            t0, x0, y0 = sim.stack_initial(states)
            x_T, _ = sim.simulate_np(cv_fn, t0, x0, y0, draw_steps, p, z)
            j_cv = _bequest_values(p, t0, x_T)
        return J.value[:, 0].copy(), j_cv, garr

    parts = map_chunks(work, m_base, threads=cfg.threads)
    j_vals = np.concatenate([q[0] for q in parts])
    j_cv = np.concatenate([q[1] for q in parts]) if cfg.control_variate else None
    grads = [np.zeros_like(a) for a in params.arrays()]
    for q in parts:
        for g, add in zip(grads, q[2]):
            g += add
    return j_vals, j_cv, grads


def _traced_mean(cfg, j_vals, j_cv, mu_cv):
    if cfg.control_variate:
        adjusted, _ = sim.myopic_control_variate(j_vals, j_cv, mu_cv)
        return float(adjusted.mean())
    return float(j_vals.mean())


def _train(cfg, p, method, benchmark, myopic_fn, checkpoint_dir):
    spec = policy_spec(cfg, p)
    params = nets.init(spec, cfg.seed)
    adam = nets.AdamState(params.arrays(), cfg.lr, clip=cfg.clip)
    trace = TrainTrace(method)
    mu_cv = None
    if cfg.control_variate:
        mu_cv = _calibrate_cv(p, evaluation.myopic_rule(p),
                              2 * cfg.steps if cfg.richardson else cfg.steps,
                              cfg.seed, threads=cfg.threads)
    if checkpoint_dir:
        os.makedirs(checkpoint_dir, exist_ok=True)

    best = None  # (score, params) with score = rmse_total or -mean_J
    for it in range(cfg.iterations):
        try:
            j_vals, j_cv, grads = batch_pass(params, cfg, p, it, myopic_fn=myopic_fn)
        except sim.SimError as e:
            err = TrainError(f"simulation failed at iteration {it + 1}: {e}")
            err.trace = trace  # rows so far, for artifact preservation
            raise err from e
        if not all(np.all(np.isfinite(g)) for g in grads) or not np.all(np.isfinite(j_vals)):
            err = TrainError(f"non-finite loss or gradient at iteration {it + 1}")
            err.trace = trace
            raise err
        rows = j_vals.shape[0]
        neg = [-(g / rows) for g in grads]
        lr = cfg.lr if cfg.lr_schedule == "constant" else \
            nets.multistep_lr(cfg.lr, it, cfg.iterations)
        params = params.replace_arrays(
            nets.adam_step(params.arrays(), neg, adam, lr=lr))

        done = it + 1 == cfg.iterations
        if (it + 1) % cfg.eval_every == 0 or done:
            mean_j = _traced_mean(cfg, j_vals, j_cv, mu_cv)
            rmse = None
            if benchmark is not None:
                fn = policy_fn_np(params, p, mode=cfg.mode, myopic_fn=myopic_fn)
                rmse = evaluation.rmse_slices(fn, benchmark, p)
            trace.append(it + 1, mean_j, rmse)
            score = rmse[0] if rmse is not None else -mean_j
            if best is None or score < best[0]:
                best = (score, params.copy())
            if checkpoint_dir:
                nets.save_checkpoint(
                    os.path.join(checkpoint_dir, f"{method}-{it + 1:06d}.ckpt"),
                    params, extra={"iteration": it + 1, "method": method,
                                   "mode": cfg.mode})
    return best[1], trace


def train_baseline(cfg, p, benchmark=None, checkpoint_dir=None):
    """Direct PG-DPO training; returns (best-eval params, trace).

    'Best' follows the trace: lowest rmse_total when a benchmark grid is
    supplied (earliest on ties), otherwise highest traced mean reward.
    """
    if cfg.mode != "direct":
        raise TrainError("train_baseline needs mode='direct'")
    return _train(cfg, p, "pgdpo", benchmark, None, checkpoint_dir)


def train_residual(cfg, p, myopic_fn=None, benchmark=None, checkpoint_dir=None):
    """Myopic-plus-network training; only the network is learned."""
    if cfg.mode != "residual":
        raise TrainError("train_residual needs mode='residual'")
    if myopic_fn is None:
        myopic_fn = evaluation.myopic_rule(p)
    return _train(cfg, p, "pgdpo", benchmark, myopic_fn, checkpoint_dir)
