"""Deep BSDE comparator for the terminal-wealth problem.

The conditional expectation V(t, X_t, Y_t) = E[U(X_T) | F_t] is a martingale
along paths generated by the very policy it induces, so the discrete value
recursion needs no driver term: V advances by its loadings Z contracted
against the same correlated Brownian increments that drive the state pair.
Training minimizes the terminal mismatch E[(V_T - U(X_T))^2] over both
networks at once.

The policy is the CRRA first-order condition with the hedging block read off
the Z outputs.  Its myopic term is the analytic premium formula, so the
learned part is exactly the intertemporal hedging demand; with rho = 0 the
network contribution is annihilated and the policy is the myopic rule no
matter what the nets say.

The rollout lives on a fixed global time grid (dt = T / N shared by every
path), with each batch starting from one common grid index.  That keeps a
batch homogeneous in remaining steps and matches the discrete t0 sampling of
the training recipe.
"""

import os

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from . import evaluation, nets, sim
from . import tape as T
from .market import assemble_and_factor
from .parallel import map_chunks
from .rng import substream
from .train import TrainError, TrainTrace

WEIGHT_BOUND = 10.0
VALUE_FLOOR = 1e-12


class BsdeError(Exception):
    pass


class BsdeNets:
    """Value-at-time network plus loading network.

    v0 maps (t, log x, y) to a strictly negative scalar; z maps the same
    inputs to the n+k loadings on the correlated increments.
    """

    def __init__(self, p, seed=0, hidden_v0=(64, 64), hidden_z=(128, 128, 128)):
        v0_spec = nets.MlpSpec(2 + p.k, hidden_v0, 1, activation="tanh",
                               output_transform="negative_softplus")
        z_spec = nets.MlpSpec(2 + p.k, hidden_z, p.n + p.k, activation="tanh")
        self.v0 = nets.init(v0_spec, seed, name="bsde-v0")
        self.z = nets.init(z_spec, seed, name="bsde-z")

    def arrays(self):
        return self.v0.arrays() + self.z.arrays()

    def replace_arrays(self, arrays):
        out = object.__new__(BsdeNets)
        cut = len(self.v0.arrays())
        out.v0 = self.v0.replace_arrays(arrays[:cut])
        out.z = self.z.replace_arrays(arrays[cut:])
        return out

    def copy(self):
        return self.replace_arrays([a.copy() for a in self.arrays()])


def _policy_loadings(p):
    """(myopic loading, hedging loading) as (k, n) right-multipliers."""
    cf = cho_factor(p.sigma_matrix(), lower=True)
    myo = cho_solve(cf, p.sigma[:, None] * p.A) / p.gamma        # (n, k)
    hed = cho_solve(cf, p.sigma[:, None] * p.rho) / p.gamma      # (n, k)
    return np.ascontiguousarray(myo.T), np.ascontiguousarray(hed.T)


def _clamp_box(tape, v, bound):
    """Element-wise clip to [-bound, bound] out of clamp_min pieces."""
    lo = T.record(tape, "clamp_min", v, floor=-bound)
    neg = T.record(tape, "mul", lo, -1.0)
    hi = T.record(tape, "clamp_min", neg, floor=-bound)
    return T.record(tape, "mul", hi, -1.0)


class TapeNets:
    """Tape-resident copies of both networks plus the policy construction.

    One z evaluation per step serves both the policy's hedging block and
    the value recursion's increment loadings.
    """

    def __init__(self, bnets, p, tape):
        self.p = p
        self.tape = tape
        self.v0_mlp = nets.TapeMlp(tape, bnets.v0, block_dims=[1, 1, p.k])
        self.z_mlp = nets.TapeMlp(tape, bnets.z, block_dims=[1, 1, p.k])
        self.myo_t, self.hed_t = _policy_loadings(p)
        self.sel = np.zeros((p.n + p.k, p.k))
        self.sel[p.n:, :] = np.eye(p.k)
        self.quad = np.any(p.beta != 0.0)
        if self.quad:
            self.myo2_t = np.ascontiguousarray(self.myo_t * p.beta[:, None])

    def wrt_leaves(self):
        return self.v0_mlp.wrt_leaves() + self.z_mlp.wrt_leaves()

    def collect_grads(self, grads):
        return self.v0_mlp.collect_grads(grads) + self.z_mlp.collect_grads(grads)

    def value(self, t_col, X, Y):
        tape = self.tape
        logx = T.record(tape, "log", X)
        return self.v0_mlp.rows([tape.leaf(t_col), logx, Y])

    def policy_and_loadings(self, t_col, X, Y):
        """(pi, zload, vhat) at one step; pi is bounded element-wise."""
        tape, p = self.tape, self.p
        vhat = self.value(t_col, X, Y)
        if np.any(np.abs(vhat.value) < VALUE_FLOOR):
            raise BsdeError("value estimate vanished; cannot divide loadings")
        logx = T.record(tape, "log", X)
        zload = self.z_mlp.rows([tape.leaf(t_col), logx, Y])
        zy = T.record(tape, "matmul", zload, tape.leaf(self.sel))
        vinv = T.record(tape, "pow", vhat, exponent=-1.0)
        vk = T.record(tape, "matmul", vinv, tape.leaf(np.ones((1, p.k))))
        hedge = T.record(tape, "matmul", T.record(tape, "mul", zy, vk),
                         tape.leaf(self.hed_t))
        pi = T.record(tape, "add",
                      T.record(tape, "matmul", Y, tape.leaf(self.myo_t)), hedge)
        if self.quad:
            y2 = T.record(tape, "mul", Y, Y)
            pi = T.record(tape, "add", pi,
                          T.record(tape, "matmul", y2, tape.leaf(self.myo2_t)))
        return _clamp_box(tape, pi, WEIGHT_BOUND), zload, vhat


def bsde_rollout(tnets, k0, x0, y0, N, p, tape, z):
    """Forward state and value recursion from grid index k0 to N.

    z holds (M, N - k0, n + k) standard normals.  Returns the per-path
    squared terminal mismatch as an (M, 1) Var.  tnets only needs a
    policy_and_loadings method, so tests can substitute exact stand-ins.
    """
    if not 0 <= k0 < N:
        raise BsdeError(f"start index {k0} outside grid of {N} steps")
    m = x0.shape[0]
    steps = N - k0
    if z.shape != (m, steps, p.n + p.k):
        raise BsdeError(f"normals shaped {z.shape}, want {(m, steps, p.n + p.k)}")
    dt = p.T / N
    sqdt = np.sqrt(dt)
    L = assemble_and_factor(p).L
    ones_n = np.ones((p.n, 1))
    ones_nk = np.ones((p.n + p.k, 1))

    X = tape.leaf(np.asarray(x0, dtype=np.float64).reshape(m, 1))
    Y = tape.leaf(np.asarray(y0, dtype=np.float64).reshape(m, p.k))
    V = None
    for s in range(k0, N):
        t_col = np.full((m, 1), s * dt)
        pi, zload, vhat = tnets.policy_and_loadings(t_col, X, Y)
        if V is None:
            V = vhat

        dW = (z[:, s - k0, :] @ L.T) * sqdt
        dwx = np.ascontiguousarray(dW[:, :p.n])
        dwy = np.ascontiguousarray(dW[:, p.n:])

        prem = T.record(tape, "matmul", Y, tape.leaf(
            np.ascontiguousarray((p.sigma[:, None] * p.A).T)))
        if np.any(p.beta != 0.0):
            y2 = T.record(tape, "mul", Y, Y)
            prem = T.record(tape, "add", prem, T.record(
                tape, "matmul", y2, tape.leaf(
                    np.ascontiguousarray((p.sigma[:, None] * (p.A * p.beta[None, :])).T))))
        drift = T.record(tape, "matmul", T.record(tape, "mul", pi, prem), ones_n)
        drift = T.record(tape, "mul", T.record(tape, "add", drift, p.r), dt)
        vol = T.record(tape, "matmul",
                       T.record(tape, "mul", pi, tape.leaf(dwx * p.sigma[None, :])),
                       ones_n)
        growth = T.record(tape, "add", T.record(tape, "add", drift, vol), 1.0)
        x_next = T.record(tape, "mul", X, growth)
        if not np.all(np.isfinite(x_next.value)):
            raise BsdeError(f"non-finite wealth at step {s}")
        X = T.record(tape, "clamp_min", x_next, floor=sim.WEALTH_FLOOR)

        ydrift = T.record(tape, "matmul",
                          T.record(tape, "sub", tape.leaf(np.tile(p.theta_Y, (m, 1))), Y),
                          tape.leaf(p.kappa_Y), tb=True)
        Y = T.record(tape, "add",
                     T.record(tape, "add", Y, T.record(tape, "mul", ydrift, dt)),
                     tape.leaf(dwy @ p.sigma_Y.T))

        gain = T.record(tape, "matmul",
                        T.record(tape, "mul", zload, tape.leaf(dW)), ones_nk)
        V = T.record(tape, "add", V, gain)

    err = T.record(tape, "sub", V, sim.utility_var(tape, X, p.gamma))
    return T.record(tape, "mul", err, err)


def bsde_rollout_loss(states, bnets, n_steps, p):
    """Mean squared terminal mismatch over a batch of on-grid initial states."""
    if isinstance(states, sim.InitialState):
        states = [states]
    t0, x0, y0 = sim.stack_initial(states)
    dt = p.T / n_steps
    idx = t0[:, 0] / dt
    k0 = int(round(idx[0]))
    if np.max(np.abs(idx - k0)) > 1e-9:
        raise BsdeError("batch must share one start node on the rollout grid")
    m = x0.shape[0]
    rng = substream(0, "bsde-loss", 0)
    z = rng.standard_normal((m, n_steps - k0, p.n + p.k))
    tape = T.Tape()
    tnets = TapeNets(bnets, p, tape)
    sq = bsde_rollout(tnets, k0, x0, y0, n_steps, p, tape, z)
    return T.record(tape, "mul", T.record(tape, "sum", sq), 1.0 / m)


def bsde_candidate(bnets, p):
    """Evaluation-grid candidate with the analytic myopic part split out.

    The hedging part is total minus analytic myopic, so it absorbs the
    weight-bound clipping and the parts always sum to the traded policy.
    """
    myo_fn = evaluation.myopic_rule(p)
    myo_t, hed_t = _policy_loadings(p)

    def total_fn(t_col, X, Y):
        inp = np.concatenate([t_col, np.log(X), Y], axis=1)
        vhat = nets.forward_np(bnets.v0, inp)
        if np.any(np.abs(vhat) < VALUE_FLOOR):
            raise BsdeError("value estimate vanished; cannot divide loadings")
        zy = nets.forward_np(bnets.z, inp)[:, p.n:]
        raw = myo_fn(t_col, X, Y) + (zy / vhat) @ hed_t
        return np.clip(raw, -WEIGHT_BOUND, WEIGHT_BOUND)

    def hedging_fn(t_col, X, Y):
        return total_fn(t_col, X, Y) - myo_fn(t_col, X, Y)

    return evaluation.PolicyCandidate(total_fn, myo_fn, hedging_fn)


def _bsde_pass(bnets, cfg, p, iteration):
    """One batch: (loss, grad arrays of the summed squared error)."""
    n_steps = cfg.steps
    rng = substream(cfg.seed, "bsde-t0", iteration)
    k0 = int(rng.integers(0, n_steps))
    srng = substream(cfg.seed, "bsde-states", iteration)
    x0_all = srng.uniform(0.1, 3.0, size=(cfg.batch, 1))
    lo_y, hi_y = sim.state_bounds(p)
    y0_all = srng.uniform(lo_y, hi_y, size=(cfg.batch, p.k))
    stream = f"bsde-paths-{iteration}"

    def work(lo, hi):
        z = sim.draw_normals(cfg.seed, stream, lo, hi - lo, n_steps - k0,
                             p.n + p.k)
        tape = T.Tape()
        tnets = TapeNets(bnets, p, tape)
        sq = bsde_rollout(tnets, k0, x0_all[lo:hi], y0_all[lo:hi],
                          n_steps, p, tape, z)
        sq_sum = T.record(tape, "sum", sq)
        grads = T.backward(sq_sum, tnets.wrt_leaves())
        return float(sq_sum.value), tnets.collect_grads(grads)

    parts = map_chunks(work, cfg.batch, threads=cfg.threads)
    loss = sum(q[0] for q in parts) / cfg.batch
    grads = [np.zeros_like(a) for a in bnets.arrays()]
    for q in parts:
        for g, add in zip(grads, q[1]):
            g += add
    return loss, grads


def train_bsde(cfg, p, benchmark=None, bnets=None, checkpoint_dir=None):
    """Terminal-matching training; returns (best BsdeNets, TrainTrace).

    cfg reuses the policy-training config: steps is the global grid size,
    clip defaults to 2.0 here if unset, and the variance devices do not
    apply (the loss already has no policy-gradient structure).
    """
    if cfg.mode != "direct" or cfg.variance_reduction != "none":
        raise TrainError("bsde training takes mode='direct' and "
                         "variance_reduction='none'")
    if bnets is None:
        bnets = BsdeNets(p, seed=cfg.seed)
    adam = nets.AdamState(bnets.arrays(), cfg.lr,
                          clip=2.0 if cfg.clip is None else cfg.clip)
    trace = TrainTrace("bsde")
    if checkpoint_dir:
        os.makedirs(checkpoint_dir, exist_ok=True)

    best = None  # (score, nets): score = rmse_total or the loss itself
    for it in range(cfg.iterations):
        try:
            loss, grads = _bsde_pass(bnets, cfg, p, it)
        except BsdeError as e:
            err = TrainError(f"bsde rollout failed at iteration {it + 1}: {e}")
            err.trace = trace  # rows so far, for artifact preservation
            raise err from e
        if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads):
            err = TrainError(f"non-finite loss or gradient at iteration {it + 1}")
            err.trace = trace
            raise err
        scaled = [g / cfg.batch for g in grads]
        lr = cfg.lr if cfg.lr_schedule == "constant" else \
            nets.multistep_lr(cfg.lr, it, cfg.iterations)
        bnets = bnets.replace_arrays(
            nets.adam_step(bnets.arrays(), scaled, adam, lr=lr))

        done = it + 1 == cfg.iterations
        if (it + 1) % cfg.eval_every == 0 or done:
            rmse = None
            if benchmark is not None:
                rmse = evaluation.rmse_slices(bsde_candidate(bnets, p),
                                              benchmark, p)
            trace.append(it + 1, loss, rmse)
            score = rmse[0] if rmse is not None else loss
            if best is None or score < best[0]:
                best = (score, bnets.copy())
            if checkpoint_dir:
                for tag, part in (("v0", bnets.v0), ("z", bnets.z)):
                    nets.save_checkpoint(
                        os.path.join(checkpoint_dir,
                                     f"bsde-{tag}-{it + 1:06d}.ckpt"),
                        part, extra={"iteration": it + 1, "part": tag})
    return best[1], trace
