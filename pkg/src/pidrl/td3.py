"""Twin-delayed actor-critic training of a PID policy.

The actor is the incremental PID law evaluated on the latest observation of
the stacked state; its trainable weights are the gains mapped through
softplus (k_p, k_i, k_d) and sigmoid (k_tau), so every parameter vector maps
to admissible gains.  Two GRU critics read the whole observation window.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .nn import AdamState, DenseNet, GruCell, Module, Tape, adam_step, polyak, sigmoid
from .pid import PidGains, PidState, advance_measurement, compute_observation, seeded_state
from .rewards import RewardSpec, cost

log = logging.getLogger(__name__)

OBS_DIM = 5


class ReparameterizationError(ValueError):
    pass


# -- reparameterisation ------------------------------------------------------


def softplus(x):
    return np.logaddexp(0.0, x)


def softplus_inv(k):
    k = np.asarray(k, dtype=float)
    return k + np.log(-np.expm1(-k))


def logit(p):
    p = np.asarray(p, dtype=float)
    return np.log(p) - np.log1p(-p)


@dataclass(frozen=True)
class ActorParams:
    theta_kp: float
    theta_ki: float
    theta_kd: float
    theta_ktau: float

    def as_array(self) -> np.ndarray:
        return np.array([self.theta_kp, self.theta_ki, self.theta_kd, self.theta_ktau])

    @classmethod
    def from_array(cls, a) -> "ActorParams":
        return cls(*(float(v) for v in a))


def gains_to_theta(g: PidGains) -> ActorParams:
    if min(g.k_p, g.k_i, g.k_d) <= 0 or not 0.0 < g.k_tau < 1.0:
        raise ReparameterizationError("gain outside reparameterization domain")
    kp, ki, kd = softplus_inv([g.k_p, g.k_i, g.k_d])
    return ActorParams(float(kp), float(ki), float(kd), float(logit(g.k_tau)))


def theta_to_gains(theta) -> PidGains:
    a = theta.as_array() if isinstance(theta, ActorParams) else np.asarray(theta, dtype=float)
    kp, ki, kd = softplus(a[:3])
    return PidGains(float(kp), float(ki), float(kd), float(sigmoid(a[3])))


def theta_jacobian(theta: np.ndarray) -> np.ndarray:
    """Diagonal of d(gains)/d(theta)."""
    s = sigmoid(np.asarray(theta, dtype=float))
    return np.concatenate([s[:3], s[3:] * (1.0 - s[3:])])


# -- actor -------------------------------------------------------------------


class PidActor(Module):
    """The PID law as a one-layer network: u_hat = gains . o_t[:4] + o_t[4]."""

    def __init__(self, theta):
        super().__init__()
        a = theta.as_array() if isinstance(theta, ActorParams) else np.asarray(theta, dtype=float)
        self.params = {"theta": a.astype(float).copy()}

    @property
    def theta(self) -> np.ndarray:
        return self.params["theta"]

    def gains(self) -> PidGains:
        return theta_to_gains(self.theta)

    def forward(self, obs):
        """``obs`` holds latest observations, shape (..., 5)."""
        obs = np.asarray(obs, dtype=float)
        th = self.theta
        k = np.concatenate([softplus(th[:3]), sigmoid(th[3:])])
        u_hat = obs[..., :4] @ k + obs[..., 4]
        return u_hat, Tape(self, self.version, {"obs": obs, "k": k})

    def backward(self, tape: Tape, grad_u):
        self._check(tape)
        obs = tape.saved["obs"]
        g = np.asarray(grad_u, dtype=float)
        jac = theta_jacobian(self.theta)
        if obs.ndim == 1:
            g_theta = obs[:4] * jac * g
        else:
            g_theta = (obs[:, :4] * g[:, None]).sum(axis=0) * jac
        g_obs = np.concatenate([np.broadcast_to(tape.saved["k"], obs[..., :4].shape), np.ones(obs.shape[:-1] + (1,))], axis=-1)
        g_obs = g_obs * np.asarray(g)[..., None]
        return {"theta": g_theta}, g_obs


def actor_forward(theta, s) -> float | np.ndarray:
    """Unsaturated PID output for stacked state(s) ``s`` of shape (..., d+1, 5)."""
    actor = theta if isinstance(theta, PidActor) else PidActor(theta)
    s = np.asarray(s, dtype=float)
    u_hat, _ = actor.forward(s[..., -1, :])
    return u_hat


# -- critic ------------------------------------------------------------------

DEFAULT_OBS_SCALE = (1.0, 1.0, 0.1, 1.0, 10.0)


class Critic(Module):
    """GRU over the observation window, then an MLP on [hidden, action]."""

    def __init__(
        self,
        hidden: int = 16,
        layers=(64, 64),
        rng: np.random.Generator | None = None,
        obs_offset=(0.0, 0.0, 0.0, 0.0, 35.0),
        obs_scale=DEFAULT_OBS_SCALE,
        act_offset: float = 35.0,
        act_scale: float = 1.0,
        relative_action: bool = True,
        q_scale: float = 1.0,
    ):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.gru = GruCell(OBS_DIM, hidden, rng)
        sizes = [hidden + 1, *layers, 1]
        self.mlp = DenseNet(sizes, ["relu"] * len(layers) + ["identity"], rng)
        self.obs_offset = np.asarray(obs_offset, dtype=float)
        self.obs_scale = np.asarray(obs_scale, dtype=float)
        self.act_offset = float(act_offset)
        self.act_scale = float(act_scale)
        # relative: the action enters as (u - u_prev) / act_scale, which keeps the
        # input move well conditioned instead of a small difference of two inputs
        self.relative_action = bool(relative_action)
        # returns are O(100) while the network output starts O(1); scaling the
        # output lets Adam's bounded steps reach that range without touching rewards
        self.q_scale = float(q_scale)
        self.params = {f"gru.{k}": v for k, v in self.gru.params.items()}
        self.params.update({f"mlp.{k}": v for k, v in self.mlp.params.items()})

    def forward(self, s, a):
        s = np.asarray(s, dtype=float)
        a = np.asarray(a, dtype=float)
        single = s.ndim == 2
        if single:
            s, a = s[None], np.atleast_1d(a)
        x = (s - self.obs_offset) / self.obs_scale
        h = np.zeros((x.shape[0], self.gru.hidden_size))
        gru_tapes = []
        for k in range(x.shape[1]):
            h, t = self.gru.forward(h, x[:, k])
            gru_tapes.append(t)
        ref = s[:, -1, OBS_DIM - 1] if self.relative_action else self.act_offset
        z = np.concatenate([h, ((a - ref) / self.act_scale)[:, None]], axis=1)
        q, mlp_tape = self.mlp.forward(z)
        q = self.q_scale * q[:, 0]
        tape = Tape(self, self.version, {"gru": gru_tapes, "mlp": mlp_tape, "single": single})
        return (q[0] if single else q), tape

    def backward(self, tape: Tape, grad_q):
        """Returns ``(param_grads, grad_action)``."""
        self._check(tape)
        gq = self.q_scale * np.atleast_1d(np.asarray(grad_q, dtype=float))[:, None]
        g_mlp, g_z = self.mlp.backward(tape.saved["mlp"], gq)
        H = self.gru.hidden_size
        g_h = g_z[:, :H]
        g_a = g_z[:, H] / self.act_scale
        grads = {f"mlp.{k}": v for k, v in g_mlp.items()}
        acc = None
        for t in reversed(tape.saved["gru"]):
            gg, g_h, _ = self.gru.backward(t, g_h)
            if acc is None:
                acc = gg
            else:
                for k in acc:
                    acc[k] += gg[k]
        grads.update({f"gru.{k}": v for k, v in acc.items()})
        return grads, (g_a[0] if tape.saved["single"] else g_a)

    def clone(self) -> "Critic":
        c = Critic.__new__(Critic)
        Module.__init__(c)
        c.gru = GruCell.__new__(GruCell)
        Module.__init__(c.gru)
        c.gru.input_size, c.gru.hidden_size = self.gru.input_size, self.gru.hidden_size
        c.gru.params = self.gru.copy_params()
        c.mlp = DenseNet.__new__(DenseNet)
        Module.__init__(c.mlp)
        c.mlp.sizes, c.mlp.activations = list(self.mlp.sizes), list(self.mlp.activations)
        c.mlp.params = self.mlp.copy_params()
        c.obs_offset, c.obs_scale = self.obs_offset.copy(), self.obs_scale.copy()
        c.act_offset, c.act_scale = self.act_offset, self.act_scale
        c.relative_action, c.q_scale = self.relative_action, self.q_scale
        c.params = {f"gru.{k}": v for k, v in c.gru.params.items()}
        c.params.update({f"mlp.{k}": v for k, v in c.mlp.params.items()})
        return c


# -- data --------------------------------------------------------------------


@dataclass(frozen=True)
class Transition:
    s: np.ndarray
    u: float
    r: float
    s_next: np.ndarray
    terminal: bool = False


class ReplayMemory:
    """Fixed-capacity ring of transitions with uniform sampling."""

    def __init__(self, capacity: int, window: int, seed: int = 0):
        self.capacity = int(capacity)
        self.s = np.zeros((self.capacity, window, OBS_DIM))
        self.s2 = np.zeros((self.capacity, window, OBS_DIM))
        self.u = np.zeros(self.capacity)
        self.r = np.zeros(self.capacity)
        self.done = np.zeros(self.capacity)
        self.cursor = 0
        self.size = 0
        self.rng = np.random.default_rng(seed)

    def __len__(self) -> int:
        return self.size

    def add(self, tr: Transition) -> None:
        i = self.cursor
        self.s[i], self.u[i], self.r[i], self.s2[i], self.done[i] = tr.s, tr.u, tr.r, tr.s_next, float(tr.terminal)
        self.cursor = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def extend(self, transitions) -> None:
        for tr in transitions:
            self.add(tr)

    def sample(self, n: int):
        idx = self.rng.choice(self.size, size=n, replace=False)
        return self.s[idx], self.u[idx], self.r[idx], self.s2[idx], self.done[idx]


def split_episodes(rows, dt: float) -> list[list]:
    """Split time-ordered rows wherever consecutive samples are more than 1.5 dt apart."""
    episodes, cur = [], []
    for row in rows:
        if cur and (row.t_s - cur[-1].t_s > 1.5 * dt or row.t_s <= cur[-1].t_s):
            episodes.append(cur)
            cur = []
        cur.append(row)
    if cur:
        episodes.append(cur)
    return episodes


def episode_observations(rows, dt: float, T_f: float = 0.1) -> np.ndarray:
    """Rebuild the controller observations for rows[1:], seeding from rows[0]."""
    r0 = rows[0]
    st = seeded_state(dt, r0.u, r0.level_cm, r0.level_sp_cm, T_f, r0.u_hat)
    out = np.empty((len(rows) - 1, OBS_DIM))
    for i, row in enumerate(rows[1:]):
        obs = compute_observation(st, row.level_sp_cm, row.level_cm)
        out[i] = (obs.d_e, obs.i_e, obs.neg_d2y, obs.aw, obs.u_prev)
        st = PidState(st.dt, st.T_f, st.e_prev, st.dy_f_prev, st.y_prev, row.u, row.u_hat, st.initialized)
        st = advance_measurement(st, row.level_sp_cm, row.level_cm)
    return out


def build_transitions(rows, reward: RewardSpec, d: int, dt: float | None = None, T_f: float = 0.1) -> list[Transition]:
    """Turn logged process rows into ``(s, u, r, s')`` tuples.

    Each contiguous segment's first row seeds the controller memory.  The
    reward of the transition taken at sample k uses the error at sample k+1
    and the input move u_k - u_{k-1}.  The last transition of a segment is
    terminal.
    """
    rows = list(rows)
    if len(rows) < 2:
        return []
    if dt is None:
        dt = rows[1].t_s - rows[0].t_s
    out: list[Transition] = []
    for seg in split_episodes(rows, dt):
        if len(seg) < d + 3:
            continue
        obs = episode_observations(seg, dt, T_f)
        n = len(obs)
        u = np.array([r.u for r in seg])  # u[k] pairs with obs[k-1]
        e = np.array([r.level_sp_cm - r.level_cm for r in seg])
        for k in range(d, n - 1):
            s = obs[k - d : k + 1]
            s2 = obs[k - d + 1 : k + 2]
            r = -cost(reward, e[k + 2], u[k + 1] - u[k])
            out.append(Transition(s.copy(), float(u[k + 1]), float(r), s2.copy(), k + 1 == n - 1))
    return out


# -- algorithm ---------------------------------------------------------------


@dataclass
class Td3Config:
    gamma: float = 0.99
    rho: float = 0.995
    sigma: float = 0.5
    noise_clip: float = 1.0
    policy_delay: int = 2
    batch_size: int = 64
    actor_lr: float = 1e-3
    critic_lr: float = 1e-3
    updates_per_round: int | None = None  # None: one update per new sample
    d: int = 2
    u_min: float = 0.0
    u_max: float = 200.0
    use_inverting_gradients: bool = False
    replay_capacity: int = 100_000
    gru_hidden: int = 16
    critic_layers: tuple = (64, 64)
    act_offset: float = 35.0
    act_scale: float = 1.0
    relative_action: bool = True
    q_scale: float = 50.0
    obs_scale: tuple = DEFAULT_OBS_SCALE
    seed: int = 0

    def __post_init__(self):
        # gamma = 0 is admitted: it turns the critic into a one-step reward regressor
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError("rho must lie in [0, 1]")
        if not self.u_min < self.u_max:
            raise ValueError("u_min must be below u_max")
        if self.policy_delay < 1 or self.batch_size < 1 or self.d < 0:
            raise ValueError("policy_delay, batch_size must be positive and d non-negative")


def target_action(actor_target, s_next, sigma, noise_clip, u_min, u_max, rng: np.random.Generator):
    """Smoothed target action: sat(mu(s') + clip(eps, +-noise_clip)), eps ~ N(0, sigma^2)."""
    mu = actor_forward(actor_target, s_next)
    eps = rng.normal(0.0, 1.0, size=np.shape(mu)) * sigma
    eps = np.clip(eps, -noise_clip, noise_clip)
    return np.clip(mu + eps, u_min, u_max)


def invert_gradient(g, u, u_min: float, u_max: float):
    """Scale dQ/du by the distance to the bound it pushes toward."""
    if not u_min < u_max:
        raise ValueError("u_min must be below u_max")
    g = np.asarray(g, dtype=float)
    u = np.asarray(u, dtype=float)
    width = u_max - u_min
    out = np.where(g > 0, g * (u_max - u) / width, g * (u - u_min) / width)
    return float(out) if out.ndim == 0 else out


class Td3Agent:
    def __init__(self, config: Td3Config, initial_gains: PidGains):
        self.config = config
        self.rng = np.random.default_rng(config.seed)
        init_rng = np.random.default_rng(config.seed + 1)
        self.actor = PidActor(gains_to_theta(initial_gains))
        self.actor_target = PidActor(self.actor.theta)
        obs_offset = (0.0, 0.0, 0.0, 0.0, config.act_offset)
        kw = dict(
            obs_offset=obs_offset,
            obs_scale=config.obs_scale,
            act_offset=config.act_offset,
            act_scale=config.act_scale,
            relative_action=config.relative_action,
            q_scale=config.q_scale,
        )
        self.critics = [Critic(config.gru_hidden, config.critic_layers, init_rng, **kw) for _ in range(2)]
        self.critic_targets = [c.clone() for c in self.critics]
        self.actor_opt = AdamState(lr=config.actor_lr)
        self.critic_opts = [AdamState(lr=config.critic_lr) for _ in range(2)]
        self.replay = ReplayMemory(config.replay_capacity, config.d + 1, seed=config.seed + 2)
        self.total_updates = 0
        self.actor_updates = 0

    def gains(self) -> PidGains:
        return self.actor.gains()


def critic_update(agent: Td3Agent, batch) -> float:
    """One Adam step on both critics toward the clipped double-Q target."""
    cfg = agent.config
    s, u, r, s2, done = batch
    a2 = target_action(agent.actor_target, s2, cfg.sigma, cfg.noise_clip, cfg.u_min, cfg.u_max, agent.rng)
    q1t, _ = agent.critic_targets[0].forward(s2, a2)
    q2t, _ = agent.critic_targets[1].forward(s2, a2)
    q = r + cfg.gamma * (1.0 - done) * np.minimum(q1t, q2t)
    n = len(r)
    pending, losses = [], []
    for critic in agent.critics:
        qi, tape = critic.forward(s, u)
        diff = qi - q
        losses.append(float(np.mean(diff * diff)))
        grads, _ = critic.backward(tape, 2.0 * diff / n)
        pending.append(grads)
    loss = sum(losses)
    if not math.isfinite(loss) or not all(np.all(np.isfinite(g)) for gr in pending for g in gr.values()):
        log.warning("non-finite critic loss %r; update round aborted", loss)
        raise FloatingPointError("non-finite critic loss")
    for critic, opt, grads in zip(agent.critics, agent.critic_opts, pending):
        adam_step(critic, grads, opt)
    return loss


def actor_gradient(agent: Td3Agent, s) -> np.ndarray:
    """Gradient of mean Q1(s, mu(s)) w.r.t. theta, assembled as obs x Jacobian x dQ/du."""
    cfg = agent.config
    obs = np.asarray(s)[:, -1, :]
    u_hat, _ = agent.actor.forward(obs)
    _, ctape = agent.critics[0].forward(s, u_hat)
    _, dq_du = agent.critics[0].backward(ctape, np.ones(len(u_hat)))
    if cfg.use_inverting_gradients:
        dq_du = invert_gradient(dq_du, u_hat, cfg.u_min, cfg.u_max)
    return (obs[:, :4] * dq_du[:, None]).mean(axis=0) * theta_jacobian(agent.actor.theta)


def actor_update(agent: Td3Agent, batch) -> bool:
    """Adam ascent on the critic's value of the PID action; returns False if skipped."""
    g = actor_gradient(agent, batch[0])
    if not np.all(np.isfinite(g)):
        log.warning("non-finite actor gradient; update skipped")
        return False
    adam_step(agent.actor, {"theta": -g}, agent.actor_opt)
    gains = agent.actor.gains()
    assert gains.k_p > 0 and gains.k_i > 0 and gains.k_d > 0 and 0 < gains.k_tau < 1, gains
    return True


def polyak_targets(agent: Td3Agent) -> None:
    rho = agent.config.rho
    for tgt, online in zip(agent.critic_targets, agent.critics):
        polyak(tgt, online, rho)
    polyak(agent.actor_target, agent.actor, rho)


@dataclass
class RoundDiagnostics:
    critic_updates: int = 0
    actor_updates: int = 0
    critic_loss: float = math.nan
    gains: PidGains | None = None
    failed: bool = False
    skipped: bool = False
    losses: list = field(default_factory=list)


def train_round(agent: Td3Agent, n_updates: int | None = None) -> RoundDiagnostics:
    """Run ``n_updates`` critic updates with delayed actor and target updates."""
    cfg = agent.config
    if n_updates is None:
        n_updates = cfg.updates_per_round or 0
    diag = RoundDiagnostics()
    if len(agent.replay) < cfg.batch_size:
        log.warning("replay holds %d < batch size %d; no training this round", len(agent.replay), cfg.batch_size)
        diag.skipped = True
        diag.gains = agent.gains()
        return diag
    for _ in range(n_updates):
        batch = agent.replay.sample(cfg.batch_size)
        try:
            diag.losses.append(critic_update(agent, batch))
        except FloatingPointError:
            diag.failed = True
            break
        diag.critic_updates += 1
        agent.total_updates += 1
        if agent.total_updates % cfg.policy_delay == 0:
            if actor_update(agent, batch):
                diag.actor_updates += 1
                agent.actor_updates += 1
            polyak_targets(agent)
    if diag.losses:
        diag.critic_loss = float(np.mean(diag.losses))
    diag.gains = agent.gains()
    return diag
