"""Dense numeric core: recurrent per-agent Q-network plus VDN / monotonic
mixing networks, with hand-derived forward/backward passes.

No autodiff framework is used. Every forward records exactly the
intermediates its analytic backward needs; gradients are returned as flat
vectors aligned with the documented parameter layout so they can be fed to
the optimizer, the parameter pool, and checkpoint files interchangeably.

Per-agent network (parameters shared across agents, distinguished by an
agent-id one-hot input):

    input:  obs (+) last-action one-hot (+) agent-id one-hot   [D]
    x    =  relu(inp @ w_in + b_in)                            [H]
    GRU  =  r,z gates + candidate, PyTorch gate ordering       [H]
    q    =  h' @ w_out + b_out                                 [A]

Monotonic mixer: two mixing layers (n_agents -> M -> 1) whose weights come
from state-conditioned hypernetworks and pass through abs(), so
dQ_total/dQ_i >= 0; the final bias is a two-layer state value head.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np
from scipy.special import expit as _sigmoid

from .errors import ConfigError, DimensionMismatch, LengthMismatch, NoTapeRecorded

MASK_FILL = -1e9  # surrogate for -inf on unavailable actions; never differentiated

VDN = "vdn"
MONO = "mono"


@dataclass(frozen=True)
class NetDims:
    """Every dimension needed to lay out the networks."""

    n_agents: int
    n_actions: int
    obs_dim: int
    state_dim: int
    hidden_dim: int = 64
    mix_embed: int = 32
    mixer: str = VDN

    def __post_init__(self):
        if self.mixer not in (VDN, MONO):
            raise ConfigError(f"mixer must be '{VDN}' or '{MONO}', got {self.mixer!r}")
        for name in ("n_agents", "n_actions", "obs_dim", "state_dim", "hidden_dim", "mix_embed"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")

    @property
    def input_dim(self) -> int:
        return self.obs_dim + self.n_actions + self.n_agents


class ParamLayout:
    """Fixed, documented ordering of all parameter tensors in the flat vector.

    Agent network first, then (for the monotonic mixer) hypernetwork tensors.
    flatten/unflatten are exact inverses; unflatten returns zero-copy views.
    """

    def __init__(self, dims: NetDims):
        self.dims = dims
        d, h, a, n, s, m = (
            dims.input_dim,
            dims.hidden_dim,
            dims.n_actions,
            dims.n_agents,
            dims.state_dim,
            dims.mix_embed,
        )
        spec: list[tuple[str, tuple[int, ...], int]] = [
            # (name, shape, fan_in used for the init bound)
            ("w_in", (d, h), d),
            ("b_in", (h,), d),
            ("gru_wx", (h, 3 * h), h),
            ("gru_wh", (h, 3 * h), h),
            ("gru_bx", (3 * h,), h),
            ("gru_bh", (3 * h,), h),
            ("w_out", (h, a), h),
            ("b_out", (a,), h),
        ]
        if dims.mixer == MONO:
            spec += [
                ("hw1_w", (s, n * m), s),
                ("hw1_b", (n * m,), s),
                ("hb1_w", (s, m), s),
                ("hb1_b", (m,), s),
                ("hw2_w", (s, m), s),
                ("hw2_b", (m,), s),
                ("hv1_w", (s, m), s),
                ("hv1_b", (m,), s),
                ("hv2_w", (m,), m),
                ("hv2_b", (1,), m),
            ]
        self.names = [name for name, _, _ in spec]
        self.shapes = {name: shape for name, shape, _ in spec}
        self.fans = {name: fan for name, _, fan in spec}
        self.slices: dict[str, slice] = {}
        off = 0
        for name, shape, _ in spec:
            size = int(np.prod(shape))
            self.slices[name] = slice(off, off + size)
            off += size
        self.size = off

    def unflatten(self, flat: np.ndarray) -> dict[str, np.ndarray]:
        flat = np.asarray(flat)
        if flat.shape != (self.size,):
            raise LengthMismatch(f"flat length {flat.shape} != ({self.size},)")
        return {name: flat[self.slices[name]].reshape(self.shapes[name]) for name in self.names}

    def flatten(self, params: dict[str, np.ndarray]) -> np.ndarray:
        if set(params) != set(self.names):
            raise LengthMismatch(
                f"parameter names {sorted(params)} != layout names {sorted(self.names)}"
            )
        flat = np.empty(self.size)
        for name in self.names:
            t = np.asarray(params[name])
            if t.shape != self.shapes[name]:
                raise LengthMismatch(f"{name}: shape {t.shape} != {self.shapes[name]}")
            flat[self.slices[name]] = t.ravel()
        return flat

    def zeros(self) -> dict[str, np.ndarray]:
        return {name: np.zeros(self.shapes[name]) for name in self.names}


def init_params(dims: NetDims, seed: int) -> np.ndarray:
    """Flat parameter vector, each tensor ~ U(-1/sqrt(fan_in), +1/sqrt(fan_in))."""
    layout = ParamLayout(dims)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    flat = np.empty(layout.size)
    for name in layout.names:
        bound = 1.0 / np.sqrt(layout.fans[name])
        sl = layout.slices[name]
        flat[sl] = rng.uniform(-bound, bound, size=sl.stop - sl.start)
    return flat


def _elu(x: np.ndarray) -> np.ndarray:
    return np.where(x > 0, x, np.expm1(np.minimum(x, 0.0)))


def _elu_grad(x: np.ndarray) -> np.ndarray:
    return np.where(x > 0, 1.0, np.exp(np.minimum(x, 0.0)))


# ---------------------------------------------------------------------------
# Agent network
# ---------------------------------------------------------------------------


def _agent_cell(p, inp, h_prev, cache: list | None):
    """One recurrent step for a batch: inp [B, D], h_prev [B, H] -> (q, h1)."""
    hdim = h_prev.shape[1]
    lin = inp @ p["w_in"] + p["b_in"]
    x = np.maximum(lin, 0.0)
    gi = x @ p["gru_wx"] + p["gru_bx"]
    gh = h_prev @ p["gru_wh"] + p["gru_bh"]
    r = _sigmoid(gi[:, :hdim] + gh[:, :hdim])
    z = _sigmoid(gi[:, hdim : 2 * hdim] + gh[:, hdim : 2 * hdim])
    gh_n = gh[:, 2 * hdim :]
    n = np.tanh(gi[:, 2 * hdim :] + r * gh_n)
    h1 = (1.0 - z) * n + z * h_prev
    q = h1 @ p["w_out"] + p["b_out"]
    if cache is not None:
        cache.append((inp, lin, x, h_prev, r, z, n, gh_n, h1))
    return q, h1


def _agent_cell_backward(p, grads, step_cache, dq, dh1_in):
    """Backward through one cell; returns dh_prev to chain across time."""
    inp, lin, x, h_prev, r, z, n, gh_n, h1 = step_cache
    dh1 = dq @ p["w_out"].T + dh1_in
    grads["w_out"] += h1.T @ dq
    grads["b_out"] += dq.sum(axis=0)

    dn = dh1 * (1.0 - z)
    dz = dh1 * (h_prev - n)
    dh_prev = dh1 * z

    da_n = dn * (1.0 - n * n)
    dr = da_n * gh_n
    dgh_n = da_n * r
    da_z = dz * z * (1.0 - z)
    da_r = dr * r * (1.0 - r)

    dgi = np.concatenate([da_r, da_z, da_n], axis=1)
    dgh = np.concatenate([da_r, da_z, dgh_n], axis=1)
    grads["gru_wx"] += x.T @ dgi
    grads["gru_bx"] += dgi.sum(axis=0)
    grads["gru_wh"] += h_prev.T @ dgh
    grads["gru_bh"] += dgh.sum(axis=0)
    dh_prev += dgh @ p["gru_wh"].T

    dx = dgi @ p["gru_wx"].T
    dlin = dx * (lin > 0)
    grads["w_in"] += inp.T @ dlin
    grads["b_in"] += dlin.sum(axis=0)
    return dh_prev


def agent_seq_forward(p, inputs: np.ndarray, h0: np.ndarray, record: bool = True):
    """Unroll the agent network: inputs [B, T, D], h0 [B, H] -> (Q [B, T, A], cache)."""
    b, t, _ = inputs.shape
    qs = []
    caches: list | None = [] if record else None
    h = h0
    for step in range(t):
        q, h = _agent_cell(p, inputs[:, step], h, caches)
        qs.append(q)
    return np.stack(qs, axis=1), caches


def agent_seq_backward(p, caches, dq_seq: np.ndarray):
    """BPTT over a recorded unroll: dq_seq [B, T, A] -> (grads dict, dh0)."""
    if caches is None:
        raise NoTapeRecorded("forward was run with record=False")
    layout_names = set(p.keys())
    grads = {name: np.zeros_like(p[name]) for name in layout_names if name in _AGENT_TENSORS}
    b, t, _ = dq_seq.shape
    dh = np.zeros((b, p["b_in"].shape[0]))
    for step in reversed(range(t)):
        dh = _agent_cell_backward(p, grads, caches[step], dq_seq[:, step], dh)
    return grads, dh


_AGENT_TENSORS = {"w_in", "b_in", "gru_wx", "gru_wh", "gru_bx", "gru_bh", "w_out", "b_out"}


def mask_q(q: np.ndarray, avail: np.ndarray) -> np.ndarray:
    """Replace unavailable entries with the -inf surrogate (selection only)."""
    return np.where(avail, q, MASK_FILL)


def agent_forward(
    dims: NetDims,
    params: dict[str, np.ndarray],
    obs: np.ndarray,
    last_action: np.ndarray,
    agent_id: np.ndarray,
    hidden_in: np.ndarray,
    avail: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Single decision step for one agent.

    Returns (q_values with unavailable entries masked to MASK_FILL, hidden_out).
    """
    obs = np.asarray(obs, dtype=np.float64)
    last_action = np.asarray(last_action, dtype=np.float64)
    agent_id = np.asarray(agent_id, dtype=np.float64)
    hidden_in = np.asarray(hidden_in, dtype=np.float64)
    avail = np.asarray(avail, dtype=bool)
    expected = {
        "obs": (obs, (dims.obs_dim,)),
        "last_action": (last_action, (dims.n_actions,)),
        "agent_id": (agent_id, (dims.n_agents,)),
        "hidden_in": (hidden_in, (dims.hidden_dim,)),
        "avail": (avail, (dims.n_actions,)),
    }
    for name, (arr, shape) in expected.items():
        if arr.shape != shape:
            raise DimensionMismatch(f"{name}: shape {arr.shape} != {shape}")
    if not np.all(np.isfinite(hidden_in)):
        raise DimensionMismatch("hidden_in must be finite")
    inp = np.concatenate([obs, last_action, agent_id])[None, :]
    q, h1 = _agent_cell(params, inp, hidden_in[None, :], cache=None)
    return mask_q(q[0], avail), h1[0]


# ---------------------------------------------------------------------------
# Mixers
# ---------------------------------------------------------------------------


def mixer_forward(dims: NetDims, p, chosen_qs: np.ndarray, states: np.ndarray, record: bool = True):
    """Mix per-agent chosen Q-values into Q_total.

    chosen_qs [R, n_agents], states [R, state_dim] -> (q_total [R], cache).
    """
    if dims.mixer == VDN:
        return chosen_qs.sum(axis=1), ("vdn", chosen_qs.shape)
    n, m = dims.n_agents, dims.mix_embed
    w1_pre = states @ p["hw1_w"] + p["hw1_b"]  # [R, N*M]
    w1 = np.abs(w1_pre).reshape(-1, n, m)
    b1 = states @ p["hb1_w"] + p["hb1_b"]  # [R, M]
    pre1 = np.einsum("rn,rnm->rm", chosen_qs, w1) + b1
    hid = _elu(pre1)
    w2_pre = states @ p["hw2_w"] + p["hw2_b"]  # [R, M]
    w2 = np.abs(w2_pre)
    v_pre = states @ p["hv1_w"] + p["hv1_b"]
    v_hid = np.maximum(v_pre, 0.0)
    v = v_hid @ p["hv2_w"] + p["hv2_b"][0]
    q_total = (hid * w2).sum(axis=1) + v
    cache = ("mono", (states, chosen_qs, w1_pre, w1, pre1, hid, w2_pre, w2, v_pre, v_hid)) if record else None
    return q_total, cache


def mixer_backward(dims: NetDims, p, cache, dq_total: np.ndarray):
    """Backward through the mixer: dq_total [R] -> (grads dict, d_chosen_qs [R, N])."""
    if cache is None:
        raise NoTapeRecorded("mixer forward was run with record=False")
    if cache[0] == "vdn":
        r, n = dq_total.shape[0], dims.n_agents
        return {}, np.repeat(dq_total[:, None], n, axis=1)
    states, chosen_qs, w1_pre, w1, pre1, hid, w2_pre, w2, v_pre, v_hid = cache[1]
    n, m = dims.n_agents, dims.mix_embed
    grads = {name: np.zeros_like(p[name]) for name in _MONO_TENSORS}

    # value head
    grads["hv2_w"] += v_hid.T @ dq_total
    grads["hv2_b"] += np.array([dq_total.sum()])
    dv_hid = np.outer(dq_total, p["hv2_w"])
    dv_pre = dv_hid * (v_pre > 0)
    grads["hv1_w"] += states.T @ dv_pre
    grads["hv1_b"] += dv_pre.sum(axis=0)

    # second mixing layer
    dhid = dq_total[:, None] * w2
    dw2 = dq_total[:, None] * hid
    dw2_pre = dw2 * np.sign(w2_pre)
    grads["hw2_w"] += states.T @ dw2_pre
    grads["hw2_b"] += dw2_pre.sum(axis=0)

    # first mixing layer
    dpre1 = dhid * _elu_grad(pre1)
    grads["hb1_w"] += states.T @ dpre1
    grads["hb1_b"] += dpre1.sum(axis=0)
    d_chosen = np.einsum("rm,rnm->rn", dpre1, w1)
    dw1 = np.einsum("rn,rm->rnm", chosen_qs, dpre1)
    dw1_pre = (dw1 * np.sign(w1_pre.reshape(-1, n, m))).reshape(-1, n * m)
    grads["hw1_w"] += states.T @ dw1_pre
    grads["hw1_b"] += dw1_pre.sum(axis=0)
    return grads, d_chosen


_MONO_TENSORS = {"hw1_w", "hw1_b", "hb1_w", "hb1_b", "hw2_w", "hw2_b", "hv1_w", "hv1_b", "hv2_w", "hv2_b"}


def mix_forward(dims: NetDims, params, chosen_qs: np.ndarray, global_state: np.ndarray) -> float:
    """Scalar Q_total for one step; VDN is exactly the agent sum."""
    chosen_qs = np.asarray(chosen_qs, dtype=np.float64)
    global_state = np.asarray(global_state, dtype=np.float64)
    if chosen_qs.shape != (dims.n_agents,):
        raise DimensionMismatch(f"chosen_qs shape {chosen_qs.shape} != ({dims.n_agents},)")
    if global_state.shape != (dims.state_dim,):
        raise DimensionMismatch(f"global_state shape {global_state.shape} != ({dims.state_dim},)")
    q_total, _ = mixer_forward(dims, params, chosen_qs[None, :], global_state[None, :], record=False)
    return float(q_total[0])


# ---------------------------------------------------------------------------
# Composed episode-batch forward/backward (agent net + gather + mixer)
# ---------------------------------------------------------------------------


def build_agent_inputs(dims: NetDims, obs: np.ndarray, actions: np.ndarray) -> np.ndarray:
    """Per-agent network inputs for a batch of episodes.

    obs [B, T, N, O], actions [B, T, N] int -> inputs [B*N, T, D] where each
    step is obs (+) previous-action one-hot (zeros at t=0) (+) agent one-hot.
    """
    b, t, n, o = obs.shape
    a = dims.n_actions
    last = np.zeros((b, t, n, a))
    if t > 1:
        idx_b, idx_t, idx_n = np.meshgrid(
            np.arange(b), np.arange(1, t), np.arange(n), indexing="ij"
        )
        last[idx_b, idx_t, idx_n, actions[:, :-1]] = 1.0
    agent_oh = np.broadcast_to(np.eye(n), (b, t, n, n))
    inputs = np.concatenate([obs, last, agent_oh], axis=3)  # [B, T, N, D]
    return inputs.transpose(0, 2, 1, 3).reshape(b * n, t, dims.input_dim)


class EpisodeTape:
    """Everything recorded by qtot_forward that qtot_backward consumes."""

    def __init__(self, dims, layout, params, agent_caches, mixer_cache, shape):
        self.dims = dims
        self.layout = layout
        self.params = params
        self.agent_caches = agent_caches
        self.mixer_cache = mixer_cache
        self.shape = shape  # (B, T)
        self.consumed = False


def qtot_forward(
    dims: NetDims,
    flat_params: np.ndarray,
    obs: np.ndarray,
    actions: np.ndarray,
    states: np.ndarray,
    record: bool = True,
):
    """Q_total for every step of a padded batch.

    obs [B, T, N, O], actions [B, T, N], states [B, T, S] -> (q_total [B, T],
    tape or None). Hidden states start at zero, matching acting semantics at
    episode boundaries.
    """
    layout = ParamLayout(dims)
    p = layout.unflatten(flat_params)
    b, t, n, _ = obs.shape
    inputs = build_agent_inputs(dims, obs, actions)
    h0 = np.zeros((b * n, dims.hidden_dim))
    q_seq, agent_caches = agent_seq_forward(p, inputs, h0, record=record)  # [B*N, T, A]
    q_all = q_seq.reshape(b, n, t, dims.n_actions).transpose(0, 2, 1, 3)  # [B, T, N, A]
    ib, it, ia = np.ogrid[:b, :t, :n]
    chosen = q_all[ib, it, ia, actions]  # [B, T, N]
    q_total, mixer_cache = mixer_forward(
        dims, p, chosen.reshape(b * t, n), states.reshape(b * t, dims.state_dim), record=record
    )
    tape = EpisodeTape(dims, layout, p, agent_caches, mixer_cache, (b, t)) if record else None
    return q_total.reshape(b, t), tape


def qtot_backward(tape: EpisodeTape, dq_total: np.ndarray, actions: np.ndarray) -> np.ndarray:
    """Gradient of sum(dq_total * q_total) w.r.t. the flat parameter vector."""
    if tape is None or tape.consumed:
        raise NoTapeRecorded("no forward tape available (already consumed or not recorded)")
    tape.consumed = True
    dims, layout, p = tape.dims, tape.layout, tape.params
    b, t = tape.shape
    n = dims.n_agents
    mixer_grads, d_chosen = mixer_backward(dims, p, tape.mixer_cache, dq_total.reshape(b * t))
    dq_all = np.zeros((b, t, n, dims.n_actions))
    ib, it, ia = np.ogrid[:b, :t, :n]
    dq_all[ib, it, ia, actions] = d_chosen.reshape(b, t, n)
    dq_seq = dq_all.transpose(0, 2, 1, 3).reshape(b * n, t, dims.n_actions)
    agent_grads, _ = agent_seq_backward(p, tape.agent_caches, dq_seq)
    flat = np.zeros(layout.size)
    for name, g in {**agent_grads, **mixer_grads}.items():
        flat[layout.slices[name]] = g.ravel()
    return flat


# ---------------------------------------------------------------------------
# Checkpoint file format
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"MPCKPT01"
_MIXER_CODES = {VDN: 0, MONO: 1}
_MIXER_NAMES = {v: k for k, v in _MIXER_CODES.items()}


def checkpoint_bytes(dims: NetDims, flat_params: np.ndarray) -> bytes:
    """Serialize: magic, format version, layout descriptor, little-endian
    float64 parameter array, crc32 of the array bytes."""
    layout = ParamLayout(dims)
    flat_params = np.asarray(flat_params, dtype="<f8")
    if flat_params.shape != (layout.size,):
        raise LengthMismatch(f"flat length {flat_params.shape} != ({layout.size},)")
    data = flat_params.tobytes()
    header = struct.pack(
        "<8sIIIIIIIBQ",
        CHECKPOINT_MAGIC,
        1,
        dims.n_agents,
        dims.n_actions,
        dims.obs_dim,
        dims.state_dim,
        dims.hidden_dim,
        dims.mix_embed,
        _MIXER_CODES[dims.mixer],
        layout.size,
    )
    return header + data + struct.pack("<I", zlib.crc32(data))


def parse_checkpoint(blob: bytes) -> tuple[NetDims, np.ndarray]:
    head_fmt = "<8sIIIIIIIBQ"
    head_size = struct.calcsize(head_fmt)
    if len(blob) < head_size + 4:
        raise LengthMismatch("checkpoint truncated")
    magic, fmt, n, a, o, s, h, m, mixer_code, count = struct.unpack(head_fmt, blob[:head_size])
    if magic != CHECKPOINT_MAGIC or fmt != 1:
        raise LengthMismatch(f"bad checkpoint header magic={magic!r} version={fmt}")
    if mixer_code not in _MIXER_NAMES:
        raise LengthMismatch(f"unknown mixer code {mixer_code}")
    dims = NetDims(
        n_agents=n, n_actions=a, obs_dim=o, state_dim=s, hidden_dim=h, mix_embed=m,
        mixer=_MIXER_NAMES[mixer_code],
    )
    data = blob[head_size : head_size + 8 * count]
    if len(data) != 8 * count:
        raise LengthMismatch("checkpoint data truncated")
    (crc,) = struct.unpack("<I", blob[head_size + 8 * count : head_size + 8 * count + 4])
    if crc != zlib.crc32(data):
        raise LengthMismatch("checkpoint checksum mismatch")
    flat = np.frombuffer(data, dtype="<f8").astype(np.float64)
    if flat.shape != (ParamLayout(dims).size,):
        raise LengthMismatch("checkpoint length inconsistent with layout")
    return dims, flat


def save_checkpoint(path, dims: NetDims, flat_params: np.ndarray) -> None:
    with open(path, "wb") as f:
        f.write(checkpoint_bytes(dims, flat_params))


def load_checkpoint(path) -> tuple[NetDims, np.ndarray]:
    with open(path, "rb") as f:
        return parse_checkpoint(f.read())
