"""Autoregressive decoding runtimes with per-step transfer metering.

Three real runtimes (they run the actual model):
  dense / moe / mole-train  -- everything resident, zero transfers; the
                               train-form mole runtime is the reference the
                               LUT runtime is checked against.
  mole-lut                  -- routed experts replaced by an offloaded table:
                               per layer, row fetches are issued at layer
                               entry and awaited after the shared-expert
                               computation; every step moves exactly
                               lanes * N * d * L elements.
  moe-offload               -- routed experts offloaded: selected experts
                               missing from the per-layer cache are loaded
                               (2 * d * D_r elements each) and the cache is
                               updated under the retention policy below.

Plus a model-free bandwidth simulator (uniform-random routing) for shapes
too large to run, used by the latency accounting.

Cache retention policy: with one lane, everything activated in the previous
step stays resident; with several lanes, a uniformly random two experts from
the previous step's activated union stay resident per layer.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import ModelConfig
from .kernels import matmul, rmsnorm, softmax
from .model import (
    RMS_EPS,
    DecodeState,
    ModelParams,
    attention_forward,
    combine_expert_rows,
    embed,
    ffn_forward,
    forward_tokens,
    greedy_pick,
    init_decode_state,
    moe_layer_forward,
)


# ---------------------------------------------------------------------------
# Expert cache
# ---------------------------------------------------------------------------

@dataclass
class ExpertCacheState:
    """Resident-expert bookkeeping for one layer."""

    capacity: int
    rng: np.random.Generator
    resident: set[int] = field(default_factory=set)


def cache_update(
    state: ExpertCacheState,
    activated: list[set[int]],
    batch: int,
) -> set[int]:
    """Load whatever the step needs, then apply the retention policy.

    Returns the set of experts loaded this step (activated union minus
    resident). Afterwards the resident set is the full activated set for a
    single lane, or a uniformly random capacity-subset of the activated
    union for batched decoding.
    """
    union: set[int] = set()
    for lane in activated:
        union |= set(int(j) for j in lane)
    loads = union - state.resident
    if batch == 1:
        if len(union) > state.capacity:
            raise ValueError(f"activated set of {len(union)} exceeds capacity {state.capacity}")
        state.resident = union
    else:
        pool = sorted(union)
        keep = min(state.capacity, len(pool))
        picked = state.rng.choice(len(pool), size=keep, replace=False)
        state.resident = {pool[i] for i in picked}
    return loads


def make_cache_states(cfg: ModelConfig, batch: int, seed: int) -> list[ExpertCacheState]:
    capacity = cfg.k if batch == 1 else 2
    rng = np.random.default_rng(seed)
    return [ExpertCacheState(capacity=capacity, rng=rng) for _ in range(cfg.L)]


# ---------------------------------------------------------------------------
# Metering
# ---------------------------------------------------------------------------

@dataclass
class StepRecord:
    step: int  # -1 marks the prefill pass
    lanes: int
    elements: int
    bytes: int
    experts_loaded: int
    sim_seconds: float


@dataclass
class StepMeter:
    bytes_per_element: int
    bandwidth: "object | None" = None  # anything with bytes_per_second / fixed_overhead
    records: list[StepRecord] = field(default_factory=list)

    def add(self, step: int, lanes: int, elements: int, experts_loaded: int = 0,
            nbytes: int | None = None) -> StepRecord:
        """Record one step; bytes default to elements * bytes_per_element but
        callers with exact transfer counts (e.g. quantized rows) pass nbytes."""
        if nbytes is None:
            nbytes = elements * self.bytes_per_element
        rec = StepRecord(step, lanes, elements, nbytes, experts_loaded,
                         step_latency(nbytes, self.bandwidth))
        self.records.append(rec)
        return rec

    @property
    def total_bytes(self) -> int:
        return sum(r.bytes for r in self.records)

    def decode_records(self) -> list[StepRecord]:
        return [r for r in self.records if r.step >= 0]


def step_latency(nbytes: int, bw) -> float:
    """Simulated transfer time: fixed_overhead + bytes / bytes_per_second."""
    if bw is None:
        return 0.0
    if bw.bytes_per_second <= 0:
        raise ValueError("bandwidth must be positive")
    return bw.fixed_overhead + nbytes / bw.bytes_per_second


# ---------------------------------------------------------------------------
# Greedy decode
# ---------------------------------------------------------------------------

@dataclass
class DecodeResult:
    tokens: list[list[int]]  # generated ids per lane
    meter: StepMeter


def _expert_elements(cfg: ModelConfig) -> int:
    return 2 * cfg.d * cfg.D_r


def greedy_decode(
    params: ModelParams,
    prompts: list[np.ndarray],
    steps: int,
    runtime: str = "auto",
    lut=None,
    seed: int = 0,
    bytes_per_element: int = 4,
    bandwidth=None,
) -> DecodeResult:
    """Greedy decoding with transfer metering.

    runtime: "dense", "moe", "mole-train", "mole-lut", "moe-offload", or
    "auto" (resident runtime for the model's variant). Prompts may have
    different lengths; each lane generates ``steps`` tokens. Sampling is
    argmax with ties to the lower token id. The meter's step -1 row covers
    prefill (mole-lut prefetches rows for every prompt position; the expert
    cache starts empty and is not charged for the prompt pass).
    """
    cfg = params.cfg
    if steps <= 0:
        raise ValueError("steps must be positive")
    if not prompts or any(len(np.ravel(p)) == 0 for p in prompts):
        raise ValueError("every lane needs a non-empty prompt")
    if runtime == "auto":
        runtime = {"dense": "dense", "moe": "moe", "mole": "mole-train"}[cfg.variant]
    valid = {"dense": ("dense",), "moe": ("moe", "moe-offload"),
             "mole": ("mole-train", "mole-lut")}
    if runtime not in valid[cfg.variant]:
        raise ValueError(f"runtime {runtime!r} does not fit variant {cfg.variant!r}")
    if runtime == "mole-lut" and lut is None:
        raise ValueError("mole-lut runtime needs an open LUT handle")

    lanes = len(prompts)
    meter = StepMeter(bytes_per_element=bytes_per_element, bandwidth=bandwidth)
    states = [init_decode_state(params, len(np.ravel(p)) + steps) for p in prompts]
    cache_states = make_cache_states(cfg, lanes, seed) if runtime == "moe-offload" else None

    form = "lut_form" if runtime == "mole-lut" else "train_form"
    base_bytes = lut.bytes_read if runtime == "mole-lut" else 0

    # prefill each lane; take the next-token prediction from the last position
    current: list[int] = []
    prefill_elements = 0
    for lane, prompt in enumerate(prompts):
        prompt = np.ravel(np.asarray(prompt))
        logits = forward_tokens(params, prompt, states[lane], form=form, lut=lut)
        current.append(greedy_pick(logits[-1]))
        if runtime == "mole-lut":
            prefill_elements += len(prompt) * cfg.N * cfg.d * cfg.L
    prefill_bytes = (lut.bytes_read - base_bytes) if runtime == "mole-lut" else 0
    meter.add(-1, lanes, prefill_elements, 0, nbytes=prefill_bytes)

    tokens: list[list[int]] = [[] for _ in range(lanes)]
    for step in range(steps):
        for lane in range(lanes):
            tokens[lane].append(current[lane])
        if runtime == "mole-lut":
            before = lut.bytes_read
            logits_rows, elements = _mole_lut_step(params, current, states, lut)
            meter.add(step, lanes, elements, 0, nbytes=lut.bytes_read - before)
        elif runtime == "moe-offload":
            logits_rows, loaded = _moe_offload_step(params, current, states,
                                                    cache_states, lanes)
            meter.add(step, lanes, loaded * _expert_elements(cfg), loaded)
        else:
            logits_rows = [
                forward_tokens(params, [current[lane]], states[lane], form=form, lut=lut)[-1]
                for lane in range(lanes)
            ]
            meter.add(step, lanes, 0, 0)
        current = [greedy_pick(row) for row in logits_rows]
    return DecodeResult(tokens=tokens, meter=meter)


def _mole_lut_step(
    params: ModelParams,
    current: list[int],
    states: list[DecodeState],
    lut,
) -> tuple[list[np.ndarray], int]:
    """One decode step, layer-major: prefetch rows at layer entry, compute
    attention and the shared expert, await, combine."""
    cfg = params.cfg
    lanes = len(current)
    ids = np.asarray(current)
    xs = [embed(params, np.asarray([[tok]])) for tok in current]
    elements = 0
    for i in range(cfg.L):
        lv = params.layer(i)
        ticket = lut.prefetch(i, ids)
        hn = []
        shared = []
        gates = []
        for b in range(lanes):
            st = states[b]
            pos = np.arange(st.position, st.position + 1)
            xs[b] = attention_forward(lv, xs[b], pos, kv=st.kv[i])
            h = rmsnorm(xs[b], lv.norm_gain("post_attn_norm"), RMS_EPS)
            hn.append(h)
            gates.append(softmax(matmul(h, lv.router.T)))
            shared.append(ffn_forward(h, lv.shared_w1, lv.shared_b1,
                                      lv.shared_w2, lv.shared_b2))
        rows = lut.await_rows(ticket)  # (lanes, N, d)
        elements += lanes * cfg.N * cfg.d
        for b in range(lanes):
            lane_rows = rows[b].astype(xs[b].dtype).reshape(cfg.N, 1, 1, cfg.d)
            xs[b] = xs[b] + shared[b] + combine_expert_rows(gates[b], lane_rows)
    logits_rows = []
    for b in range(lanes):
        states[b].position += 1
        xf = rmsnorm(xs[b], params.tensors["final_norm.gain"], RMS_EPS)
        logits_rows.append(matmul(xf, params.tensors["lm_head"])[0, -1])
    return logits_rows, elements


def _moe_offload_step(
    params: ModelParams,
    current: list[int],
    states: list[DecodeState],
    cache_states: list[ExpertCacheState],
    lanes: int,
) -> tuple[list[np.ndarray], int]:
    """One decode step; after routing, any selected expert missing from the
    layer's cache is loaded and metered."""
    cfg = params.cfg
    xs = [embed(params, np.asarray([[tok]])) for tok in current]
    total_loads = 0
    for i in range(cfg.L):
        lv = params.layer(i)
        activated: list[set[int]] = []
        for b in range(lanes):
            st = states[b]
            pos = np.arange(st.position, st.position + 1)
            xs[b] = attention_forward(lv, xs[b], pos, kv=st.kv[i])
            lc: dict = {}
            xs[b] = moe_layer_forward(lv, xs[b], cache=lc)
            activated.append(set(int(j) for j in lc["sel"].reshape(-1)))
        loads = cache_update(cache_states[i], activated, lanes)
        total_loads += len(loads)
    logits_rows = []
    for b in range(lanes):
        states[b].position += 1
        xf = rmsnorm(xs[b], params.tensors["final_norm.gain"], RMS_EPS)
        logits_rows.append(matmul(xf, params.tensors["lm_head"])[0, -1])
    return logits_rows, total_loads


# ---------------------------------------------------------------------------
# Model-free bandwidth simulation
# ---------------------------------------------------------------------------

def uniform_routing_step(
    rng: np.random.Generator, n_experts: int, k: int, lanes: int
) -> list[set[int]]:
    """Stand-in router for shapes too large to run: each lane activates a
    uniformly random k-subset (argsort of iid uniforms is a uniform
    permutation, so the first k entries are a uniform subset)."""
    order = np.argsort(rng.random((lanes, n_experts)), axis=1)[:, :k]
    return [set(row.tolist()) for row in order]


def simulate_transfer_meter(
    cfg: ModelConfig,
    batch: int,
    steps: int,
    seed: int = 0,
    bytes_per_element: int = 2,
    bandwidth=None,
    routing_trace: list[list[list[set[int]]]] | None = None,
    lut_row_bytes: int | None = None,
) -> StepMeter:
    """Per-step transfer accounting without running the model.

    moe: uniform-random routing (or a replayed trace indexed
    [step][layer][lane]) through the expert cache policy. mole: the constant
    lanes * N * d * L row fetch, at ``lut_row_bytes`` per (token, expert) row
    when given (quantized tables) or d * bytes_per_element otherwise. dense:
    zero transfer rows.
    """
    meter = StepMeter(bytes_per_element=bytes_per_element, bandwidth=bandwidth)
    if cfg.variant == "moe":
        states = make_cache_states(cfg, batch, seed)
        route_rng = np.random.default_rng(seed + 1)
        for step in range(steps):
            loaded = 0
            for li, layer_state in enumerate(states):
                if routing_trace is not None:
                    activated = routing_trace[step][li]
                else:
                    activated = uniform_routing_step(route_rng, cfg.N, cfg.k, batch)
                loaded += len(cache_update(layer_state, activated, batch))
            meter.add(step, batch, loaded * _expert_elements(cfg), loaded)
    elif cfg.variant == "mole":
        per_step = batch * cfg.N * cfg.d * cfg.L
        row_bytes = cfg.d * bytes_per_element if lut_row_bytes is None else lut_row_bytes
        per_step_bytes = batch * cfg.N * cfg.L * row_bytes
        for step in range(steps):
            meter.add(step, batch, per_step, 0, nbytes=per_step_bytes)
    else:
        for step in range(steps):
            meter.add(step, batch, 0, 0)
    return meter
