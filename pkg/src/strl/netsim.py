"""Discrete-time packet network simulator.

Each step covers one simulated second ``[t, t+1)``.  Packets injected in a
step travel as cohorts: one cohort per (OD pair, path) carrying an integer
packet count.  Every node except the destination and every directed link
channel is a FIFO server:

* node ``i`` serves a cohort of ``n`` packets in ``n / mu_i`` seconds;
* a link channel needs ``n * L / B`` seconds (see :func:`link_transmit_time`).

A cohort waits while its server is busy.  Events are processed in time
order; anything scheduled at or after ``t + 1`` stays in flight for the next
step.  End-to-end delay runs from injection to arrival at the destination.

Step reward is ``throughput / mean_e2e_delay`` where the delay is averaged
over all packets delivered during the step and throughput is the fraction of
this step's injected packets that were delivered within the step.
"""
from __future__ import annotations

import copy
import csv
import hashlib
import heapq
import io
import logging
import math
import pickle
from dataclasses import dataclass, field, fields
from typing import Mapping, Sequence

import numpy as np

from .pathing import PathIndex, RoutingError, RoutingPlan
from .topology import Topology
from .traffic import ArrivalSeries

log = logging.getLogger(__name__)


class SimValidationError(ValueError):
    pass


class SetupError(RuntimeError):
    pass


class ConsistencyError(RuntimeError):
    pass


@dataclass(frozen=True)
class NodeSpec:
    service_rate: float
    buffer_capacity: int | None = None

    def __post_init__(self) -> None:
        if not self.service_rate > 0:
            raise SimValidationError(f"service rate must be positive, got {self.service_rate}")


@dataclass(frozen=True)
class LinkSpec:
    capacity: float = 1000e6  # bits/s
    packet_bits: float = 10_000.0
    buffer_capacity: int | None = None

    def __post_init__(self) -> None:
        if not (self.capacity > 0 and self.packet_bits > 0):
            raise SimValidationError("link capacity and packet size must be positive")

    @property
    def packet_rate(self) -> float:
        return self.capacity / self.packet_bits


def link_transmit_time(arrival_rate: float, spec: LinkSpec) -> float:
    """Seconds needed to push ``arrival_rate`` packets: (rate * L) / B."""
    return arrival_rate * spec.packet_bits / spec.capacity


def compute_reward(delivered: int, injected: int, mean_e2e_delay: float) -> float:
    """``(delivered / injected) / mean_e2e_delay``; zero when nothing was delivered."""
    if delivered > injected:
        raise ConsistencyError(f"delivered {delivered} exceeds injected {injected}")
    if injected <= 0 or delivered <= 0:
        return 0.0
    return (delivered / injected) / mean_e2e_delay


@dataclass(frozen=True)
class StepMetrics:
    step: int
    injected: int
    delivered: int
    delivered_on_time: int
    dropped: int
    in_flight: int
    mean_e2e_delay: float
    throughput: float
    reward: float

    CSV_FIELDS = ("step", "injected", "delivered", "throughput", "mean_delay", "reward")

    def csv_row(self) -> list:
        return [self.step, self.injected, self.delivered, repr(self.throughput),
                repr(self.mean_e2e_delay), repr(self.reward)]


def metrics_csv(rows: Sequence[StepMetrics]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(StepMetrics.CSV_FIELDS)
    for m in rows:
        w.writerow(m.csv_row())
    return buf.getvalue()


@dataclass(frozen=True)
class WarmupCriterion:
    min_steps: int = 10
    utilization: float = 0.9
    window: int = 5
    max_steps: int = 200

    def __post_init__(self) -> None:
        if not 0 < self.utilization <= 1:
            raise SimValidationError("warm-up utilization threshold must be in (0, 1]")


@dataclass
class WarmupReport:
    steps: int
    converged: bool
    busy_fraction: float


def largest_remainder(total: int, weights: Sequence[float]) -> list[int]:
    """Integer split of ``total`` proportional to ``weights``; ties go to the lower index."""
    w = np.asarray(weights, dtype=float)
    if total <= 0 or w.sum() <= 0:
        return [0] * len(w)
    quotas = total * w / w.sum()
    base = np.floor(quotas).astype(np.int64)
    rest = total - int(base.sum())
    if rest > 0:
        frac = quotas - base
        order = sorted(range(len(w)), key=lambda i: (-frac[i], i))
        for i in order[:rest]:
            base[i] += 1
    return [int(x) for x in base]


def all_pairs(n: int) -> list[tuple[int, int]]:
    return [(s, d) for s in range(n) for d in range(n) if s != d]


def shortest_hop_paths(topology: Topology, od_pairs) -> dict[tuple[int, int], tuple[int, ...]]:
    """Lexicographically first minimum-hop path per pair (BFS, neighbours ascending)."""
    out = {}
    for s, d in od_pairs:
        prev = {s: None}
        frontier = [s]
        while frontier and d not in prev:
            nxt = []
            for u in frontier:
                for v in topology.neighbors(u):
                    if v not in prev:
                        prev[v] = u
                        nxt.append(v)
            frontier = nxt
        if d in prev:
            path = [d]
            while prev[path[-1]] is not None:
                path.append(prev[path[-1]])
            out[(s, d)] = tuple(reversed(path))
    return out


def expected_node_load(index: PathIndex, weights, mean_rate: float) -> np.ndarray:
    """Packets/s each node processes when every pair picks a uniformly random simple path."""
    w = np.asarray(weights, dtype=float)
    w = mean_rate * w / w.sum()
    load = np.zeros(index.topology.n)
    for pair, share in zip(index.od_pairs, w):
        paths = index.paths[pair]
        for path in paths:
            for i in path[:-1]:
                load[i] += share / len(paths)
    return load


def default_service_rate(topology: Topology, od_pairs, weights, mean_rate: float,
                         utilization: float = 0.7) -> float:
    """Uniform mu giving the requested mean node utilisation under warm-up routing."""
    load = expected_node_load(PathIndex.cached(topology, od_pairs), weights, mean_rate)
    return float(load.mean() / utilization)


class Env:
    """Mutable simulator state; advance with :meth:`step`."""

    def __init__(
        self,
        topology: Topology,
        node_specs: NodeSpec | Sequence[NodeSpec],
        link_specs: LinkSpec | Mapping[tuple[int, int], LinkSpec],
        od_pairs: Sequence[tuple[int, int]] | None = None,
        window: int = 40,
        od_weights: Sequence[float] | None = None,
        max_degree: int | None = None,
    ):
        self.window = window
        self.od_pairs = [tuple(p) for p in (od_pairs if od_pairs is not None else all_pairs(topology.n))]
        if not self.od_pairs:
            raise SimValidationError("need at least one OD pair")
        self.od_weights = list(od_weights) if od_weights is not None else [1.0] * len(self.od_pairs)
        if len(self.od_weights) != len(self.od_pairs) or min(self.od_weights) < 0:
            raise SimValidationError("OD weights must be non-negative, one per pair")
        if isinstance(node_specs, NodeSpec):
            node_specs = [node_specs] * topology.n
        if len(node_specs) != topology.n:
            raise SimValidationError(f"{len(node_specs)} node specs for {topology.n} nodes")
        self.node_specs = list(node_specs)
        self._link_default = link_specs if isinstance(link_specs, LinkSpec) else None
        self.link_specs = dict(link_specs) if not isinstance(link_specs, LinkSpec) else {}
        self.max_degree = max_degree if max_degree is not None else topology.max_degree()
        self.step_count = 0
        self.time = 0.0
        self.injected_total = 0
        self.delivered_total = 0
        self.dropped_total = 0
        self.in_flight = 0
        self._events: list = []
        self._seq = 0
        self._cohorts: dict[int, list] = {}  # id -> [path, count, inject_time, inject_step]
        self._next_cohort = 0
        self.cumulative_load: np.ndarray | None = None
        self._set_topology(topology, carry=False)
        self.node_hist = np.zeros((topology.n, window + 1))
        self.link_hist = np.zeros((topology.n, self.max_degree, window + 1))

    # -- topology plumbing -----------------------------------------------

    def _spec_for(self, i: int, j: int) -> LinkSpec:
        key = (min(i, j), max(i, j))
        if key in self.link_specs:
            return self.link_specs[key]
        if self._link_default is not None:
            return self._link_default
        raise SimValidationError(f"no link spec for edge {key}")

    def _set_topology(self, topology: Topology, carry: bool) -> None:
        if topology.max_degree() > self.max_degree:
            raise SimValidationError(
                f"topology max degree {topology.max_degree()} exceeds state width {self.max_degree}")
        for s, d in self.od_pairs:
            if s == d or not (0 <= s < topology.n and 0 <= d < topology.n):
                raise SimValidationError(f"bad OD pair {(s, d)}")
            if not topology.reachable(s, d):
                raise SimValidationError(f"OD pair {topology.names[s]}->{topology.names[d]} unreachable")
        old = self.__dict__.get("_channel_of")
        n = topology.n
        self.topology = topology
        self._nbrs = [topology.neighbors(i) for i in range(n)]
        self._channel_of: dict[tuple[int, int], int] = {}
        self._slot_of: dict[tuple[int, int], tuple[int, int]] = {}
        rates = [spec.service_rate for spec in self.node_specs]
        caps = [spec.buffer_capacity for spec in self.node_specs]
        for i in range(n):
            for k, j in enumerate(self._nbrs[i]):
                spec = self._spec_for(i, j)
                self._channel_of[(i, j)] = len(rates)
                self._slot_of[(i, j)] = (i, k)
                rates.append(spec.packet_rate)
                caps.append(spec.buffer_capacity)
        self._rates = rates
        self._caps = caps
        busy = [0.0] * len(rates)
        queues = [[] for _ in rates]
        load = np.zeros(len(rates))
        if carry:
            busy[:n] = self._busy[:n]
            queues[:n] = self._queues[:n]
            load[:n] = self.cumulative_load[:n]
            for key, c in old.items():
                if key in self._channel_of:
                    busy[self._channel_of[key]] = self._busy[c]
                    queues[self._channel_of[key]] = self._queues[c]
                    load[self._channel_of[key]] = self.cumulative_load[c]
        self._busy = busy
        self._queues = queues
        self.cumulative_load = load
        self.index = PathIndex.cached(topology, self.od_pairs)

    def apply_topology(self, topology: Topology) -> None:
        """Switch to a mutated topology, keeping queues and histories per link identity.

        Cohorts whose remaining route uses a removed link are dropped.
        """
        if topology.names != self.topology.names:
            raise SimValidationError("mutated topology must keep the node set")
        old_slots = dict(self._slot_of)
        old_link_hist = self.link_hist
        self._set_topology(topology, carry=True)
        self.link_hist = np.zeros_like(old_link_hist)
        for key, (i, k) in self._slot_of.items():
            if key in old_slots:
                oi, ok = old_slots[key]
                self.link_hist[i, k] = old_link_hist[oi, ok]
        keep = []
        for ev in self._events:
            path = self._cohorts[ev[2]][0]
            if all(topology.adjacency[u, v] for u, v in zip(path, path[1:])):
                keep.append(ev)
            else:
                count = self._cohorts.pop(ev[2])[1]
                self.dropped_total += count
                self.in_flight -= count
        heapq.heapify(keep)
        self._events = keep

    # -- observation -----------------------------------------------------

    @property
    def state_shape(self) -> tuple[int, int, int]:
        return (self.topology.n, self.max_degree + 1, self.window + 1)

    def observe_state(self) -> np.ndarray:
        """``(N, K+1, T+1)`` delays: slot 0 node delay, slots 1.. outgoing links; oldest first."""
        out = np.zeros(self.state_shape)
        out[:, 0, :] = self.node_hist
        out[:, 1:, :] = self.link_hist
        return out

    def digest(self) -> str:
        blob = pickle.dumps((
            self.step_count, self.time, self.injected_total, self.delivered_total,
            self.dropped_total, self.in_flight, sorted(self._events), sorted(self._cohorts.items()),
            self._busy, self._queues, self.node_hist.tobytes(), self.link_hist.tobytes(),
            self.cumulative_load.tobytes(),
        ))
        return hashlib.sha256(blob).hexdigest()

    def copy(self) -> "Env":
        """Independent copy; topology and path index are immutable and shared."""
        dup = copy.copy(self)
        dup._events = list(self._events)
        dup._cohorts = {cid: list(c) for cid, c in self._cohorts.items()}
        dup._busy = list(self._busy)
        dup._queues = [list(q) for q in self._queues]
        dup.cumulative_load = self.cumulative_load.copy()
        dup.node_hist = self.node_hist.copy()
        dup.link_hist = self.link_hist.copy()
        dup.node_specs = list(self.node_specs)
        dup.link_specs = dict(self.link_specs)
        dup.od_pairs = list(self.od_pairs)
        dup.od_weights = list(self.od_weights)
        return dup

    # -- dynamics --------------------------------------------------------

    def _inject(self, plan: RoutingPlan, rate: float) -> int:
        total = int(math.floor(rate + 0.5))
        per_pair = largest_remainder(total, self.od_weights)
        injected = 0
        t = float(self.step_count)
        for pair, count in zip(self.od_pairs, per_pair):
            if count == 0:
                continue
            entries = plan.routes.get(pair)
            if not entries:
                raise RoutingError(f"plan has no route for OD pair {pair}")
            split = largest_remainder(count, [share for _, share in entries])
            for (path, _), n in zip(entries, split):
                if n == 0:
                    continue
                cid = self._next_cohort
                self._next_cohort += 1
                self._cohorts[cid] = [tuple(path), n, t, self.step_count]
                heapq.heappush(self._events, (t, self._seq, cid, 0))
                self._seq += 1
                injected += n
        return injected

    def _check_plan(self, plan: RoutingPlan) -> None:
        adj = self.topology.adjacency
        for pair, entries in plan.routes.items():
            for path, _ in entries:
                for u, v in zip(path, path[1:]):
                    if not adj[u, v]:
                        raise RoutingError(f"plan for {pair} uses missing link ({u}, {v})")

    def step(self, plan: RoutingPlan, rate: float) -> StepMetrics:
        if rate < 0:
            raise SimValidationError("arrival rate must be non-negative")
        self._check_plan(plan)
        t = self.step_count
        end = t + 1.0
        in_flight_before = self.in_flight
        injected = self._inject(plan, rate)
        self.in_flight += injected
        self.injected_total += injected

        n_comp = len(self._rates)
        delay_sum = np.zeros(n_comp)
        delay_cnt = np.zeros(n_comp)
        delivered = on_time = dropped = 0
        e2e_sum = 0.0
        events, cohorts = self._events, self._cohorts
        busy, rates, caps, queues = self._busy, self._rates, self._caps, self._queues
        channel_of = self._channel_of
        load = self.cumulative_load
        while events and events[0][0] < end:
            te, _, cid, pos = heapq.heappop(events)
            coh = cohorts[cid]
            path, n = coh[0], coh[1]
            hop, on_link = divmod(pos, 2)
            if not on_link and hop == len(path) - 1:
                del cohorts[cid]
                delivered += n
                e2e_sum += n * (te - coh[2])
                if coh[3] == t:
                    on_time += n
                continue
            c = channel_of[(path[hop], path[hop + 1])] if on_link else path[hop]
            cap = caps[c]
            if cap is not None:
                q = queues[c]
                while q and q[0][0] <= te:
                    q.pop(0)
                waiting = sum(x[1] for x in q)
                admit = max(0, min(n, cap - waiting))
                if admit < n:
                    dropped += n - admit
                    n = coh[1] = admit
                    if n == 0:
                        del cohorts[cid]
                        continue
            start = te if te > busy[c] else busy[c]
            finish = start + n / rates[c]
            busy[c] = finish
            if cap is not None and start > te:
                queues[c].append((start, n))
            delay_sum[c] += n * (finish - te)
            delay_cnt[c] += n
            load[c] += n
            heapq.heappush(events, (finish, self._seq, cid, pos + 1))
            self._seq += 1

        self.in_flight -= delivered + dropped
        self.delivered_total += delivered
        self.dropped_total += dropped
        residual = self.conservation_residual()
        if residual or self.in_flight - in_flight_before != injected - delivered - dropped:
            raise ConsistencyError(f"packet conservation violated (residual {residual})")

        mean_delay = np.divide(delay_sum, delay_cnt, out=np.zeros(n_comp), where=delay_cnt > 0)
        n = self.topology.n
        self.node_hist = np.roll(self.node_hist, -1, axis=1)
        self.node_hist[:, -1] = mean_delay[:n]
        self.link_hist = np.roll(self.link_hist, -1, axis=2)
        self.link_hist[:, :, -1] = 0.0
        for (i, j), c in channel_of.items():
            self.link_hist[self._slot_of[(i, j)] + (-1,)] = mean_delay[c]
        self._last_busy = delay_cnt > 0

        self.step_count += 1
        self.time = end
        e2e = e2e_sum / delivered if delivered else 0.0
        throughput = on_time / injected if injected else 0.0
        reward = compute_reward(on_time, injected, e2e) if on_time else 0.0
        return StepMetrics(t, injected, delivered, on_time, dropped, self.in_flight,
                           e2e, throughput, reward)

    def conservation_residual(self) -> int:
        """``injected - delivered - dropped - live packets``, counting live cohorts directly."""
        live = sum(c[1] for c in self._cohorts.values())
        if live != self.in_flight:
            return self.in_flight - live or 1
        return self.injected_total - self.delivered_total - self.dropped_total - live

    def component_names(self) -> list[str]:
        names = self.topology.names
        out = list(names)
        for (i, j) in self._channel_of:
            out.append(f"{names[i]}->{names[j]}")
        return out

    def warmup(self, arrivals: ArrivalSeries, seed: int,
               criterion: WarmupCriterion = WarmupCriterion()) -> WarmupReport:
        """Route every pair over uniformly random simple paths until the network is loaded.

        Stops once ``min_steps`` have run, every node and link channel has
        served traffic, and over the trailing window the mean fraction of busy
        components reaches the threshold.  Hitting ``max_steps`` first returns
        with ``converged=False``, or raises if some component never saw a packet.
        """
        rng = np.random.default_rng(seed)
        recent: list[float] = []
        frac = 0.0
        for s in range(criterion.max_steps):
            routes = {pair: [(self.index.random_path(*pair, rng), 1.0)] for pair in self.od_pairs}
            self.step(RoutingPlan(routes), arrivals.at(s))
            recent = (recent + [float(self._last_busy.mean())])[-criterion.window:]
            frac = float(np.mean(recent))
            if (s + 1 >= criterion.min_steps and np.all(self.cumulative_load > 0)
                    and len(recent) == criterion.window and frac >= criterion.utilization):
                return WarmupReport(s + 1, True, frac)
        idle = [name for name, l in zip(self.component_names(), self.cumulative_load) if l == 0]
        if idle:
            raise SetupError(f"warm-up hit {criterion.max_steps} steps; idle components: {idle}")
        log.warning("warm-up hit the %d-step cap before reaching utilisation %.2f",
                    criterion.max_steps, criterion.utilization)
        return WarmupReport(criterion.max_steps, False, frac)


def init_env(topology: Topology, node_specs, link_specs, od_pairs=None, window: int = 40,
             **kwargs) -> Env:
    return Env(topology, node_specs, link_specs, od_pairs, window, **kwargs)
