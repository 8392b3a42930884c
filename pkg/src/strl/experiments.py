"""Training runs, variant comparison, topology-change inference and plot data."""
from __future__ import annotations

import csv
import io
import logging
import math
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import tensor
from .agent import Ddpg, DdpgConfig, train_episode
from .config import ExperimentConfig
from .netsim import Env, LinkSpec, NodeSpec, StepMetrics, WarmupCriterion, all_pairs, default_service_rate, metrics_csv
from .neural import Actor, ActorDims, Critic, Variant
from .pathing import build_routing_plan
from .topology import Topology, TopologyMutation, aarnet, apply_mutation, armidale_mutation, load_topology
from .traffic import ArrivalSeries, acf, ingest_trace, synthesize_arrivals

log = logging.getLogger(__name__)


class CompatibilityError(ValueError):
    pass


def write_atomic(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    tmp.replace(path)


def _seed_all(seed: int) -> None:
    torch.manual_seed(seed)
    torch.set_num_threads(1)


def load_topology_for(config: ExperimentConfig) -> Topology:
    topo = aarnet() if config.topology is None else load_topology(config.topology)
    if config.N is not None and config.N != topo.n:
        raise CompatibilityError(f"N: config says {config.N}, topology has {topo.n} nodes")
    return topo


def load_mutation_for(config: ExperimentConfig) -> TopologyMutation:
    if config.mutation is None:
        return armidale_mutation()
    return TopologyMutation.from_json(Path(config.mutation))


def arrivals_for(config: ExperimentConfig, seed: int) -> ArrivalSeries:
    if config.trace is not None:
        return ingest_trace(Path(config.trace))
    return synthesize_arrivals(config.P, config.synth_ar, config.synth_noise_sd * config.P,
                               config.synth_length, seed)


def actor_dims(config: ExperimentConfig, topology: Topology) -> ActorDims:
    return ActorDims(
        n_nodes=topology.n, max_degree=topology.max_degree(), window=config.T,
        features=config.F, hidden=config.d, d_q=config.d_q, d_k=config.d_k, d_v=config.d_v,
        d_out=config.d_prime, gat_in=config.K, gat_out=config.K_prime, mlp_hidden=config.phi,
        mlp_layers=config.mlp_layers, dropout=config.delta,
    )


def build_env(config: ExperimentConfig, topology: Topology, arrivals: ArrivalSeries) -> Env:
    pairs = all_pairs(topology.n)
    mu = config.service_rate or default_service_rate(
        topology, pairs, [1.0] * len(pairs), arrivals.mean(), config.utilization)
    link = LinkSpec(config.B * 1e6, config.packet_bits, config.link_buffer)
    return Env(topology, NodeSpec(mu, config.node_buffer), link, pairs, window=config.T)


def warm_env(config: ExperimentConfig, topology: Topology, arrivals: ArrivalSeries, seed: int):
    env = build_env(config, topology, arrivals)
    crit = WarmupCriterion(config.warmup_min_steps, config.warmup_utilization,
                           config.warmup_window, config.warmup_max_steps)
    report = env.warmup(arrivals, seed, crit)
    return env, report


def build_agent(config: ExperimentConfig, topology: Topology, variant: str, seed: int) -> Ddpg:
    dims = actor_dims(config, topology)
    actor = Actor(dims, variant, seed)
    actor.set_adjacency(topology.adjacency)
    critic = Critic(dims.state_shape, topology.n, config.phi, seed)
    ddpg_cfg = DdpgConfig(config.gamma, config.rho, config.eta_mu, config.eta_Q, config.M,
                          config.epsilon, config.epsilon_final, config.replay_capacity, config.optimizer)
    return Ddpg(actor, critic, ddpg_cfg, seed)


def plan_fn_for(env: Env, config: ExperimentConfig):
    def plan(action):
        return build_routing_plan(env.topology, action, env.od_pairs, config.k,
                                  index=env.index, top1=config.route_top1)
    return plan


@dataclass
class EpisodeRow:
    episode: int
    mean_reward: float
    throughput: float
    mean_delay: float


EPISODE_FIELDS = ("episode", "mean_reward", "throughput", "mean_delay")


def episodes_csv(rows: Sequence[EpisodeRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(EPISODE_FIELDS)
    for r in rows:
        w.writerow([r.episode, repr(r.mean_reward), repr(r.throughput), repr(r.mean_delay)])
    return buf.getvalue()


def read_episodes_csv(text: str) -> list[EpisodeRow]:
    reader = csv.DictReader(io.StringIO(text))
    if tuple(reader.fieldnames or ()) != EPISODE_FIELDS:
        raise ValueError(f"unexpected header {reader.fieldnames}")
    return [EpisodeRow(int(r["episode"]), float(r["mean_reward"]), float(r["throughput"]),
                       float(r["mean_delay"])) for r in reader]


def save_agent(path: Path, ddpg: Ddpg, config: ExperimentConfig, variant: str, seed: int,
               topology: Topology, episodes_done: int) -> None:
    manifest = {
        **ddpg.actor.manifest(),
        "variant": variant,
        "seed": seed,
        "topology": topology.names,
        "epsilon": ddpg.epsilon,
        "episodes_done": episodes_done,
        "updates": ddpg.updates,
        "config": config.to_dict(),
    }
    tensor.save_checkpoint(path, ddpg.tensors(), manifest)


def load_actor(path: Path, config: ExperimentConfig, topology: Topology) -> Actor:
    tensors, manifest = tensor.load_checkpoint(path)
    dims = actor_dims(config, topology)
    saved = ActorDims(**manifest["dims"])
    if saved != dims:
        raise CompatibilityError(f"checkpoint dims {saved} do not match config {dims}")
    if manifest["variant"] != config.variant:
        raise CompatibilityError(f"checkpoint variant {manifest['variant']} but config says {config.variant}")
    if manifest["topology"] != topology.names:
        raise CompatibilityError("checkpoint was trained on a different node set")
    actor = Actor(dims, manifest["variant"], manifest["seed"])
    sd = actor.state_dict()
    actor.load_state_dict({k: tensors[f"actor/{k}"].to(sd[k].dtype) for k in sd})
    actor.set_adjacency(topology.adjacency)
    return actor


def run_training(config: ExperimentConfig, seed: int, out_dir: str | Path | None = None,
                 variant: str | None = None) -> list[EpisodeRow]:
    """Warm up once, then train ``episodes`` episodes from the warmed snapshot.

    Every episode restarts from the same warmed network; the arrival series is
    consumed contiguously (wrapping) so successive episodes see new traffic.
    Writes ``episodes.csv`` and ``checkpoint.npz`` when ``out_dir`` is given.
    """
    variant = variant or config.variant
    _seed_all(seed)
    topo = load_topology_for(config)
    arrivals = arrivals_for(config, seed)
    warm, report = warm_env(config, topo, arrivals, seed)
    ddpg = build_agent(config, topo, variant, seed)
    rows = []
    for ep in range(config.episodes):
        env = warm.copy()
        ddpg.set_episode(ep, config.episodes)
        metrics = train_episode(env, ddpg, arrivals, config.steps, seed=seed * 100_003 + ep,
                                plan_fn=plan_fn_for(env, config),
                                offset=report.steps + ep * config.steps)
        rows.append(EpisodeRow(
            ep,
            float(np.mean([m.reward for m in metrics])) if metrics else 0.0,
            float(np.mean([m.throughput for m in metrics])) if metrics else 0.0,
            float(np.mean([m.mean_e2e_delay for m in metrics])) if metrics else 0.0,
        ))
        log.info("%s seed %d episode %d reward %.5f", variant, seed, ep, rows[-1].mean_reward)
    if out_dir is not None:
        out = Path(out_dir)
        write_atomic(out / "episodes.csv", episodes_csv(rows))
        out.mkdir(parents=True, exist_ok=True)
        save_agent(out / "checkpoint.npz", ddpg, config, variant, seed, topo, config.episodes)
    return rows


def final_mean(rows: Sequence[EpisodeRow], fraction: float = 0.1) -> float:
    n = max(1, int(math.ceil(len(rows) * fraction)))
    return float(np.mean([r.mean_reward for r in rows[-n:]]))


def pct_diff(a: float, b: float) -> float:
    return 100.0 * (a - b) / b if b != 0 else math.nan


@dataclass
class Comparison:
    finals: dict[str, dict[int, float]]  # variant -> seed -> final-10% mean reward

    def median(self, variant: str) -> float:
        return float(statistics.median(self.finals[variant].values()))

    def summary_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["variant", "seed", "final_mean_reward"])
        for v, per_seed in self.finals.items():
            for s, val in sorted(per_seed.items()):
                w.writerow([v, s, repr(val)])
            w.writerow([v, "median", repr(self.median(v))])
        w.writerow([])
        w.writerow(["variant_a", "variant_b", "pct_diff_median"])
        names = list(self.finals)
        for a in names:
            for b in names:
                if a != b:
                    w.writerow([a, b, repr(pct_diff(self.median(a), self.median(b)))])
        return buf.getvalue()


def _train_job(args):
    config, seed, out, variant = args
    return variant, seed, run_training(config, seed, out, variant)


def compare_variants(config: ExperimentConfig, variants: Sequence[str] = ("STRL", "SRL", "TRL"),
                     seeds: Sequence[int] | None = None, out_dir: str | Path | None = None,
                     jobs: int = 1) -> Comparison:
    """Train every (variant, seed) and summarise the final-10% mean episode reward."""
    if len(variants) < 2:
        raise ValueError("compare needs at least two variants")
    seeds = list(config.seeds if seeds is None else seeds)
    labels = [v if list(variants).count(v) == 1 else f"{v}#{i}" for i, v in enumerate(variants)]
    jobs_list = [
        (config, s, None if out_dir is None else Path(out_dir) / label / f"seed{s}", v)
        for label, v in zip(labels, variants) for s in seeds
    ]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            results = list(pool.map(_train_job, jobs_list))
    else:
        results = [_train_job(j) for j in jobs_list]
    finals: dict[str, dict[int, float]] = {label: {} for label in labels}
    for (label, (_, seed, rows)) in zip([l for l in labels for _ in seeds], results):
        finals[label][seed] = final_mean(rows)
    comp = Comparison(finals)
    if out_dir is not None:
        write_atomic(Path(out_dir) / "summary.csv", comp.summary_csv())
    return comp


def run_inference(config: ExperimentConfig, checkpoint: str | Path, seed: int, steps: int,
                  mutation: TopologyMutation | None = None,
                  out_dir: str | Path | None = None) -> list[StepMetrics]:
    """Greedy inference from the warmed network, optionally on a mutated topology.

    The network is warmed on the original topology; the mutation is applied
    right before the first inference step.  The actor keeps its dimensions and
    sees the new adjacency in its GAT layer.
    """
    _seed_all(seed)
    topo = load_topology_for(config)
    actor = load_actor(Path(checkpoint), config, topo)
    arrivals = arrivals_for(config, seed)
    env, report = warm_env(config, topo, arrivals, seed)
    if mutation is not None and not mutation.is_empty():
        new_topo = apply_mutation(topo, mutation, env.od_pairs)
        if new_topo.max_degree() > topo.max_degree():
            raise CompatibilityError("mutation raises the maximum degree beyond the state width")
        env.apply_topology(new_topo)
        actor.set_adjacency(new_topo.adjacency)
    plan = plan_fn_for(env, config)
    out = []
    offset = report.steps + config.episodes * config.steps
    with torch.no_grad():
        for i in range(steps):
            state = torch.as_tensor(env.observe_state(), dtype=tensor.DTYPE)
            action = actor(state, False, None).numpy()
            out.append(env.step(plan(action), arrivals.at(offset + i)))
    if out_dir is not None:
        write_atomic(Path(out_dir) / "inference.csv", metrics_csv(out))
    return out


def hidden_heatmap_csv(actor: Actor, state: np.ndarray, units: int, steps: int) -> str:
    """``step,unit,value`` triples of the GRU hidden sequence (first ``steps`` x ``units``)."""
    if not actor.variant.temporal:
        raise ValueError(f"{actor.variant.value} has no GRU")
    if not (1 <= units <= actor.dims.hidden and 1 <= steps <= actor.dims.window):
        raise ValueError(f"need 1 <= units <= {actor.dims.hidden} and 1 <= steps <= {actor.dims.window}")
    with torch.no_grad():
        H = actor.hidden_states(torch.as_tensor(state, dtype=tensor.DTYPE)).numpy()
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "unit", "value"])
    for t in range(steps):
        for u in range(units):
            w.writerow([t, u, repr(float(H[t, u]))])
    return buf.getvalue()


def acf_plotdata_csv(series: ArrivalSeries, max_lag: int = 40) -> str:
    return acf(series, max_lag).to_csv()


def heatmap_for(config: ExperimentConfig, checkpoint: str | Path | None, seed: int,
                units: int, steps: int) -> str:
    """Heatmap of the actor's GRU states on the warmed network's current state."""
    _seed_all(seed)
    topo = load_topology_for(config)
    if checkpoint is not None:
        actor = load_actor(Path(checkpoint), config, topo)
    else:
        actor = build_agent(config, topo, config.variant, seed).actor
    env, _ = warm_env(config, topo, arrivals_for(config, seed), seed)
    return hidden_heatmap_csv(actor, env.observe_state(), units, steps)
