"""Server and client logic of the federated protocol, simulated in-process.

One FL round: the server samples participants, sends each one sigma and the
global prototypes of the classes it holds, every participant trains its
classifier and its decoder alternately, then uploads class prototypes and its
sigma for unweighted averaging. After the last round the decoders are averaged
into a global decoder, which every client uses to synthesize a class-balanced
dataset and fine-tune its classifier without further communication.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn

from .accounting import SERVER, CommLedger, client_name
from .config import RunConfig
from .data import DatasetBundle, PartitionSpec
from .errors import ConfigError, GenerationError, NonFiniteLossError, ProtocolError
from .evaluation import evaluate_generalization
from .losses import SIGMA_MIN, LossBreakdown, dm_loss, elbo_loss, reparameterize, vtc_loss
from .models import (
    DatasetProfile,
    LocalModel,
    VtcDecoder,
    arch_clusters,
    build_local_model,
    build_vtc_decoder,
    classification_loss,
    cluster_for_client,
    get_profile,
    local_prototypes,
)

log = logging.getLogger(__name__)

Prototypes = Dict[int, torch.Tensor]


@dataclass
class ClientState:
    client_id: int
    model: LocalModel
    decoder: VtcDecoder
    sigma: torch.Tensor
    shard: np.ndarray
    classes: List[int]
    generator: torch.Generator
    prototypes: Prototypes = field(default_factory=dict)


@dataclass
class ServerState:
    p: int
    num_classes: int
    sigma: torch.Tensor
    registry: Dict[int, set]
    prototypes: Prototypes = field(default_factory=dict)
    decoder: Optional[VtcDecoder] = None
    round: int = 0
    # regular mode: last decoder state uploaded by each client
    decoder_cache: Dict[int, dict] = field(default_factory=dict)

    def classes_of(self, client_id: int) -> List[int]:
        return sorted(y for y, owners in self.registry.items() if client_id in owners)

    @property
    def uninitialized(self) -> List[int]:
        return [y for y in range(self.num_classes) if y not in self.prototypes]


@dataclass
class RoundMessage:
    prototypes: Prototypes
    sigma: torch.Tensor


@dataclass
class RoundResult:
    prototypes: Prototypes
    sigma: torch.Tensor
    losses: Dict[str, float]


@dataclass
class SyntheticDataset:
    x: torch.Tensor
    y: torch.Tensor
    latents: torch.Tensor

    def __len__(self):
        return len(self.y)

    def class_counts(self) -> Dict[int, int]:
        classes, counts = torch.unique(self.y, return_counts=True)
        return dict(zip(classes.tolist(), counts.tolist()))


def build_registry(partition: PartitionSpec, labels) -> Dict[int, set]:
    registry: Dict[int, set] = {}
    for k in range(partition.num_clients):
        for y in partition.classes_of(labels, k):
            registry.setdefault(y, set()).add(k)
    return registry


# ------------------------------------------------------------------ server side

def select_clients(num_clients: int, count: int, rng: np.random.Generator) -> List[int]:
    if not 0 < count <= num_clients:
        raise ConfigError(f"cannot select {count} of {num_clients} clients")
    return sorted(rng.choice(num_clients, size=count, replace=False).tolist())


def broadcast_round_state(server: ServerState, selected: Sequence[int], ledger: Optional[CommLedger] = None, round: Optional[int] = None) -> Dict[int, RoundMessage]:
    rnd = server.round if round is None else round
    messages = {}
    for k in selected:
        protos = {y: server.prototypes[y].clone() for y in server.classes_of(k) if y in server.prototypes}
        messages[k] = RoundMessage(protos, server.sigma.clone())
        if ledger is not None:
            for y, c in protos.items():
                ledger.record(rnd, "down", SERVER, client_name(k), "prototype", c.numel(), tag=y)
            ledger.record(rnd, "down", SERVER, client_name(k), "sigma", server.sigma.numel())
    return messages


def aggregate_prototypes(uploads: Mapping[int, Prototypes], previous: Optional[Prototypes] = None) -> Prototypes:
    """Unweighted per-class mean over the clients that uploaded that class.

    Classes nobody uploaded keep their ``previous`` value.
    """
    merged: Prototypes = dict(previous or {})
    per_class: Dict[int, List[torch.Tensor]] = {}
    for k in sorted(uploads):
        for y, c in uploads[k].items():
            per_class.setdefault(y, []).append(c)
    for y, vecs in per_class.items():
        merged[y] = torch.stack(vecs).sum(dim=0) / len(vecs)
    return dict(sorted(merged.items()))


def aggregate_sigma(uploads: Sequence[torch.Tensor]) -> torch.Tensor:
    if not uploads:
        raise ProtocolError("no sigma uploads to aggregate")
    shapes = {tuple(s.shape) for s in uploads}
    if len(shapes) != 1:
        raise ProtocolError(f"sigma uploads disagree in length: {sorted(shapes)}")
    return (torch.stack(list(uploads)).sum(dim=0) / len(uploads)).clamp_min(SIGMA_MIN)


def _state_of(d):
    return d.state_dict() if isinstance(d, nn.Module) else d


def aggregate_decoder(decoders: Sequence) -> VtcDecoder:
    """Parameter-wise unweighted mean of identically shaped decoders.

    Accepts modules or state dicts; returns a module when at least one module
    was given, otherwise a state dict. Integer buffers take the maximum.
    """
    if not decoders:
        raise ProtocolError("no decoders to aggregate")
    states = [_state_of(d) for d in decoders]
    ref = states[0]
    for s in states[1:]:
        if s.keys() != ref.keys() or any(s[k].shape != ref[k].shape for k in ref):
            raise ProtocolError("decoder architectures differ; cannot aggregate")
    avg = {}
    for key, t in ref.items():
        stacked = torch.stack([s[key] for s in states])
        avg[key] = stacked.sum(dim=0) / len(states) if t.is_floating_point() else stacked.max(dim=0).values
    template = next((d for d in decoders if isinstance(d, nn.Module)), None)
    if template is None:
        return avg
    out = copy.deepcopy(template)
    out.load_state_dict(avg)
    return out


def decoder_elements(decoder: nn.Module) -> int:
    """Elements transmitted for one decoder: every floating-point state tensor."""
    return sum(t.numel() for t in decoder.state_dict().values() if t.is_floating_point())


# ------------------------------------------------------------------ client side

def _make_optimizer(params, kind: str, lr: float):
    if kind == "adam":
        return torch.optim.Adam(params, lr=lr)
    return torch.optim.SGD(params, lr=lr)


def _check_finite(loss: torch.Tensor, what: str, context: dict) -> None:
    if not torch.isfinite(loss):
        raise NonFiniteLossError(f"non-finite {what} loss", context)


def client_local_round(
    client: ClientState,
    message: RoundMessage,
    config: RunConfig,
    x: torch.Tensor,
    y: torch.Tensor,
    round: int = 0,
) -> RoundResult:
    """Alternating local training for ``config.epochs`` epochs, then prototypes.

    Per minibatch, step A updates the classifier on cross-entropy plus the VTC
    loss with decoder and sigma frozen (generated samples are constants in the
    DM term); step B updates decoder and sigma on the VTC loss with the
    classifier frozen.
    """
    model, decoder = client.model, client.decoder
    client.sigma = message.sigma.detach().clone().to(x.dtype)
    if not client.prototypes:
        client.prototypes = local_prototypes(model, x, y)
    # global prototypes where known, own prototypes otherwise (cold start)
    targets = {c: message.prototypes.get(c, client.prototypes.get(c)) for c in client.classes}
    targets = {c: v.to(x.dtype) for c, v in targets.items() if v is not None}

    lam = config.lam if config.train_mode == "full" else 0.0
    sigma = client.sigma.clone().requires_grad_(True)
    opt_f = _make_optimizer(model.parameters(), config.optimizer, config.lr)
    opt_psi = _make_optimizer(list(decoder.parameters()) + [sigma], config.optimizer, config.lr)
    g = client.generator

    sums = {"ce": 0.0, "reconstruction": 0.0, "kl": 0.0, "dm": 0.0, "total": 0.0}
    steps = 0
    model.train()
    decoder.train()
    for _ in range(config.epochs):
        order = torch.randperm(len(x), generator=g)
        for start in range(0, len(x), config.batch_size):
            idx = order[start:start + config.batch_size]
            xb, yb = x[idx], y[idx]
            ctx = {"client": client.client_id, "round": round}

            # step A: classifier update, decoder and sigma frozen
            decoder.requires_grad_(False)
            z = model.features(xb)
            ce = classification_loss(model.head(z), yb)
            noise = torch.randn(z.shape, generator=g, dtype=z.dtype)
            x_gen = decoder(reparameterize(z, sigma.detach(), noise))
            elbo = elbo_loss(xb, z, x_gen, yb, targets, sigma.detach())
            dm = dm_loss(model.features(x_gen.detach()), yb, targets) if lam > 0 else z.new_zeros(())
            tc = vtc_loss(elbo, dm, lam)
            loss_a = ce + tc.total
            _check_finite(loss_a, "step-A", {**ctx, "ce": float(ce.detach()), **tc.as_floats()})
            opt_f.zero_grad(set_to_none=True)
            loss_a.backward()
            opt_f.step()
            decoder.requires_grad_(True)

            # step B: decoder and sigma update, classifier frozen
            model.requires_grad_(False)
            with torch.no_grad():
                z = model.features(xb)
            noise = torch.randn(z.shape, generator=g, dtype=z.dtype)
            x_gen = decoder(reparameterize(z, sigma, noise))
            elbo_b = elbo_loss(xb, z, x_gen, yb, targets, sigma)
            dm_b = dm_loss(model.features(x_gen), yb, targets) if lam > 0 else z.new_zeros(())
            tc_b = vtc_loss(elbo_b, dm_b, lam)
            _check_finite(tc_b.total, "step-B", {**ctx, **tc_b.as_floats()})
            opt_psi.zero_grad(set_to_none=True)
            tc_b.total.backward()
            opt_psi.step()
            with torch.no_grad():
                sigma.clamp_(min=SIGMA_MIN)
            model.requires_grad_(True)

            sums["ce"] += float(ce.detach())
            for key, val in tc.as_floats().items():
                sums[key] += val
            steps += 1

    client.sigma = sigma.detach().clone()
    client.prototypes = local_prototypes(model, x, y)
    losses = {k: v / steps for k, v in sums.items()} if steps else {}
    return RoundResult(dict(client.prototypes), client.sigma.clone(), losses)


def generate_synthetic(
    decoder: VtcDecoder,
    prototypes: Prototypes,
    sigma: torch.Tensor,
    size: int,
    generator: Optional[torch.Generator] = None,
    num_classes: Optional[int] = None,
) -> SyntheticDataset:
    """Class-balanced samples decoded from latents ``c^y + sigma * eps``.

    The ``size % n_classes`` leftover samples go one each to the lowest class ids.
    """
    classes = sorted(prototypes)
    if not classes:
        raise GenerationError("no initialized prototypes to generate from")
    if num_classes is not None and len(classes) < num_classes:
        missing = sorted(set(range(num_classes)) - set(classes))
        log.warning("skipping %d class(es) without a prototype: %s", len(missing), missing)
    base, extra = divmod(size, len(classes))
    labels, centers = [], []
    for i, cls in enumerate(classes):
        n = base + (1 if i < extra else 0)
        labels += [cls] * n
        centers += [prototypes[cls]] * n
    if not labels:
        raise GenerationError(f"cannot generate {size} samples")
    centers_t = torch.stack(centers)
    noise = torch.randn(centers_t.shape, generator=generator, dtype=centers_t.dtype)
    latents = reparameterize(centers_t, sigma.to(centers_t.dtype), noise)
    was_training = decoder.training
    decoder.eval()
    try:
        with torch.no_grad():
            x = decoder(latents)
    finally:
        decoder.train(was_training)
    return SyntheticDataset(x, torch.tensor(labels, dtype=torch.long), latents)


def fine_tune(
    client: ClientState,
    synth: SyntheticDataset,
    passes: int,
    lr: float,
    batch_size: int = 16,
    optimizer: str = "sgd",
    after_pass: Optional[Callable[[ClientState, int], None]] = None,
) -> ClientState:
    """``passes`` epochs of minibatch cross-entropy training on synthetic data."""
    if len(synth) == 0:
        raise GenerationError("synthetic dataset is empty")
    model = client.model
    opt = _make_optimizer(model.parameters(), optimizer, lr)
    model.train()
    for j in range(1, passes + 1):
        order = torch.randperm(len(synth), generator=client.generator)
        for start in range(0, len(synth), batch_size):
            idx = order[start:start + batch_size]
            loss = classification_loss(model(synth.x[idx]), synth.y[idx])
            _check_finite(loss, "fine-tune", {"client": client.client_id, "pass": j, "ce": float(loss.detach())})
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
        if after_pass is not None:
            after_pass(client, j)
    return client


# ------------------------------------------------------------------ full run

@dataclass
class RunResult:
    config: RunConfig
    records: List[dict]
    ledger: CommLedger
    selections: List[List[int]]
    client_classes: Dict[int, List[int]]
    p: int
    decoder_elements: int
    clients: List[ClientState]
    server: ServerState
    dump_seed: int = 0

    @property
    def final_accuracy(self) -> float:
        return self.records[-1]["mean_accuracy"]

    @property
    def pre_finetune_accuracy(self) -> float:
        return [r for r in self.records if r["phase"] == "fl"][-1]["mean_accuracy"]


def _derive_seeds(seed: int, num_clients: int):
    root = np.random.SeedSequence(seed)
    server_ss, init_ss, dump_ss, *client_ss = root.spawn(num_clients + 3)
    init_seeds = init_ss.generate_state(num_clients + 1, dtype=np.uint32).tolist()
    client_seeds = [int(s.generate_state(1, dtype=np.uint32)[0]) for s in client_ss]
    return np.random.default_rng(server_ss), init_seeds, client_seeds, int(dump_ss.generate_state(1)[0])


def setup_run(config: RunConfig, bundle: DatasetBundle, partition: PartitionSpec):
    profile: DatasetProfile = get_profile(config.profile)
    if tuple(bundle.input_shape) != profile.input_shape:
        raise ConfigError(f"data shape {bundle.input_shape} does not match profile {profile.name} {profile.input_shape}")
    if partition.num_clients != config.clients:
        raise ConfigError(f"partition has {partition.num_clients} shards, config expects {config.clients} clients")
    K, p, C = config.clients, profile.p, bundle.num_classes
    server_rng, init_seeds, client_seeds, dump_seed = _derive_seeds(config.seed, K)
    clusters = arch_clusters(config.clusters)
    decoder = build_vtc_decoder(profile, p, init_seeds[K])
    labels = bundle.train_y.numpy()
    clients = []
    for k in range(K):
        arch = cluster_for_client(k, clusters)
        model = build_local_model(arch, profile.input_shape, p, C, init_seeds[k],
                                  latent_shape=profile.latent_shape, base_width=profile.base_width)
        gen = torch.Generator().manual_seed(client_seeds[k])
        shard = np.asarray(partition.shards[k], dtype=np.int64)
        clients.append(ClientState(k, model, copy.deepcopy(decoder), torch.full((p,), config.sigma_init), shard,
                                   partition.classes_of(labels, k), gen))
    server = ServerState(p, C, torch.full((p,), config.sigma_init), build_registry(partition, labels))
    if config.tc_mode == "regular":
        server.decoder_cache = {k: copy.deepcopy(decoder.state_dict()) for k in range(K)}
    return profile, clients, server, server_rng, dump_seed


def run_experiment(
    config: RunConfig,
    bundle: DatasetBundle,
    partition: PartitionSpec,
    progress: Optional[Callable[[dict], None]] = None,
) -> RunResult:
    profile, clients, server, server_rng, dump_seed = setup_run(config, bundle, partition)
    K, T, p = config.clients, config.rounds, profile.p
    ledger = CommLedger()
    records: List[dict] = []
    selections: List[List[int]] = []
    test_x, test_y = bundle.test_x, bundle.test_y
    models = [c.model for c in clients]

    def emit(record):
        records.append(record)
        if progress is not None:
            progress(record)

    for t in range(1, T + 1):
        server.round = t
        selected = select_clients(K, config.participants, server_rng)
        selections.append(selected)
        messages = broadcast_round_state(server, selected, ledger, t)
        proto_up, sigma_up, losses = {}, [], {}
        for k in selected:
            c = clients[k]
            try:
                res = client_local_round(c, messages[k], config, bundle.train_x[c.shard], bundle.train_y[c.shard], round=t)
            except NonFiniteLossError:
                log.error("round %d client %d aborted", t, k)
                raise
            for y, proto in res.prototypes.items():
                ledger.record(t, "up", client_name(k), SERVER, "prototype", proto.numel(), tag=y)
            ledger.record(t, "up", client_name(k), SERVER, "sigma", res.sigma.numel())
            proto_up[k], losses[str(k)] = res.prototypes, res.losses
            sigma_up.append(res.sigma)
            if config.tc_mode == "regular":
                ledger.record(t, "up", client_name(k), SERVER, "decoder", decoder_elements(c.decoder))
                server.decoder_cache[k] = copy.deepcopy(c.decoder.state_dict())
        server.prototypes = aggregate_prototypes(proto_up, server.prototypes)
        server.sigma = aggregate_sigma(sigma_up)
        if config.tc_mode == "regular":
            if server.decoder is None:
                server.decoder = copy.deepcopy(clients[0].decoder)
            server.decoder.load_state_dict(aggregate_decoder([server.decoder_cache[k] for k in range(K)]))
        accs, mean = evaluate_generalization(models, test_x, test_y)
        emit({
            "run": config.name, "seed": config.seed, "phase": "fl", "round": t,
            "selected": selected, "accuracy": accs, "mean_accuracy": mean,
            "losses": losses, "ledger_bytes": _total(ledger),
        })

    # decoder exchange and final broadcast, logged as round T + 1
    final_round = T + 1
    if config.tc_mode == "singular":
        for c in clients:
            ledger.record(final_round, "up", client_name(c.client_id), SERVER, "decoder", decoder_elements(c.decoder))
        server.decoder = aggregate_decoder([c.decoder for c in clients])
    for c in clients:
        name = client_name(c.client_id)
        ledger.record(final_round, "down", SERVER, name, "decoder", decoder_elements(server.decoder))
        for y, proto in server.prototypes.items():
            ledger.record(final_round, "down", SERVER, name, "prototype", proto.numel(), tag=y)
        ledger.record(final_round, "down", SERVER, name, "sigma", server.sigma.numel())

    # local generation and fine-tuning; no messages from here on
    ft_acc = {j: [0.0] * K for j in range(1, config.finetune_rounds + 1)}

    def record_pass(client: ClientState, j: int):
        acc, _ = evaluate_generalization([client.model], test_x, test_y)
        ft_acc[j][client.client_id] = acc[0]

    if config.finetune_rounds > 0:
        for c in clients:
            synth = generate_synthetic(copy.deepcopy(server.decoder), server.prototypes, server.sigma,
                                       config.synthetic, c.generator, num_classes=server.num_classes)
            fine_tune(c, synth, config.finetune_rounds, config.effective_finetune_lr,
                      config.batch_size, config.optimizer, after_pass=record_pass)
    for j, accs in ft_acc.items():
        emit({
            "run": config.name, "seed": config.seed, "phase": "finetune", "round": T + j,
            "selected": [], "accuracy": accs, "mean_accuracy": sum(accs) / K,
            "losses": {}, "ledger_bytes": _total(ledger),
        })

    result = RunResult(config, records, ledger, selections, {c.client_id: c.classes for c in clients},
                       p, decoder_elements(server.decoder), clients, server, dump_seed)
    return result


def _total(ledger: CommLedger) -> int:
    return sum(e.bytes for e in ledger.entries)
