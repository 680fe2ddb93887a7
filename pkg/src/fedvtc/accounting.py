"""Communication ledger and training-memory estimates.

Byte convention: every transmitted element is a 32-bit float, no compression
and no framing overhead. Every directed message is logged, so a broadcast to
``n`` clients costs ``n`` entries.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence

import torch
import torch.nn as nn

BYTES_PER_ELEMENT = 4
SERVER = "server"
PAYLOAD_KINDS = ("prototype", "sigma", "decoder")


def client_name(k: int) -> str:
    return f"client-{k}"


@dataclass(frozen=True)
class LedgerEntry:
    round: int
    direction: str  # "up" (client -> server) or "down"
    sender: str
    receiver: str
    kind: str
    elements: int
    bytes: int
    tag: str = ""  # class id for prototypes

    COLUMNS = ("round", "direction", "sender", "receiver", "kind", "elements", "bytes", "tag")

    def to_row(self) -> str:
        return "\t".join(str(getattr(self, c)) for c in self.COLUMNS)


class CommLedger:
    """Append-only message log. Appends are serialized through a lock."""

    def __init__(self):
        self._entries: List[LedgerEntry] = []
        self._lock = threading.Lock()

    def record(self, round: int, direction: str, sender: str, receiver: str, kind: str, elements: int, tag="") -> LedgerEntry:
        if direction not in ("up", "down"):
            raise ValueError(f"direction must be 'up' or 'down', got {direction!r}")
        if kind not in PAYLOAD_KINDS:
            raise ValueError(f"unknown payload kind {kind!r}")
        entry = LedgerEntry(round, direction, sender, receiver, kind, int(elements), int(elements) * BYTES_PER_ELEMENT, str(tag))
        with self._lock:
            self._entries.append(entry)
        return entry

    @property
    def entries(self) -> tuple:
        with self._lock:
            return tuple(self._entries)

    def __len__(self):
        return len(self._entries)

    def to_tsv(self) -> str:
        lines = ["\t".join(LedgerEntry.COLUMNS)]
        lines.extend(e.to_row() for e in self.entries)
        return "\n".join(lines) + "\n"

    def summary(self) -> str:
        rows = ["kind\tdirection\tmessages\tbytes"]
        for kind in PAYLOAD_KINDS:
            for direction in ("up", "down"):
                sel = [e for e in self.entries if e.kind == kind and e.direction == direction]
                rows.append(f"{kind}\t{direction}\t{len(sel)}\t{sum(e.bytes for e in sel)}")
        rows.append(f"total\t-\t{len(self)}\t{ledger_total(self)}")
        return "\n".join(rows) + "\n"


def ledger_total(ledger: CommLedger, filter: Optional[Callable[[LedgerEntry], bool]] = None, **fields) -> int:
    """Sum of bytes over entries matching ``filter`` and all ``field=value`` pairs."""
    total = 0
    for e in ledger.entries:
        if filter is not None and not filter(e):
            continue
        if any(getattr(e, k) != v for k, v in fields.items()):
            continue
        total += e.bytes
    return total


def closed_form_bytes(
    selections: Sequence[Sequence[int]],
    client_classes: Mapping[int, Iterable[int]],
    p: int,
    decoder_elements: int,
    num_clients: int,
    tc_mode: str,
) -> int:
    """Total bytes a run must log, recomputed from who was selected each round.

    Per round, each participant receives sigma plus the prototypes of its
    classes that some earlier participant has already uploaded, then uploads
    one prototype per class it holds plus its sigma. After the last round every
    client receives the decoder, all known prototypes and sigma; decoders are
    uploaded once per client (singular) or once per participation (regular).
    """
    initialized: set = set()
    elements = 0
    uploads = 0
    for chosen in selections:
        for k in chosen:
            own = set(client_classes[k])
            elements += (len(own & initialized) + len(own)) * p + 2 * p
        for k in chosen:
            initialized |= set(client_classes[k])
        uploads += len(chosen)
    if tc_mode == "singular":
        uploads = num_clients
    elif tc_mode != "regular":
        raise ValueError(f"unknown tc_mode {tc_mode!r}")
    elements += (uploads + num_clients) * decoder_elements
    elements += num_clients * (len(initialized) * p + p)
    return BYTES_PER_ELEMENT * elements


# ------------------------------------------------------------------ memory

@dataclass
class MemoryEntry:
    name: str
    param_bytes: int
    grad_bytes: int
    activation_bytes: int

    @property
    def total(self) -> int:
        return self.param_bytes + self.grad_bytes + self.activation_bytes


def _leaf_activation_elements(module: nn.Module, example: torch.Tensor) -> int:
    counted = 0
    hooks = []

    def hook(_mod, _inp, out):
        nonlocal counted
        if isinstance(out, torch.Tensor):
            counted += out.numel()

    for m in module.modules():
        if not any(True for _ in m.children()):
            hooks.append(m.register_forward_hook(hook))
    was_training = module.training
    try:
        module.eval()
        with torch.no_grad():
            module(example)
    finally:
        module.train(was_training)
        for h in hooks:
            h.remove()
    return counted


def estimate_memory(module: nn.Module, input_shape: Sequence[int], batch_size: int, name: str = "", trainable: bool = True) -> MemoryEntry:
    """Parameters + gradients + leaf-layer outputs for one step at ``batch_size``."""
    n_params = sum(p.numel() for p in module.parameters())
    example = torch.zeros(batch_size, *input_shape)
    acts = _leaf_activation_elements(module, example)
    return MemoryEntry(
        name=name or type(module).__name__,
        param_bytes=n_params * BYTES_PER_ELEMENT,
        grad_bytes=(n_params if trainable else 0) * BYTES_PER_ELEMENT,
        activation_bytes=acts * BYTES_PER_ELEMENT,
    )


@dataclass
class MemoryReport:
    arch: str
    batch_size: int
    model: MemoryEntry
    extractor_activation_bytes: int
    decoder: MemoryEntry
    sigma_bytes: int
    step_a: int = field(init=False)
    step_b: int = field(init=False)
    simultaneous: int = field(init=False)

    def __post_init__(self):
        m, d, s = self.model, self.decoder, self.sigma_bytes
        gen_acts = self.extractor_activation_bytes  # extractor pass over generated samples (DM term)
        # step A: f trainable; decoder frozen but back-propagated through; sigma held
        self.step_a = m.total + gen_acts + d.param_bytes + d.activation_bytes + s
        # step B: decoder and sigma trainable; f frozen, latents of the real batch taken without grad
        self.step_b = d.total + 2 * s + m.param_bytes + gen_acts
        self.simultaneous = m.total + gen_acts + d.total + 2 * s

    @property
    def alternating_peak(self) -> int:
        return max(self.step_a, self.step_b)

    def row(self) -> Dict[str, int]:
        return {
            "arch": self.arch,
            "batch_size": self.batch_size,
            "model_bytes": self.model.total,
            "decoder_bytes": self.decoder.total,
            "step_a_bytes": self.step_a,
            "step_b_bytes": self.step_b,
            "alternating_peak_bytes": self.alternating_peak,
            "simultaneous_bytes": self.simultaneous,
        }


def schedule_report(model, decoder, input_shape: Sequence[int], p: int, batch_size: int, arch: str = "") -> MemoryReport:
    extractor = getattr(model, "extractor", model)
    return MemoryReport(
        arch=arch or f"arch-{getattr(model, 'arch_id', '?')}",
        batch_size=batch_size,
        model=estimate_memory(model, input_shape, batch_size, "model"),
        extractor_activation_bytes=estimate_memory(extractor, input_shape, batch_size).activation_bytes,
        decoder=estimate_memory(decoder, (p,), batch_size, "decoder"),
        sigma_bytes=p * BYTES_PER_ELEMENT,
    )


def memory_table(reports: Sequence[MemoryReport]) -> str:
    if not reports:
        return ""
    cols = list(reports[0].row())
    lines = ["\t".join(cols)]
    for r in reports:
        row = r.row()
        lines.append("\t".join(str(row[c]) for c in cols))
    return "\n".join(lines) + "\n"
