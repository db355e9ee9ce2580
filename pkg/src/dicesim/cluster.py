"""Device placement and the alpha-beta communication/compute timeline.

Device clocks are kept as (compute elements, comm seconds) pairs. Compute
element counts are integers in practice, and integer float64 sums are exact,
so schedules that charge the same work in a different order land on
bit-identical clocks. Seconds are derived on read.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, ContractError
from .model import RouteDecision

# Default calibration, fitted so the synchronous schedule's all-to-all share
# of step time tracks the target 61.7/69.8/73.3 percent at batch 4/8/16 on
# the xl-toy preset with 8 devices. See calibration.py for the solver.
DEFAULT_ALPHA = 0.0
DEFAULT_BETA = 1.3289168938023188e-07
DEFAULT_COMPUTE_RATE = 1.0e9
DEFAULT_OP_OVERHEAD = 31403
DEFAULT_NUM_DEVICES = 8


@dataclass(frozen=True)
class ClusterConfig:
    num_devices: int = DEFAULT_NUM_DEVICES
    alpha: float = DEFAULT_ALPHA            # seconds per all-to-all launch
    beta: float = DEFAULT_BETA              # seconds per payload byte
    bytes_per_element: int = 2              # on-wire activation element width
    compute_rate: float = DEFAULT_COMPUTE_RATE   # elements per second
    # Fixed per-kernel cost expressed in elements; models launch overhead and
    # weight traffic, and gives compute the sublinear batch scaling that the
    # calibration targets require.
    op_overhead_elements: int = DEFAULT_OP_OVERHEAD

    def __post_init__(self):
        if self.num_devices < 1:
            raise ConfigurationError(f"num_devices must be >= 1, got {self.num_devices}")
        if self.alpha < 0 or self.beta < 0:
            raise ConfigurationError("alpha and beta must be >= 0")
        if self.bytes_per_element < 1:
            raise ConfigurationError("bytes_per_element must be >= 1")
        if not self.compute_rate > 0:
            raise ConfigurationError("compute_rate must be > 0")
        if self.op_overhead_elements < 0:
            raise ConfigurationError("op_overhead_elements must be >= 0")


@dataclass(frozen=True)
class Placement:
    """Static expert-to-device and token-row-to-device maps."""
    expert_device: np.ndarray    # [num_experts] int
    token_home: np.ndarray       # [rows] int
    num_devices: int


def build_placement(num_experts: int, num_devices: int, num_rows: int) -> Placement:
    """Contiguous expert blocks and near-even contiguous token shards."""
    if num_devices < 1:
        raise ConfigurationError(f"num_devices must be >= 1, got {num_devices}")
    if num_experts % num_devices != 0:
        raise ConfigurationError(
            f"num_experts={num_experts} not divisible by num_devices={num_devices}")
    per_device = num_experts // num_devices
    expert_device = np.arange(num_experts) // per_device
    token_home = (np.arange(num_rows) * num_devices) // num_rows
    return Placement(expert_device=expert_device, token_home=token_home,
                     num_devices=num_devices)


def _pair_devices(route: RouteDecision, placement: Placement):
    """Source and target device per (token, slot) pair."""
    src = placement.token_home[:, None]                  # [n, 1]
    dst = placement.expert_device[route.expert_ids]      # [n, k]
    return np.broadcast_to(src, dst.shape), dst


def plan_all_to_all(route: RouteDecision, placement: Placement,
                    active: np.ndarray | None, hidden_dim: int,
                    bytes_per_element: int) -> int:
    """Total on-wire bytes for one direction: remote active pairs only."""
    src, dst = _pair_devices(route, placement)
    remote = src != dst
    if active is not None:
        remote = remote & active
    return int(np.count_nonzero(remote)) * hidden_dim * bytes_per_element


def per_device_bytes(route: RouteDecision, placement: Placement,
                     active: np.ndarray | None, hidden_dim: int,
                     bytes_per_element: int, direction: str) -> np.ndarray:
    """Bytes each device puts on the wire for one collective.

    Dispatch traffic originates at the token's home shard; combine traffic
    returns from the expert's device. Local pairs cost nothing either way.
    """
    if direction not in ("dispatch", "combine"):
        raise ContractError(f"direction must be dispatch or combine, got {direction!r}")
    src, dst = _pair_devices(route, placement)
    remote = src != dst
    if active is not None:
        remote = remote & active
    origin = src if direction == "dispatch" else dst
    counts = np.bincount(origin[remote].ravel(), minlength=placement.num_devices)
    return counts * hidden_dim * bytes_per_element


@dataclass(frozen=True)
class CommHandle:
    device: int
    kind: str
    launch_time: float
    payload_bytes: int
    ready_time: float


@dataclass(frozen=True)
class CollectiveHandle:
    """One all-to-all across all devices: completes at the slowest member."""
    kind: str
    handles: tuple

    @property
    def ready_time(self) -> float:
        return max(h.ready_time for h in self.handles)


@dataclass
class TimelineEvent:
    device: int
    kind: str      # compute | comm-launch | comm-wait-stall
    start: float
    end: float
    label: str


@dataclass
class SimTimeline:
    cluster: ClusterConfig
    events: list = field(default_factory=list)
    _elems: np.ndarray = None      # integer-valued compute elements per device
    _comm: np.ndarray = None       # stall seconds per device

    def __post_init__(self):
        d = self.cluster.num_devices
        self._elems = np.zeros(d, dtype=np.float64)
        self._comm = np.zeros(d, dtype=np.float64)

    def clock(self, device: int) -> float:
        return self._elems[device] / self.cluster.compute_rate + self._comm[device]

    def charge_compute(self, device: int, element_count: float, label: str = "") -> None:
        if element_count < 0:
            raise ContractError(f"element_count must be >= 0, got {element_count}")
        if element_count == 0:
            return
        start = self.clock(device)
        self._elems[device] += element_count
        self.events.append(TimelineEvent(device, "compute", start, self.clock(device), label))

    def launch_comm(self, device: int, kind: str, payload_bytes: int,
                    label: str = "") -> CommHandle:
        if payload_bytes < 0:
            raise ContractError(f"payload_bytes must be >= 0, got {payload_bytes}")
        now = self.clock(device)
        ready = now + self.cluster.alpha + self.cluster.beta * payload_bytes
        self.events.append(TimelineEvent(device, "comm-launch", now, now,
                                         label or kind))
        return CommHandle(device=device, kind=kind, launch_time=now,
                          payload_bytes=int(payload_bytes), ready_time=ready)

    def launch_collective(self, kind: str, bytes_by_device: np.ndarray,
                          label: str = "") -> CollectiveHandle:
        if len(bytes_by_device) != self.cluster.num_devices:
            raise ContractError("bytes_by_device length must equal num_devices")
        handles = tuple(self.launch_comm(d, kind, int(bytes_by_device[d]), label)
                        for d in range(self.cluster.num_devices))
        return CollectiveHandle(kind=kind, handles=handles)

    def wait_comm(self, device: int, handle, label: str = "") -> float:
        """Advance the device to the handle's ready time; returns the stall."""
        ready = handle.ready_time
        now = self.clock(device)
        if ready <= now:
            return 0.0
        # Anchor the clock exactly on ready_time rather than accumulating.
        self._comm[device] = ready - self._elems[device] / self.cluster.compute_rate
        self.events.append(TimelineEvent(device, "comm-wait-stall", now, ready,
                                         label or getattr(handle, "kind", "comm")))
        return ready - now

    def makespan(self) -> float:
        if not self.events:
            return 0.0
        return max(self.clock(d) for d in range(self.cluster.num_devices))

    def stall_seconds(self, device: int) -> float:
        return float(self._comm[device])

    def compute_seconds(self, device: int) -> float:
        return float(self._elems[device] / self.cluster.compute_rate)

    def max_stall_seconds(self) -> float:
        return float(self._comm.max())

    def export(self) -> list:
        return [dict(device=e.device, kind=e.kind, start=e.start, end=e.end,
                     label=e.label) for e in self.events]

    def to_json(self) -> str:
        return json.dumps({"schema_version": 1, "events": self.export()},
                          separators=(",", ":"))
