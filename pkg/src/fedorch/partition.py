"""MIG-style partitioning of physical accelerators into owned slice instances.

Feasibility is purely additive: a device of ``total_slices`` can host any mix of
instances whose profile sizes sum to at most ``total_slices``.  Partitionable
devices have 7 slices; whole-device accelerators are modelled as 1 slice.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Sequence, Tuple

PROFILE_SIZES = (1, 2, 3, 4, 7)
PARTITIONABLE_SLICES = 7
PARTITIONABLE_MODELS = frozenset({"A100"})

Owner = Tuple[str, str]


class PartitionError(Exception):
    pass


class InfeasibleLayout(PartitionError):
    pass


class NoCapacity(PartitionError):
    pass


class IllegalProfile(PartitionError):
    pass


class UnknownInstance(PartitionError):
    pass


class NotAllocated(PartitionError):
    pass


def slice_key(model: str) -> str:
    """Resource-vector key under which a device model advertises its slices."""
    return f"{model}-slice"


def default_slices(model: str) -> int:
    return PARTITIONABLE_SLICES if model in PARTITIONABLE_MODELS else 1


@dataclass
class PartitionInstance:
    id: str
    profile_size: int
    owner: Optional[Owner] = None


@dataclass
class AcceleratorDevice:
    id: str
    model: str
    total_slices: int = PARTITIONABLE_SLICES
    instances: List[PartitionInstance] = field(default_factory=list)
    _next_instance: int = field(default=0, repr=False)

    def allowed_profiles(self) -> Tuple[int, ...]:
        return tuple(p for p in PROFILE_SIZES if p <= self.total_slices)

    def owners(self) -> set:
        return {inst.owner for inst in self.instances if inst.owner is not None}

    def _new_instance_id(self) -> str:
        self._next_instance += 1
        return f"{self.id}/mig-{self._next_instance}"

    def apply(self, layout: Sequence[PartitionInstance]) -> None:
        """Install a layout returned by :func:`plan_partition`."""
        if any(inst.owner is not None for inst in self.instances):
            raise InfeasibleLayout(f"device {self.id} has owned instances")
        self.instances = list(layout)


def device_free_slices(device: AcceleratorDevice) -> int:
    return device.total_slices - sum(inst.profile_size for inst in device.instances)


def _check_profile(device: AcceleratorDevice, size: int) -> None:
    if size not in device.allowed_profiles():
        raise IllegalProfile(f"profile {size} not allowed on {device.model} ({device.total_slices} slices)")


def plan_partition(device: AcceleratorDevice, profiles: Iterable[int]) -> List[PartitionInstance]:
    """Return one unowned instance per requested profile, without touching ``device``."""
    profiles = list(profiles)
    if any(inst.owner is not None for inst in device.instances):
        raise InfeasibleLayout(f"device {device.id} has owned instances; release them first")
    allowed = device.allowed_profiles()
    bad = [p for p in profiles if p not in allowed]
    if bad:
        raise InfeasibleLayout(f"illegal profiles {bad} for {device.total_slices}-slice device")
    if sum(profiles) > device.total_slices:
        raise InfeasibleLayout(f"profiles {profiles} need {sum(profiles)} > {device.total_slices} slices")
    return [
        PartitionInstance(id=f"{device.id}/plan-{i + 1}", profile_size=size)
        for i, size in enumerate(profiles)
    ]


def allocate_instance(device: AcceleratorDevice, profile_size: int, owner: Owner) -> str:
    """Give ``owner`` an instance of ``profile_size`` slices and return its id.

    An unowned instance of the same size left by a planned layout is claimed
    first; otherwise a new instance is carved from free slices.
    """
    _check_profile(device, profile_size)
    for inst in device.instances:
        if inst.owner is None and inst.profile_size == profile_size:
            inst.owner = owner
            return inst.id
    if device_free_slices(device) < profile_size:
        raise NoCapacity(
            f"device {device.id}: {profile_size} slices requested, {device_free_slices(device)} free"
        )
    inst = PartitionInstance(device._new_instance_id(), profile_size, owner)
    device.instances.append(inst)
    return inst.id


def release_instance(device: AcceleratorDevice, instance_id: str) -> AcceleratorDevice:
    for i, inst in enumerate(device.instances):
        if inst.id == instance_id:
            if inst.owner is None:
                raise NotAllocated(f"instance {instance_id} has no owner")
            del device.instances[i]
            return device
    raise UnknownInstance(instance_id)


def decompose(slices: int, allowed: Sequence[int]) -> List[int]:
    """Split ``slices`` greedily into allowed profile sizes, largest first."""
    sizes = []
    remaining = slices
    for size in sorted(allowed, reverse=True):
        while remaining >= size:
            sizes.append(size)
            remaining -= size
    return sizes


def claim_slices(devices: Sequence[AcceleratorDevice], key: str, count: int, owner: Owner) -> List[Tuple[str, str]]:
    """Allocate ``count`` slices of resource ``key`` across ``devices`` in id order.

    The node-level fit check has already guaranteed enough free slices; this only
    materialises ownership.  Returns ``(device_id, instance_id)`` pairs.
    """
    claimed = []
    remaining = count
    for device in sorted(devices, key=lambda d: d.id):
        if remaining == 0:
            break
        if slice_key(device.model) != key:
            continue
        take = min(remaining, device_free_slices(device))
        for size in decompose(take, device.allowed_profiles()):
            claimed.append((device.id, allocate_instance(device, size, owner)))
        remaining -= take
    if remaining:
        for device_id, instance_id in claimed:
            release_instance(_by_id(devices, device_id), instance_id)
        raise NoCapacity(f"{count} x {key} requested, {count - remaining} available")
    return claimed


def release_claim(devices: Sequence[AcceleratorDevice], claim: Iterable[Tuple[str, str]]) -> None:
    for device_id, instance_id in claim:
        release_instance(_by_id(devices, device_id), instance_id)


def _by_id(devices: Sequence[AcceleratorDevice], device_id: str) -> AcceleratorDevice:
    for device in devices:
        if device.id == device_id:
            return device
    raise UnknownInstance(f"no device {device_id}")

