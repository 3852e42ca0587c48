"""Device naming, placement scopes, and tensor copies.

Device names follow the ``/job:J/task:T/device:KIND:I`` grammar. This
runtime is single-process, so job/task are fixed to ``local``/``0``, but the
full grammar is kept so that names from multi-worker deployments still parse.

Accelerators here are simulated: an ACCEL device runs the same CPU kernels
and differs only in placement semantics (which device tensors live on, when
transparent copies happen). That is enough to exercise and test every
placement rule without hardware.
"""
from __future__ import annotations

import re
from contextlib import contextmanager
from dataclasses import dataclass
from typing import List, Union

from .errors import UnknownDevice

_NAME_RE = re.compile(
    r"^/job:(?P<job>[A-Za-z0-9_]+)/task:(?P<task>\d+)"
    r"/device:(?P<kind>[A-Za-z0-9_]+):(?P<index>\d+)$"
)

CPU = "CPU"
ACCEL = "ACCEL"


@dataclass(frozen=True)
class DeviceName:
    job: str = "local"
    task: int = 0
    kind: str = CPU
    index: int = 0

    def render(self) -> str:
        return f"/job:{self.job}/task:{self.task}/device:{self.kind}:{self.index}"

    @staticmethod
    def parse(text: str) -> "DeviceName":
        m = _NAME_RE.match(text)
        if not m:
            raise ValueError(f"malformed device name {text!r}")
        return DeviceName(
            job=m.group("job"),
            task=int(m.group("task")),
            kind=m.group("kind"),
            index=int(m.group("index")),
        )

    def __str__(self) -> str:
        return self.render()


def as_device_name(value: Union[str, DeviceName]) -> DeviceName:
    if isinstance(value, DeviceName):
        return value
    return DeviceName.parse(value)


class Device:
    """A live execution device: a name plus bookkeeping.

    All kernels are CPU-backed; the device object only anchors placement.
    """

    def __init__(self, name: DeviceName):
        self.name = name

    def __repr__(self) -> str:
        return f"Device({self.name.render()!r})"


def default_devices(accelerators: int) -> List[Device]:
    devices = [Device(DeviceName(kind=CPU, index=0))]
    for i in range(accelerators):
        devices.append(Device(DeviceName(kind=ACCEL, index=i)))
    return devices


def list_devices() -> List[DeviceName]:
    from .runtime import get_runtime

    return [d.name for d in get_runtime().devices]


def resolve_device(name: Union[str, DeviceName]) -> DeviceName:
    """Validate that a name refers to a live device and return it."""
    from .runtime import get_runtime

    dn = as_device_name(name)
    for d in get_runtime().devices:
        if d.name == dn:
            return dn
    raise UnknownDevice(f"no such device: {dn.render()}")


@contextmanager
def device_scope(name: Union[str, DeviceName]):
    """Place ops dispatched inside the scope on the named device.

    Scopes nest; the innermost wins. Node-level device overrides recorded
    inside graph functions beat the caller's scope.
    """
    from .runtime import current_context

    dn = resolve_device(name)
    ctx = current_context()
    ctx.device_scopes.append(dn)
    try:
        yield dn
    finally:
        ctx.device_scopes.pop()
