"""FDUMP1 text format for one field snapshot.

Header ``FDUMP1 <name> <nx> <ny> <time>`` followed by ``ny`` lines of ``nx``
values, bottom row first, each value in shortest round-trip form.
"""

from pathlib import Path

import numpy as np

MAGIC = "FDUMP1"


def format_field(name, values, t):
    values = np.asarray(values, dtype=float)
    ny, nx = values.shape
    lines = [f"{MAGIC} {name} {nx} {ny} {float(t)!r}"]
    for row in values:
        lines.append(" ".join(repr(float(x)) for x in row))
    return "\n".join(lines) + "\n"


def write_field(path, name, values, t):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(format_field(name, values, t))
    return path


def read_field(path):
    """Return ``(name, values, t)``."""
    lines = Path(path).read_text().splitlines()
    head = lines[0].split()
    if len(head) != 5 or head[0] != MAGIC:
        raise ValueError(f"{path}: not an {MAGIC} file")
    name, nx, ny, t = head[1], int(head[2]), int(head[3]), float(head[4])
    values = np.array([[float(x) for x in line.split()] for line in lines[1:1 + ny]])
    if values.shape != (ny, nx):
        raise ValueError(f"{path}: expected {ny}x{nx} values, got {values.shape}")
    return name, values, t


def write_state(directory, state):
    """One file per field: cell fields Ux, Uy, p and face fields u, v."""
    directory = Path(directory)
    written = []
    for name, values in (("Ux", state.ux), ("Uy", state.uy), ("p", state.p),
                         ("u", state.u), ("v", state.v)):
        written.append(write_field(directory / f"{name}.fdump", name, values, state.t))
    return written


def read_state(directory, mesh):
    """Inverse of ``write_state`` for a state living on ``mesh``."""
    from .grid import State

    directory = Path(directory)
    arrays, times = {}, set()
    for name in ("Ux", "Uy", "p", "u", "v"):
        _, values, t = read_field(directory / f"{name}.fdump")
        arrays[name] = values
        times.add(t)
    if len(times) != 1:
        raise ValueError(f"{directory}: fields carry different times")
    if arrays["p"].shape != (mesh.ny, mesh.nx):
        raise ValueError(f"{directory}: snapshot does not match {mesh!r}")
    return State(mesh, arrays["Ux"], arrays["Uy"], arrays["p"], arrays["u"],
                 arrays["v"], times.pop())
