"""Built-in mechanical systems.

Each template is a plain constructor returning a :class:`~vilin.model.MechSystem`;
:data:`TEMPLATES` maps names to :class:`SystemTemplate` records so scenario
files can refer to them.
"""

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import cos, sin, var
from .model import make_system


def _positive(**kw):
    for name, value in kw.items():
        if not value > 0:
            raise ValueError(f"{name} must be positive, got {value}")


def pendulum(m=1.0, l=1.0, g=9.8):
    """Torque-driven planar pendulum, ``L = m l^2 thd^2 / 2 + m g l cos(th)``."""
    _positive(m=m, l=l)
    th, thd, u = var("theta"), var("theta_dot"), var("u")
    M, ell, grav = var("m"), var("l"), var("g")
    L = 0.5 * M * ell**2 * thd**2 + M * grav * ell * cos(th)
    return make_system(["theta"], L, inputs=["u"], forcing=[u],
                       params={"m": m, "l": l, "g": g}, name="pendulum")


def free_particle(m=1.0):
    """Force-driven particle on a line, ``L = m qd^2 / 2``, ``F = u``."""
    _positive(m=m)
    qd, u, M = var("q_dot"), var("u"), var("m")
    return make_system(["q"], 0.5 * M * qd**2, inputs=["u"], forcing=[u],
                       params={"m": m}, name="free_particle")


def spherical_pendulum(m=1.0, r=1.0, g=9.8):
    """Unforced spherical pendulum in polar/azimuthal angles ``(theta, phi)``.

    The angle chart is singular at ``theta = n pi``.
    """
    _positive(m=m, r=r)
    th, thd, phd = var("theta"), var("theta_dot"), var("phi_dot")
    M, R, grav = var("m"), var("r"), var("g")
    s = sin(th)
    L = 0.5 * M * R**2 * (thd**2 + s**2 * phd**2) + M * grav * R * cos(th)
    return make_system(["theta", "phi"], L, params={"m": m, "r": r, "g": g},
                       name="spherical_pendulum")


def cartesian_pendulum(m=1.0, l=1.0):
    """Gravity-free pendulum in Cartesian coordinates with ``x^2 + y^2 = l^2``."""
    _positive(m=m, l=l)
    x, y, xd, yd = var("x"), var("y"), var("x_dot"), var("y_dot")
    M, ell = var("m"), var("l")
    L = 0.5 * M * (xd**2 + yd**2)
    return make_system(["x", "y"], L, constraints=[x**2 + y**2 - ell**2],
                       params={"m": m, "l": l}, name="cartesian_pendulum")


def chain_attachments(links, strings):
    """Indices of the links that carry a string, spread along the chain."""
    return [int(round((s + 1) * links / strings)) - 1 for s in range(strings)]


def chain_points(q, link_length):
    """Planar positions of the chain's point masses for relative joint angles ``q``."""
    phi = np.cumsum(q)
    x = np.cumsum(link_length * np.sin(phi))
    y = -np.cumsum(link_length * np.cos(phi))
    return np.stack([x, y], axis=1)


def constrained_chain(links=40, strings=6, link_length=0.1, mass=0.1, g=9.8,
                      string_length=0.5, string_angle=0.6):
    """Planar chain of point masses hanging from a fixed pivot, held by strings.

    Coordinates are relative joint angles ``th0..th{links-1}`` (``th0`` is
    the root, measured from the downward vertical). Each string is a
    holonomic constraint ``|p_i - a_s|^2 = string_length^2`` tying the mass
    of link ``i`` to a fixed anchor ``a_s``; anchors are placed so that the
    straight hanging configuration ``q = 0`` satisfies every constraint,
    with strings leaning alternately by ``+-string_angle`` from the
    vertical. Input ``u_s`` is a joint torque on the joint of the link the
    string ``s`` is attached to.
    """
    _positive(link_length=link_length, mass=mass, string_length=string_length)
    if links < 2:
        raise ValueError("a chain needs at least two links")
    if not 0 <= strings <= links or strings >= links:
        raise ValueError(f"cannot attach {strings} strings to {links} links")
    coords = [f"th{i}" for i in range(links)]
    q = [var(c) for c in coords]
    qd = [var(c + "_dot") for c in coords]
    ell, M, grav = var("link_length"), var("mass"), var("g")

    phi = omega = x = y = vx = vy = None
    points = []
    L = 0.0
    for i in range(links):
        phi = q[i] if phi is None else phi + q[i]
        omega = qd[i] if omega is None else omega + qd[i]
        s, c = sin(phi), cos(phi)
        dx, dy = ell * s, -(ell * c)
        dvx, dvy = ell * c * omega, ell * s * omega
        x = dx if x is None else x + dx
        y = dy if y is None else y + dy
        vx = dvx if vx is None else vx + dvx
        vy = dvy if vy is None else vy + dvy
        points.append((x, y))
        L = L + 0.5 * M * (vx**2 + vy**2) - M * grav * y

    params = {"link_length": link_length, "mass": mass, "g": g, "string_length": string_length}
    attach = chain_attachments(links, strings)
    ref = chain_points(np.zeros(links), link_length)
    constraints, inputs, forcing = [], [], [0.0] * links
    for s, i in enumerate(attach):
        lean = string_angle if s % 2 == 0 else -string_angle
        ax = ref[i, 0] + string_length * math.sin(lean)
        ay = ref[i, 1] + string_length * math.cos(lean)
        params[f"ax{s}"] = ax
        params[f"ay{s}"] = ay
        px, py = points[i]
        constraints.append((px - var(f"ax{s}"))**2 + (py - var(f"ay{s}"))**2
                           - var("string_length")**2)
        inputs.append(f"u{s}")
        forcing[i] = forcing[i] + var(f"u{s}")
    return make_system(coords, L, inputs=inputs, forcing=forcing, constraints=constraints,
                       params=params, name="constrained_chain")


@dataclass(frozen=True)
class SystemTemplate:
    """Named constructor with its parameter defaults."""

    name: str
    defaults: dict
    build: object

    def __call__(self, **params):
        unknown = set(params) - set(self.defaults)
        if unknown:
            raise ValueError(f"unknown parameters for {self.name}: {sorted(unknown)}")
        return self.build(**{**self.defaults, **params})


TEMPLATES = {
    t.name: t
    for t in (
        SystemTemplate("pendulum", {"m": 1.0, "l": 1.0, "g": 9.8}, pendulum),
        SystemTemplate("free_particle", {"m": 1.0}, free_particle),
        SystemTemplate("spherical_pendulum", {"m": 1.0, "r": 1.0, "g": 9.8}, spherical_pendulum),
        SystemTemplate("cartesian_pendulum", {"m": 1.0, "l": 1.0}, cartesian_pendulum),
        SystemTemplate("constrained_chain",
                       {"links": 40, "strings": 6, "link_length": 0.1, "mass": 0.1, "g": 9.8,
                        "string_length": 0.5, "string_angle": 0.6},
                       constrained_chain),
    )
}


def build(name, **params):
    """Construct a built-in system by template name."""
    try:
        template = TEMPLATES[name]
    except KeyError:
        raise ValueError(f"unknown system template {name!r}; "
                         f"available: {sorted(TEMPLATES)}") from None
    return template(**params)
