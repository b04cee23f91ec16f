"""Ready-made scenes used by the demos, the tests and the command line."""

import numpy as np

from .billiard import PhasePoint
from .geometry import BilliardConfig, Bump, Scatterer, ScattererInstance


def single_sphere(d=2, center=None, radius=0.2, horizon_bound=2.0, tau0=0.1):
    """One ball per cell. The horizon is infinite: axis-parallel corridors survive."""
    c = np.full(d, 0.5) if center is None else np.asarray(center, dtype=float)
    return BilliardConfig(d, [Scatterer(0, "sphere", c, radius=radius)],
                          horizon_bound=horizon_bound, tau0=tau0)


def two_disk(horizon_bound=2.0, tau0=0.03):
    """Finite-horizon planar scene: a large disk at the corner, a smaller one in the middle."""
    return BilliardConfig(2, [
        Scatterer(0, "sphere", np.array([0.0, 0.0]), radius=0.42),
        Scatterer(1, "sphere", np.array([0.5, 0.5]), radius=0.25),
    ], horizon_bound=horizon_bound, tau0=tau0)


def period_two_state(cfg=None):
    """Outgoing state of the head-on orbit along the diagonal of :func:`two_disk`."""
    cfg = two_disk() if cfg is None else cfg
    u = np.array([1.0, 1.0]) / np.sqrt(2.0)
    q = cfg.scatterers[0].radius * u
    return PhasePoint(ScattererInstance(0, (0, 0)), q, u)


def three_sphere(horizon_bound=4.0, tau0=0.05):
    """Three balls of unequal radii at unrelated positions in the 3-torus.

    No symmetry forces extra tangencies; the horizon is infinite, so long
    flights can end without a hit.
    """
    return BilliardConfig(3, [
        Scatterer(0, "sphere", np.array([0.12, 0.21, 0.33]), radius=0.30),
        Scatterer(1, "sphere", np.array([0.61, 0.57, 0.42]), radius=0.22),
        Scatterer(2, "sphere", np.array([0.37, 0.83, 0.78]), radius=0.18),
    ], horizon_bound=horizon_bound, tau0=tau0)


def dense_bcc(horizon_bound=2.0, tau0=0.02):
    """Body-centred packing in the 3-torus with short free flights.

    Rounding errors grow by the expansion rate of the map at every
    collision; short flights keep that growth small enough for ten-step
    round trips to close at the 1e-8 level.
    """
    return BilliardConfig(3, [
        Scatterer(0, "sphere", np.zeros(3), radius=0.47),
        Scatterer(1, "sphere", np.full(3, 0.5), radius=0.37),
    ], horizon_bound=horizon_bound, tau0=tau0)


def ellipse_scene(horizon_bound=3.0, tau0=0.1):
    return BilliardConfig(2, [
        Scatterer(0, "ellipsoid", np.array([0.5, 0.5]), semi_axes=np.array([0.3, 0.2])),
    ], horizon_bound=horizon_bound, tau0=tau0)


def bumped_sphere(amplitude=1e-4, radius=0.05):
    """:func:`single_sphere` with an outward bump at the top of the ball."""
    cfg = single_sphere()
    s = cfg.scatterers[0]
    b = Bump(np.array([0.5, 0.7]), radius, amplitude)
    return cfg.with_scatterer(s.with_bump(b))


SCENES = {
    "single_sphere": single_sphere,
    "two_disk": two_disk,
    "three_sphere": three_sphere,
    "dense_bcc": dense_bcc,
    "ellipse": ellipse_scene,
    "bumped_sphere": bumped_sphere,
}
