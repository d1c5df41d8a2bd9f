"""Parametric indoor scenes: materials, planar surfaces, boxes and the RX pose.

Scenes are loaded from / written to a small JSON schema::

    {
      "bounds": {"min": [x, y, z], "max": [x, y, z]},
      "rx": {"position": [x, y, z], "frame": [[...], [...], [...]]},
      "materials": {"concrete": {"eps_a": 5.24, "eps_b": 0.0, ...}},
      "surfaces": [
        {"kind": "plane", "corners": [[...] x4], "material": "concrete",
         "diffracting_edges": [false, false, false, false]},
        {"kind": "box", "min": [...], "max": [...], "material": "wood",
         "diffracting_edges": true}
      ],
      "seed": 0
    }

``frame`` is given row-major; its *columns* are the RX local x, y, z axes and
local z is the boresight of the receiving hemisphere.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

GHZ = 1e9
MIN_TX_RX_SEPARATION = 0.1

Vec3 = tuple[float, float, float]


class SceneFormatError(ValueError):
    """The scene file is not parseable as the scene schema."""


class SceneValidationError(ValueError):
    """A scene invariant does not hold."""


class SamplingError(RuntimeError):
    pass


@dataclass(frozen=True)
class Material:
    name: str
    eps_a: float
    eps_b: float = 0.0
    sigma_a: float = 0.0
    sigma_b: float = 0.0
    mu_r: float = 1.0
    thickness: float = 0.1

    def validate(self) -> None:
        if not self.eps_a >= 1.0:
            raise SceneValidationError(f"material {self.name!r}: eps_a must be >= 1")
        if not self.sigma_a >= 0.0:
            raise SceneValidationError(f"material {self.name!r}: sigma_a must be >= 0")
        if not self.mu_r > 0.0:
            raise SceneValidationError(f"material {self.name!r}: mu_r must be > 0")
        if not self.thickness > 0.0:
            raise SceneValidationError(f"material {self.name!r}: thickness must be > 0")


# ITU-R P.2040 style power-law coefficients (f in GHz).
ITU_MATERIALS = {
    "vacuum": Material("vacuum", 1.0, 0.0, 0.0, 0.0, 1.0, 0.1),
    "concrete": Material("concrete", 5.24, 0.0, 0.0462, 0.7822, 1.0, 0.2),
    "brick": Material("brick", 3.91, 0.0, 0.0238, 0.16, 1.0, 0.1),
    "plasterboard": Material("plasterboard", 2.73, 0.0, 0.0085, 0.9395, 1.0, 0.0125),
    "wood": Material("wood", 1.99, 0.0, 0.0047, 1.0718, 1.0, 0.04),
    "glass": Material("glass", 6.31, 0.0, 0.0036, 1.3394, 1.0, 0.01),
    "floorboard": Material("floorboard", 3.66, 0.0, 0.0044, 1.3515, 1.0, 0.03),
    "metal": Material("metal", 1.0, 0.0, 1e7, 0.0, 1.0, 0.005),
}


def material_at(material: Material, freq: float) -> tuple[float, float, float]:
    """Return ``(eps_r, mu_r, sigma)`` of ``material`` at ``freq`` Hz."""
    f_ghz = freq / GHZ
    eps_r = material.eps_a * f_ghz ** material.eps_b
    sigma = material.sigma_a * f_ghz ** material.sigma_b
    return eps_r, material.mu_r, sigma


@dataclass(frozen=True)
class Surface:
    """Planar quadrilateral. Edge ``k`` runs from ``corners[k]`` to ``corners[k+1]``."""

    kind: str
    corners: tuple[Vec3, Vec3, Vec3, Vec3]
    material: str
    diffracting_edges: tuple[bool, bool, bool, bool] = (False, False, False, False)
    solid: int = -1  # index into Scene.boxes, -1 for free planes

    @property
    def points(self) -> np.ndarray:
        return np.asarray(self.corners, dtype=float)

    @property
    def normal(self) -> np.ndarray:
        c = self.points
        n = np.cross(c[1] - c[0], c[3] - c[0])
        return n / np.linalg.norm(n)

    def area(self) -> float:
        c = self.points
        return 0.5 * (
            np.linalg.norm(np.cross(c[1] - c[0], c[2] - c[0]))
            + np.linalg.norm(np.cross(c[2] - c[0], c[3] - c[0]))
        )

    def validate(self) -> None:
        if self.area() <= 0.0:
            raise SceneValidationError("surface area must be > 0")
        c = self.points
        off = np.abs((c - c[0]) @ self.normal)
        if off.max() > 1e-9:
            raise SceneValidationError("surface corners are not coplanar within 1e-9 m")


@dataclass(frozen=True)
class Box:
    min: Vec3
    max: Vec3
    material: str
    diffracting_edges: bool = False

    def contains(self, p, tol: float = 0.0) -> bool:
        lo = np.asarray(self.min) - tol
        hi = np.asarray(self.max) + tol
        return bool(np.all(p >= lo) and np.all(p <= hi))

    def faces(self, solid: int) -> list[Surface]:
        x0, y0, z0 = self.min
        x1, y1, z1 = self.max
        quads = [
            ((x0, y0, z0), (x0, y1, z0), (x1, y1, z0), (x1, y0, z0)),  # -z
            ((x0, y0, z1), (x1, y0, z1), (x1, y1, z1), (x0, y1, z1)),  # +z
            ((x0, y0, z0), (x1, y0, z0), (x1, y0, z1), (x0, y0, z1)),  # -y
            ((x0, y1, z0), (x0, y1, z1), (x1, y1, z1), (x1, y1, z0)),  # +y
            ((x0, y0, z0), (x0, y0, z1), (x0, y1, z1), (x0, y1, z0)),  # -x
            ((x1, y0, z0), (x1, y1, z0), (x1, y1, z1), (x1, y0, z1)),  # +x
        ]
        flags = (self.diffracting_edges,) * 4
        return [Surface("box_face", q, self.material, flags, solid) for q in quads]


@dataclass(frozen=True)
class RxPose:
    position: Vec3
    frame: tuple[Vec3, Vec3, Vec3] = ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0))

    @property
    def rotation(self) -> np.ndarray:
        return np.asarray(self.frame, dtype=float)

    def to_local(self, points) -> np.ndarray:
        """World points (..., 3) to RX-frame coordinates."""
        return (np.asarray(points, dtype=float) - np.asarray(self.position)) @ self.rotation

    def validate(self) -> None:
        r = self.rotation
        if np.abs(r.T @ r - np.eye(3)).max() > 1e-9:
            raise SceneValidationError("rx frame must be orthonormal within 1e-9")


@dataclass(frozen=True)
class Scene:
    bounds: tuple[Vec3, Vec3]
    rx: RxPose
    materials: dict = field(default_factory=dict)
    planes: tuple[Surface, ...] = ()
    boxes: tuple[Box, ...] = ()
    seed: int = 0

    @property
    def surfaces(self) -> list[Surface]:
        out = list(self.planes)
        for i, box in enumerate(self.boxes):
            out.extend(box.faces(i))
        return out

    @property
    def lo(self) -> np.ndarray:
        return np.asarray(self.bounds[0], dtype=float)

    @property
    def hi(self) -> np.ndarray:
        return np.asarray(self.bounds[1], dtype=float)

    @property
    def extent(self) -> float:
        """Diagonal length of the bounding box."""
        return float(np.linalg.norm(self.hi - self.lo))

    def inside(self, p, tol: float = 1e-9) -> bool:
        p = np.asarray(p, dtype=float)
        return bool(np.all(p >= self.lo - tol) and np.all(p <= self.hi + tol))

    def in_solid(self, p) -> bool:
        return any(box.contains(p) for box in self.boxes)

    def material(self, name: str) -> Material:
        return self.materials[name]

    def validate(self) -> None:
        lo, hi = self.lo, self.hi
        if not np.all(hi > lo):
            raise SceneValidationError("bounds.max must exceed bounds.min on every axis")
        for m in self.materials.values():
            m.validate()
        self.rx.validate()
        if not self.inside(self.rx.position, tol=0.0):
            raise SceneValidationError("rx.position lies outside the scene bounds")
        for s in self.surfaces:
            if s.material not in self.materials:
                raise SceneValidationError(f"unknown material {s.material!r}")
            s.validate()
            if not all(self.inside(c) for c in s.corners):
                raise SceneValidationError("surface lies outside the scene bounds")
        if not int(self.seed) >= 0:
            raise SceneValidationError("seed must be unsigned")


def _vec3(value, what: str) -> Vec3:
    try:
        v = tuple(float(x) for x in value)
    except (TypeError, ValueError) as exc:
        raise SceneFormatError(f"{what}: expected 3 numbers") from exc
    if len(v) != 3:
        raise SceneFormatError(f"{what}: expected 3 numbers, got {len(v)}")
    return v


def scene_from_dict(doc: dict) -> Scene:
    try:
        bounds = (_vec3(doc["bounds"]["min"], "bounds.min"), _vec3(doc["bounds"]["max"], "bounds.max"))
        rx_doc = doc["rx"]
        rows = rx_doc.get("frame", [[1, 0, 0], [0, 1, 0], [0, 0, 1]])
        if len(rows) != 3:
            raise SceneFormatError("rx.frame must be 3x3")
        rx = RxPose(_vec3(rx_doc["position"], "rx.position"),
                    tuple(_vec3(r, "rx.frame row") for r in rows))
        materials = {}
        for name, m in doc.get("materials", {}).items():
            materials[name] = Material(
                name=name,
                eps_a=float(m["eps_a"]),
                eps_b=float(m.get("eps_b", 0.0)),
                sigma_a=float(m.get("sigma_a", 0.0)),
                sigma_b=float(m.get("sigma_b", 0.0)),
                mu_r=float(m.get("mu_r", 1.0)),
                thickness=float(m.get("thickness", 0.1)),
            )
        planes, boxes = [], []
        for s in doc.get("surfaces", []):
            kind = s["kind"]
            if kind == "plane":
                corners = s["corners"]
                if len(corners) != 4:
                    raise SceneFormatError("plane surfaces need exactly 4 corners")
                edges = s.get("diffracting_edges", False)
                if isinstance(edges, bool):
                    edges = [edges] * 4
                planes.append(Surface(
                    "plane",
                    tuple(_vec3(c, "corner") for c in corners),
                    str(s["material"]),
                    tuple(bool(e) for e in edges),
                ))
            elif kind == "box":
                boxes.append(Box(_vec3(s["min"], "box.min"), _vec3(s["max"], "box.max"),
                                 str(s["material"]), bool(s.get("diffracting_edges", False))))
            else:
                raise SceneFormatError(f"unknown surface kind {kind!r}")
        seed = int(doc.get("seed", 0))
    except KeyError as exc:
        raise SceneFormatError(f"missing key {exc}") from exc
    except (TypeError, AttributeError) as exc:
        raise SceneFormatError(str(exc)) from exc
    scene = Scene(bounds, rx, materials, tuple(planes), tuple(boxes), seed)
    scene.validate()
    return scene


def scene_to_dict(scene: Scene) -> dict:
    surfaces = []
    for s in scene.planes:
        surfaces.append({"kind": "plane", "corners": [list(c) for c in s.corners],
                         "material": s.material, "diffracting_edges": list(s.diffracting_edges)})
    for b in scene.boxes:
        surfaces.append({"kind": "box", "min": list(b.min), "max": list(b.max),
                         "material": b.material, "diffracting_edges": b.diffracting_edges})
    return {
        "bounds": {"min": list(scene.bounds[0]), "max": list(scene.bounds[1])},
        "rx": {"position": list(scene.rx.position), "frame": [list(r) for r in scene.rx.frame]},
        "materials": {
            name: {"eps_a": m.eps_a, "eps_b": m.eps_b, "sigma_a": m.sigma_a,
                   "sigma_b": m.sigma_b, "mu_r": m.mu_r, "thickness": m.thickness}
            for name, m in scene.materials.items()
        },
        "surfaces": surfaces,
        "seed": scene.seed,
    }


def load_scene(path) -> Scene:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SceneFormatError(f"{path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise SceneFormatError(f"{path}: top level must be an object")
    return scene_from_dict(doc)


def write_scene(scene: Scene, path) -> None:
    Path(path).write_text(json.dumps(scene_to_dict(scene), indent=2))


def sample_tx_positions(scene: Scene, n: int, seed: int) -> list[np.ndarray]:
    """Uniformly sample ``n`` accessible TX positions inside the scene bounds.

    Points inside a solid box or closer than 0.1 m to the receiver are rejected.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    rx = np.asarray(scene.rx.position)
    out: list[np.ndarray] = []
    for _ in range(1000 * n):
        p = rng.uniform(scene.lo, scene.hi)
        if scene.in_solid(p) or np.linalg.norm(p - rx) < MIN_TX_RX_SEPARATION:
            continue
        out.append(p)
        if len(out) == n:
            return out
    raise SamplingError(f"could only place {len(out)} of {n} TX positions in {1000 * n} draws")


def room(size=(5.0, 4.0, 3.0), obstacle=True, wall_material="concrete",
         obstacle_material="wood", seed=0) -> Scene:
    """The default desk-scale box room used by the CLI and the test-suite.

    RX sits near the -x wall, 1.5 m up, looking along +x into the room.
    """
    sx, sy, sz = (float(v) for v in size)
    mats = {wall_material: ITU_MATERIALS[wall_material]}
    walls = Box((0.0, 0.0, 0.0), (sx, sy, sz), wall_material).faces(-1)
    planes = tuple(Surface("plane", w.corners, wall_material) for w in walls)
    boxes = ()
    if obstacle:
        mats[obstacle_material] = ITU_MATERIALS[obstacle_material]
        boxes = (Box((0.45 * sx, 0.35 * sy, 0.0), (0.6 * sx, 0.6 * sy, 0.45 * sz),
                     obstacle_material, True),)
    rx = RxPose((0.3, 0.5 * sy, 0.5 * sz),
                ((0.0, 0.0, 1.0), (1.0, 0.0, 0.0), (0.0, 1.0, 0.0)))
    scene = Scene(((0.0, 0.0, 0.0), (sx, sy, sz)), rx, mats, planes, boxes, seed)
    scene.validate()
    return scene

