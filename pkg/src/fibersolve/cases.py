"""Case files, presets and end-to-end runs.

A case is a small INI-style document with four section kinds::

    [matrix]    box, mesh, approximation orders, material, boundary data
    [beam.N]    one section per fiber (N = 1, 2, ...)
    [solver]    coupling switches, unity handling, load stepping, Newton limits
    [output]    centerline CSV, sample count, optional lattice VTK

``parse_case`` turns such a document into a :class:`CaseConfig` and
``serialize_case`` writes one back out; serializing and re-parsing
reproduces the configuration exactly.  ``run_case`` builds the discrete
problem, solves it and writes the requested output files.  The
``preset_*`` functions return ready-made configurations for the four
reference studies: cantilever bending under a tip moment, tip torsion,
matrix shear past an unloaded fiber, and a fiber-reinforced cell driven
by a prescribed mean deformation on its boundary.
"""

from __future__ import annotations

import configparser
import io
import os

import numpy as np

from .assembly import (
    FiberDiscretization,
    FiberSpec,
    Problem,
    assemble,
    average_piola,
    beam_energy,
    build_dof_map,
    constraint_report,
    default_directors,
    matrix_energy,
    validate_order_ladder,
)
from .bspline import Patch3D, tabulate
from .materials import (
    MooneyRivlinInvariant,
    MooneyRivlinPolyconvex,
    SaintVenantKirchhoff,
    first_pk,
)
from .solver import solve_with_load_steps

FACES = ("x0", "x1", "y0", "y1", "z0", "z1")

CENTERLINE_HEADER = "s,phix,phiy,phiz,n1,n2,n3,m1,m2,m3,mun1,mun2,mun3"

_MATERIAL_KEYS = {
    "svk": ("youngs", "poisson"),
    "mooney_invariant": ("c1", "c2"),
    "mooney_polyconvex": ("alpha", "beta", "lam"),
}

_BEAM_VECTOR_KEYS = (
    "m_ext_start",
    "m_ext_end",
    "n_ext_start",
    "n_ext_end",
    "line_force",
    "line_moment",
)


class CaseError(ValueError):
    """Raised for malformed or inconsistent case documents."""


def _fmt(x):
    return format(float(x), ".17g")


def _fmt_vec(v):
    return " ".join(_fmt(x) for x in np.asarray(v, dtype=float).ravel())


def _parse_floats(text, n, where):
    parts = text.split()
    if len(parts) != n:
        raise CaseError(f"{where}: expected {n} numbers, got {len(parts)}")
    try:
        return np.array([float(p) for p in parts])
    except ValueError as exc:
        raise CaseError(f"{where}: {exc}") from None


def _parse_ints(text, n, where):
    vals = _parse_floats(text, n, where)
    out = vals.astype(int)
    if not np.all(out == vals):
        raise CaseError(f"{where}: expected integers")
    return out


def _parse_bool(text, where):
    s = text.strip().lower()
    if s in ("true", "yes", "on", "1"):
        return True
    if s in ("false", "no", "off", "0"):
        return False
    raise CaseError(f"{where}: expected a boolean, got {text!r}")


class CaseConfig:
    """Complete description of one solvable case.

    Everything a run needs lives here: the matrix box with its mesh,
    order ladder and material, the fiber list (as :class:`FiberSpec`
    instances), boundary data, solver switches and output requests.
    """

    def __init__(
        self,
        box,
        elements,
        orders,
        material,
        material_params,
        fibers=(),
        fixed_faces=(),
        prescribed=(),
        mean_deformation=None,
        couple_tau=True,
        couple_area=True,
        endpoint_constraints=False,
        unity="weak",
        load_steps=1,
        max_iterations=25,
        mode="auto",
        tolerance=None,
        centerline=None,
        samples=101,
        vtk=None,
        vtk_resolution=20,
    ):
        self.box = np.asarray(box, dtype=float)
        self.elements = tuple(int(n) for n in elements)
        self.orders = tuple(int(p) for p in orders)
        self.material = str(material)
        self.material_params = {k: float(v) for k, v in material_params.items()}
        self.fibers = list(fibers)
        self.fixed_faces = tuple(fixed_faces)
        self.prescribed = tuple(
            (face, np.asarray(v, dtype=float)) for face, v in prescribed
        )
        self.mean_deformation = (
            None if mean_deformation is None else np.asarray(mean_deformation, dtype=float)
        )
        self.couple_tau = bool(couple_tau)
        self.couple_area = bool(couple_area)
        self.endpoint_constraints = bool(endpoint_constraints)
        self.unity = str(unity)
        self.load_steps = int(load_steps)
        self.max_iterations = int(max_iterations)
        self.mode = str(mode)
        self.tolerance = None if tolerance is None else float(tolerance)
        self.centerline = centerline
        self.samples = int(samples)
        self.vtk = vtk
        self.vtk_resolution = int(vtk_resolution)
        self.validate()

    def validate(self):
        if self.box.shape != (3,) or np.any(self.box <= 0):
            raise CaseError("box: expected three positive edge lengths")
        if len(self.elements) != 3 or any(n < 1 for n in self.elements):
            raise CaseError("elements: expected three positive counts")
        try:
            validate_order_ladder(self.orders)
        except ValueError as exc:
            raise CaseError(f"orders: {exc}") from None
        if self.material not in _MATERIAL_KEYS:
            raise CaseError(
                f"material: unknown model {self.material!r}; "
                f"choose one of {', '.join(sorted(_MATERIAL_KEYS))}"
            )
        needed = _MATERIAL_KEYS[self.material]
        missing = [k for k in needed if k not in self.material_params]
        extra = [k for k in self.material_params if k not in needed]
        if missing:
            raise CaseError(
                f"material {self.material!r} needs key(s): {', '.join(missing)}"
            )
        if extra:
            raise CaseError(
                f"key(s) {', '.join(extra)} do not apply to material {self.material!r}"
            )
        for face in self.fixed_faces:
            if face not in FACES:
                raise CaseError(f"fixed_faces: unknown face {face!r}")
        if len(set(self.fixed_faces)) != len(self.fixed_faces):
            raise CaseError("fixed_faces: duplicate face")
        seen = set(self.fixed_faces)
        for face, vec in self.prescribed:
            if face not in FACES:
                raise CaseError(f"prescribed: unknown face {face!r}")
            if face in seen:
                raise CaseError(f"face {face!r} appears in more than one boundary entry")
            seen.add(face)
            if vec.shape != (3,):
                raise CaseError("prescribed: displacement must have three components")
        if self.mean_deformation is not None:
            if self.mean_deformation.shape != (3, 3):
                raise CaseError("mean_deformation: expected a 3x3 matrix")
            if np.linalg.det(self.mean_deformation) <= 0:
                raise CaseError("mean_deformation: determinant must be positive")
            if self.fixed_faces or self.prescribed:
                raise CaseError(
                    "mean_deformation cannot be combined with face boundary entries"
                )
        for i, spec in enumerate(self.fibers, start=1):
            for name, pt in (("start", spec.start), ("end", spec.end)):
                if np.any(pt < -1e-9) or np.any(pt > self.box + 1e-9):
                    raise CaseError(f"[beam.{i}] {name}: fiber outside matrix")
            if spec.radius <= 0:
                raise CaseError(f"[beam.{i}] radius must be positive")
            if spec.n_elements < 1:
                raise CaseError(f"[beam.{i}] elements must be at least 1")
        if self.unity not in ("weak", "direct"):
            raise CaseError("unity: expected 'weak' or 'direct'")
        if self.mode not in ("auto", "reduced", "full"):
            raise CaseError("mode: expected 'auto', 'reduced' or 'full'")
        if self.endpoint_constraints and not (self.couple_tau and self.couple_area):
            raise CaseError("endpoint_constraints require both coupling channels")
        if self.load_steps < 1:
            raise CaseError("load_steps must be at least 1")
        if self.max_iterations < 1:
            raise CaseError("max_iterations must be at least 1")
        if self.tolerance is not None and self.tolerance <= 0:
            raise CaseError("tolerance must be positive")
        if self.samples < 2:
            raise CaseError("samples must be at least 2")
        if self.vtk_resolution < 1:
            raise CaseError("vtk_resolution must be at least 1")

    def as_dict(self):
        """Plain-type snapshot used for equality and round-trip checks."""

        def vec(v):
            return tuple(float(x) for x in np.asarray(v).ravel())

        fibers = []
        for spec in self.fibers:
            fibers.append(
                {
                    "start": vec(spec.start),
                    "end": vec(spec.end),
                    "radius": spec.radius,
                    "youngs": spec.youngs,
                    "poisson": spec.poisson,
                    "elements": spec.n_elements,
                    "clamp_start": spec.clamp_start,
                    "directors": None if spec.directors is None else vec(spec.directors),
                    **{k: vec(getattr(spec, k)) for k in _BEAM_VECTOR_KEYS},
                }
            )
        return {
            "box": vec(self.box),
            "elements": self.elements,
            "orders": self.orders,
            "material": self.material,
            "material_params": dict(sorted(self.material_params.items())),
            "fixed_faces": tuple(sorted(self.fixed_faces)),
            "prescribed": tuple(sorted((f, vec(v)) for f, v in self.prescribed)),
            "mean_deformation": (
                None if self.mean_deformation is None else vec(self.mean_deformation)
            ),
            "fibers": fibers,
            "couple_tau": self.couple_tau,
            "couple_area": self.couple_area,
            "endpoint_constraints": self.endpoint_constraints,
            "unity": self.unity,
            "load_steps": self.load_steps,
            "max_iterations": self.max_iterations,
            "mode": self.mode,
            "tolerance": self.tolerance,
            "centerline": self.centerline,
            "samples": self.samples,
            "vtk": self.vtk,
            "vtk_resolution": self.vtk_resolution,
        }

    def __eq__(self, other):
        return isinstance(other, CaseConfig) and self.as_dict() == other.as_dict()


def parse_case(text):
    """Parse an INI-style case document into a :class:`CaseConfig`."""
    cp = configparser.ConfigParser(
        delimiters=("=",),
        comment_prefixes=("#",),
        inline_comment_prefixes=("#",),
        strict=True,
        interpolation=None,
    )
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise CaseError(f"parse error: {exc}") from None

    known = {"matrix", "solver", "output"}
    beam_ids = []
    for section in cp.sections():
        if section in known:
            continue
        if section.startswith("beam."):
            suffix = section[5:]
            if not suffix.isdigit():
                raise CaseError(f"bad beam section name [{section}]")
            beam_ids.append(int(suffix))
            continue
        raise CaseError(f"unknown section [{section}]")
    if sorted(beam_ids) != list(range(1, len(beam_ids) + 1)):
        raise CaseError("beam sections must be numbered consecutively from 1")
    if "matrix" not in cp:
        raise CaseError("missing required section [matrix]")

    def take(section, allowed):
        data = dict(cp[section])
        for key in data:
            if key not in allowed:
                raise CaseError(f"unknown key {key!r} in [{section}]")
        return data

    mat = take(
        "matrix",
        (
            "box",
            "elements",
            "orders",
            "material",
            "fixed_faces",
            "prescribed",
            "mean_deformation",
        )
        + tuple(k for keys in _MATERIAL_KEYS.values() for k in keys),
    )
    for key in ("box", "elements", "orders", "material"):
        if key not in mat:
            raise CaseError(f"[matrix] is missing required key {key!r}")

    material = mat["material"].strip()
    params = {}
    for keys in _MATERIAL_KEYS.values():
        for k in keys:
            if k in mat:
                params[k] = float(mat[k])

    prescribed = []
    if "prescribed" in mat:
        for clause in mat["prescribed"].split(";"):
            clause = clause.strip()
            if not clause:
                continue
            if ":" not in clause:
                raise CaseError(
                    "prescribed: expected 'face: ux uy uz' clauses separated by ';'"
                )
            face, _, rest = clause.partition(":")
            prescribed.append(
                (face.strip(), _parse_floats(rest, 3, "prescribed displacement"))
            )

    fibers = []
    for i in range(1, len(beam_ids) + 1):
        section = f"beam.{i}"
        data = take(
            section,
            ("start", "end", "radius", "youngs", "poisson", "elements", "clamp_start", "directors")
            + _BEAM_VECTOR_KEYS,
        )
        for key in ("start", "end", "radius", "youngs", "poisson", "elements"):
            if key not in data:
                raise CaseError(f"[{section}] is missing required key {key!r}")
        loads = {}
        for key in _BEAM_VECTOR_KEYS:
            if key in data:
                loads[key] = _parse_floats(data[key], 3, f"[{section}] {key}")
        directors = None
        if "directors" in data:
            d = _parse_floats(data["directors"], 9, f"[{section}] directors")
            directors = d.reshape(3, 3).T  # three rows in the file = three directors
        fibers.append(
            FiberSpec(
                start=_parse_floats(data["start"], 3, f"[{section}] start"),
                end=_parse_floats(data["end"], 3, f"[{section}] end"),
                radius=float(data["radius"]),
                youngs=float(data["youngs"]),
                poisson=float(data["poisson"]),
                n_elements=int(_parse_ints(data["elements"], 1, f"[{section}] elements")[0]),
                clamp_start=(
                    _parse_bool(data["clamp_start"], f"[{section}] clamp_start")
                    if "clamp_start" in data
                    else False
                ),
                directors=directors,
                **loads,
            )
        )

    solver_kw = {}
    if "solver" in cp:
        data = take(
            "solver",
            (
                "couple_tau",
                "couple_area",
                "endpoint_constraints",
                "unity",
                "load_steps",
                "max_iterations",
                "mode",
                "tolerance",
            ),
        )
        for key in ("couple_tau", "couple_area", "endpoint_constraints"):
            if key in data:
                solver_kw[key] = _parse_bool(data[key], f"[solver] {key}")
        if "unity" in data:
            solver_kw["unity"] = data["unity"].strip()
        if "mode" in data:
            solver_kw["mode"] = data["mode"].strip()
        for key in ("load_steps", "max_iterations"):
            if key in data:
                solver_kw[key] = int(_parse_ints(data[key], 1, f"[solver] {key}")[0])
        if "tolerance" in data:
            solver_kw["tolerance"] = float(data["tolerance"])

    output_kw = {}
    if "output" in cp:
        data = take("output", ("centerline", "samples", "vtk", "vtk_resolution"))
        if "centerline" in data and data["centerline"].strip():
            output_kw["centerline"] = data["centerline"].strip()
        if "vtk" in data and data["vtk"].strip():
            output_kw["vtk"] = data["vtk"].strip()
        for key, target in (("samples", "samples"), ("vtk_resolution", "vtk_resolution")):
            if key in data:
                output_kw[target] = int(_parse_ints(data[key], 1, f"[output] {key}")[0])

    return CaseConfig(
        box=_parse_floats(mat["box"], 3, "[matrix] box"),
        elements=_parse_ints(mat["elements"], 3, "[matrix] elements"),
        orders=_parse_ints(mat["orders"], 8, "[matrix] orders"),
        material=material,
        material_params=params,
        fibers=fibers,
        fixed_faces=tuple(mat["fixed_faces"].split()) if "fixed_faces" in mat else (),
        prescribed=prescribed,
        mean_deformation=(
            _parse_floats(mat["mean_deformation"], 9, "[matrix] mean_deformation").reshape(3, 3)
            if "mean_deformation" in mat
            else None
        ),
        **solver_kw,
        **output_kw,
    )


def serialize_case(config):
    """Write a :class:`CaseConfig` back to its INI-style text form."""
    buf = io.StringIO()
    w = buf.write
    w("[matrix]\n")
    w(f"box = {_fmt_vec(config.box)}\n")
    w(f"elements = {' '.join(str(n) for n in config.elements)}\n")
    w(f"orders = {' '.join(str(p) for p in config.orders)}\n")
    w(f"material = {config.material}\n")
    for key in _MATERIAL_KEYS[config.material]:
        w(f"{key} = {_fmt(config.material_params[key])}\n")
    if config.fixed_faces:
        w(f"fixed_faces = {' '.join(config.fixed_faces)}\n")
    if config.prescribed:
        clauses = "; ".join(f"{face}: {_fmt_vec(v)}" for face, v in config.prescribed)
        w(f"prescribed = {clauses}\n")
    if config.mean_deformation is not None:
        w(f"mean_deformation = {_fmt_vec(config.mean_deformation)}\n")
    for i, spec in enumerate(config.fibers, start=1):
        w(f"\n[beam.{i}]\n")
        w(f"start = {_fmt_vec(spec.start)}\n")
        w(f"end = {_fmt_vec(spec.end)}\n")
        w(f"radius = {_fmt(spec.radius)}\n")
        w(f"youngs = {_fmt(spec.youngs)}\n")
        w(f"poisson = {_fmt(spec.poisson)}\n")
        w(f"elements = {spec.n_elements}\n")
        if spec.clamp_start:
            w("clamp_start = true\n")
        for key in _BEAM_VECTOR_KEYS:
            v = getattr(spec, key)
            if np.any(v != 0.0):
                w(f"{key} = {_fmt_vec(v)}\n")
        if spec.directors is not None:
            w(f"directors = {_fmt_vec(np.asarray(spec.directors).T)}\n")
    w("\n[solver]\n")
    w(f"couple_tau = {'true' if config.couple_tau else 'false'}\n")
    w(f"couple_area = {'true' if config.couple_area else 'false'}\n")
    w(f"endpoint_constraints = {'true' if config.endpoint_constraints else 'false'}\n")
    w(f"unity = {config.unity}\n")
    w(f"load_steps = {config.load_steps}\n")
    w(f"max_iterations = {config.max_iterations}\n")
    w(f"mode = {config.mode}\n")
    if config.tolerance is not None:
        w(f"tolerance = {_fmt(config.tolerance)}\n")
    w("\n[output]\n")
    if config.centerline:
        w(f"centerline = {config.centerline}\n")
    w(f"samples = {config.samples}\n")
    if config.vtk:
        w(f"vtk = {config.vtk}\n")
    w(f"vtk_resolution = {config.vtk_resolution}\n")
    return buf.getvalue()


# ---------------------------------------------------------------------------
# presets


def preset_bending(n=4):
    """Cantilever bending: straight fiber in a soft block, tip moment.

    ``n`` elements across the section, ``5 n`` along the length; the fiber
    shares the axial breakpoints so its centerline lies in the trace of
    the matrix space.
    """
    return CaseConfig(
        box=(5.0, 1.0, 1.0),
        elements=(5 * n, n, n),
        orders=(4, 4, 4, 3, 3, 2, 2, 2),
        material="svk",
        material_params={"youngs": 10.0, "poisson": 0.0},
        fixed_faces=("x0",),
        fibers=[
            FiberSpec(
                start=(0.0, 0.5, 0.5),
                end=(5.0, 0.5, 0.5),
                radius=0.125,
                youngs=4346.0,
                poisson=0.0,
                n_elements=5 * n,
                clamp_start=True,
                m_ext_end=(0.0, 0.0, 0.025),
            )
        ],
        centerline="bending_centerline.csv",
    )


def preset_torsion(n=2):
    """Tip torsion: axial moment on the fiber end, rubber-like matrix."""
    config = preset_bending(n)
    config.material = "mooney_invariant"
    config.material_params = {"c1": 2.0, "c2": 1.0}
    config.fibers[0].m_ext_end = np.array([0.9, 0.0, 0.0])
    config.load_steps = 6
    config.centerline = "torsion_centerline.csv"
    return config


def preset_shear(n=2):
    """Matrix shear: bottom face fixed, top face dragged along the fiber."""
    return CaseConfig(
        box=(5.0, 1.0, 1.0),
        elements=(5 * n, n, n),
        orders=(4, 4, 4, 3, 3, 2, 2, 2),
        material="svk",
        material_params={"youngs": 10.0, "poisson": 0.0},
        fixed_faces=("z0",),
        prescribed=[("z1", (0.1, 0.0, 0.0))],
        fibers=[
            FiberSpec(
                start=(0.0, 0.5, 0.5),
                end=(5.0, 0.5, 0.5),
                radius=0.125,
                youngs=4346.0,
                poisson=0.0,
                n_elements=5 * n,
            )
        ],
        load_steps=2,
        centerline="shear_centerline.csv",
    )


_MEAN_DEFORMATION = np.array(
    [
        [0.999994, 0.000100, -0.000008],
        [-0.000040, 1.000002, -0.000020],
        [-0.000004, 0.000040, 0.999994],
    ]
)


def _rve_fibers(full, rng_seed=7):
    if not full:
        lines = [
            ((3.0, 6.0, 6.0), (17.0, 6.0, 6.0)),
            ((10.0, 14.0, 3.0), (10.0, 14.0, 17.0)),
            ((6.0, 3.0, 10.0), (6.0, 17.0, 10.0)),
        ]
        n_el = 7
    else:
        rng = np.random.default_rng(rng_seed)
        lines = []
        while len(lines) < 21:
            d = rng.normal(size=3)
            d /= np.linalg.norm(d)
            c = rng.uniform(3.0, 17.0, size=3)
            a, b = c - 7.0 * d, c + 7.0 * d
            if np.all(a > 0.5) and np.all(a < 19.5) and np.all(b > 0.5) and np.all(b < 19.5):
                lines.append((tuple(a), tuple(b)))
        n_el = 14
    return [
        FiberSpec(
            start=a,
            end=b,
            radius=0.1,
            youngs=200000.0,
            poisson=0.3,
            n_elements=n_el,
        )
        for a, b in lines
    ]


def preset_rve(full=False):
    """Fiber-reinforced cell with a prescribed mean deformation.

    The small variant (three orthogonal fibers on a 6x6x6 mesh) runs on a
    desktop; ``full=True`` selects the 20x20x20 mesh with 21 randomly
    oriented fibers of the same length.
    """
    return CaseConfig(
        box=(20.0, 20.0, 20.0),
        elements=(20, 20, 20) if full else (6, 6, 6),
        orders=(4, 4, 4, 3, 3, 2, 2, 2),
        material="svk",
        material_params={"youngs": 50000.0, "poisson": 0.2},
        mean_deformation=_MEAN_DEFORMATION,
        fibers=_rve_fibers(full),
    )


PRESETS = {
    "bending": preset_bending,
    "torsion": preset_torsion,
    "shear": preset_shear,
    "rve": preset_rve,
}


# ---------------------------------------------------------------------------
# problem construction


def _face_mask(xi, face):
    axis = "xyz".index(face[0])
    value = float(face[1])
    return np.abs(xi[:, axis] - value) < 1e-12


def _boundary_values(config, patch):
    """Map control-point index -> prescribed displacement (unrotated frame)."""
    xi = patch.greville_parametric
    values = {}

    def put(ids, vecs):
        for cp, v in zip(ids, vecs):
            if cp in values and not np.array_equal(values[cp], v):
                raise CaseError("conflicting boundary conditions at a shared edge")
            values[cp] = v

    for face in config.fixed_faces:
        ids = np.nonzero(_face_mask(xi, face))[0]
        put(ids, np.zeros((len(ids), 3)))
    for face, vec in config.prescribed:
        ids = np.nonzero(_face_mask(xi, face))[0]
        put(ids, np.broadcast_to(vec, (len(ids), 3)))
    if config.mean_deformation is not None:
        on_boundary = np.zeros(len(xi), dtype=bool)
        for face in FACES:
            on_boundary |= _face_mask(xi, face)
        ids = np.nonzero(on_boundary)[0]
        X = xi[ids] * config.box
        put(ids, X @ (config.mean_deformation - np.eye(3)).T)
    return values


def build_problem(config, rotation=None):
    """Build the discrete problem (and its dof map) for a configuration.

    ``rotation`` applies a rigid observer rotation to the whole case:
    geometry, fiber frames, loads and boundary values.  Results of the
    rotated case must match the unrotated one up to that rotation.
    """
    if rotation is None:
        Q = np.eye(3)
    else:
        Q = np.asarray(rotation, dtype=float)
        if Q.shape != (3, 3) or not np.allclose(Q.T @ Q, np.eye(3), atol=1e-12):
            raise ValueError("rotation must be a 3x3 orthogonal matrix")
        if np.linalg.det(Q) < 0:
            raise ValueError("rotation must preserve orientation")

    p = config.orders[0]
    patch = Patch3D(
        degrees=(p, p, p),
        n_elements=config.elements,
        origin=np.zeros(3),
        edge_matrix=Q @ np.diag(config.box),
    )

    if config.material == "svk":
        material = SaintVenantKirchhoff(**config.material_params)
    elif config.material == "mooney_invariant":
        material = MooneyRivlinInvariant(**config.material_params)
    else:
        material = MooneyRivlinPolyconvex(**config.material_params)

    fibers = []
    for spec in config.fibers:
        axis = np.asarray(spec.end, dtype=float) - np.asarray(spec.start, dtype=float)
        base = (
            default_directors(axis / np.linalg.norm(axis))
            if spec.directors is None
            else np.asarray(spec.directors, dtype=float)
        )
        rotated = FiberSpec(
            start=Q @ spec.start,
            end=Q @ spec.end,
            radius=spec.radius,
            youngs=spec.youngs,
            poisson=spec.poisson,
            n_elements=spec.n_elements,
            clamp_start=spec.clamp_start,
            directors=Q @ base,
            **{k: Q @ getattr(spec, k) for k in _BEAM_VECTOR_KEYS},
        )
        fibers.append(FiberDiscretization(rotated, patch, degree=config.orders[1]))

    values = _boundary_values(config, patch)
    dofs = []
    vals = []
    for cp in sorted(values):
        dofs.extend((3 * cp, 3 * cp + 1, 3 * cp + 2))
        vals.extend(Q @ values[cp])

    problem = Problem(
        patch,
        material,
        fibers,
        couple_tau=config.couple_tau,
        couple_area=config.couple_area,
        endpoint_constraints=config.endpoint_constraints,
        unity_mode=config.unity,
        dirichlet_dofs=np.array(dofs, dtype=int),
        dirichlet_values=np.array(vals),
    )
    return problem, build_dof_map(problem)


# ---------------------------------------------------------------------------
# field sampling and exports


def sample_centerline(problem, dofmap, x, fiber_index, n_samples):
    """Uniform arc-length samples of position, resultants and multiplier."""
    fib = problem.fibers[fiber_index]
    lay = dofmap.fibers[fiber_index]
    s = np.linspace(0.0, fib.length, n_samples)

    def field(kv, coeffs):
        first, ders = tabulate(kv, s, n_derivs=0)
        vals = ders[:, 0, :]
        width = vals.shape[1]
        out = np.empty((n_samples, coeffs.shape[1]))
        for j in range(n_samples):
            rows = coeffs[first[j] : first[j] + width]
            out[j] = vals[j] @ rows
        return out

    pos = field(fib.kv_pos, x[lay.pos].reshape(-1, 3))
    frc = field(fib.kv_res, x[lay.frc].reshape(-1, 3))
    mom = field(fib.kv_res, x[lay.mom].reshape(-1, 3))
    if lay.n_mul:
        mun = field(fib.kv_mul, x[lay.mun].reshape(-1, 3)[: lay.n_mul])
    else:
        mun = np.zeros((n_samples, 3))
    return s, pos, frc, mom, mun


def export_centerline(problem, dofmap, x, fiber_index, path, n_samples=101):
    """Write one fiber's centerline fields to CSV (12+ significant digits)."""
    s, pos, frc, mom, mun = sample_centerline(problem, dofmap, x, fiber_index, n_samples)
    with open(path, "w", newline="\n") as fh:
        fh.write(CENTERLINE_HEADER + "\n")
        for j in range(len(s)):
            row = np.concatenate(([s[j]], pos[j], frc[j], mom[j], mun[j]))
            fh.write(",".join(format(v, ".12e") for v in row) + "\n")
    return path


def _von_mises(sigma):
    dev = sigma - np.trace(sigma) / 3.0 * np.eye(3)
    return float(np.sqrt(1.5 * np.sum(dev * dev)))


def export_vtk(problem, x, path, resolution=20):
    """Sample displacement and von Mises stress on a uniform lattice.

    Legacy ASCII structured-points output; assumes an axis-aligned box.
    """
    patch = problem.patch
    n = int(resolution)
    u_cp = x[: 3 * patch.n_control_points].reshape(-1, 3)
    lengths = np.diag(patch.edge_matrix)
    ticks = np.linspace(0.0, 1.0, n + 1)

    disp = np.empty(((n + 1) ** 3, 3))
    vm = np.empty((n + 1) ** 3)
    material = problem.material
    row = 0
    for zk in ticks:
        for yj in ticks:
            for xi in ticks:
                pe = patch.eval_patch(np.array([xi, yj, zk]), n_derivs=1)
                ucp = u_cp[pe.indices]
                disp[row] = pe.values @ ucp
                F = np.eye(3) + ucp.T @ pe.grad
                P = first_pk(material, F)
                sigma = (P @ F.T) / np.linalg.det(F)
                vm[row] = _von_mises(sigma)
                row += 1

    with open(path, "w", newline="\n") as fh:
        fh.write("# vtk DataFile Version 3.0\n")
        fh.write("displacement and von Mises stress on a uniform lattice\n")
        fh.write("ASCII\nDATASET STRUCTURED_POINTS\n")
        fh.write(f"DIMENSIONS {n + 1} {n + 1} {n + 1}\n")
        fh.write(f"ORIGIN {_fmt(patch.origin[0])} {_fmt(patch.origin[1])} {_fmt(patch.origin[2])}\n")
        fh.write(f"SPACING {_fmt(lengths[0] / n)} {_fmt(lengths[1] / n)} {_fmt(lengths[2] / n)}\n")
        fh.write(f"POINT_DATA {(n + 1) ** 3}\n")
        fh.write("VECTORS displacement double\n")
        for row in disp:
            fh.write(" ".join(format(v, ".9e") for v in row) + "\n")
        fh.write("SCALARS von_mises double 1\nLOOKUP_TABLE default\n")
        for v in vm:
            fh.write(format(v, ".9e") + "\n")
    return path


# ---------------------------------------------------------------------------
# diagnostics and the end-to-end run


def moment_balance(problem, dofmap, x, fiber_index=0):
    """Global torque balance about one fiber's axis.

    Along the fiber the internal moment obeys a balance line: its change
    equals minus the torque density handed to the matrix by the rotation
    coupling, minus the convected force moment, minus applied line
    moments.  Integrating gives: applied end moment = root reaction +
    torque transferred into the matrix + the convected term (which
    vanishes for straight torsion).  All components are reported along
    the fiber axis; ``mismatch`` is the relative defect of the identity.
    The wall-face reaction torque is included as a cross-check.
    """
    fib = problem.fibers[fiber_index]
    lay = dofmap.fibers[fiber_index]
    spec = fib.spec
    a = fib.axis

    mom = x[lay.mom].reshape(-1, 3)
    frc = x[lay.frc].reshape(-1, 3)
    pos = x[lay.pos].reshape(-1, 3)
    ends, ders = tabulate(fib.kv_res, np.array([0.0, fib.length]), n_derivs=0)
    width = ders.shape[2]
    m_root = ders[0, 0, :] @ mom[ends[0] : ends[0] + width]
    m_tip = ders[1, 0, :] @ mom[ends[1] : ends[1] + width]

    # quadrature of the convected force moment along the centerline
    convected = np.zeros(3)
    for q in range(fib.n_qp):
        pf = fib.pos_first[q]
        dN = fib.pos_ders[q, 1]
        rf = fib.res_first[q]
        phi_p = dN @ pos[pf : pf + fib.degree + 1]
        n_q = fib.res_vals[q] @ frc[rf : rf + fib.degree]
        convected += fib.w[q] * np.cross(phi_p, n_q)
    convected += fib.length * spec.line_moment

    transferred = (m_tip - m_root) + convected

    system = assemble(problem, dofmap, x, want_tangent=False)
    R = system.R
    u_dofs = dofmap.constrained[dofmap.constrained < 3 * problem.patch.n_control_points]
    cps = np.unique(u_dofs // 3)
    torque = np.zeros(3)
    for cp in cps:
        f = R[3 * cp : 3 * cp + 3]
        torque += np.cross(problem.patch.control_points[cp] - spec.start, f)

    applied = float(spec.m_ext_end @ a)
    carried = float((m_root + transferred) @ a)
    return {
        "applied": applied,
        "beam_root": float(m_root @ a),
        "transferred": float(transferred @ a),
        "matrix_faces": float(torque @ a),
        "mismatch": abs(applied - carried) / max(1.0, abs(applied)),
    }


class CaseReport:
    """Everything a run produced: state, diagnostics and written files."""

    def __init__(self, config, problem, dofmap, result):
        self.config = config
        self.problem = problem
        self.dofmap = dofmap
        self.result = result
        self.x = result.x
        self.outputs = []

        self.converged = result.converged
        self.iterations = len(result.residuals)
        self.message = result.message
        self.tip_displacement = []
        for fib, lay in zip(problem.fibers, dofmap.fibers):
            tip = self.x[lay.pos].reshape(-1, 3)[-1]
            self.tip_displacement.append(tip - fib.spec.end)
        self.matrix_energy = matrix_energy(problem, self.x)
        self.beam_energy = beam_energy(problem, dofmap, self.x)
        self.constraints = constraint_report(problem, dofmap, self.x)
        self.average_piola = average_piola(problem, self.x)

    def summary_lines(self):
        lines = [
            f"converged: {self.converged} ({self.message}, {self.iterations} iterations)",
            f"energy: matrix {self.matrix_energy:.6e}, beams {self.beam_energy:.6e}",
        ]
        for i, tip in enumerate(self.tip_displacement, start=1):
            lines.append(
                f"fiber {i} tip displacement: magnitude {np.linalg.norm(tip):.9e} "
                f"[{tip[0]:.6e}, {tip[1]:.6e}, {tip[2]:.6e}]"
            )
        gaps = ", ".join(f"{k} {v:.3e}" for k, v in self.constraints.items())
        lines.append(f"coupling residuals: {gaps}")
        if self.config.mean_deformation is not None:
            P = self.average_piola
            lines.append("average first Piola-Kirchhoff stress:")
            for row in P:
                lines.append("  " + " ".join(f"{v: .8e}" for v in row))
        for path in self.outputs:
            lines.append(f"wrote {path}")
        return lines


def run_case(config, out_dir=None):
    """Build, solve and export one case; returns a :class:`CaseReport`."""
    problem, dofmap = build_problem(config)
    mode = None if config.mode == "auto" else config.mode
    result = solve_with_load_steps(
        problem,
        dofmap,
        n_steps=config.load_steps,
        mode=mode,
        abs_tol=config.tolerance,
        max_iters=config.max_iterations,
    )
    report = CaseReport(config, problem, dofmap, result)
    if not result.converged:
        return report

    def resolve(name):
        if out_dir is None:
            return name
        os.makedirs(out_dir, exist_ok=True)
        return os.path.join(out_dir, name)

    if config.centerline:
        root, ext = os.path.splitext(config.centerline)
        for i in range(len(problem.fibers)):
            name = config.centerline if i == 0 else f"{root}_f{i + 1}{ext}"
            report.outputs.append(
                export_centerline(
                    problem, dofmap, report.x, i, resolve(name), config.samples
                )
            )
    if config.vtk:
        report.outputs.append(
            export_vtk(problem, report.x, resolve(config.vtk), config.vtk_resolution)
        )
    return report
