"""Flat ``key = value`` run configuration with dotted sections.

Example::

    # environment
    field.dimension = 1
    field.kappa = 0.5
    field.radii = 2
    nu.pmf = 0:0.5,2:0.5
    sim.dt = 0.25
    exp.R_list = 10,20,40

Lines may also be grouped under ``[field]``-style headers, in which case
keys inside the group are relative.  Unknown keys are rejected.
"""
from __future__ import annotations

from dataclasses import dataclass, field

from .branching import SimConfig
from .obstacles import ObstacleField, ShapeLaw, intensity_for_kappa
from .offspring import OffspringDistribution, pmf_from_string
from .testfunctions import TestFunction


class ConfigError(ValueError):
    """Invalid configuration; ``messages`` lists one problem per key."""

    def __init__(self, messages):
        self.messages = list(messages)
        super().__init__("; ".join(self.messages))


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _floats(s: str) -> list[float]:
    return [float(v) for v in s.replace(";", ",").split(",") if v.strip()]


def _ints(s: str) -> list[int]:
    return [int(float(v)) for v in s.replace(";", ",").split(",") if v.strip()]


def _pairs(s: str) -> list[tuple[float, float]]:
    out = []
    for part in s.replace(";", ",").split(","):
        if part.strip():
            a, b = part.split(":")
            out.append((float(a), float(b)))
    return out


def _opt_float(s: str):
    return None if s.strip().lower() in ("", "none", "auto") else float(s)


def _int(s: str) -> int:
    v = float(s)
    if v != int(v):
        raise ValueError(f"not an integer: {s!r}")
    return int(v)


SCHEMA = {
    # obstacle field
    "field.mode": (str, "obstacles"),
    "field.dimension": (_int, 1),
    "field.intensity": (_opt_float, None),
    "field.kappa": (_opt_float, None),
    "field.radii": (_floats, [1.0]),
    "field.weights": (_floats, None),
    "field.master_seed": (_int, 0),
    "field.cell_size": (_opt_float, None),
    # offspring law
    "nu.pmf": (str, "0:0.5,2:0.5"),
    # particle simulation
    "sim.epsilon": (float, 0.0),
    "sim.dt": (_opt_float, None),
    "sim.stop_domain": (str, "ball"),
    "sim.stop_radius": (float, 1.0),
    "sim.t_max": (_opt_float, None),
    "sim.initial_count": (_int, 1),
    "sim.seed": (_int, 0),
    "sim.bridge": (_bool, True),
    "sim.substeps": (_int, 1),
    "sim.replicates": (_int, 1000),
    "sim.snapshot_times": (_floats, []),
    # experiment grids
    "exp.a": (float, 1.0),
    "exp.R_list": (_floats, [10.0, 20.0, 40.0]),
    "exp.replicates": (_ints, [20000]),
    "exp.b": (float, 1.0),
    "exp.eps_list": (_floats, [0.04, 0.01, 0.0025]),
    "exp.r_grid": (_floats, [0.5, 1.0, 2.0]),
    "exp.eps_R_pairs": (_pairs, [(1 / 1600, 40.0), (4 / 1600, 40.0), (16 / 1600, 40.0), (64 / 1600, 40.0)]),
    "exp.homogeneous_control": (_bool, True),
    "exp.theta": (float, 1.0),
    "exp.g": (TestFunction.parse, TestFunction("gauss", 1.0, 1.0)),
    "exp.n_fields": (_int, 200),
    "exp.y": (_floats, None),
    "exp.t_list": (_floats, [1.0]),
    "exp.control": (_bool, True),
    "exp.control_dt": (float, 1.0),
    "exp.x_list": (_floats, [0.5, 1.0, 2.0, 5.0, 10.0]),
    "exp.sigma2": (_opt_float, None),
    "exp.R_A": (float, 1.0),
    "exp.ladder": (_floats, None),
    "exp.window": (_floats, [-1e4, 1e4]),
    "exp.n": (_int, 1000000),
    "exp.env_seeds": (_ints, None),
    "exp.n_envs": (_int, None),
    "exp.env_rows": (_bool, True),
    # self-test
    "selftest.bvp_perturbation": (float, 0.0),
    "selftest.bvp_tolerance": (float, 1e-4),
    # output
    "output.dir": (str, "."),
}


def parse_text(text: str) -> dict[str, str]:
    """Raw key -> value strings; later keys override earlier ones."""
    raw: dict[str, str] = {}
    section = ""
    for lineno, line in enumerate(text.splitlines(), 1):
        s = line.split("#", 1)[0].strip()
        if not s:
            continue
        if s.startswith("[") and s.endswith("]"):
            section = s[1:-1].strip()
            continue
        if "=" not in s:
            raise ConfigError([f"line {lineno}: expected 'key = value', got {line.strip()!r}"])
        k, v = (p.strip() for p in s.split("=", 1))
        raw[f"{section}.{k}" if section else k] = v
    return raw


@dataclass
class RunConfig:
    """Validated configuration: typed values plus the raw text echo."""

    values: dict
    raw: dict = field(default_factory=dict)

    @classmethod
    def from_raw(cls, raw: dict[str, str]) -> "RunConfig":
        errors = []
        values = {k: default for k, (_, default) in SCHEMA.items()}
        for k, v in raw.items():
            if k not in SCHEMA:
                errors.append(f"{k}: unknown key")
                continue
            try:
                values[k] = SCHEMA[k][0](v)
            except (ValueError, TypeError) as exc:
                errors.append(f"{k}: {exc}")
        if errors:
            raise ConfigError(errors)
        cfg = cls(values, dict(raw))
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path=None, overrides=()) -> "RunConfig":
        raw = {}
        if path:
            with open(path, encoding="utf-8") as f:
                raw.update(parse_text(f.read()))
        for item in overrides:
            if "=" not in item:
                raise ConfigError([f"override {item!r}: expected key=value"])
            k, v = item.split("=", 1)
            raw[k.strip()] = v.strip()
        return cls.from_raw(raw)

    def __getitem__(self, key):
        return self.values[key]

    def validate(self):
        errors = []
        for builder in (self.nu, self.field, self.sim_config):
            try:
                builder()
            except ConfigError as exc:
                errors.extend(exc.messages)
            except ValueError as exc:
                errors.append(f"{builder.__name__}: {exc}")
        if errors:
            raise ConfigError(errors)

    def echo(self) -> dict:
        """Canonical typed echo of every setting (for output files)."""
        out = {}
        for k, v in sorted(self.values.items()):
            out[k] = str(v) if isinstance(v, TestFunction) else v
        return out

    # -- builders ----------------------------------------------------------

    def nu(self) -> OffspringDistribution:
        try:
            return pmf_from_string(self["nu.pmf"])
        except ValueError as exc:
            raise ConfigError([f"nu.pmf: {exc}"]) from None

    def field(self):
        mode = self["field.mode"]
        if mode in ("none", "homogeneous"):
            return mode
        if mode != "obstacles":
            raise ConfigError([f"field.mode: must be obstacles, homogeneous or none, got {mode!r}"])
        radii = self["field.radii"]
        weights = self["field.weights"] or [1.0 / len(radii)] * len(radii)
        d = self["field.dimension"]
        lam, kap = self["field.intensity"], self["field.kappa"]
        if lam is not None and kap is not None:
            raise ConfigError(["field.intensity / field.kappa: give only one"])
        try:
            if lam is None:
                if len(radii) != 1:
                    raise ValueError("field.kappa needs a single radius; give field.intensity instead")
                lam = intensity_for_kappa(0.5 if kap is None else kap, radii[0], d)
            law = ShapeLaw(tuple(radii), tuple(weights), lam)
            return ObstacleField(law, d, self["field.master_seed"], self["field.cell_size"])
        except ValueError as exc:
            raise ConfigError([f"field: {exc}"]) from None

    def dimension(self) -> int:
        return self["field.dimension"]

    def default_dt(self) -> float:
        fld = self.field()
        if isinstance(fld, ObstacleField):
            return (fld.r0 / 4) ** 2
        return 1e-3 * max(self["sim.stop_radius"], 1.0) ** 2

    def sim_config(self) -> SimConfig:
        try:
            return SimConfig(
                epsilon=self["sim.epsilon"],
                dt=self["sim.dt"] or self.default_dt(),
                stop_domain=self["sim.stop_domain"],
                stop_radius=self["sim.stop_radius"],
                t_max=self["sim.t_max"],
                initial_count=self["sim.initial_count"],
                seed=self["sim.seed"],
                bridge=self["sim.bridge"],
                substeps=self["sim.substeps"],
                snapshot_times=tuple(self["sim.snapshot_times"]),
                dimension=self.dimension(),
            )
        except ValueError as exc:
            raise ConfigError([f"sim: {exc}"]) from None

    def env_seeds(self):
        """Explicit seed list, else 0..n_envs-1, else None (the field's own seed)."""
        if self["exp.env_seeds"] is not None:
            return self["exp.env_seeds"]
        n = self["exp.n_envs"]
        if n is None:
            return None
        if n < 1:
            raise ConfigError(["exp.n_envs: must be >= 1"])
        return list(range(n))

    def replicates(self, n_rows: int):
        reps = self["exp.replicates"]
        if len(reps) == 1:
            return reps[0]
        if len(reps) != n_rows:
            raise ConfigError([f"exp.replicates: need 1 or {n_rows} values, got {len(reps)}"])
        return reps
