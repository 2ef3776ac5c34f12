"""YAML run configurations.

Example::

    problem:
      family: fig1          # fig1 | location-scale | multiplayer
      rho: 0.5
      feasible: {kind: whole-space}
    run: {eta0: 1.0, nu: 0.75, T: 100000, R: 200, seed: 0, checkpoints: [1000, 10000, 100000]}
    tolerances: {rel_op_error: 0.25, coverage_band: [0.84, 0.96]}
    tilt: {u: [0.1, 0.0], k: 10000, replicas: 200, u_norms: [0.04, 0.02, 0.01]}

Every error names the offending key and its line in the file.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from .dynamics import StepSchedule
from .errors import ConfigError, PerfsaError
from .problem import (Constants, FeasibleSet, LinearDecision, MultiplayerProduct, MultiplayerQuadratic,
                      PlayerBlock, PlayerLoss, Problem, QuadraticTracking, fig1_problem,
                      location_scale_problem)
from .tilt import SaturationFunction, TiltSpec

SECTIONS = {
    "problem": {"family", "name", "rho", "A", "base_mean", "base_cov", "decision", "players", "feasible",
                "constants"},
    "run": {"eta0", "nu", "T", "R", "seed", "checkpoints", "burn_in", "x0"},
    "tolerances": {"outer", "inner", "rel_op_error", "coverage_level", "coverage_band", "lan_se", "shift_batches"},
    "tilt": {"u", "k", "replicas", "u_norms", "direction", "mc_samples", "f_samples", "saturation"},
}
FAMILIES = ("fig1", "location-scale", "multiplayer")


@dataclass
class RunSettings:
    eta0: float = 1.0
    nu: float = 0.75
    T: int = 100000
    R: int = 200
    seed: int = 0
    checkpoints: list = field(default_factory=lambda: [1000, 10000, 100000])
    burn_in: int = 0
    x0: Optional[list] = None

    @property
    def schedule(self) -> StepSchedule:
        return StepSchedule(self.eta0, self.nu)


@dataclass
class Tolerances:
    outer: float = 1e-10
    inner: float = 1e-12
    rel_op_error: float = 0.25
    coverage_level: float = 0.9
    coverage_band: Optional[list] = None
    lan_se: float = 3.0
    shift_batches: int = 10


@dataclass
class TiltSettings:
    u: Optional[list] = None
    k: int = 10000
    replicas: int = 200
    u_norms: list = field(default_factory=lambda: [0.04, 0.02, 0.01])
    direction: Optional[list] = None
    mc_samples: int = 100000
    f_samples: int = 100000
    saturation: dict = field(default_factory=lambda: {"knot": 1.5, "level": 1.0})

    def spec(self, dim: int) -> TiltSpec:
        sat = self.saturation
        h = SaturationFunction.with_knot(sat.get("knot", 1.5), sat.get("level", 1.0))
        return TiltSpec(np.zeros(dim) if self.u is None else self.u, "canonical-noise", h)


@dataclass
class RunConfig:
    problem: Problem
    run: RunSettings
    tolerances: Tolerances
    tilt: TiltSettings
    snapshot: dict
    source: Optional[str] = None

    def to_dict(self) -> dict:
        return copy.deepcopy(self.snapshot)


class _Lines:
    """Line numbers (1-based) of keys, by dotted path."""

    def __init__(self, text: Optional[str] = None):
        self.map = {}
        if text:
            node = yaml.compose(text, Loader=yaml.SafeLoader)
            if node is not None:
                self._walk(node, ())

    def _walk(self, node, path):
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                p = path + (str(k.value),)
                self.map[p] = k.start_mark.line + 1
                self._walk(v, p)
        elif isinstance(node, yaml.SequenceNode):
            for i, v in enumerate(node.value):
                p = path + (str(i),)
                self.map[p] = v.start_mark.line + 1
                self._walk(v, p)

    def line(self, path) -> Optional[int]:
        path = tuple(str(p) for p in path)
        while path:
            if path in self.map:
                return self.map[path]
            path = path[:-1]
        return None


class _Reader:
    def __init__(self, lines: _Lines):
        self.lines = lines

    def fail(self, msg, path):
        raise ConfigError(msg, key=".".join(str(p) for p in path), line=self.lines.line(path))

    def number(self, value, path, integer=False, positive=False):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            # YAML 1.1 reads "1e-10" as a string
            try:
                value = float(value) if isinstance(value, str) else None
            except ValueError:
                value = None
            if value is None:
                self.fail("expected a number", path)
        if integer:
            if float(value) != int(value):
                self.fail("expected an integer", path)
            value = int(value)
        else:
            value = float(value)
        if positive and not value > 0:
            self.fail("must be positive", path)
        return value

    def vector(self, value, path):
        if not isinstance(value, list):
            self.fail("expected a list of numbers", path)
        return [self.number(v, path + (i,)) for i, v in enumerate(value)]

    def matrix(self, value, path):
        if not isinstance(value, list) or not value or not all(isinstance(r, list) for r in value):
            self.fail("expected a matrix as a list of rows", path)
        rows = [self.vector(r, path + (i,)) for i, r in enumerate(value)]
        if len({len(r) for r in rows}) != 1:
            self.fail("matrix rows differ in length", path)
        return rows

    def section(self, data, name):
        sec = data.get(name, {}) or {}
        if not isinstance(sec, dict):
            self.fail("expected a mapping", (name,))
        for key in sec:
            if key not in SECTIONS[name]:
                self.fail(f"unknown key (allowed: {', '.join(sorted(SECTIONS[name]))})", (name, key))
        return {k: v for k, v in sec.items() if v is not None}


def _feasible(rd: _Reader, spec, dim, path) -> FeasibleSet:
    if spec is None:
        return FeasibleSet.whole_space(dim)
    if not isinstance(spec, dict) or "kind" not in spec:
        rd.fail("feasible set needs a 'kind'", path)
    kind = spec["kind"]
    try:
        if kind == "whole-space":
            return FeasibleSet.whole_space(dim)
        if kind == "box":
            return FeasibleSet.box(rd.vector(spec.get("lower"), path + ("lower",)),
                                   rd.vector(spec.get("upper"), path + ("upper",)))
        if kind in ("ball", "euclidean-ball"):
            return FeasibleSet.ball(rd.vector(spec.get("center", [0.0] * dim), path + ("center",)),
                                    rd.number(spec.get("radius"), path + ("radius",), positive=True))
    except PerfsaError as exc:
        if isinstance(exc, ConfigError):
            raise
        rd.fail(str(exc), path)
    rd.fail(f"unknown feasible-set kind {kind!r}", path + ("kind",))


def _constants(rd, spec, path):
    if spec is None:
        return None
    if not isinstance(spec, dict):
        rd.fail("expected a mapping", path)
    try:
        vals = {k: rd.number(spec[k], path + (k,)) for k in ("alpha", "beta", "gamma")}
    except KeyError as exc:
        rd.fail(f"missing constant {exc.args[0]}", path)
    lbar = spec.get("lbar")
    return Constants(vals["alpha"], vals["beta"], vals["gamma"],
                     None if lbar is None else rd.number(lbar, path + ("lbar",)))


def _problem(rd: _Reader, sec) -> Problem:
    fam = sec.get("family")
    if fam not in FAMILIES:
        rd.fail(f"family must be one of {', '.join(FAMILIES)}", ("problem", "family"))
    consts = _constants(rd, sec.get("constants"), ("problem", "constants"))
    try:
        if fam == "fig1":
            rho = rd.number(sec.get("rho", 0.5), ("problem", "rho"))
            if consts is not None and not consts.gamma * consts.beta < consts.alpha:
                rd.fail("compatibility gamma*beta < alpha fails", ("problem", "constants"))
            feas = _feasible(rd, sec.get("feasible"), 2, ("problem", "feasible"))
            if not abs(rho) < 1:
                rd.fail("fig1 needs |rho| < 1 (gamma*beta < alpha)", ("problem", "rho"))
            return fig1_problem(rho, feas)
        if fam == "location-scale":
            A = rd.matrix(sec.get("A"), ("problem", "A"))
            d = len(A[0])
            mean = sec.get("base_mean")
            cov = sec.get("base_cov")
            dec_spec = sec.get("decision") or {"kind": "quadratic-tracking"}
            if not isinstance(dec_spec, dict):
                rd.fail("expected a mapping", ("problem", "decision"))
            dp = ("problem", "decision")
            if dec_spec.get("kind") == "quadratic-tracking":
                decision = QuadraticTracking(d)
            elif dec_spec.get("kind") == "linear":
                decision = LinearDecision(rd.matrix(dec_spec.get("M"), dp + ("M",)),
                                          rd.matrix(dec_spec.get("N"), dp + ("N",)),
                                          None if dec_spec.get("b") is None else rd.vector(dec_spec["b"], dp + ("b",)))
            else:
                rd.fail("decision kind must be quadratic-tracking or linear", dp + ("kind",))
            return location_scale_problem(
                A, None if mean is None else rd.vector(mean, ("problem", "base_mean")),
                None if cov is None else rd.matrix(cov, ("problem", "base_cov")), decision,
                _feasible(rd, sec.get("feasible"), d, ("problem", "feasible")), consts,
                name=sec.get("name", "location-scale"))
        players = sec.get("players")
        if not isinstance(players, list) or not players:
            rd.fail("multiplayer needs a list of players", ("problem", "players"))
        blocks, losses = [], []
        for i, pl in enumerate(players):
            pp = ("problem", "players", i)
            if not isinstance(pl, dict):
                rd.fail("expected a mapping", pp)
            blocks.append(PlayerBlock(rd.matrix(pl.get("A_own"), pp + ("A_own",)),
                                      rd.matrix(pl.get("A_other"), pp + ("A_other",)),
                                      None if pl.get("mean") is None else rd.vector(pl["mean"], pp + ("mean",)),
                                      None if pl.get("cov") is None else rd.matrix(pl["cov"], pp + ("cov",))))
            losses.append(PlayerLoss(rd.matrix(pl.get("P"), pp + ("P",)), rd.matrix(pl.get("Q"), pp + ("Q",)),
                                     rd.matrix(pl.get("B"), pp + ("B",))))
        dist = MultiplayerProduct(blocks)
        dec = MultiplayerQuadratic(losses)
        feas = _feasible(rd, sec.get("feasible"), dist.dim_decision, ("problem", "feasible"))
        return Problem(feas, dist, dec, consts, name=sec.get("name", "multiplayer"))
    except ConfigError:
        raise
    except PerfsaError as exc:
        rd.fail(str(exc), ("problem", "constants") if "compatib" in str(exc) else ("problem",))


def config_from_dict(data: dict, lines: Optional[_Lines] = None, source: Optional[str] = None) -> RunConfig:
    """Validate a parsed configuration tree."""
    rd = _Reader(lines or _Lines())
    if not isinstance(data, dict):
        rd.fail("top level must be a mapping", ())
    for key in data:
        if key not in SECTIONS:
            rd.fail(f"unknown section (allowed: {', '.join(SECTIONS)})", (key,))
    if "problem" not in data:
        rd.fail("missing section", ("problem",))
    problem = _problem(rd, rd.section(data, "problem"))

    rs = rd.section(data, "run")
    run = RunSettings()
    for key in ("eta0", "nu"):
        if key in rs:
            setattr(run, key, rd.number(rs[key], ("run", key), positive=True))
    for key in ("T", "R", "seed", "burn_in"):
        if key in rs:
            setattr(run, key, rd.number(rs[key], ("run", key), integer=True))
    if "checkpoints" in rs:
        run.checkpoints = [rd.number(v, ("run", "checkpoints", i), integer=True, positive=True)
                           for i, v in enumerate(rs["checkpoints"] or [])]
    if "x0" in rs:
        run.x0 = rd.vector(rs["x0"], ("run", "x0"))
        if len(run.x0) != problem.dim:
            rd.fail(f"x0 must have {problem.dim} entries", ("run", "x0"))
    if not 0 < run.nu <= 1:
        rd.fail("nu must lie in (0, 1]", ("run", "nu"))
    if run.T < 1:
        rd.fail("T must be at least 1", ("run", "T"))

    ts = rd.section(data, "tolerances")
    tol = Tolerances()
    for key in ("outer", "inner", "rel_op_error", "coverage_level", "lan_se"):
        if key in ts:
            setattr(tol, key, rd.number(ts[key], ("tolerances", key), positive=True))
    if "shift_batches" in ts:
        tol.shift_batches = rd.number(ts["shift_batches"], ("tolerances", "shift_batches"), integer=True)
    if "coverage_band" in ts and ts["coverage_band"] is not None:
        band = rd.vector(ts["coverage_band"], ("tolerances", "coverage_band"))
        if len(band) != 2 or not 0 <= band[0] <= band[1] <= 1:
            rd.fail("coverage_band must be [low, high] within [0, 1]", ("tolerances", "coverage_band"))
        tol.coverage_band = band

    tl = rd.section(data, "tilt")
    tilt = TiltSettings()
    for key in ("u", "direction"):
        if key in tl and tl[key] is not None:
            vec = rd.vector(tl[key], ("tilt", key))
            if len(vec) != problem.dim:
                rd.fail(f"expected {problem.dim} entries", ("tilt", key))
            setattr(tilt, key, vec)
    for key in ("k", "replicas", "mc_samples", "f_samples"):
        if key in tl:
            setattr(tilt, key, rd.number(tl[key], ("tilt", key), integer=True, positive=True))
    if "u_norms" in tl:
        tilt.u_norms = rd.vector(tl["u_norms"], ("tilt", "u_norms"))
    if "saturation" in tl:
        sat = tl["saturation"] or {}
        if not isinstance(sat, dict) or set(sat) - {"knot", "level"}:
            rd.fail("saturation takes knot and level", ("tilt", "saturation"))
        tilt.saturation = {k: rd.number(v, ("tilt", "saturation", k), positive=True) for k, v in sat.items()}
        try:
            tilt.spec(problem.dim)
        except PerfsaError as exc:
            rd.fail(str(exc), ("tilt", "saturation"))

    snapshot = {
        "problem": copy.deepcopy(data["problem"]),
        "run": asdict(run),
        "tolerances": asdict(tol),
        "tilt": asdict(tilt),
    }
    return RunConfig(problem, run, tol, tilt, snapshot, source)


def parse_config(text: str, source: Optional[str] = None) -> RunConfig:
    try:
        lines = _Lines(text)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(f"malformed YAML: {getattr(exc, 'problem', exc)}",
                          line=None if mark is None else mark.line + 1) from exc
    return config_from_dict(data if data is not None else {}, lines, source)


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from exc
    return parse_config(text, str(path))
