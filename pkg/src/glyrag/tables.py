"""Decision tables shipped as CSV, parsed into exact rational predicates.

Table grammar (``zone,predicate_id,inequality``)::

    inequality := "true" | atom (" and " atom)*
    atom       := expr op expr          op in <=, >=, <, >
    expr       := term (("+" | "-") term)*
    term       := [number "*"] variable | number      number: integer or p/q

Rows are tried in file order and the first satisfied predicate names the
zone. Every atom is linear, so it is compiled to integer coefficients
``a*u + b*v + c (op) 0`` and evaluated exactly on integer lattices.
"""

from __future__ import annotations

import csv
import math
import operator
import re
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache
from importlib import resources

import numpy as np

_OPS = {"<=": operator.le, ">=": operator.ge, "<": operator.lt, ">": operator.gt}
_ATOM = re.compile(r"^(.*?)\s*(<=|>=|<|>)\s*(.*)$")
_TERM = re.compile(r"^(?:(\d+(?:/\d+)?)\s*\*\s*)?([a-z_]+)$|^(\d+(?:/\d+)?)$")


class TableError(ValueError):
    pass


def _linear(expr: str, variables: tuple[str, str]) -> tuple[Fraction, Fraction, Fraction]:
    expr = expr.replace(" ", "")
    if not expr:
        raise TableError("empty expression")
    if expr[0] not in "+-":
        expr = "+" + expr
    coef = {variables[0]: Fraction(0), variables[1]: Fraction(0)}
    const = Fraction(0)
    for sign, body in re.findall(r"([+-])([^+-]+)", expr):
        m = _TERM.match(body)
        if not m:
            raise TableError(f"bad term {body!r}")
        s = 1 if sign == "+" else -1
        if m.group(2):
            if m.group(2) not in coef:
                raise TableError(f"unknown variable {m.group(2)!r}")
            coef[m.group(2)] += s * Fraction(m.group(1) or 1)
        else:
            const += s * Fraction(m.group(3))
    return coef[variables[0]], coef[variables[1]], const


@dataclass(frozen=True)
class Atom:
    a: int
    b: int
    c: int
    op: str

    def holds(self, u, v):
        return _OPS[self.op](self.a * u + self.b * v + self.c, 0)


@dataclass(frozen=True)
class Predicate:
    zone: str
    pid: str
    text: str
    atoms: tuple[Atom, ...]

    def holds(self, u, v):
        out = np.ones(np.broadcast(u, v).shape, dtype=bool)
        for atom in self.atoms:
            out &= atom.holds(u, v)
        return out


def parse_inequality(text: str, variables: tuple[str, str]) -> tuple[Atom, ...]:
    text = text.strip()
    if text == "true":
        return ()
    atoms = []
    for part in text.split(" and "):
        m = _ATOM.match(part.strip())
        if not m:
            raise TableError(f"bad atom {part!r}")
        la, lb, lc = _linear(m.group(1), variables)
        ra, rb, rc = _linear(m.group(3), variables)
        a, b, c = la - ra, lb - rb, lc - rc
        scale = math.lcm(a.denominator, b.denominator, c.denominator)
        atoms.append(Atom(int(a * scale), int(b * scale), int(c * scale), m.group(2)))
    return tuple(atoms)


def load_table(name: str, variables: tuple[str, str]) -> tuple[Predicate, ...]:
    return _load(name, variables)


@lru_cache(maxsize=None)
def _load(name: str, variables: tuple[str, str]) -> tuple[Predicate, ...]:
    text = resources.files("glyrag").joinpath("data", name).read_text(encoding="utf-8")
    rows = list(csv.DictReader(text.splitlines()))
    if not rows or list(rows[0]) != ["zone", "predicate_id", "inequality"]:
        raise TableError(f"{name}: expected columns zone,predicate_id,inequality")
    return tuple(Predicate(r["zone"], r["predicate_id"], r["inequality"],
                           parse_inequality(r["inequality"], variables)) for r in rows)


def classify(table, u, v) -> np.ndarray:
    """First-match zone for integer (or exactly representable) inputs ``u``, ``v``."""
    u = np.asarray(u)
    v = np.asarray(v)
    shape = np.broadcast(u, v).shape
    out = np.full(shape, "", dtype="<U1")
    open_ = np.ones(shape, dtype=bool)
    for pred in table:
        hit = open_ & pred.holds(u, v)
        out[hit] = pred.zone
        open_ &= ~hit
    return out


def zone_match_counts(table, u, v) -> np.ndarray:
    """Number of distinct non-fallback zones satisfied at each point (exclusivity audit)."""
    u = np.asarray(u)
    v = np.asarray(v)
    shape = np.broadcast(u, v).shape
    hits: dict[str, np.ndarray] = {}
    for pred in table:
        if pred.atoms:
            hits[pred.zone] = hits.get(pred.zone, np.zeros(shape, dtype=bool)) | pred.holds(u, v)
    return sum((h.astype(int) for h in hits.values()), np.zeros(shape, dtype=int))


def clarke_table():
    return load_table("clarke_zones.csv", ("ref", "pred"))


def rate_table():
    return load_table("rate_zones.csv", ("x", "y"))


@lru_cache(maxsize=None)
def combination_table() -> dict[tuple[str, str, str], str]:
    text = resources.files("glyrag").joinpath("data", "cgega_combination.csv").read_text(encoding="utf-8")
    return {(r["band"], r["p_zone"], r["r_zone"]): r["outcome"] for r in csv.DictReader(text.splitlines())}


@lru_cache(maxsize=None)
def pega_expansion() -> tuple[tuple[str, float, float, float], ...]:
    text = resources.files("glyrag").joinpath("data", "pega_expansion.csv").read_text(encoding="utf-8")
    return tuple((r["side"], float(r["rate_low"]), float(r["rate_high"]), float(r["shift_mg_dl"]))
                 for r in csv.DictReader(text.splitlines()))
