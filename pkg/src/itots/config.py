"""Line-oriented configuration and result files.

Format::

    # comment
    [section]
    key = value
    A 1 = [[-0.5, 0],
           [-1, a]]          # continues until brackets balance

Keys may contain spaces (``membership 1 2``). Matrix entries are numbers,
parameter names or simple arithmetic on them; names are resolved from the
``[params]`` section or from command-line overrides. Certificates, gains and
reports are written in the same format so every file the tools emit can be
read back with :func:`parse`.
"""
from __future__ import annotations

import ast
import operator
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional

import numpy as np

from .tsmodel import Complement, Gaussian, MembershipFamily, TSModel


class ConfigError(ValueError):
    def __init__(self, msg: str, line: Optional[int] = None, source: str = "<config>"):
        self.line = line
        self.source = source
        where = f"{source}:{line}: " if line is not None else f"{source}: "
        super().__init__(where + msg)


@dataclass
class Entry:
    value: str
    line: int


@dataclass
class Document:
    sections: dict = field(default_factory=dict)
    source: str = "<config>"
    path: Optional[Path] = None

    def section(self, name: str) -> dict:
        return self.sections.get(name, {})

    def has(self, name: str) -> bool:
        return name in self.sections

    def error(self, msg: str, entry: Optional[Entry] = None) -> ConfigError:
        return ConfigError(msg, entry.line if entry else None, self.source)

    def get(self, section: str, key: str, default=None):
        e = self.section(section).get(key)
        return default if e is None else e.value

    def number(self, section: str, key: str, default=None, kind=float):
        e = self.section(section).get(key)
        if e is None:
            if default is None:
                raise self.error(f"missing [{section}] {key}")
            return default
        try:
            return kind(e.value) if kind is not int else int(float(e.value))
        except ValueError:
            raise self.error(f"[{section}] {key}: expected a number, got {e.value!r}", e) from None

    def resolve_path(self, value: str) -> Path:
        p = Path(value)
        if not p.is_absolute() and self.path is not None:
            p = self.path.parent / p
        return p


def _balance(text: str) -> int:
    return text.count("[") - text.count("]")


def parse(text: str, source: str = "<config>") -> Document:
    doc = Document(source=source)
    current = None
    pending = None  # (section, key, value, line)
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].rstrip()
        if pending is not None:
            sec, key, val, start = pending
            val = val + " " + line.strip()
            if _balance(val) <= 0:
                doc.sections[sec][key] = Entry(val, start)
                pending = None
            else:
                pending = (sec, key, val, start)
            continue
        if not line.strip():
            continue
        stripped = line.strip()
        if stripped.startswith("["):
            if not stripped.endswith("]") or stripped.count("[") != 1:
                raise ConfigError(f"malformed section header {stripped!r}", lineno, source)
            current = stripped[1:-1].strip()
            doc.sections.setdefault(current, {})
            continue
        if "=" not in stripped:
            raise ConfigError(f"expected 'key = value', got {stripped!r}", lineno, source)
        if current is None:
            raise ConfigError("entry before any [section] header", lineno, source)
        key, val = (part.strip() for part in stripped.split("=", 1))
        key = " ".join(key.split())
        if key in doc.sections[current]:
            raise ConfigError(f"duplicate key {key!r} in [{current}]", lineno, source)
        if _balance(val) > 0:
            pending = (current, key, val, lineno)
        elif _balance(val) < 0:
            raise ConfigError(f"unbalanced ']' in value of {key!r}", lineno, source)
        else:
            doc.sections[current][key] = Entry(val, lineno)
    if pending is not None:
        raise ConfigError(f"unterminated matrix for {pending[1]!r}", pending[3], source)
    return doc


BUNDLED = ("example1", "example2")


def load(path) -> Document:
    """Read a config file; bare names ``example1``/``example2`` load bundled fixtures."""
    p = Path(path)
    if not p.exists() and p.stem in BUNDLED and p.suffix in ("", ".cfg"):
        text = resources.files("itots.data").joinpath(f"{p.stem}.cfg").read_text(encoding="utf-8")
        return parse(text, source=f"{p.stem}.cfg")
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read: {exc.strerror}", None, str(p)) from None
    doc = parse(text, source=str(p))
    doc.path = p
    return doc


# -- values ---------------------------------------------------------------------

_BINOPS = {ast.Add: operator.add, ast.Sub: operator.sub, ast.Mult: operator.mul,
           ast.Div: operator.truediv, ast.Pow: operator.pow}


def _eval_node(node, params: dict):
    if isinstance(node, ast.List):
        return [_eval_node(e, params) for e in node.elts]
    if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)):
        return float(node.value)
    if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
        v = _eval_node(node.operand, params)
        return -v if isinstance(node.op, ast.USub) else v
    if isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
        return _BINOPS[type(node.op)](_eval_node(node.left, params), _eval_node(node.right, params))
    if isinstance(node, ast.Name):
        if node.id not in params:
            raise KeyError(node.id)
        return float(params[node.id])
    raise ValueError(f"unsupported element {ast.dump(node)[:40]}")


def parse_matrix(text: str, params: Optional[dict] = None) -> np.ndarray:
    """Bracketed row list to a 2-D array; a flat list is read as one row."""
    tree = ast.parse(text.strip(), mode="eval").body
    value = _eval_node(tree, params or {})
    if not isinstance(value, list):
        value = [[value]]
    elif value and not isinstance(value[0], list):
        value = [value]
    widths = {len(r) for r in value}
    if len(widths) != 1:
        raise ValueError(f"rows have different lengths {sorted(widths)}")
    return np.array(value, dtype=float)


def parameter_names(text: str) -> set:
    try:
        tree = ast.parse(text.strip(), mode="eval")
    except SyntaxError:
        return set()
    return {n.id for n in ast.walk(tree) if isinstance(n, ast.Name)}


def matrix_entry(doc: Document, section: str, key: str, params: Optional[dict] = None,
                 shape=None) -> np.ndarray:
    e = doc.section(section).get(key)
    if e is None:
        raise doc.error(f"missing [{section}] {key}")
    try:
        M = parse_matrix(e.value, params)
    except KeyError as exc:
        raise doc.error(f"{key}: unknown parameter {exc.args[0]!r}", e) from None
    except (SyntaxError, ValueError) as exc:
        raise doc.error(f"{key}: malformed matrix ({exc})", e) from None
    if shape is not None and M.shape != tuple(shape):
        raise doc.error(f"{key}: expected shape {tuple(shape)}, got {M.shape}", e)
    return M


def fmt_number(v: float) -> str:
    return repr(float(v))


def fmt_matrix(M) -> str:
    M = np.atleast_2d(np.asarray(M, dtype=float))
    return "[" + ", ".join("[" + ", ".join(fmt_number(v) for v in row) + "]" for row in M) + "]"


def write_document(sections: dict, header: str = "") -> str:
    """Serialize ``{section: {key: value}}``; arrays become bracketed rows."""
    out = []
    if header:
        out += [f"# {ln}" for ln in header.splitlines()]
    for name, entries in sections.items():
        if out:
            out.append("")
        out.append(f"[{name}]")
        for key, val in entries.items():
            if isinstance(val, np.ndarray):
                val = fmt_matrix(val)
            elif isinstance(val, float):
                val = fmt_number(val)
            elif isinstance(val, bool):
                val = "true" if val else "false"
            out.append(f"{key} = {val}")
    return "\n".join(out) + "\n"


# -- model ----------------------------------------------------------------------

def model_params(doc: Document, overrides: Optional[dict] = None) -> dict:
    params = {}
    for key, e in doc.section("params").items():
        try:
            params[key] = float(e.value)
        except ValueError:
            raise doc.error(f"parameter {key}: expected a number", e) from None
    params.update(overrides or {})
    return params


def model_parameters_used(doc: Document) -> set:
    names = set()
    for key, e in doc.section("model").items():
        if key.split()[0] in ("A", "B", "C"):
            names |= parameter_names(e.value)
    return names


def _membership(doc: Document, key: str, e: Entry):
    parts = e.value.split()
    if parts and parts[0] == "complement" and len(parts) == 1:
        return Complement()
    if parts and parts[0] == "gauss" and len(parts) in (3, 4):
        try:
            nums = [float(v) for v in parts[1:]]
            return Gaussian(*nums)
        except ValueError as exc:
            raise doc.error(f"{key}: {exc}", e) from None
    raise doc.error(f"{key}: expected 'gauss c a [m]' or 'complement'", e)


def build_model(doc: Document, params: Optional[dict] = None) -> TSModel:
    """Construct the model from ``[model]``; unresolved parameters are errors."""
    if not doc.has("model"):
        raise doc.error("missing [model] section")
    params = model_params(doc, params)
    sec = doc.section("model")
    n = doc.number("model", "n", kind=int)
    p = doc.number("model", "p", default=0, kind=int)
    sets_e = sec.get("sets")
    if sets_e is None:
        raise doc.error("missing [model] sets")
    try:
        sets = [int(v) for v in sets_e.value.split()]
    except ValueError:
        raise doc.error("sets: expected integers", sets_e) from None
    if len(sets) != n:
        raise doc.error(f"sets: {len(sets)} counts for n={n}", sets_e)
    families = []
    for j in range(1, n + 1):
        members = []
        for r in range(1, sets[j - 1] + 1):
            key = f"membership {j} {r}"
            e = sec.get(key)
            if e is None:
                raise doc.error(f"missing [model] {key}")
            members.append(_membership(doc, key, e))
        families.append(MembershipFamily(tuple(members)))
    rules = sorted(int(k.split()[1]) for k in sec if k.startswith("rule "))
    if not rules:
        raise doc.error("no rules in [model]")
    if rules != list(range(1, len(rules) + 1)):
        raise doc.error(f"rules must be numbered 1..s, got {rules}")
    ordinals, A, B, C = [], [], [], []
    for i in rules:
        e = sec[f"rule {i}"]
        try:
            row = [int(v) for v in e.value.split()]
        except ValueError:
            raise doc.error(f"rule {i}: expected {n} integer ordinals", e) from None
        if len(row) != n:
            raise doc.error(f"rule {i}: expected {n} ordinals, got {len(row)}", e)
        ordinals.append(row)
        A.append(matrix_entry(doc, "model", f"A {i}", params, (n, n)))
        C.append(matrix_entry(doc, "model", f"C {i}", params, (n, n)))
        if p > 0:
            B.append(matrix_entry(doc, "model", f"B {i}", params, (n, p)))
    box = doc.number("model", "box", default=50.0)
    return TSModel(A=A, B=B if p > 0 else None, C=C, ordinals=ordinals, families=families,
                   box=box, name=doc.get("model", "name", ""))


# -- certificates and gains ------------------------------------------------------

def certificate_sections(cert, method: str, extra: Optional[dict] = None) -> dict:
    from .stability import LineIntegralCertificate

    body: dict = {"method": method}
    if isinstance(cert, LineIntegralCertificate):
        body["beta"] = float(cert.beta)
        body["Pbar"] = cert.Pbar
        for (j, rho), v in sorted(cert.pool.items()):
            body[f"d {j} {rho}"] = float(v)
        body["D"] = cert.D
        for k in range(cert.s):
            body[f"P {k + 1}"] = cert.P(k)
        for key in sorted(cert.Q):
            body["Q " + " ".join(str(t + 1) for t in key)] = cert.Q[key]
    else:
        body["P"] = cert.P
        for i, Qi in enumerate(cert.Q, start=1):
            body[f"Q {i}"] = Qi
    body.update(extra or {})
    return {"certificate": body}


def read_certificate(doc: Document, model: TSModel):
    """Rebuild a certificate written by :func:`certificate_sections`."""
    from .stability import LineIntegralCertificate, QuadraticCertificate

    if not doc.has("certificate"):
        raise doc.error("missing [certificate] section")
    sec = doc.section("certificate")
    method = doc.get("certificate", "method", "theorem1")
    n = model.n
    if method == "corollary1":
        P = matrix_entry(doc, "certificate", "P", shape=(n, n))
        Q = [matrix_entry(doc, "certificate", f"Q {i}", shape=(n, n)) for i in range(1, model.s + 1)]
        return method, QuadraticCertificate(P, Q)
    pool = {}
    for key, e in sec.items():
        if key.startswith("d "):
            _, j, rho = key.split()
            pool[(int(j), int(rho))] = float(e.value)
    Q = {}
    for key in sec:
        if key.startswith("Q "):
            idx = tuple(int(t) - 1 for t in key.split()[1:])
            Q[idx] = matrix_entry(doc, "certificate", key, shape=(n, n))
    return method, LineIntegralCertificate(
        Pbar=matrix_entry(doc, "certificate", "Pbar", shape=(n, n)), pool=pool,
        D=matrix_entry(doc, "certificate", "D", shape=(n, n)), Q=Q,
        beta=doc.number("certificate", "beta", default=0.0), ordinals=model.ordinals.copy())


def gains_sections(gains, status: str = "") -> dict:
    body: dict = {}
    if status:
        body["status"] = status
    for j, K in enumerate(gains, start=1):
        body[f"K {j}"] = np.atleast_2d(K)
    return {"gains": body}


def read_gains(doc: Document, model: Optional[TSModel] = None) -> list:
    sec = doc.section("gains")
    keys = sorted((int(k.split()[1]) for k in sec if k.startswith("K ")))
    if not keys:
        raise doc.error("no gains (K j = [...]) in [gains]")
    shape = (model.p, model.n) if model is not None else None
    return [matrix_entry(doc, "gains", f"K {j}", shape=shape) for j in keys]
