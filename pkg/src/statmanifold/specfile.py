"""JSON family and curved-model specifications.

Family spec::

    {"schema": 1, "kind": "gaussian" | "poisson" | "bernoulli" | "categorical"
                          | "exponential_family" | "mixture_family",
     "dim": n, "domain": [[lo, hi], ...], ...kind-specific fields}

Kind-specific fields:

* gaussian: optional ``"sigma"`` (known-variance mean family) or
  ``"parametrization": "natural"``
* categorical: ``"k"`` (number of outcomes)
* exponential_family / mixture_family: ``"carrier"`` and ``"statistics"``
  as expression strings in ``x``, ``"support"`` as
  ``{"type": "interval" | "integers", "lo": ..., "hi": ...}``; exponential
  families also accept ``"center"`` and ``"scale"`` quadrature hints.  A
  mixture_family without statistics is the built-in uniform/Beta mixture.

Curved-model spec::

    {"schema": 1, "ambient": {family spec}, "embedding": ["expr in u1.."],
     "u_domain": [[lo, hi], ...], "jacobian": [["expr", ...], ...],
     "h_m_a": [[[...]]], "name": "..."}

For one-dimensional models the variable may be written ``u`` or ``u1``.
"""

from __future__ import annotations

import json
import math
from dataclasses import replace

import numpy as np

from . import family as fam
from .errors import FamilyConstructionError
from .expr import Expression
from .inference import CurvedModelSpec
from .integrate import DEFAULT_BUDGET, Budget
from .support import support_from_json

SCHEMA = 1
KINDS = ("gaussian", "poisson", "bernoulli", "categorical", "exponential_family", "mixture_family")


def _bound(v) -> float:
    if isinstance(v, str):
        return float(v.replace("infinity", "inf"))
    return -math.inf if v is None else float(v)


def _box(bounds, **kw) -> fam.Box:
    try:
        return fam.box([(_bound(lo), _bound(hi)) for lo, hi in bounds], **kw)
    except (TypeError, ValueError) as exc:
        raise FamilyConstructionError(f"malformed domain {bounds!r}: {exc}") from exc


def _check_schema(obj: dict):
    if not isinstance(obj, dict):
        raise FamilyConstructionError("specification must be a JSON object")
    schema = obj.get("schema", SCHEMA)
    if schema != SCHEMA:
        raise FamilyConstructionError(f"unsupported schema {schema!r} (expected {SCHEMA})")


def _restrict(family: fam.ParametricFamily, bounds) -> fam.ParametricFamily:
    """Narrow a built-in family's domain to a sub-box."""
    new = _box(bounds, predicate=family.domain.predicate, predicate_text=family.domain.predicate_text)
    if new.dim != family.dim:
        raise FamilyConstructionError(f"domain has {new.dim} intervals, family has dimension {family.dim}")
    for lo, hi, LO, HI in zip(new.lower, new.upper, family.domain.lower, family.domain.upper):
        if lo < LO or hi > HI:
            raise FamilyConstructionError(
                f"domain interval ({lo}, {hi}) is not inside the family's natural range ({LO}, {HI})")
    ref = family.domain.reference
    if ref is not None and not new.contains(ref):
        ref = None
    return replace(family, domain=replace(new, reference=ref))


def family_from_spec(obj: dict, budget: Budget = DEFAULT_BUDGET) -> fam.ParametricFamily:
    _check_schema(obj)
    kind = obj.get("kind")
    if kind not in KINDS:
        raise FamilyConstructionError(f"unknown family kind {kind!r}; expected one of {', '.join(KINDS)}")
    if kind == "gaussian":
        if "sigma" in obj:
            sigma = float(obj["sigma"])
            if not sigma > 0:
                raise FamilyConstructionError(f"sigma must be positive, got {sigma}")
            out = fam.gaussian_known_sigma(sigma)
        elif obj.get("parametrization", "mean_sd") == "natural":
            out = fam.gaussian_natural()
        else:
            out = fam.gaussian()
    elif kind == "poisson":
        out = fam.poisson()
    elif kind == "bernoulli":
        out = fam.bernoulli()
    elif kind == "categorical":
        k = int(obj.get("k", obj.get("dim", 1) + 1))
        if k < 2:
            raise FamilyConstructionError("categorical needs k >= 2")
        out = fam.categorical(k)
    elif kind == "mixture_family" and "statistics" not in obj:
        out = fam.uniform_beta_mixture()
    else:
        return _custom_family(obj, kind, budget)
    if "dim" in obj and int(obj["dim"]) != out.dim:
        raise FamilyConstructionError(f"{kind} family has dimension {out.dim}, spec says {obj['dim']}")
    if "domain" in obj:
        out = _restrict(out, obj["domain"])
    return out


def _custom_family(obj: dict, kind: str, budget: Budget) -> fam.ParametricFamily:
    try:
        stats_src = list(obj["statistics"])
        support = support_from_json(obj["support"])
        bounds = obj["domain"]
    except KeyError as exc:
        raise FamilyConstructionError(f"{kind} spec is missing field {exc.args[0]!r}") from exc
    except (TypeError, ValueError) as exc:
        raise FamilyConstructionError(f"malformed {kind} spec: {exc}") from exc
    carrier = Expression(str(obj.get("carrier", "0" if kind == "exponential_family" else "1")))
    stats = [Expression(str(s)) for s in stats_src]
    if "dim" in obj and int(obj["dim"]) != len(stats):
        raise FamilyConstructionError(f"spec says dim {obj['dim']} but lists {len(stats)} statistics")
    domain = _box(bounds)
    name = str(obj.get("name", kind))
    if kind == "exponential_family":
        spec = fam.ExponentialFamilySpec(carrier, stats, support, float(obj.get("center", 0.0)),
                                         float(obj.get("scale", 1.0)), name)
        out = fam.make_exponential_family(spec, domain, budget)
    else:
        out = fam.make_mixture_family(fam.MixtureFamilySpec(carrier, stats, support, name), domain, budget)
    return replace(out, spec=dict(obj))


def load_json(path) -> dict:
    """Read a JSON file; OSError propagates (I/O failure), bad JSON becomes a spec error."""
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise FamilyConstructionError(f"{path}: invalid JSON ({exc})") from exc


def load_family(path, budget: Budget = DEFAULT_BUDGET) -> fam.ParametricFamily:
    return family_from_spec(load_json(path), budget)


def _u_expressions(sources, m: int):
    names = ("u",) + tuple(f"u{a + 1}" for a in range(m)) if m == 1 else tuple(f"u{a + 1}" for a in range(m))
    exprs = [Expression(str(s), names) for s in sources]

    def evaluate(u):
        u = np.asarray(u, dtype=float)
        cols = [u[..., a] for a in range(m)]
        if m == 1:
            cols = [cols[0]] + cols
        return np.stack([np.broadcast_to(np.asarray(e(*cols), dtype=float), u.shape[:-1]) for e in exprs],
                        axis=-1)

    return evaluate


def model_from_spec(obj: dict, budget: Budget = DEFAULT_BUDGET):
    """Returns ``(CurvedModelSpec, h_m_a or None)``."""
    _check_schema(obj)
    try:
        ambient = family_from_spec(obj["ambient"], budget)
        emb_src = list(obj["embedding"])
        u_domain = _box(obj["u_domain"])
    except KeyError as exc:
        raise FamilyConstructionError(f"curved-model spec is missing field {exc.args[0]!r}") from exc
    m = u_domain.dim
    if len(emb_src) != ambient.dim:
        raise FamilyConstructionError(
            f"embedding has {len(emb_src)} components but the ambient family has dimension {ambient.dim}")
    embedding = _u_expressions(emb_src, m)
    jacobian = None
    if "jacobian" in obj:
        rows = obj["jacobian"]
        if len(rows) != ambient.dim or any(len(r) != m for r in rows):
            raise FamilyConstructionError(f"jacobian must be {ambient.dim} x {m}")
        flat = _u_expressions([s for r in rows for s in r], m)

        def jacobian(u):
            return flat(np.asarray(u, dtype=float)).reshape(ambient.dim, m)
    h_m_a = None
    if "h_m_a" in obj:
        h_m_a = np.asarray(obj["h_m_a"], dtype=float)
    model = CurvedModelSpec(ambient, embedding, u_domain, jacobian, str(obj.get("name", "model")))
    return model, h_m_a


def load_model(path, budget: Budget = DEFAULT_BUDGET):
    return model_from_spec(load_json(path), budget)
