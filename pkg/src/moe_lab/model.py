"""Model types for softmax-gated Gaussian mixtures of experts.

A mixing measure bundles k experts.  Expert i carries gate parameters
(beta1_i, beta0_i), regression parameters (a_i, b_i) and a noise variance
nu_i; a single temperature tau is shared by every gate.  Two gate families
are supported:

    linear:     logit_i(x) = (beta1_i . x + beta0_i) / tau
    activated:  logit_i(x) = (act(beta1_i . x) + beta0_i) / tau

with act one of sigmoid, gelu, power(p), identity.  The conditional
density of y given x is sum_i softmax(logits(x))_i * N(y | a_i.x + b_i, nu_i).

When a measure is built with pinned=True the last atom must have zero gate
parameters (beta1 = 0, beta0 = 0); fitted measures use this normalization
so the remaining gate parameters are meaningful.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.special import ndtr

from . import jsonutil, kernels

# |beta0| / tau above this makes the atom weight exp(beta0/tau) overflow-prone
BETA0_TAU_CAP = 50.0

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


@dataclass(frozen=True)
class Activation:
    """Scalar activation applied to beta1 . x inside an activated gate."""

    kind: str
    p: int = 0

    _KINDS = ("sigmoid", "gelu", "power", "identity")

    def __post_init__(self):
        if self.kind not in self._KINDS:
            raise ValueError("unknown activation kind %r" % self.kind)
        if self.kind == "power":
            if int(self.p) < 1:
                raise ValueError("power activation needs integer p >= 1")
            object.__setattr__(self, "p", int(self.p))

    @classmethod
    def sigmoid(cls) -> "Activation":
        return cls("sigmoid")

    @classmethod
    def gelu(cls) -> "Activation":
        return cls("gelu")

    @classmethod
    def power(cls, p: int) -> "Activation":
        return cls("power", p)

    @classmethod
    def identity(cls) -> "Activation":
        return cls("identity")

    @property
    def code(self) -> int:
        return {
            "sigmoid": kernels.ACT_SIGMOID,
            "gelu": kernels.ACT_GELU,
            "power": kernels.ACT_POWER,
            "identity": kernels.ACT_IDENTITY,
        }[self.kind]

    def value(self, z):
        z = np.asarray(z, dtype=float)
        if self.kind == "sigmoid":
            out = np.empty_like(z)
            pos = z >= 0
            out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
            ez = np.exp(z[~pos])
            out[~pos] = ez / (1.0 + ez)
            return out
        if self.kind == "gelu":
            return z * ndtr(z)
        if self.kind == "power":
            return z**self.p
        return z.copy()

    def d1(self, z):
        z = np.asarray(z, dtype=float)
        if self.kind == "sigmoid":
            s = self.value(z)
            return s * (1.0 - s)
        if self.kind == "gelu":
            return ndtr(z) + z * _INV_SQRT_2PI * np.exp(-0.5 * z * z)
        if self.kind == "power":
            if self.p == 1:
                return np.ones_like(z)
            return self.p * z ** (self.p - 1)
        return np.ones_like(z)

    def d2(self, z):
        z = np.asarray(z, dtype=float)
        if self.kind == "sigmoid":
            s = self.value(z)
            return s * (1.0 - s) * (1.0 - 2.0 * s)
        if self.kind == "gelu":
            return _INV_SQRT_2PI * np.exp(-0.5 * z * z) * (2.0 - z * z)
        if self.kind == "power":
            if self.p <= 2:
                return np.full_like(z, 0.0 if self.p == 1 else 2.0)
            return self.p * (self.p - 1) * z ** (self.p - 2)
        return np.zeros_like(z)


@dataclass(frozen=True)
class GateSpec:
    """Gate family: kind is 'linear' or 'activated' (with an Activation)."""

    kind: str
    activation: Activation | None = None

    def __post_init__(self):
        if self.kind not in ("linear", "activated"):
            raise ValueError("gate kind must be 'linear' or 'activated'")
        if self.kind == "activated" and self.activation is None:
            raise ValueError("activated gate needs an activation")
        if self.kind == "linear" and self.activation is not None:
            raise ValueError("linear gate takes no activation")

    @classmethod
    def linear(cls) -> "GateSpec":
        return cls("linear")

    @classmethod
    def activated(cls, act: Activation) -> "GateSpec":
        return cls("activated", act)

    @property
    def is_linear(self) -> bool:
        return self.kind == "linear"

    @property
    def act_code(self) -> int:
        return kernels.ACT_LINEAR if self.is_linear else self.activation.code

    @property
    def act_p(self) -> int:
        return 0 if self.is_linear or self.activation.kind != "power" else self.activation.p


def _frozen_array(values, name: str) -> np.ndarray:
    arr = np.array(values, dtype=float)
    if arr.ndim != 1:
        raise ValueError("%s must be a 1-d vector" % name)
    if not np.all(np.isfinite(arr)):
        raise ValueError("%s must be finite" % name)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Atom:
    """One expert: gate offset/coefficients plus regression parameters."""

    beta0: float
    beta1: np.ndarray
    a: np.ndarray
    b: float
    nu: float

    def __eq__(self, other):
        if not isinstance(other, Atom):
            return NotImplemented
        return (
            self.beta0 == other.beta0
            and self.b == other.b
            and self.nu == other.nu
            and np.array_equal(self.beta1, other.beta1)
            and np.array_equal(self.a, other.a)
        )

    def __hash__(self):
        return hash((self.beta0, self.b, self.nu, self.beta1.tobytes(), self.a.tobytes()))

    def __post_init__(self):
        object.__setattr__(self, "beta0", float(self.beta0))
        object.__setattr__(self, "b", float(self.b))
        object.__setattr__(self, "nu", float(self.nu))
        object.__setattr__(self, "beta1", _frozen_array(self.beta1, "beta1"))
        object.__setattr__(self, "a", _frozen_array(self.a, "a"))
        if self.beta1.shape != self.a.shape:
            raise ValueError("beta1 and a must share the input dimension")
        for name in ("beta0", "b", "nu"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError("%s must be finite" % name)
        if self.nu <= 0.0:
            raise ValueError("nu must be positive, got %g" % self.nu)

    @property
    def d(self) -> int:
        return self.beta1.shape[0]


@dataclass(frozen=True)
class MixingMeasure:
    """Immutable collection of atoms with a shared temperature and gate."""

    atoms: tuple
    tau: float
    gate: GateSpec = field(default_factory=GateSpec.linear)
    pinned: bool = False

    def __post_init__(self):
        object.__setattr__(self, "atoms", tuple(self.atoms))
        object.__setattr__(self, "tau", float(self.tau))
        if len(self.atoms) < 1:
            raise ValueError("measure needs at least one atom")
        if not all(isinstance(at, Atom) for at in self.atoms):
            raise ValueError("atoms must be Atom instances")
        d = self.atoms[0].d
        if any(at.d != d for at in self.atoms):
            raise ValueError("atoms must share the input dimension")
        if not (math.isfinite(self.tau) and self.tau > 0.0):
            raise ValueError("tau must be positive and finite")
        for at in self.atoms:
            if abs(at.beta0) / self.tau > BETA0_TAU_CAP:
                raise ValueError(
                    "|beta0|/tau = %g exceeds the cap %g"
                    % (abs(at.beta0) / self.tau, BETA0_TAU_CAP)
                )
        if self.pinned:
            last = self.atoms[-1]
            if last.beta0 != 0.0 or np.any(last.beta1 != 0.0):
                raise ValueError("pinned measure requires last atom with zero gate")

    @property
    def k(self) -> int:
        return len(self.atoms)

    @property
    def d(self) -> int:
        return self.atoms[0].d

    @cached_property
    def beta0_vec(self) -> np.ndarray:
        return _frozen_array([at.beta0 for at in self.atoms], "beta0_vec")

    @cached_property
    def beta1_mat(self) -> np.ndarray:
        arr = np.array([at.beta1 for at in self.atoms], dtype=float)
        arr.setflags(write=False)
        return arr

    @cached_property
    def a_mat(self) -> np.ndarray:
        arr = np.array([at.a for at in self.atoms], dtype=float)
        arr.setflags(write=False)
        return arr

    @cached_property
    def b_vec(self) -> np.ndarray:
        return _frozen_array([at.b for at in self.atoms], "b_vec")

    @cached_property
    def nu_vec(self) -> np.ndarray:
        return _frozen_array([at.nu for at in self.atoms], "nu_vec")

    def replace_atoms(self, atoms, pinned=None) -> "MixingMeasure":
        return MixingMeasure(
            tuple(atoms), self.tau, self.gate, self.pinned if pinned is None else pinned
        )


# ---------------------------------------------------------------------------
# gate and density evaluation


def gate_numerators(G: MixingMeasure, X: np.ndarray) -> np.ndarray:
    """Pre-temperature gate scores, shape (n, k)."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    z = X @ G.beta1_mat.T
    if G.gate.is_linear:
        return z + G.beta0_vec[None, :]
    return G.gate.activation.value(z) + G.beta0_vec[None, :]


def gate_logits_batch(G: MixingMeasure, X: np.ndarray) -> np.ndarray:
    return gate_numerators(G, X) / G.tau


def gate_logits(G: MixingMeasure, x: np.ndarray) -> np.ndarray:
    """Gate logits at a single input, shape (k,)."""
    return gate_logits_batch(G, np.asarray(x, dtype=float)[None, :])[0]


def _log_softmax_rows(L: np.ndarray) -> np.ndarray:
    m = L.max(axis=1, keepdims=True)
    ex = np.exp(L - m)
    return (L - m) - np.log(ex.sum(axis=1, keepdims=True))


def gate_weights_batch(G: MixingMeasure, X: np.ndarray) -> np.ndarray:
    return np.exp(_log_softmax_rows(gate_logits_batch(G, X)))

def gate_weights(G: MixingMeasure, x: np.ndarray) -> np.ndarray:
    """Softmax gate weights at a single input; positive, sum to one."""
    return gate_weights_batch(G, np.asarray(x, dtype=float)[None, :])[0]


def expert_means(G: MixingMeasure, X: np.ndarray) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    return X @ G.a_mat.T + G.b_vec[None, :]


def conditional_density(G: MixingMeasure, x: np.ndarray, y: float) -> float:
    """Mixture density of y given x."""
    x = np.asarray(x, dtype=float)[None, :]
    logits = gate_logits_batch(G, x)
    means = expert_means(G, x)
    _, pointll, _ = kernels.posterior_from_logits(
        logits, means, G.nu_vec, np.array([float(y)])
    )
    return float(np.exp(pointll[0]))


def _data_arrays(data):
    if hasattr(data, "xs") and hasattr(data, "ys"):
        return np.asarray(data.xs, dtype=float), np.asarray(data.ys, dtype=float)
    xs, ys = data
    return np.asarray(xs, dtype=float), np.asarray(ys, dtype=float)


def log_likelihood(G: MixingMeasure, data) -> float:
    """Mean log density over a dataset; -inf (never NaN) on underflow."""
    xs, ys = _data_arrays(data)
    logits = gate_logits_batch(G, xs)
    means = expert_means(G, xs)
    _, pointll, _ = kernels.posterior_from_logits(logits, means, G.nu_vec, ys)
    return float(np.mean(pointll))


def scale_measure(G: MixingMeasure, lam: float) -> MixingMeasure:
    """Common rescaling of the gate: beta1, beta0, tau all multiply by lam.

    Scaling beta0 together with tau keeps every atom weight exp(beta0/tau)
    and every linear-gate logit unchanged, so for the linear gate the
    rescaled measure has the same conditional density as G.
    """
    lam = float(lam)
    if not (lam > 0.0 and math.isfinite(lam)):
        raise ValueError("lam must be positive and finite")
    atoms = tuple(
        Atom(lam * at.beta0, lam * at.beta1, at.a, at.b, at.nu) for at in G.atoms
    )
    return MixingMeasure(atoms, lam * G.tau, G.gate, G.pinned)


# ---------------------------------------------------------------------------
# Gaussian density and its mean-derivatives (Hermite closed forms)


def gauss_pdf(y: float, mu: float, nu: float) -> float:
    return _INV_SQRT_2PI / math.sqrt(nu) * math.exp(-((y - mu) ** 2) / (2.0 * nu))


def gauss_pdf_dmu(y: float, mu: float, nu: float) -> float:
    return gauss_pdf(y, mu, nu) * (y - mu) / nu


def gauss_pdf_dmu2(y: float, mu: float, nu: float) -> float:
    z = y - mu
    return gauss_pdf(y, mu, nu) * (z * z / (nu * nu) - 1.0 / nu)


@dataclass(frozen=True)
class FPartials:
    """Value and first partials of F = exp(num(x)/tau) * N(y | a.x + b, nu)."""

    value: float
    d_beta1: np.ndarray
    d_tau: float
    d_a: np.ndarray
    d_b: float
    d_nu: float


def _f_pieces(atom: Atom, tau: float, x, y, activation: Activation | None):
    x = np.asarray(x, dtype=float)
    z = float(atom.beta1 @ x)
    if activation is None:
        num, d_num_dz = z, 1.0
    else:
        num = float(activation.value(np.array([z]))[0])
        d_num_dz = float(activation.d1(np.array([z]))[0])
    mu = float(atom.a @ x) + atom.b
    gate = math.exp(num / tau)
    f0 = gauss_pdf(y, mu, atom.nu)
    f1 = gauss_pdf_dmu(y, mu, atom.nu)
    f2 = gauss_pdf_dmu2(y, mu, atom.nu)
    return x, z, num, d_num_dz, gate, f0, f1, f2


def f_partials_linear(atom: Atom, tau: float, x, y) -> FPartials:
    """Analytic partials of the linear-gate numerator F at (x, y).

    F(y | x) = exp(beta1.x / tau) * N(y | a.x + b, nu), differentiated in
    beta1, tau, a, b, nu.  The nu partial uses the heat-equation identity
    dN/dnu = 0.5 * d2N/dmu2.
    """
    x, z, num, _, gate, f0, f1, f2 = _f_pieces(atom, tau, x, y, None)
    F = gate * f0
    return FPartials(
        value=F,
        d_beta1=(x / tau) * F,
        d_tau=-(z / tau**2) * F,
        d_a=x * gate * f1,
        d_b=gate * f1,
        d_nu=0.5 * gate * f2,
    )


def pde1_residual(atom: Atom, tau: float, x, y, activation: Activation | None = None) -> float:
    """First-order interaction residual dF/dtau + (1/tau) * beta1 . dF/dbeta1.

    Identically zero for the linear-gate numerator, where the temperature
    partial is a multiple of the gate-coefficient partials; nonzero in
    general when an activation is applied to beta1 . x.
    """
    x, z, num, d_num_dz, gate, f0, _, _ = _f_pieces(atom, tau, x, y, activation)
    # dF/dtau = -(num/tau^2) F and beta1 . dF/dbeta1 = act'(z) z / tau * F
    # share the factor F / tau^2; differencing the scalar prefactors first
    # keeps the linear case exactly zero even when the gate factor is large
    return (d_num_dz * z - num) / tau**2 * (gate * f0)


def pde2_residual(atom: Atom, tau: float, x, y, activation: Activation | None = None) -> float:
    """Second-order interaction residual d2F/(dtau db) + (1/tau^2) * beta1 . dF/da.

    The mixed partial is -(num/tau^2) * exp(num/tau) * dN/dmu; for the
    linear gate num = beta1 . x and the residual vanishes identically.
    """
    x, z, num, _, gate, _, f1, _ = _f_pieces(atom, tau, x, y, activation)
    # mixed partial -(num/tau^2) gate F' and beta1 . dF/da = z gate F' share
    # the factor gate F' / tau^2; difference the prefactors first (see pde1)
    return (z - num) / tau**2 * (gate * f1)


# ---------------------------------------------------------------------------
# JSON serialization

_GATE_TO_JSON = {"sigmoid": "sigmoid", "gelu": "gelu", "power": "power", "identity": "identity"}


def measure_to_obj(G: MixingMeasure) -> dict:
    if G.gate.is_linear:
        gate: dict = {"kind": "linear"}
    else:
        act = G.gate.activation
        gate = {"kind": _GATE_TO_JSON[act.kind]}
        if act.kind == "power":
            gate["p"] = act.p
    return {
        "tau": G.tau,
        "gate": gate,
        "atoms": [
            {
                "beta0": at.beta0,
                "beta1": list(at.beta1),
                "a": list(at.a),
                "b": at.b,
                "nu": at.nu,
            }
            for at in G.atoms
        ],
        "schema": 1,
    }


def measure_to_json(G: MixingMeasure) -> str:
    return jsonutil.dumps(measure_to_obj(G))


def measure_from_obj(obj: dict, pinned: bool = False) -> MixingMeasure:
    allowed = {"tau", "gate", "atoms", "schema"}
    unknown = set(obj) - allowed
    if unknown:
        raise ValueError("unknown measure fields: %s" % sorted(unknown))
    gate_obj = obj["gate"]
    g_unknown = set(gate_obj) - {"kind", "p"}
    if g_unknown:
        raise ValueError("unknown gate fields: %s" % sorted(g_unknown))
    kind = gate_obj["kind"]
    if kind == "linear":
        gate = GateSpec.linear()
    elif kind == "power":
        gate = GateSpec.activated(Activation.power(int(gate_obj["p"])))
    elif kind in _GATE_TO_JSON:
        gate = GateSpec.activated(Activation(kind))
    else:
        raise ValueError("unknown gate kind %r" % kind)
    atoms = []
    for entry in obj["atoms"]:
        a_unknown = set(entry) - {"beta0", "beta1", "a", "b", "nu"}
        if a_unknown:
            raise ValueError("unknown atom fields: %s" % sorted(a_unknown))
        atoms.append(
            Atom(entry["beta0"], entry["beta1"], entry["a"], entry["b"], entry["nu"])
        )
    return MixingMeasure(tuple(atoms), float(obj["tau"]), gate, pinned)


def measure_from_json(text: str, pinned: bool = False) -> MixingMeasure:
    return measure_from_obj(jsonutil.loads(text), pinned)
