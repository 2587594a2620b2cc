"""Lie-group kernel: SO(3), SE(3) and R^n with closed-form Jacobians.

Tangent-vector ordering for SE(3) is translation-first, ``[rho; theta]``,
everywhere in this package.  Several libraries use the opposite ordering;
nothing here does.

All elements are immutable values and all operations are pure functions.
Right-handed perturbations throughout: ``X (+) d = X * Exp(d)`` and
``Y (-) X = Log(X^-1 Y)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# Below this rotation angle all trig closed forms switch to Taylor series.
SMALL_ANGLE = 1e-6
# log / J_l^-1 are rejected closer to pi than this.
NEAR_PI_MARGIN = 1e-6

_I3 = np.eye(3)


class NearSingularError(ValueError):
    """Rotation angle too close to pi for a well-conditioned log or J_l^-1."""


class ManifoldMismatchError(TypeError):
    """Operands live on different manifolds or have mismatched dimensions."""


@dataclass(frozen=True)
class ManifoldKind:
    """Dispatch tag for the group-agnostic operations.

    tag is one of "SO3", "SE3", "RN"; dim is the tangent dimension.
    """

    tag: str
    dim: int


SO3 = ManifoldKind("SO3", 3)
SE3 = ManifoldKind("SE3", 6)


def rn(n: int) -> ManifoldKind:
    return ManifoldKind("RN", n)


R3 = rn(3)


class Rotation3:
    """3x3 orthonormal rotation matrix."""

    __slots__ = ("matrix",)

    def __init__(self, matrix):
        self.matrix = np.asarray(matrix, dtype=float)

    @staticmethod
    def identity() -> "Rotation3":
        return Rotation3(_I3)

    def is_valid(self, tol: float = 1e-9) -> bool:
        R = self.matrix
        return bool(
            np.allclose(R.T @ R, _I3, atol=tol)
            and abs(np.linalg.det(R) - 1.0) <= tol
        )

    def orthonormalized(self) -> "Rotation3":
        u, _, vt = np.linalg.svd(self.matrix)
        R = u @ vt
        if np.linalg.det(R) < 0:
            u[:, -1] *= -1.0
            R = u @ vt
        return Rotation3(R)

    def __repr__(self):
        return f"Rotation3({self.matrix.tolist()})"


class Pose3:
    """Rigid transform: rotation plus translation in meters."""

    __slots__ = ("rotation", "translation")

    def __init__(self, rotation: Rotation3, translation):
        self.rotation = rotation
        self.translation = np.asarray(translation, dtype=float)

    @staticmethod
    def identity() -> "Pose3":
        return Pose3(Rotation3.identity(), np.zeros(3))

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation.matrix
        T[:3, 3] = self.translation
        return T

    def __repr__(self):
        return f"Pose3(R={self.rotation.matrix.tolist()}, t={self.translation.tolist()})"


class EuclidPoint:
    """Plain R^n point, the vector-space reduction of a pose state."""

    __slots__ = ("coords",)

    def __init__(self, coords):
        self.coords = np.asarray(coords, dtype=float)

    def __repr__(self):
        return f"EuclidPoint({self.coords.tolist()})"


def skew(v: np.ndarray) -> np.ndarray:
    x, y, z = v
    out = np.zeros((3, 3))
    out[0, 1] = -z
    out[0, 2] = y
    out[1, 0] = z
    out[1, 2] = -x
    out[2, 0] = -y
    out[2, 1] = x
    return out


def _check_finite(v: np.ndarray) -> None:
    if not np.all(np.isfinite(v)):
        raise ValueError(f"non-finite tangent vector: {v!r}")


def _sin_cos_coeffs(angle: float) -> tuple[float, float]:
    """(sin a / a, (1 - cos a) / a^2) with series fallback near zero."""
    if angle < SMALL_ANGLE:
        a2 = angle * angle
        return 1.0 - a2 / 6.0 + a2 * a2 / 120.0, 0.5 - a2 / 24.0 + a2 * a2 / 720.0
    return math.sin(angle) / angle, (1.0 - math.cos(angle)) / (angle * angle)


def exp_so3(theta: np.ndarray) -> Rotation3:
    """Rodrigues formula; series expansion below the small-angle threshold."""
    theta = np.asarray(theta, dtype=float)
    _check_finite(theta)
    a2 = float(theta @ theta)
    a, b = _sin_cos_coeffs(math.sqrt(a2))
    K = skew(theta)
    # [th]x^2 = th th^T - |th|^2 I, cheaper than a matmul
    K2 = theta[:, None] * theta - a2 * _I3
    return Rotation3(_I3 + a * K + b * K2)


def log_so3(R: Rotation3) -> np.ndarray:
    """Rotation vector of R.  Rejects angles within tolerance of pi."""
    M = R.matrix
    cos_angle = (M[0, 0] + M[1, 1] + M[2, 2] - 1.0) / 2.0
    cos_angle = min(1.0, max(-1.0, cos_angle))
    angle = math.acos(cos_angle)
    if angle > np.pi - NEAR_PI_MARGIN:
        raise NearSingularError(f"rotation angle {angle} within tolerance of pi")
    w = np.empty(3)
    w[0] = M[2, 1] - M[1, 2]
    w[1] = M[0, 2] - M[2, 0]
    w[2] = M[1, 0] - M[0, 1]
    if angle < SMALL_ANGLE:
        a2 = angle * angle
        return w * (0.5 * (1.0 + a2 / 6.0 + 7.0 * a2 * a2 / 360.0))
    if angle > 2.8:
        # The skew part shrinks like sin(angle); recover the axis from the
        # well-conditioned symmetric part instead, signs from the skew part.
        v = np.sqrt(np.maximum(
            (np.array([M[0, 0], M[1, 1], M[2, 2]]) - cos_angle)
            / (1.0 - cos_angle), 0.0))
        v[0] = math.copysign(v[0], w[0])
        v[1] = math.copysign(v[1], w[1])
        v[2] = math.copysign(v[2], w[2])
        return v * (angle / math.sqrt(float(v @ v)))
    return w * (0.5 * angle / math.sin(angle))


def jl_so3(theta: np.ndarray) -> np.ndarray:
    """SO(3) left Jacobian: I + b [th]x + c [th]x^2."""
    theta = np.asarray(theta, dtype=float)
    a2 = float(theta @ theta)
    angle = math.sqrt(a2)
    if angle < SMALL_ANGLE:
        b = 0.5 - a2 / 24.0 + a2 * a2 / 720.0
        c = 1.0 / 6.0 - a2 / 120.0 + a2 * a2 / 5040.0
    else:
        b = (1.0 - math.cos(angle)) / a2
        c = (angle - math.sin(angle)) / (a2 * angle)
    K = skew(theta)
    K2 = theta[:, None] * theta - a2 * _I3
    return _I3 + b * K + c * K2


def jl_inv_so3(theta: np.ndarray) -> np.ndarray:
    """SO(3) left Jacobian inverse: I - [th]x/2 + e [th]x^2."""
    theta = np.asarray(theta, dtype=float)
    a2 = float(theta @ theta)
    angle = math.sqrt(a2)
    if angle > np.pi - NEAR_PI_MARGIN:
        raise NearSingularError(f"J_l^-1 undefined near pi (angle {angle})")
    if angle < SMALL_ANGLE:
        e = 1.0 / 12.0 + a2 / 720.0 + a2 * a2 / 30240.0
    else:
        e = 1.0 / a2 - (1.0 + math.cos(angle)) / (
            2.0 * angle * math.sin(angle)
        )
    K = skew(theta)
    K2 = theta[:, None] * theta - a2 * _I3
    return _I3 - 0.5 * K + e * K2


def exp_se3(xi: np.ndarray) -> Pose3:
    """Exponential at identity; translation through the SO(3) left Jacobian."""
    xi = np.asarray(xi, dtype=float)
    _check_finite(xi)
    rho, theta = xi[:3], xi[3:]
    return Pose3(exp_so3(theta), jl_so3(theta) @ rho)


def log_se3(T: Pose3) -> np.ndarray:
    theta = log_so3(T.rotation)
    out = np.empty(6)
    out[:3] = jl_inv_so3(theta) @ T.translation
    out[3:] = theta
    return out


def compose(A: Pose3, B: Pose3) -> Pose3:
    return Pose3(
        Rotation3(A.rotation.matrix @ B.rotation.matrix),
        A.rotation.matrix @ B.translation + A.translation,
    )


def inverse(T: Pose3) -> Pose3:
    Rt = T.rotation.matrix.T
    return Pose3(Rotation3(Rt), -(Rt @ T.translation))


def adjoint_se3(T: Pose3) -> np.ndarray:
    R = T.rotation.matrix
    Ad = np.zeros((6, 6))
    Ad[:3, :3] = R
    Ad[:3, 3:] = skew(T.translation) @ R
    Ad[3:, 3:] = R
    return Ad


def adjoint_inv_se3(T: Pose3) -> np.ndarray:
    Rt = T.rotation.matrix.T
    Ad = np.zeros((6, 6))
    Ad[:3, :3] = Rt
    Ad[:3, 3:] = -(Rt @ skew(T.translation))
    Ad[3:, 3:] = Rt
    return Ad


def q_block(rho: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """Translation-rotation coupling block of the SE(3) left Jacobian."""
    rho = np.asarray(rho, dtype=float)
    theta = np.asarray(theta, dtype=float)
    P = skew(rho)
    K = skew(theta)
    angle = math.sqrt(float(theta @ theta))
    if angle < SMALL_ANGLE:
        a2 = angle * angle
        c1 = 1.0 / 6.0 - a2 / 120.0 + a2 * a2 / 5040.0
        c2 = -1.0 / 24.0 + a2 / 720.0 - a2 * a2 / 40320.0
        c3 = -1.0 / 120.0 + a2 / 5040.0 - a2 * a2 / 362880.0
    else:
        a2 = angle * angle
        sin_a, cos_a = math.sin(angle), math.cos(angle)
        c1 = (angle - sin_a) / (angle * a2)
        c2 = (1.0 - a2 / 2.0 - cos_a) / (a2 * a2)
        c3 = (angle - sin_a - angle * a2 / 6.0) / (a2 * a2 * angle)
    KP = K @ P
    PK = P @ K
    KPK = KP @ K
    Q = (
        0.5 * P
        + c1 * (KP + PK + KPK)
        - c2 * (K @ KP + PK @ K - 3.0 * KPK)
        - 0.5 * (c2 - 3.0 * c3) * (KPK @ K + K @ KPK)
    )
    return Q


def jl_se3(delta: np.ndarray) -> np.ndarray:
    delta = np.asarray(delta, dtype=float)
    rho, theta = delta[:3], delta[3:]
    Jl = jl_so3(theta)
    J = np.zeros((6, 6))
    J[:3, :3] = Jl
    J[:3, 3:] = q_block(rho, theta)
    J[3:, 3:] = Jl
    return J


def jl_inv_se3(delta: np.ndarray) -> np.ndarray:
    delta = np.asarray(delta, dtype=float)
    rho, theta = delta[:3], delta[3:]
    Jli = jl_inv_so3(theta)
    J = np.zeros((6, 6))
    J[:3, :3] = Jli
    J[:3, 3:] = -(Jli @ q_block(rho, theta) @ Jli)
    J[3:, 3:] = Jli
    return J


def jr_se3(delta: np.ndarray) -> np.ndarray:
    # Right Jacobian by reflection of the left one; single code path.
    return jl_se3(-np.asarray(delta, dtype=float))


def jr_inv_se3(delta: np.ndarray) -> np.ndarray:
    return jl_inv_se3(-np.asarray(delta, dtype=float))


def jr_so3(theta: np.ndarray) -> np.ndarray:
    return jl_so3(-np.asarray(theta, dtype=float))


def jr_inv_so3(theta: np.ndarray) -> np.ndarray:
    return jl_inv_so3(-np.asarray(theta, dtype=float))


# ---------------------------------------------------------------------------
# Kind-dispatched generic operations (the group-agnostic surface used by the
# constant-twist factor).


def identity_element(kind: ManifoldKind):
    if kind.tag == "SE3":
        return Pose3.identity()
    if kind.tag == "SO3":
        return Rotation3.identity()
    return EuclidPoint(np.zeros(kind.dim))


def exp(kind: ManifoldKind, delta: np.ndarray):
    if kind.tag == "SE3":
        return exp_se3(delta)
    if kind.tag == "SO3":
        return exp_so3(delta)
    delta = np.asarray(delta, dtype=float)
    _check_finite(delta)
    return EuclidPoint(delta)


def log(kind: ManifoldKind, X) -> np.ndarray:
    if kind.tag == "SE3":
        return log_se3(X)
    if kind.tag == "SO3":
        return log_so3(X)
    return np.array(X.coords, dtype=float)


def oplus(kind: ManifoldKind, X, delta: np.ndarray):
    delta = np.asarray(delta, dtype=float)
    if delta.shape != (kind.dim,):
        raise ManifoldMismatchError(
            f"tangent dim {delta.shape} does not match {kind}"
        )
    if kind.tag == "SE3":
        return compose(X, exp_se3(delta))
    if kind.tag == "SO3":
        return Rotation3(X.matrix @ exp_so3(delta).matrix)
    return EuclidPoint(X.coords + delta)


def ominus(kind: ManifoldKind, Y, X) -> np.ndarray:
    if kind.tag == "SE3":
        return log_se3(compose(inverse(X), Y))
    if kind.tag == "SO3":
        return log_so3(Rotation3(X.matrix.T @ Y.matrix))
    return Y.coords - X.coords


def jr(kind: ManifoldKind, delta: np.ndarray) -> np.ndarray:
    if kind.tag == "SE3":
        return jr_se3(delta)
    if kind.tag == "SO3":
        return jr_so3(delta)
    return np.eye(kind.dim)


def jr_inv(kind: ManifoldKind, delta: np.ndarray) -> np.ndarray:
    if kind.tag == "SE3":
        return jr_inv_se3(delta)
    if kind.tag == "SO3":
        return jr_inv_so3(delta)
    return np.eye(kind.dim)


def jl_inv(kind: ManifoldKind, delta: np.ndarray) -> np.ndarray:
    if kind.tag == "SE3":
        return jl_inv_se3(delta)
    if kind.tag == "SO3":
        return jl_inv_so3(delta)
    return np.eye(kind.dim)


def adjoint_inv_of_exp(kind: ManifoldKind, delta: np.ndarray) -> np.ndarray:
    """Ad^-1 of Exp(delta); identity on R^n."""
    if kind.tag == "SE3":
        return adjoint_inv_se3(exp_se3(delta))
    if kind.tag == "SO3":
        return exp_so3(delta).matrix.T
    return np.eye(kind.dim)


def kind_of(element) -> ManifoldKind:
    if isinstance(element, Pose3):
        return SE3
    if isinstance(element, Rotation3):
        return SO3
    if isinstance(element, EuclidPoint):
        return rn(element.coords.shape[0])
    raise ManifoldMismatchError(f"not a manifold element: {element!r}")
