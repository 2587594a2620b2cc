"""Concrete factor library.

The centerpiece is the ternary constant-twist prior with closed-form
Jacobians; the rest are the measurement and regularization factors used by
the tracking graphs: priors, relative pose, partial position (USBL),
roll-pitch, and representation-boundary factors.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import manifold
from .manifold import (
    EuclidPoint,
    ManifoldKind,
    ManifoldMismatchError,
    NearSingularError,
    Pose3,
    skew,
)
from .fgraph import Factor, NoiseModel, Values, VariableKey

_S_RP = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
_SKEW_E0 = skew(np.array([1.0, 0.0, 0.0]))
_E2 = np.array([0.0, 0.0, 1.0])


def default_ct_base_covariance(kind: ManifoldKind) -> np.ndarray:
    """Per-second twist covariance: 0.05 m on translation, 0.02 rad on rotation."""
    if kind.tag == "SE3":
        return np.diag([0.05 ** 2] * 3 + [0.02 ** 2] * 3)
    if kind.tag == "SO3":
        return np.diag([0.02 ** 2] * 3)
    return np.diag([0.05 ** 2] * kind.dim)


@dataclass(frozen=True)
class ConstantTwistSpec:
    """Timing and covariance of one constant-twist factor.

    The effective covariance grows linearly with the prediction horizon:
    Sigma_ct = dt2 * base_covariance.
    """

    dt1: float
    dt2: float
    base_covariance: np.ndarray

    def __post_init__(self):
        if self.dt1 <= 0 or self.dt2 <= 0:
            raise ValueError(f"dt1, dt2 must be positive (got {self.dt1}, {self.dt2})")

    @property
    def alpha(self) -> float:
        return self.dt2 / self.dt1

    def effective_covariance(self) -> np.ndarray:
        return self.dt2 * np.asarray(self.base_covariance, dtype=float)


@dataclass(frozen=True)
class RollPitchSpec:
    covariance: np.ndarray = field(
        default_factory=lambda: np.diag([0.05 ** 2, 0.05 ** 2]))
    selection: np.ndarray = field(default_factory=lambda: _S_RP.copy())


@dataclass(frozen=True)
class MeasurementNoise:
    usbl: np.ndarray = field(default_factory=lambda: np.eye(3) * 1.5 ** 2)
    optical: np.ndarray = field(
        default_factory=lambda: np.diag([0.05 ** 2] * 3 + [0.01 ** 2] * 3))
    odom: np.ndarray = field(
        default_factory=lambda: np.diag([0.005 ** 2] * 3 + [0.002 ** 2] * 3))


# ---------------------------------------------------------------------------
# Constant-twist residual and Jacobians (any manifold kind).


def ct_residual(T_prev, T_curr, T_next, dt1: float, dt2: float,
                kind: ManifoldKind | None = None) -> np.ndarray:
    """Deviation of T_next from replaying the twist seen over (T_prev, T_curr).

    Five steps: relative increment, twist estimate, scaled increment,
    prediction, and tangent-space deviation at the prediction.
    """
    if dt1 <= 0 or dt2 <= 0:
        raise ValueError("dt1 and dt2 must be positive")
    kind = kind or manifold.kind_of(T_curr)
    try:
        delta1 = manifold.ominus(kind, T_curr, T_prev)
    except NearSingularError as err:
        raise NearSingularError(f"relative increment step: {err}") from err
    delta2 = (dt2 / dt1) * delta1
    predicted = manifold.oplus(kind, T_curr, delta2)
    try:
        return manifold.ominus(kind, T_next, predicted)
    except NearSingularError as err:
        raise NearSingularError(f"residual step: {err}") from err


def ct_jacobians(T_prev, T_curr, T_next, dt1: float, dt2: float,
                 kind: ManifoldKind | None = None):
    """Closed-form derivative blocks of ct_residual w.r.t. the three states.

    Right-tangent perturbation convention; on R^n the blocks reduce exactly
    to (alpha I, -(1 + alpha) I, I) with alpha = dt2/dt1.
    """
    kind = kind or manifold.kind_of(T_curr)
    alpha = dt2 / dt1
    if kind.tag == "RN":
        eye = np.eye(kind.dim)
        return alpha * eye, -(1.0 + alpha) * eye, eye.copy()

    try:
        delta1 = manifold.ominus(kind, T_curr, T_prev)
    except NearSingularError as err:
        raise NearSingularError(f"relative increment step: {err}") from err
    delta2 = alpha * delta1
    predicted = manifold.oplus(kind, T_curr, delta2)
    try:
        eps = manifold.ominus(kind, T_next, predicted)
    except NearSingularError as err:
        raise NearSingularError(f"residual step: {err}") from err

    neg_jl_inv_eps = -manifold.jl_inv(kind, eps)
    common = alpha * (neg_jl_inv_eps @ manifold.jr(kind, delta2))
    J_prev = common @ (-manifold.jl_inv(kind, delta1))
    J_curr = common @ manifold.jr_inv(kind, delta1) \
        + neg_jl_inv_eps @ manifold.adjoint_inv_of_exp(kind, delta2)
    J_next = manifold.jr_inv(kind, eps)
    return J_prev, J_curr, J_next


def ct_factor(keys: tuple[VariableKey, VariableKey, VariableKey],
              spec: ConstantTwistSpec) -> Factor:
    k_prev, k_curr, k_next = keys
    kind = k_curr.kind
    if not (k_prev.kind == k_curr.kind == k_next.kind):
        raise ManifoldMismatchError(
            f"constant-twist triple must share one manifold kind, got "
            f"{k_prev.kind}, {k_curr.kind}, {k_next.kind}")
    if not (k_prev.timestamp < k_curr.timestamp < k_next.timestamp):
        raise ValueError("constant-twist keys must have strictly increasing timestamps")

    dt1, dt2 = spec.dt1, spec.dt2
    alpha = dt2 / dt1

    def residual(values: Values) -> np.ndarray:
        return ct_residual(values.get(k_prev), values.get(k_curr),
                           values.get(k_next), dt1, dt2, kind)

    def jacobian(values: Values):
        return ct_jacobians(values.get(k_prev), values.get(k_curr),
                            values.get(k_next), dt1, dt2, kind)

    if kind.tag == "RN":
        eye = np.eye(kind.dim)
        J_rn = (alpha * eye, -(1.0 + alpha) * eye, eye)

        def combined(values: Values):
            return residual(values), J_rn
    elif kind.tag == "SE3":

        def combined(values: Values):
            # Shares the group elements between the residual and Jacobians,
            # using Jl^-1(x) = Jr^-1(x) Ad^-1_Exp(x) so each of delta1,
            # delta2 and eps needs only one coupling-block evaluation.
            E1 = manifold.compose(manifold.inverse(values.get(k_prev)),
                                  values.get(k_curr))
            try:
                delta1 = manifold.log_se3(E1)
            except NearSingularError as err:
                raise NearSingularError(
                    f"relative increment step: {err}") from err
            delta2 = alpha * delta1
            E2 = manifold.exp_se3(delta2)
            predicted = manifold.compose(values.get(k_curr), E2)
            E_eps = manifold.compose(manifold.inverse(predicted),
                                     values.get(k_next))
            try:
                eps = manifold.log_se3(E_eps)
            except NearSingularError as err:
                raise NearSingularError(f"residual step: {err}") from err

            J_next = manifold.jr_inv_se3(eps)
            neg_jl_inv_eps = -(J_next @ manifold.adjoint_inv_se3(E_eps))
            adj_inv_2 = manifold.adjoint_inv_se3(E2)
            common = alpha * (neg_jl_inv_eps
                              @ (adj_inv_2 @ manifold.jl_se3(delta2)))
            jr_inv_1 = manifold.jr_inv_se3(delta1)
            J_prev = common @ (-(jr_inv_1 @ manifold.adjoint_inv_se3(E1)))
            J_curr = common @ jr_inv_1 + neg_jl_inv_eps @ adj_inv_2
            return eps, (J_prev, J_curr, J_next)
    else:

        def combined(values: Values):
            # shares delta1/delta2/eps between the residual and its Jacobians
            try:
                delta1 = manifold.ominus(kind, values.get(k_curr),
                                         values.get(k_prev))
            except NearSingularError as err:
                raise NearSingularError(
                    f"relative increment step: {err}") from err
            delta2 = alpha * delta1
            predicted = manifold.oplus(kind, values.get(k_curr), delta2)
            try:
                eps = manifold.ominus(kind, values.get(k_next), predicted)
            except NearSingularError as err:
                raise NearSingularError(f"residual step: {err}") from err
            neg_jl_inv_eps = -manifold.jl_inv(kind, eps)
            common = alpha * (neg_jl_inv_eps @ manifold.jr(kind, delta2))
            J_prev = common @ (-manifold.jl_inv(kind, delta1))
            J_curr = common @ manifold.jr_inv(kind, delta1) \
                + neg_jl_inv_eps @ manifold.adjoint_inv_of_exp(kind, delta2)
            J_next = manifold.jr_inv(kind, eps)
            return eps, (J_prev, J_curr, J_next)

    return Factor(keys=(k_prev, k_curr, k_next), residual_fn=residual,
                  jacobian_fn=jacobian,
                  noise=NoiseModel(spec.effective_covariance()),
                  name=f"ct[{k_prev.id},{k_curr.id},{k_next.id}]",
                  combined_fn=combined)


# ---------------------------------------------------------------------------
# Priors and measurement factors.


def prior_factor(key: VariableKey, mean, covariance: np.ndarray) -> Factor:
    kind = key.kind

    def residual(values: Values) -> np.ndarray:
        return manifold.ominus(kind, values.get(key), mean)

    def jacobian(values: Values):
        eps = manifold.ominus(kind, values.get(key), mean)
        return (manifold.jr_inv(kind, eps),)

    return Factor(keys=(key,), residual_fn=residual, jacobian_fn=jacobian,
                  noise=NoiseModel(covariance), name=f"prior[{key.id}]")


def relative_pose_factor(key_a: VariableKey, key_b: VariableKey, z: Pose3,
                         covariance: np.ndarray) -> Factor:
    if key_a.kind.tag != "SE3" or key_b.kind.tag != "SE3":
        raise ManifoldMismatchError("relative-pose factor needs two SE(3) keys")
    z_inv = manifold.inverse(z)

    def _rel(values: Values) -> Pose3:
        return manifold.compose(manifold.inverse(values.get(key_a)),
                                values.get(key_b))

    def residual(values: Values) -> np.ndarray:
        return manifold.log_se3(manifold.compose(z_inv, _rel(values)))

    def jacobian(values: Values):
        M = _rel(values)
        eps = manifold.log_se3(manifold.compose(z_inv, M))
        Jri = manifold.jr_inv_se3(eps)
        return -Jri @ manifold.adjoint_inv_se3(M), Jri

    def combined(values: Values):
        M = _rel(values)
        eps = manifold.log_se3(manifold.compose(z_inv, M))
        Jri = manifold.jr_inv_se3(eps)
        return eps, (-Jri @ manifold.adjoint_inv_se3(M), Jri)

    return Factor(keys=(key_a, key_b), residual_fn=residual,
                  jacobian_fn=jacobian, noise=NoiseModel(covariance),
                  name=f"relpose[{key_a.id},{key_b.id}]", combined_fn=combined)


def usbl_factor(chaser_key: VariableKey, target_key: VariableKey,
                z: np.ndarray, covariance: np.ndarray) -> Factor:
    """Chaser-frame offset to the target; target may be SE(3) or R^3."""
    if chaser_key.kind.tag != "SE3":
        raise ManifoldMismatchError("USBL factor needs an SE(3) chaser key")
    if target_key.kind.tag not in ("SE3", "RN"):
        raise ManifoldMismatchError("USBL target must be SE(3) or R^n")
    z = np.asarray(z, dtype=float)
    se3_target = target_key.kind.tag == "SE3"

    def _predict(values: Values) -> np.ndarray:
        chaser: Pose3 = values.get(chaser_key)
        tgt = values.get(target_key)
        p = tgt.translation if se3_target else tgt.coords
        return chaser.rotation.matrix.T @ (p - chaser.translation)

    def residual(values: Values) -> np.ndarray:
        return _predict(values) - z

    def jacobian(values: Values):
        chaser: Pose3 = values.get(chaser_key)
        h = _predict(values)
        J_chaser = np.hstack([-np.eye(3), skew(h)])
        if se3_target:
            tgt: Pose3 = values.get(target_key)
            J_target = np.hstack([
                chaser.rotation.matrix.T @ tgt.rotation.matrix, np.zeros((3, 3))])
        else:
            J_target = chaser.rotation.matrix.T
        return J_chaser, J_target

    def combined(values: Values):
        chaser: Pose3 = values.get(chaser_key)
        h = _predict(values)
        J_chaser = np.hstack([-np.eye(3), skew(h)])
        if se3_target:
            tgt: Pose3 = values.get(target_key)
            J_target = np.hstack([
                chaser.rotation.matrix.T @ tgt.rotation.matrix, np.zeros((3, 3))])
        else:
            J_target = chaser.rotation.matrix.T
        return h - z, (J_chaser, J_target)

    return Factor(keys=(chaser_key, target_key), residual_fn=residual,
                  jacobian_fn=jacobian, noise=NoiseModel(covariance),
                  name=f"usbl[{chaser_key.id},{target_key.id}]",
                  combined_fn=combined)


# ---------------------------------------------------------------------------
# Roll-pitch prior.

_GIMBAL_TOL = 1e-3


def yaw_of(R: np.ndarray) -> float:
    """ZYX yaw; guarded against gimbal lock."""
    pitch = -np.arcsin(np.clip(R[2, 0], -1.0, 1.0))
    if abs(pitch) > np.pi / 2 - _GIMBAL_TOL:
        raise NearSingularError(f"pitch {pitch} too close to +-pi/2 for yaw extraction")
    return float(np.arctan2(R[1, 0], R[0, 0]))


def _rz(psi: float) -> np.ndarray:
    c, s = np.cos(psi), np.sin(psi)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def roll_pitch_factor(target_key: VariableKey,
                      spec: RollPitchSpec | None = None) -> Factor:
    """Penalizes roll and pitch of an SE(3) target, invariant to yaw."""
    if target_key.kind.tag != "SE3":
        raise ManifoldMismatchError("roll-pitch factor needs an SE(3) key")
    spec = spec or RollPitchSpec()
    S = spec.selection

    def _log_upright(R: np.ndarray) -> np.ndarray:
        return manifold.log_so3(manifold.Rotation3(R.T @ _rz(yaw_of(R))))

    def residual(values: Values) -> np.ndarray:
        R = values.get(target_key).rotation.matrix
        return S @ _log_upright(R)

    def jacobian(values: Values):
        R = values.get(target_key).rotation.matrix
        E = _log_upright(R)
        # d(yaw)/d(theta) for a right perturbation R Exp([theta]x)
        r00, r10 = R[0, 0], R[1, 0]
        denom = r00 * r00 + r10 * r10
        d_r00 = -(R[0, :] @ _SKEW_E0)
        d_r10 = -(R[1, :] @ _SKEW_E0)
        d_psi = (r00 * d_r10 - r10 * d_r00) / denom
        J_theta = S @ (-manifold.jl_inv_so3(E)
                       + manifold.jr_inv_so3(E) @ np.outer(_E2, d_psi))
        return (np.hstack([np.zeros((2, 3)), J_theta]),)

    return Factor(keys=(target_key,), residual_fn=residual,
                  jacobian_fn=jacobian, noise=NoiseModel(spec.covariance),
                  name=f"rollpitch[{target_key.id}]")


# ---------------------------------------------------------------------------
# Representation-boundary factors (R^3 <-> SE(3) switches).


def boundary_factors(se3_key: VariableKey, r3_key: VariableKey,
                     direction: str, covariance: np.ndarray) -> list[Factor]:
    """Translation-equality tie between paired SE(3) and R^3 target states.

    direction is "DOWN" (SE(3) chain hands off to R^3) or "UP" (the reverse);
    both use the same residual p - t(T).  Orientation of the SE(3) state is
    left to whatever factor triggered the representation change.
    """
    if direction not in ("DOWN", "UP"):
        raise ValueError(f"direction must be DOWN or UP, got {direction!r}")
    if se3_key.kind.tag != "SE3" or r3_key.kind.tag != "RN":
        raise ManifoldMismatchError("boundary factor needs (SE3, R^n) keys")

    def residual(values: Values) -> np.ndarray:
        T: Pose3 = values.get(se3_key)
        p: EuclidPoint = values.get(r3_key)
        return p.coords - T.translation

    def jacobian(values: Values):
        T: Pose3 = values.get(se3_key)
        J_T = np.hstack([-T.rotation.matrix, np.zeros((3, 3))])
        return J_T, np.eye(3)

    return [Factor(keys=(se3_key, r3_key), residual_fn=residual,
                   jacobian_fn=jacobian, noise=NoiseModel(covariance),
                   name=f"boundary-{direction}[{se3_key.id},{r3_key.id}]")]
