"""Kinematics tests.

The forward chain is validated against an independent homogeneous-matrix
implementation written directly from the joint convention (rotate about the
axis, then apply the link offset). The Jacobian is validated against central
finite differences of that oracle with h = 1e-6.
"""

import numpy as np
import pytest

from conftest import desk_arm, planar_arm
from twinlink.geometry import Pose3D, quat_from_axis_angle, quat_to_matrix
from twinlink.kinematics import (
    ArmModel,
    IkFailure,
    JointSpec,
    JointState,
    chain_points,
    chain_points_many,
    forward_kinematics,
    inverse_kinematics,
    jacobian,
)

FD_H = 1e-6


def fk_oracle(arm: ArmModel, angles) -> np.ndarray:
    """4x4 homogeneous chain product, independent of the package internals."""
    T = np.eye(4)
    T[:3, :3] = quat_to_matrix(arm.base_pose.quat)
    T[:3, 3] = arm.base_pose.position
    for spec, q in zip(arm.joints, angles):
        rot = np.eye(4)
        rot[:3, :3] = quat_to_matrix(quat_from_axis_angle(spec.axis, q))
        off = np.eye(4)
        off[:3, :3] = quat_to_matrix(spec.offset.quat)
        off[:3, 3] = spec.offset.position
        T = T @ rot @ off
    return T


def jacobian_fd_oracle(arm: ArmModel, angles) -> np.ndarray:
    """Central differences of the homogeneous oracle, linear and angular."""
    n = arm.joint_count
    jac = np.empty((6, n))
    for i in range(n):
        qp, qm = np.array(angles, dtype=float), np.array(angles, dtype=float)
        qp[i] += FD_H
        qm[i] -= FD_H
        Tp, Tm = fk_oracle(arm, qp), fk_oracle(arm, qm)
        jac[:3, i] = (Tp[:3, 3] - Tm[:3, 3]) / (2 * FD_H)
        dR = (Tp[:3, :3] - Tm[:3, :3]) / (2 * FD_H)
        w = dR @ fk_oracle(arm, angles)[:3, :3].T  # skew(omega)
        jac[3:, i] = [w[2, 1], w[0, 2], w[1, 0]]
    return jac


def random_config(arm: ArmModel, rng, shrink=0.1) -> np.ndarray:
    lo, hi = arm.limits_lo, arm.limits_hi
    pad = shrink * (hi - lo)
    return rng.uniform(lo + pad, hi - pad)


class TestForwardKinematics:
    def test_planar_arm_straight(self):
        arm = planar_arm()
        pose = forward_kinematics(arm, JointState(np.zeros(2)))
        np.testing.assert_allclose(pose.position, [1.0, 0.0, 0.0], atol=1e-12)

    def test_planar_arm_first_joint_quarter_turn(self):
        arm = planar_arm()
        pose = forward_kinematics(arm, JointState(np.array([np.pi / 2, 0.0])))
        np.testing.assert_allclose(pose.position, [0.0, 1.0, 0.0], atol=1e-12)

    def test_planar_arm_elbow_bend(self):
        arm = planar_arm()
        # first link along x to (0.5, 0), elbow 90deg: second link along y
        pose = forward_kinematics(arm, JointState(np.array([0.0, np.pi / 2])))
        np.testing.assert_allclose(pose.position, [0.5, 0.5, 0.0], atol=1e-12)

    def test_matches_homogeneous_oracle(self):
        arm = desk_arm()
        rng = np.random.default_rng(101)
        for _ in range(100):
            q = random_config(arm, rng)
            pose = forward_kinematics(arm, JointState(q))
            T = fk_oracle(arm, q)
            np.testing.assert_allclose(pose.position, T[:3, 3], atol=1e-10)
            np.testing.assert_allclose(pose.rotation_matrix(), T[:3, :3], atol=1e-10)

    def test_out_of_limit_rejected(self):
        arm = desk_arm()
        q = np.zeros(6)
        q[1] = 2.5  # beyond the 2.4 shoulder limit
        with pytest.raises(ValueError):
            forward_kinematics(arm, JointState(q))

    def test_chain_points_shape_and_base(self):
        arm = desk_arm()
        pts = chain_points(arm, np.zeros(6))
        assert pts.shape == (7, 3)
        np.testing.assert_allclose(pts[0], arm.base_pose.position, atol=1e-12)
        # all joints zeroed: the arm stands straight up from the base
        np.testing.assert_allclose(pts[-1], [-0.34, 0.0, 0.85], atol=1e-12)

    def test_chain_points_many_matches_single(self):
        arm = desk_arm()
        rng = np.random.default_rng(77)
        configs = np.array([random_config(arm, rng) for _ in range(40)])
        batch = chain_points_many(arm, configs)
        assert batch.shape == (40, 7, 3)
        for i, q in enumerate(configs):
            np.testing.assert_allclose(batch[i], chain_points(arm, q),
                                       atol=1e-12)

    def test_chain_points_many_rejects_bad_shape(self):
        arm = desk_arm()
        with pytest.raises(ValueError):
            chain_points_many(arm, np.zeros(6))
        with pytest.raises(ValueError):
            chain_points_many(arm, np.zeros((3, 5)))

    def test_single_joint_arm_rejected(self):
        with pytest.raises(ValueError):
            ArmModel(joints=(JointSpec(axis=np.array([0.0, 0.0, 1.0]),
                                       offset=Pose3D.from_xyz(0.5, 0, 0),
                                       limit_lo=-1.0, limit_hi=1.0,
                                       max_velocity=1.0),))


class TestJacobian:
    def test_planar_arm_lever_arms(self):
        arm = planar_arm()
        jac = jacobian(arm, JointState(np.zeros(2)))
        # joint 1 swings the full 1.0 m lever, joint 2 the last 0.5 m
        np.testing.assert_allclose(jac[:3, 0], [0.0, 1.0, 0.0], atol=1e-12)
        np.testing.assert_allclose(jac[:3, 1], [0.0, 0.5, 0.0], atol=1e-12)
        np.testing.assert_allclose(jac[3:, 0], [0.0, 0.0, 1.0], atol=1e-12)
        np.testing.assert_allclose(jac[3:, 1], [0.0, 0.0, 1.0], atol=1e-12)

    def test_column_count_matches_joints(self):
        assert jacobian(planar_arm(), JointState(np.zeros(2))).shape == (6, 2)
        assert jacobian(desk_arm(), JointState(np.zeros(6))).shape == (6, 6)

    def test_matches_finite_differences(self):
        arm = desk_arm()
        rng = np.random.default_rng(103)
        for _ in range(100):
            q = random_config(arm, rng)
            np.testing.assert_allclose(jacobian(arm, JointState(q)),
                                       jacobian_fd_oracle(arm, q), atol=1e-5)

    def test_planar_matches_finite_differences(self):
        arm = planar_arm()
        rng = np.random.default_rng(107)
        for _ in range(50):
            q = rng.uniform(-3.0, 3.0, size=2)
            np.testing.assert_allclose(jacobian(arm, JointState(q)),
                                       jacobian_fd_oracle(arm, q), atol=1e-5)


class TestInverseKinematics:
    def test_already_at_target(self):
        arm = desk_arm()
        q = np.array([0.3, 0.8, 1.2, 0.1, 0.5, -0.2])
        target = forward_kinematics(arm, JointState(q))
        sol = inverse_kinematics(arm, target, JointState(q))
        np.testing.assert_allclose(sol.angles, q, atol=1e-12)

    def test_round_trip_random_reachable(self):
        arm = desk_arm()
        rng = np.random.default_rng(109)
        q_home = np.array([0.0, 0.6, 1.6, 0.0, 0.9, 0.0])
        for _ in range(100):
            q_true = random_config(arm, rng)
            target = forward_kinematics(arm, JointState(q_true))
            sol = inverse_kinematics(arm, target, JointState(q_home))
            reached = forward_kinematics(arm, sol)
            dp = np.linalg.norm(reached.position - target.position)
            assert dp <= 1e-4
            qd = 2 * np.arccos(min(1.0, abs(np.dot(reached.quat, target.quat))))
            assert qd <= 1e-3

    def test_solution_respects_limits(self):
        arm = desk_arm()
        rng = np.random.default_rng(113)
        for _ in range(30):
            target = forward_kinematics(arm, JointState(random_config(arm, rng)))
            sol = inverse_kinematics(arm, target,
                                     JointState(np.zeros(6)))
            assert np.all(sol.angles >= arm.limits_lo - 1e-9)
            assert np.all(sol.angles <= arm.limits_hi + 1e-9)

    def test_unreachable_target(self):
        arm = desk_arm()
        target = Pose3D.from_xyz(10.0, 0.0, 0.0)
        with pytest.raises(IkFailure) as exc:
            inverse_kinematics(arm, target, JointState(np.zeros(6)))
        assert exc.value.pos_err > 1.0

    def test_gripper_passes_through(self):
        arm = desk_arm()
        q = np.array([0.1, 0.7, 1.1, 0.0, 0.6, 0.0])
        target = forward_kinematics(arm, JointState(q))
        sol = inverse_kinematics(arm, target, JointState(q, gripper=0.25))
        assert sol.gripper == 0.25


class TestJointState:
    def test_gripper_range_enforced(self):
        with pytest.raises(ValueError):
            JointState(np.zeros(2), gripper=1.5)
        with pytest.raises(ValueError):
            JointState(np.zeros(2), gripper=-0.1)
