"""Shared builders for the test suite."""

import numpy as np

from twinlink.geometry import Pose3D
from twinlink.kinematics import ArmModel, JointSpec


def _joint(axis, dz, lo, hi, vmax):
    return JointSpec(axis=np.array(axis, dtype=float),
                     offset=Pose3D.from_xyz(0.0, 0.0, dz),
                     limit_lo=lo, limit_hi=hi, max_velocity=vmax)


def desk_arm(base_xy=(-0.34, 0.0)) -> ArmModel:
    """Six-joint tabletop arm, 0.85 m of links, wrist suited to top grasps."""
    joints = (
        _joint((0, 0, 1), 0.16, -3.1, 3.1, 1.5),   # base yaw on a 0.16 column
        _joint((0, 1, 0), 0.30, -1.2, 2.4, 1.5),   # shoulder pitch, upper arm
        _joint((0, 1, 0), 0.28, -0.3, 2.6, 1.5),   # elbow pitch, forearm
        _joint((0, 0, 1), 0.04, -3.1, 3.1, 2.0),   # forearm roll
        _joint((0, 1, 0), 0.04, -2.0, 2.0, 2.0),   # wrist pitch
        _joint((0, 0, 1), 0.03, -3.1, 3.1, 2.0),   # tool roll
    )
    return ArmModel(joints=joints,
                    base_pose=Pose3D.from_xyz(base_xy[0], base_xy[1], 0.0))


def planar_arm(l1=0.5, l2=0.5) -> ArmModel:
    """Two z-axis joints in the xy plane, the classic textbook linkage."""
    joints = (
        JointSpec(axis=np.array([0.0, 0.0, 1.0]),
                  offset=Pose3D.from_xyz(l1, 0.0, 0.0),
                  limit_lo=-np.pi, limit_hi=np.pi, max_velocity=1.0),
        JointSpec(axis=np.array([0.0, 0.0, 1.0]),
                  offset=Pose3D.from_xyz(l2, 0.0, 0.0),
                  limit_lo=-np.pi, limit_hi=np.pi, max_velocity=1.0),
    )
    return ArmModel(joints=joints)
