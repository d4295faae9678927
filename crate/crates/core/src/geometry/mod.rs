//! Rotation parameterizations, sphere pixelization and gauge alignment.

mod align;
mod rotation;
mod sphere;

pub use align::{align_rotations, Alignment};
pub use rotation::{
    add, axis_angle_jacobian, cross, dot, geodesic_degrees, norm, normalize, quaternion_to_rotation,
    rotation_from_axis_angle, rotation_from_s2s2, s2s2_backward, sample_uniform_rotation, scale, skew, sub,
    AxisAngle, Mat3, Rotation, S2S2Param, Vec3, TAYLOR_THRESHOLD, TAYLOR_THRESHOLD_HIGH_ORDER,
};
pub use sphere::{gnomonic_project, gnomonic_unproject, SphereGrid};
