use crate::error::{config_err, Result};

/// Tolerance on `|p| = 1` for projection inputs.
pub const UNIT_TOLERANCE: f64 = 1e-6;

/// Azimuthal equidistant projection about the pole `(0, 0, 1)`.
///
/// The planar radius is the angular distance from the pole, `acos(z)`, and
/// the azimuth is `atan2(y, x)`.
pub fn project_azimuthal_equidistant(p: [f64; 3]) -> Result<(f64, f64)> {
    let norm = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
    if !((norm - 1.0).abs() <= UNIT_TOLERANCE) {
        return Err(config_err!("projection needs a unit vector, |p| = {norm}"));
    }
    let rxy = p[0].hypot(p[1]);
    if rxy == 0.0 && p[2] < 0.0 {
        return Err(config_err!("the antipode of the pole has no azimuth"));
    }
    let theta = p[2].clamp(-1.0, 1.0).acos();
    let phi = p[1].atan2(p[0]);
    Ok((theta * phi.cos(), theta * phi.sin()))
}
