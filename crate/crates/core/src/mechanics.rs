//! Closed-form force model of the two-lever, single-sensor gripper.
//!
//! Both levers press on one force/torque sensor. The sensor force is the sum
//! of the two lever-amplified grip forces; the torque about the sensor's
//! y axis is their moment difference, since the levers touch the sensor at
//! offsets `d_1` and `d_2` on opposite sides of its center. Two equations,
//! two unknowns: [`decompose`] inverts [`forward_sensor`].

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Mean grip force above which the gripper counts as held.
pub const CONTACT_THRESHOLD_N: f64 = 0.2;

#[derive(Debug, Error, PartialEq)]
pub enum MechanicsError {
    #[error("invalid lever geometry: {0}")]
    InvalidGeometry(&'static str),
    #[error("negative grip force on {0:?}: {1} N")]
    NegativeGrip(Lever, f64),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("lever offsets sum to zero")]
    ZeroOffsetSum,
}

/// Which side of the gripper. Lever 1 carries the finger, lever 2 the thumb.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Lever {
    Lever1,
    Lever2,
}

impl Lever {
    pub fn id(self) -> u8 {
        match self {
            Lever::Lever1 => 1,
            Lever::Lever2 => 2,
        }
    }

    pub fn from_id(id: u8) -> Option<Lever> {
        match id {
            1 => Some(Lever::Lever1),
            2 => Some(Lever::Lever2),
            _ => None,
        }
    }
}

/// Geometry of one lever, expressed only through ratios and the sensor offset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LeverGeometry {
    /// Grip-to-sensor amplification `L_G / L_M`.
    pub lever_ratio: f64,
    /// Aperture arm relative to the grip arm, `L_A / L_G`.
    pub aperture_arm_ratio: f64,
    /// Contact offset from the sensor center along the torque axis, meters.
    pub d: f64,
    pub side: Lever,
}

impl LeverGeometry {
    /// Default `L_A / L_G` used when only the calibrated constants are known.
    pub const DEFAULT_APERTURE_ARM_RATIO: f64 = 0.3;

    pub fn new(lever_ratio: f64, d: f64, side: Lever) -> Result<Self, MechanicsError> {
        let geom = LeverGeometry {
            lever_ratio,
            aperture_arm_ratio: Self::DEFAULT_APERTURE_ARM_RATIO,
            d,
            side,
        };
        geom.validate()?;
        Ok(geom)
    }

    pub fn with_aperture_arm_ratio(mut self, ratio: f64) -> Result<Self, MechanicsError> {
        self.aperture_arm_ratio = ratio;
        self.validate()?;
        Ok(self)
    }

    /// Lever 1 of the calibrated device.
    pub fn device_lever_1() -> Self {
        LeverGeometry {
            lever_ratio: 6.132,
            aperture_arm_ratio: Self::DEFAULT_APERTURE_ARM_RATIO,
            d: 7.17e-3,
            side: Lever::Lever1,
        }
    }

    /// Lever 2 of the calibrated device.
    pub fn device_lever_2() -> Self {
        LeverGeometry {
            lever_ratio: 6.017,
            aperture_arm_ratio: Self::DEFAULT_APERTURE_ARM_RATIO,
            d: 5.98e-3,
            side: Lever::Lever2,
        }
    }

    pub fn validate(&self) -> Result<(), MechanicsError> {
        let vals = [self.lever_ratio, self.aperture_arm_ratio, self.d];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(MechanicsError::NonFinite("lever geometry"));
        }
        if self.lever_ratio <= 0.0 {
            return Err(MechanicsError::InvalidGeometry("lever_ratio must be positive"));
        }
        if self.aperture_arm_ratio <= 0.0 {
            return Err(MechanicsError::InvalidGeometry(
                "aperture_arm_ratio must be positive",
            ));
        }
        if self.d <= 0.0 {
            return Err(MechanicsError::InvalidGeometry("d must be positive"));
        }
        Ok(())
    }
}

/// Forces at the finger-pad contact of one lever.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ContactState {
    /// Normal force on the tactor, N.
    pub f_tactor: f64,
    /// Normal force on the aperture ring, N.
    pub f_aperture: f64,
    /// Tangential friction between tactor and skin, N.
    pub f_friction: f64,
    /// Direction of tactor motion measured from the x axis, rad.
    pub theta: f64,
    /// Tactor displacement along y divided by the grip arm length `L_G`.
    pub delta_y_over_lg: f64,
}

impl ContactState {
    pub fn zero() -> Self {
        ContactState::default()
    }

    /// Grip carried by this contact (`F_T + F_A`).
    pub fn grip(&self) -> f64 {
        self.f_tactor + self.f_aperture
    }

    fn check_finite(&self) -> Result<(), MechanicsError> {
        let vals = [
            self.f_tactor,
            self.f_aperture,
            self.f_friction,
            self.theta,
            self.delta_y_over_lg,
        ];
        if vals.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(MechanicsError::NonFinite("contact state"))
        }
    }
}

/// One sample from the force/torque sensor.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SensorReading {
    /// Force along the sensing axis, N.
    pub f_m: f64,
    /// Torque about the y axis, N·m.
    pub t_m: f64,
    /// Sample time, s.
    pub t: f64,
}

impl SensorReading {
    pub fn new(f_m: f64, t_m: f64, t: f64) -> Self {
        SensorReading { f_m, t_m, t }
    }
}

/// Per-side grip forces recovered from one sensor reading.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GripEstimate {
    pub f_grip_1: f64,
    pub f_grip_2: f64,
    pub f_mean: f64,
    pub t: f64,
}

impl GripEstimate {
    pub fn new(f_grip_1: f64, f_grip_2: f64, t: f64) -> Self {
        GripEstimate {
            f_grip_1,
            f_grip_2,
            f_mean: (f_grip_1 + f_grip_2) / 2.0,
            t,
        }
    }

    /// Whether the gripper is actually being held. Estimates are never
    /// clamped, so small negative values near zero grip are just noise.
    pub fn in_contact(&self) -> bool {
        self.f_mean > CONTACT_THRESHOLD_N
    }
}

/// Constants that map `(F_M, T_M)` to per-side grip forces.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationCoefficients {
    pub alpha_1: f64,
    pub alpha_2: f64,
    /// 1/m.
    pub beta_1: f64,
    /// 1/m.
    pub beta_2: f64,
    pub d_1: f64,
    pub d_2: f64,
    pub ratio_1: f64,
    pub ratio_2: f64,
}

impl CalibrationCoefficients {
    pub fn validate(&self) -> Result<(), MechanicsError> {
        let vals = [
            self.alpha_1,
            self.alpha_2,
            self.beta_1,
            self.beta_2,
            self.d_1,
            self.d_2,
            self.ratio_1,
            self.ratio_2,
        ];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(MechanicsError::NonFinite("calibration coefficients"));
        }
        if vals.iter().any(|v| *v <= 0.0) {
            return Err(MechanicsError::InvalidGeometry(
                "calibration coefficients must be positive",
            ));
        }
        Ok(())
    }
}

/// Grip-equivalent artifact `A_T` of one contact, before lever amplification.
///
/// The friction term acts through the aperture arm and only for motion with a
/// y component; the second term comes from the tactor force's point of action
/// moving along y.
pub fn theoretical_artifact(contact: &ContactState, geom: &LeverGeometry) -> f64 {
    geom.aperture_arm_ratio * contact.f_friction * contact.theta.sin()
        + contact.delta_y_over_lg * contact.f_tactor
}

/// Sensor force and torque produced by the two grip forces plus artifacts.
pub fn forward_sensor(
    grip_1: f64,
    grip_2: f64,
    contact_1: &ContactState,
    contact_2: &ContactState,
    geom_1: &LeverGeometry,
    geom_2: &LeverGeometry,
) -> Result<SensorReading, MechanicsError> {
    if !grip_1.is_finite() || !grip_2.is_finite() {
        return Err(MechanicsError::NonFinite("grip force"));
    }
    if grip_1 < 0.0 {
        return Err(MechanicsError::NegativeGrip(Lever::Lever1, grip_1));
    }
    if grip_2 < 0.0 {
        return Err(MechanicsError::NegativeGrip(Lever::Lever2, grip_2));
    }
    contact_1.check_finite()?;
    contact_2.check_finite()?;
    geom_1.validate()?;
    geom_2.validate()?;

    let loaded_1 = grip_1 + theoretical_artifact(contact_1, geom_1);
    let loaded_2 = grip_2 + theoretical_artifact(contact_2, geom_2);
    let f_m = geom_1.lever_ratio * loaded_1 + geom_2.lever_ratio * loaded_2;
    let t_m = geom_1.lever_ratio * geom_1.d * loaded_1 - geom_2.lever_ratio * geom_2.d * loaded_2;
    Ok(SensorReading { f_m, t_m, t: 0.0 })
}

/// Per-side grip forces from one reading. Artifacts are not subtracted.
pub fn decompose(
    reading: &SensorReading,
    coeffs: &CalibrationCoefficients,
) -> Result<GripEstimate, MechanicsError> {
    if !reading.f_m.is_finite() || !reading.t_m.is_finite() || !reading.t.is_finite() {
        return Err(MechanicsError::NonFinite("sensor reading"));
    }
    coeffs.validate()?;
    let f_grip_1 = coeffs.alpha_1 * reading.f_m + coeffs.beta_1 * reading.t_m;
    let f_grip_2 = coeffs.alpha_2 * reading.f_m - coeffs.beta_2 * reading.t_m;
    Ok(GripEstimate::new(f_grip_1, f_grip_2, reading.t))
}

/// Decomposition constants implied by a pair of lever geometries.
pub fn coefficients_from_geometry(
    geom_1: &LeverGeometry,
    geom_2: &LeverGeometry,
) -> Result<CalibrationCoefficients, MechanicsError> {
    let (r1, d1) = (geom_1.lever_ratio, geom_1.d);
    let (r2, d2) = (geom_2.lever_ratio, geom_2.d);
    if [r1, d1, r2, d2].iter().any(|v| !v.is_finite()) {
        return Err(MechanicsError::NonFinite("lever geometry"));
    }
    let span = d1 + d2;
    if span == 0.0 {
        return Err(MechanicsError::ZeroOffsetSum);
    }
    if r1 <= 0.0 || r2 <= 0.0 || d1 <= 0.0 || d2 <= 0.0 {
        return Err(MechanicsError::InvalidGeometry(
            "ratios and offsets must be positive",
        ));
    }
    Ok(CalibrationCoefficients {
        alpha_1: d2 / (span * r1),
        alpha_2: d1 / (span * r2),
        beta_1: 1.0 / (r1 * span),
        beta_2: 1.0 / (r2 * span),
        d_1: d1,
        d_2: d2,
        ratio_1: r1,
        ratio_2: r2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn device() -> (LeverGeometry, LeverGeometry) {
        (LeverGeometry::device_lever_1(), LeverGeometry::device_lever_2())
    }

    #[test]
    fn zero_grip_gives_zero_reading() {
        let (g1, g2) = device();
        let z = ContactState::zero();
        let r = forward_sensor(0.0, 0.0, &z, &z, &g1, &g2).unwrap();
        assert_eq!((r.f_m, r.t_m), (0.0, 0.0));
    }

    #[test]
    fn forward_with_device_constants() {
        // 6.132*10 + 6.017*10 and 6.132*7.17e-3*10 - 6.017*5.98e-3*10 by hand
        let (g1, g2) = device();
        let z = ContactState::zero();
        let r = forward_sensor(10.0, 10.0, &z, &z, &g1, &g2).unwrap();
        assert!((r.f_m - 121.49).abs() < 1e-9);
        assert!((r.t_m - 0.0798478).abs() < 1e-7, "{}", r.t_m);
    }

    #[test]
    fn symmetric_device_has_no_torque() {
        let g1 = LeverGeometry::new(6.0, 6e-3, Lever::Lever1).unwrap();
        let g2 = LeverGeometry::new(6.0, 6e-3, Lever::Lever2).unwrap();
        let z = ContactState::zero();
        let r = forward_sensor(7.5, 7.5, &z, &z, &g1, &g2).unwrap();
        assert_eq!(r.t_m, 0.0);
    }

    #[test]
    fn rejects_bad_inputs() {
        let (g1, g2) = device();
        let z = ContactState::zero();
        assert_eq!(
            forward_sensor(-1.0, 0.0, &z, &z, &g1, &g2),
            Err(MechanicsError::NegativeGrip(Lever::Lever1, -1.0))
        );
        let bad = ContactState {
            theta: f64::NAN,
            ..ContactState::zero()
        };
        assert!(matches!(
            forward_sensor(1.0, 1.0, &bad, &z, &g1, &g2),
            Err(MechanicsError::NonFinite(_))
        ));
        let c = coefficients_from_geometry(&g1, &g2).unwrap();
        assert!(decompose(&SensorReading::new(f64::INFINITY, 0.0, 0.0), &c).is_err());
        assert!(LeverGeometry::new(6.0, 0.0, Lever::Lever1).is_err());
    }

    #[test]
    fn device_coefficients() {
        let (g1, g2) = device();
        let c = coefficients_from_geometry(&g1, &g2).unwrap();
        assert!((c.alpha_1 - 0.074).abs() < 1e-3, "{}", c.alpha_1);
        assert!((c.alpha_2 - 0.091).abs() < 1e-3, "{}", c.alpha_2);
        assert!((c.beta_1 - 12.40).abs() < 0.05, "{}", c.beta_1);
        assert!((c.beta_2 - 12.63).abs() < 0.05, "{}", c.beta_2);
    }

    #[test]
    fn symmetric_coefficients() {
        let g1 = LeverGeometry::new(6.0, 6e-3, Lever::Lever1).unwrap();
        let g2 = LeverGeometry::new(6.0, 6e-3, Lever::Lever2).unwrap();
        let c = coefficients_from_geometry(&g1, &g2).unwrap();
        assert!((c.alpha_1 - 1.0 / 12.0).abs() < 1e-15);
        assert_eq!(c.alpha_1, c.alpha_2);
        assert_eq!(c.beta_1, c.beta_2);
    }

    #[test]
    fn zero_offset_sum_rejected() {
        let mut g1 = LeverGeometry::device_lever_1();
        let mut g2 = LeverGeometry::device_lever_2();
        g1.d = 0.0;
        g2.d = 0.0;
        assert_eq!(
            coefficients_from_geometry(&g1, &g2),
            Err(MechanicsError::ZeroOffsetSum)
        );
    }

    #[test]
    fn decompose_inverts_device_example() {
        let (g1, g2) = device();
        let c = coefficients_from_geometry(&g1, &g2).unwrap();
        let est = decompose(&SensorReading::new(121.49, 0.0798478, 0.0), &c).unwrap();
        assert!((est.f_grip_1 - 10.0).abs() < 1e-4, "{est:?}");
        assert!((est.f_grip_2 - 10.0).abs() < 1e-4, "{est:?}");
        let zero = decompose(&SensorReading::default(), &c).unwrap();
        assert_eq!((zero.f_grip_1, zero.f_grip_2, zero.f_mean), (0.0, 0.0, 0.0));
    }

    #[test]
    fn artifact_terms() {
        let g = LeverGeometry::device_lever_1();
        let pure_x = ContactState {
            f_tactor: 3.0,
            f_aperture: 12.0,
            f_friction: 1.5,
            theta: 0.0,
            delta_y_over_lg: 0.0,
        };
        assert_eq!(theoretical_artifact(&pure_x, &g), 0.0);

        let contact = ContactState {
            f_tactor: 5.0,
            f_aperture: 0.0,
            f_friction: 1.0,
            theta: std::f64::consts::FRAC_PI_2,
            delta_y_over_lg: 0.05,
        };
        let g = g.with_aperture_arm_ratio(0.3).unwrap();
        assert!((theoretical_artifact(&contact, &g) - 0.55).abs() < 1e-12);

        let unloaded = ContactState {
            theta: 1.0,
            delta_y_over_lg: 0.1,
            ..ContactState::zero()
        };
        assert_eq!(theoretical_artifact(&unloaded, &g), 0.0);
    }

    #[test]
    fn positive_y_shift_overestimates() {
        let (g1, g2) = device();
        let c = coefficients_from_geometry(&g1, &g2).unwrap();
        let shifted = ContactState {
            f_tactor: 2.0,
            f_aperture: 8.0,
            f_friction: 0.0,
            theta: 0.0,
            delta_y_over_lg: 0.04,
        };
        let z = ContactState::zero();
        let r = forward_sensor(10.0, 10.0, &shifted, &z, &g1, &g2).unwrap();
        let est = decompose(&r, &c).unwrap();
        assert!(est.f_grip_1 > 10.0);
        assert!((est.f_grip_2 - 10.0).abs() < 1e-9);
    }

    #[test]
    fn in_contact_predicate() {
        assert!(!GripEstimate::new(-0.05, 0.1, 0.0).in_contact());
        assert!(GripEstimate::new(0.3, 0.2, 0.0).in_contact());
    }
}
