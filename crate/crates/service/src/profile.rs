//! Device profiles: calibration constants plus the actuator description,
//! kept as a history in one JSON file. The newest entry is the one used.

use std::path::Path;

use gripforce_core::actuator::ActuatorSpec;
use gripforce_core::calibration::{Calibration, CalibrationWarning, LeverFit};
use gripforce_core::mechanics::CalibrationCoefficients;
use serde::{Deserialize, Serialize};

use crate::persist::{read_json, write_atomic, PersistError};

pub const PROFILE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceProfile {
    pub coefficients: CalibrationCoefficients,
    pub actuator: ActuatorSpec,
    /// RFC 3339; `None` for the built-in nominal profile.
    pub calibrated_at: Option<String>,
    /// Sweep file the coefficients were fitted from.
    pub source: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub fits: Vec<LeverFit>,
}

impl DeviceProfile {
    pub fn nominal(coefficients: CalibrationCoefficients) -> Self {
        DeviceProfile {
            coefficients,
            actuator: ActuatorSpec::default(),
            calibrated_at: None,
            source: None,
            fits: Vec::new(),
        }
    }

    pub fn from_calibration(cal: &Calibration, source: &str, at: String) -> Self {
        DeviceProfile {
            coefficients: cal.coefficients,
            actuator: ActuatorSpec::default(),
            calibrated_at: Some(at),
            source: Some(source.to_string()),
            fits: vec![cal.fit_1.clone(), cal.fit_2.clone()],
        }
    }

    pub fn warnings(&self) -> impl Iterator<Item = &CalibrationWarning> {
        self.fits.iter().flat_map(|f| f.warnings.iter())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileStore {
    pub format_version: u32,
    pub profiles: Vec<DeviceProfile>,
}

impl ProfileStore {
    pub fn load(path: &Path) -> Result<Self, PersistError> {
        let store: ProfileStore = read_json(path)?;
        if store.format_version != PROFILE_FORMAT_VERSION {
            return Err(PersistError::Format {
                path: path.to_path_buf(),
                message: format!("unsupported profile format {}", store.format_version),
            });
        }
        Ok(store)
    }

    /// Appends `profile` to the store at `path`, creating it if needed.
    pub fn append(path: &Path, profile: DeviceProfile) -> Result<Self, PersistError> {
        let mut store = if path.exists() {
            ProfileStore::load(path)?
        } else {
            ProfileStore {
                format_version: PROFILE_FORMAT_VERSION,
                profiles: Vec::new(),
            }
        };
        store.profiles.push(profile);
        let json = serde_json::to_vec_pretty(&store).expect("profile serializes");
        write_atomic(path, &json)?;
        Ok(store)
    }

    /// Most recent calibration; ties go to the later entry.
    pub fn latest(&self) -> Option<&DeviceProfile> {
        self.profiles
            .iter()
            .enumerate()
            .max_by(|(i, a), (j, b)| a.calibrated_at.cmp(&b.calibrated_at).then(i.cmp(j)))
            .map(|(_, p)| p)
    }
}
