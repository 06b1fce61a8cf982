//! Reference data for the acceptance checks in `tests/acceptance.rs`.

pub mod mallard {
    use std::path::PathBuf;

    /// Location of the exported mallard counts; see `data/DATA.md`.
    pub fn data_path() -> PathBuf {
        PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("data").join("mallard.csv")
    }

    /// Published negative binomial ML fit with abundance covariates length, elev, forest
    /// and detection covariates ivel, date, date²: intercept and slopes for log λ,
    /// then for logit p, then log θ.
    pub const ML_ESTIMATES: [f64; 9] = [-1.786, -0.186, -1.372, -0.685, -0.028, 0.174, -0.313, -0.005, -0.695];

    /// Standard errors matching [`ML_ESTIMATES`].
    pub const ML_STANDARD_ERRORS: [f64; 9] = [0.281, 0.214, 0.293, 0.216, 0.285, 0.227, 0.147, 0.081, 0.364];

    /// Posterior means of the abundance coefficients when detection uses
    /// site-averaged ivel and date.
    pub const LAPLACE_ABUNDANCE: [f64; 4] = [-1.412, -0.290, -0.998, -0.771];
}
