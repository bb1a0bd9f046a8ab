//! Empirical checks of the discrete/continuous correspondence: one-step
//! moment matching, weak-error scaling and regularization ordering.

pub mod collapse;
pub mod factor;
pub mod moments;
pub mod ordering;
pub mod weak;

pub use collapse::{collapse_checks, noisy_families, zero_noise_families, CollapseCheck};
pub use factor::{factor_checks, factor_problems, scale_checks, FactorCheck, ScaleCheck, RECONSTRUCTION_TOLERANCE};
pub use moments::{moment_scaling, one_step_moments, predicted_drift, MomentReport, MomentScaling};
pub use ordering::{regularization_ordering, OrderingReport, OrderingRow};
pub use weak::{
    fit_line, weak_error_grid, LineFit, SlopeSummary, TestFunction, WeakApproxReport, WeakCell, WeakGridConfig,
};
