//! Intervention specs, their resolved plans, and the calibration pass that
//! supplies mean and noise replacements.

mod calibration;
mod plan;
mod spec;

pub use calibration::{
    calibrate, calibration_indices, CalibrationSidecar, CalibrationStats, MomentAccumulator,
    SlotMoments, SourceFingerprint,
};
pub use plan::{plan, InterventionPlan, PlanShape, Replacement, TokenEdit};
pub use spec::{
    per_register_lesion, resolve_target, InterventionKind, InterventionSpec, LayerSelection,
    TokenSlot, TokenTarget,
};
