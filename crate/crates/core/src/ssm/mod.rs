//! State-space machinery: ZOH discretization, the discrete recurrence with
//! sequential and parallel evaluators, and the differentiable selective scan.

pub mod discretize;
pub mod recurrence;
pub mod scan;
pub mod selective;

pub use discretize::{discretize_zoh, discretize_zoh_allow_zero, exprel, DiscreteSsm, ScanDims};
pub use recurrence::{Affine, ScanMode};
pub use scan::{scan, scan_parallel, scan_sequential, ScanOutput};
pub use selective::{ScanModulation, ScanResult, SelectiveScan};
