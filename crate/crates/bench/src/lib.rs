//! Workload driver and statistical experiments for the `threesided`
//! structures.

pub mod calibration;
pub mod experiments;
pub mod structures;
pub mod table;
pub mod workload;
