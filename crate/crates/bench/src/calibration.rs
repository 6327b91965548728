//! Frozen constants for the statistical checks, and the pilot runs that
//! produced them.

use serde::{Deserialize, Serialize};

use crate::experiments::{fit_line, leaf_io, mpst_work, scaling, std_dev, Stratum};
use crate::structures::{BuildOptions, StructureKind};

/// The committed calibration file.
pub const COMMITTED: &str = include_str!("../calibration.toml");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    /// Seed of the pilot runs; acceptance runs use other seeds.
    pub pilot_seed: u64,
    pub mpst: MpstCal,
    pub leaf: LeafCal,
    pub pst: PstCal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MpstCal {
    /// Bound on scanned entries / (t + 1), flat tree.
    pub alpha_flat: f64,
    /// Same for the layered tree.
    pub alpha_layered: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeafCal {
    /// Bound on reads / (t/B + 1) for leaf queries.
    pub alpha: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PstCal {
    /// Slope of mean t≈0 node visits against log₂ n.
    pub alpha: f64,
    /// Relative tolerance on the slope.
    pub tolerance: f64,
}

impl Calibration {
    pub fn committed() -> Calibration {
        toml::from_str(COMMITTED).expect("calibration.toml parses")
    }

    /// Reruns the pilots. Bounds are the pilot maximum plus three standard
    /// deviations of the per-build maxima, rounded up to a quarter.
    pub fn pilot(seed: u64) -> anyhow::Result<Calibration> {
        let up = |v: f64| (v * 4.0).ceil() / 4.0;
        let bound = |v: &[f64]| up(v.iter().cloned().fold(0.0, f64::max) + 3.0 * std_dev(v));
        let work = mpst_work(200, 4096, 50, seed)?;
        let leaf = leaf_io(&[4, 8, 16], 40, 50, seed)?;
        let sizes: Vec<usize> = (10..=16).map(|e| 1 << e).collect();
        let pst = scaling(StructureKind::Pst, &sizes, 400, seed, &BuildOptions::default(), false)?;
        let (xs, ys) = t0_series(&pst);
        let (slope, _) = fit_line(&xs, &ys);
        Ok(Calibration {
            pilot_seed: seed,
            mpst: MpstCal {
                alpha_flat: bound(&work.values("max_ratio_flat")),
                alpha_layered: bound(&work.values("max_ratio_layered")),
            },
            leaf: LeafCal {
                alpha: bound(&leaf.values("max_ratio")),
            },
            pst: PstCal {
                alpha: (slope * 1000.0).round() / 1000.0,
                tolerance: 0.25,
            },
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("serializable")
    }
}

/// `(log₂ n, mean node visits)` of the t≈0 rows of a scaling table.
pub fn t0_series(t: &crate::table::Table) -> (Vec<f64>, Vec<f64>) {
    let stratum = t.column("stratum").expect("stratum column");
    let ns = t.values("n");
    let visits = t.values("mean_node_visits");
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (i, row) in t.rows.iter().enumerate() {
        if row[stratum] == Stratum::Empty.name().into() {
            xs.push(ns[i].log2());
            ys.push(visits[i]);
        }
    }
    (xs, ys)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn committed_file_parses_and_round_trips() {
        let c = Calibration::committed();
        assert!(c.mpst.alpha_flat > 0.0 && c.leaf.alpha > 0.0 && c.pst.alpha > 0.0);
        assert_eq!(toml::from_str::<Calibration>(&c.to_toml()).unwrap(), c);
    }
}
