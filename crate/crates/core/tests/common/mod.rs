#![allow(dead_code)]

use std::path::PathBuf;

use causalid::causal::IdentifyConfig;
use causalid::control::controllability_rank;
use causalid::dynamics::BoxBounds;
use causalid::expdesign::DesignSpace;
use causalid::scenario::{PlantSpec, ScenarioConfig, SCHEMA_VERSION};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn scenario_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(format!("{name}.json"))
}

fn signed(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    let v = rng.random_range(lo..hi);
    if rng.random_bool(0.5) {
        v
    } else {
        -v
    }
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

/// Random stable upper-triangular system with square invertible `B`; every
/// nonzero entry has magnitude >= 0.05. Returns `(A, B, h)` where `h` is the
/// largest half-width (capped at 1) whose box corners are equilibria needing
/// `|u| <= 0.8`; resampled until controllable and `h >= 0.25`.
pub fn random_system(seed: u64) -> (DMatrix<f64>, DMatrix<f64>, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 3 + (seed as usize % 3);
    loop {
        let mut a = DMatrix::zeros(n, n);
        let mut b = DMatrix::zeros(n, n);
        for i in 0..n {
            a[(i, i)] = signed(&mut rng, 0.3, 0.9);
            for j in i + 1..n {
                if rng.random_bool(0.5) {
                    a[(i, j)] = signed(&mut rng, 0.05, 1.0);
                }
            }
            b[(i, i)] = signed(&mut rng, 0.3, 1.0);
            for j in (0..n).filter(|&j| j != i) {
                if rng.random_bool(0.3) {
                    b[(i, j)] = signed(&mut rng, 0.05, 0.5);
                }
            }
        }
        if !controllability_rank(&a, &b).1 {
            continue;
        }
        let Some(binv) = b.clone().try_inverse() else { continue };
        let g = binv * (DMatrix::identity(n, n) - &a);
        let norm = (0..n).map(|i| g.row(i).iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max);
        let h = 0.8 / norm;
        if h >= 0.25 {
            return (a, b, h.min(1.0));
        }
    }
}

/// Scenario for a random system with sigma = 1e-4.
pub fn random_scenario(seed: u64) -> ScenarioConfig {
    let (a, b, h) = random_system(seed);
    let n = a.nrows();
    let space = DesignSpace {
        state: BoxBounds::symmetric(n, h),
        input: BoxBounds::symmetric(b.ncols(), 1.0),
    };
    ScenarioConfig {
        schema_version: SCHEMA_VERSION,
        name: Some(format!("random{seed}")),
        plant: PlantSpec::Lti {
            a: rows(&a),
            b: rows(&b),
            noise_std: vec![1e-4; n],
        },
        master_seed: seed,
        identify: Some(IdentifyConfig::new(space)),
        generalization: None,
        output_dir: None,
    }
}
