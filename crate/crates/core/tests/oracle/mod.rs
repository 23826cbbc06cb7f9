//! Independent reference computations shared by the integration and
//! acceptance tests. Nothing here calls into the code under test except to
//! read plain data types.
#![allow(dead_code)]

use feb_core::device::Fault;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

pub const XADC_LSB_MV: f64 = 1000.0 / 4095.0;
pub const PDO_LSB_MV: f64 = 1000.0 / 1023.0;

pub fn xadc(mv: f64) -> u16 {
    (mv * 4095.0 / 1000.0).round().clamp(0.0, 4095.0) as u16
}

pub fn pdo(mv: f64) -> u16 {
    (mv * 1023.0 / 1000.0).round().clamp(0.0, 1023.0) as u16
}

/// Mean and n−1 std in mV of a run of XADC codes.
pub fn stats_mv(codes: &[u16]) -> (f64, f64) {
    let n = codes.len() as f64;
    let total: u64 = codes.iter().map(|&c| u64::from(c)).sum();
    let m = total as f64 / n;
    let mut ss = 0.0;
    for &c in codes {
        ss += (f64::from(c) - m).powi(2);
    }
    let std = if codes.len() > 1 { (ss / (n - 1.0)).sqrt() } else { 0.0 };
    (m / 4095.0 * 1000.0, std / 4095.0 * 1000.0)
}

/// Slope and intercept from the 2×2 normal equations on raw sums.
pub fn ols_normal_equations(points: &[(f64, f64)]) -> (f64, f64) {
    let n = points.len() as f64;
    let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
    for &(x, y) in points {
        sx += x;
        sy += y;
        sxx += x * x;
        sxy += x * y;
    }
    let det = n * sxx - sx * sx;
    ((n * sxy - sx * sy) / det, (sxx * sy - sx * sxy) / det)
}

/// Largest |Δslope| and |Δintercept| a fit over `xs` can show when every y
/// carries an independent error of at most `half_lsb`. The fit is linear
/// in the errors, so the extremes sit on the ±half_lsb vertices, which are
/// enumerated exhaustively.
pub fn fit_deviation_bound(xs: &[f64], half_lsb: f64) -> (f64, f64) {
    assert!(xs.len() <= 20, "vertex enumeration is exponential");
    let mut worst = (0.0f64, 0.0f64);
    for mask in 0u32..(1 << xs.len()) {
        let pts: Vec<(f64, f64)> = xs
            .iter()
            .enumerate()
            .map(|(i, &x)| (x, if mask >> i & 1 == 1 { half_lsb } else { -half_lsb }))
            .collect();
        let (s, b) = ols_normal_equations(&pts);
        worst = (worst.0.max(s.abs()), worst.1.max(b.abs()));
    }
    worst
}

/// XADC codes the emulator must return for a default-truth board seeded
/// with `seed` when every channel is sampled `n` times in vmm/channel
/// order, replayed from the raw random stream.
pub fn replay_baseline_codes(seed: u64, n_vmm: usize, n: usize) -> Vec<Vec<u16>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spread = Normal::new(160.0, 3.0).unwrap();
    let baselines: Vec<f64> = (0..n_vmm * 64)
        .map(|_| f64::clamp(spread.sample(&mut rng), 0.0, 1000.0))
        .collect();
    baselines
        .iter()
        .map(|&b| {
            (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    xadc(b + 2.0 * z)
                })
                .collect()
        })
        .collect()
}

/// 0–8 dead or stuck faults on distinct channels of an `n_vmm` board.
pub fn random_fault_set(seed: u64, n_vmm: usize) -> Vec<(usize, usize, Fault)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_FA17);
    let k = rng.random_range(0..=8);
    let mut picked: Vec<(usize, usize, Fault)> = Vec::new();
    while picked.len() < k {
        let (v, c) = (rng.random_range(0..n_vmm), rng.random_range(0..64));
        if picked.iter().any(|p| p.0 == v && p.1 == c) {
            continue;
        }
        let f = if rng.random_bool(0.5) { Fault::Dead } else { Fault::Stuck };
        picked.push((v, c, f));
    }
    picked.sort_by_key(|p| (p.0, p.1));
    picked
}
