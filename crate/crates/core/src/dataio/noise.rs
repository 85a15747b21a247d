use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dataio::table::TrafficTable;
use crate::error::{Result, StpsError};

/// Adds i.i.d. `N(0, variance)` noise and clips at zero. Variance 0 returns
/// an identical table.
pub fn inject_noise(table: &TrafficTable, variance: f64, seed: u64) -> Result<TrafficTable> {
    if !(variance >= 0.0) || !variance.is_finite() {
        return Err(StpsError::invalid(format!("noise variance {variance} must be >= 0")));
    }
    if variance == 0.0 {
        return Ok(table.clone());
    }
    let normal = Normal::new(0.0, variance.sqrt()).expect("finite positive std");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    table.map_values(|v| (v + normal.sample(&mut rng)).max(0.0))
}
