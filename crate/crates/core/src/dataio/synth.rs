//! Desk-scale synthetic traffic: diurnal flows on a ring-with-chords road
//! graph, weekday modulation, Gaussian noise, and random closures.

use std::f64::consts::TAU;

use chrono::NaiveDateTime;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataio::table::{parse_timestamp, RoadGraph, TrafficTable, INTERVALS_PER_DAY};
use crate::error::{Result, StpsError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n: usize,
    pub days: usize,
    pub seed: u64,
    /// Probability of a closure per location-day.
    pub closure_rate: f64,
    /// Standard deviation of additive Gaussian noise (vehicles / interval).
    pub noise_std: f64,
    /// Multiplier applied on Saturdays and Sundays.
    pub weekend_factor: f64,
    pub start_epoch: NaiveDateTime,
}

impl SynthConfig {
    pub fn new(n: usize, days: usize, seed: u64, closure_rate: f64) -> Self {
        Self {
            n,
            days,
            seed,
            closure_rate,
            noise_std: 5.0,
            weekend_factor: 0.75,
            start_epoch: parse_timestamp("2024-01-01T00:00:00").expect("valid literal"),
        }
    }
}

/// A contiguous block of depressed flow at one location.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Closure {
    pub location: usize,
    pub start: usize,
    pub len: usize,
    pub factor: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData {
    pub table: TrafficTable,
    pub graph: RoadGraph,
    /// Rates before noise and closures.
    pub clean: TrafficTable,
    pub closures: Vec<Closure>,
}

/// Generates a deterministic synthetic dataset for `config`.
pub fn generate_synthetic(config: &SynthConfig) -> Result<SyntheticData> {
    let SynthConfig { n, days, .. } = *config;
    if n < 4 {
        return Err(StpsError::invalid(format!("synthetic n = {n} must be >= 4")));
    }
    if days < 2 {
        return Err(StpsError::invalid(format!("synthetic days = {days} must be >= 2")));
    }
    if !(0.0..=1.0).contains(&config.closure_rate) {
        return Err(StpsError::invalid("closure_rate must lie in [0, 1]"));
    }
    if !(config.noise_std >= 0.0) || !(config.weekend_factor > 0.0) {
        return Err(StpsError::invalid("noise_std must be >= 0 and weekend_factor > 0"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let mut edges: Vec<(usize, usize)> = (0..n).map(|i| (i, (i + 1) % n)).collect();
    for _ in 0..n / 4 {
        let a = rng.gen_range(0..n);
        let hop = rng.gen_range(2..=n / 2);
        edges.push((a, (a + hop) % n));
    }
    let graph = RoadGraph::from_edges(n, &edges)?;

    // Smooth location profiles along the ring so neighbours look alike.
    let (psi_base, psi_amp, psi_phase) = (rng.gen_range(0.0..TAU), rng.gen_range(0.0..TAU), rng.gen_range(0.0..TAU));
    let profiles: Vec<(f64, f64, f64)> = (0..n)
        .map(|i| {
            let u = TAU * i as f64 / n as f64;
            let base = 60.0 + 30.0 * (u + psi_base).sin() + rng.gen_range(-10.0..10.0);
            let amp = 200.0 + 80.0 * (u + psi_amp).sin() + rng.gen_range(-20.0..20.0);
            let phase = TAU * (0.25 + 0.04 * (u + psi_phase).sin() + rng.gen_range(-0.01..0.01));
            (base, amp, phase)
        })
        .collect();

    let t_total = days * INTERVALS_PER_DAY;
    let shell = TrafficTable::new(1, t_total, vec![0.0; t_total], config.start_epoch)?;
    let mut clean = vec![0.0; n * t_total];
    for (i, &(base, amp, phase)) in profiles.iter().enumerate() {
        for t in 0..t_total {
            let frac = shell.tod_index(t) as f64 / INTERVALS_PER_DAY as f64;
            let daily = (TAU * frac - phase).sin().max(0.0);
            let weekday = if shell.dow_index(t) >= 5 {
                config.weekend_factor
            } else {
                1.0
            };
            clean[i * t_total + t] = (base + amp * daily) * weekday;
        }
    }

    let mut values = clean.clone();
    if config.noise_std > 0.0 {
        let normal = Normal::new(0.0, config.noise_std).expect("positive std");
        for v in &mut values {
            *v = (*v + normal.sample(&mut rng)).max(0.0);
        }
    }

    let mut closures = Vec::new();
    for location in 0..n {
        for day in 0..days {
            if config.closure_rate == 0.0 || rng.gen::<f64>() >= config.closure_rate {
                continue;
            }
            let len = rng.gen_range(36..=72);
            let start = day * INTERVALS_PER_DAY + rng.gen_range(0..=INTERVALS_PER_DAY - len);
            let factor = rng.gen_range(0.0..0.1);
            for t in start..start + len {
                let v = &mut values[location * t_total + t];
                *v = v.min(clean[location * t_total + t]) * factor;
            }
            closures.push(Closure {
                location,
                start,
                len,
                factor,
            });
        }
    }

    Ok(SyntheticData {
        table: TrafficTable::new(n, t_total, values, config.start_epoch)?,
        graph,
        clean: TrafficTable::new(n, t_total, clean, config.start_epoch)?,
        closures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_closure_free_is_daily_periodic() {
        let mut cfg = SynthConfig::new(6, 9, 3, 0.0);
        cfg.noise_std = 0.0;
        let d = generate_synthetic(&cfg).unwrap();
        let t = &d.table;
        for i in 0..6 {
            for k in 0..t.n_intervals() - INTERVALS_PER_DAY {
                let same_class = (t.dow_index(k) >= 5) == (t.dow_index(k + INTERVALS_PER_DAY) >= 5);
                if same_class {
                    assert_eq!(t.get(i, k), t.get(i, k + INTERVALS_PER_DAY));
                }
            }
        }
        cfg.weekend_factor = 1.0;
        let d = generate_synthetic(&cfg).unwrap();
        for i in 0..6 {
            let s = d.table.series(i);
            for k in 0..s.len() - INTERVALS_PER_DAY {
                assert_eq!(s[k], s[k + INTERVALS_PER_DAY]);
            }
        }
    }

    #[test]
    fn full_closure_rate_depresses_every_location_day() {
        let cfg = SynthConfig::new(5, 2, 11, 1.0);
        let d = generate_synthetic(&cfg).unwrap();
        assert_eq!(d.closures.len(), 10);
        for i in 0..5 {
            for day in 0..2 {
                let lo = day * INTERVALS_PER_DAY;
                let mut run = 0;
                let mut best = 0;
                for t in lo..lo + INTERVALS_PER_DAY {
                    if d.table.get(i, t) < 0.1 * d.clean.get(i, t) {
                        run += 1;
                        best = best.max(run);
                    } else {
                        run = 0;
                    }
                }
                assert!(best >= 36, "location {i} day {day}: {best}");
            }
        }
    }

    #[test]
    fn deterministic_and_non_negative() {
        let cfg = SynthConfig::new(8, 3, 42, 0.2);
        let a = generate_synthetic(&cfg).unwrap();
        let b = generate_synthetic(&cfg).unwrap();
        assert_eq!(a, b);
        let bytes = |d: &SyntheticData| -> Vec<u8> {
            d.table.values().iter().flat_map(|v| v.to_le_bytes()).collect()
        };
        assert_eq!(bytes(&a), bytes(&b));
        assert!(a.table.values().iter().all(|&v| v >= 0.0));
        for i in 0..8 {
            assert!(a.graph.has_edge(i, (i + 1) % 8));
        }
    }

    #[test]
    fn parameter_bounds() {
        assert!(generate_synthetic(&SynthConfig::new(3, 2, 0, 0.0)).is_err());
        assert!(generate_synthetic(&SynthConfig::new(4, 1, 0, 0.0)).is_err());
        assert!(generate_synthetic(&SynthConfig::new(4, 2, 0, 1.5)).is_err());
    }
}
