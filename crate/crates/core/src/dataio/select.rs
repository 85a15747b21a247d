//! Sensed/unsensed partitions and sensor placement.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::table::{RoadGraph, TrafficTable};
use crate::error::{Result, StpsError};

/// Locations with permanent sensors (`sensed`) and without (`unsensed`).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SensingPartition {
    sensed: Vec<usize>,
    unsensed: Vec<usize>,
}

impl SensingPartition {
    /// Validates that the two lists are non-empty, disjoint, and cover `0..n`.
    pub fn new(sensed: Vec<usize>, unsensed: Vec<usize>) -> Result<Self> {
        if sensed.is_empty() || unsensed.is_empty() {
            return Err(StpsError::invalid("both sensed and unsensed sets must be non-empty"));
        }
        let n = sensed.len() + unsensed.len();
        let mut seen = vec![false; n];
        for &i in sensed.iter().chain(&unsensed) {
            if i >= n {
                return Err(StpsError::Bounds {
                    what: "partition location",
                    index: i,
                    bound: n,
                });
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(StpsError::invalid(format!("location {i} listed twice")));
            }
        }
        Ok(Self { sensed, unsensed })
    }

    pub fn sensed(&self) -> &[usize] {
        &self.sensed
    }

    pub fn unsensed(&self) -> &[usize] {
        &self.unsensed
    }

    pub fn n(&self) -> usize {
        self.sensed.len() + self.unsensed.len()
    }

    pub fn m(&self) -> usize {
        self.sensed.len()
    }

    pub fn m_prime(&self) -> usize {
        self.unsensed.len()
    }

    /// All locations ordered sensed first, then unsensed.
    pub fn all(&self) -> Vec<usize> {
        self.sensed.iter().chain(&self.unsensed).copied().collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_string())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        std::fs::read_to_string(path)?
            .parse()
            .map_err(|e: StpsError| match e {
                StpsError::Parse { line, message, .. } => StpsError::Parse {
                    path: path.to_path_buf(),
                    line,
                    message,
                },
                other => other,
            })
    }
}

impl fmt::Display for SensingPartition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let join = |v: &[usize]| v.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(",");
        writeln!(f, "sensed: {}", join(&self.sensed))?;
        writeln!(f, "unsensed: {}", join(&self.unsensed))
    }
}

impl FromStr for SensingPartition {
    type Err = StpsError;

    fn from_str(s: &str) -> Result<Self> {
        let perr = |line: usize, message: String| StpsError::Parse {
            path: "<partition>".into(),
            line,
            message,
        };
        let mut lines = s.lines();
        let mut field = |line: usize, key: &str| -> Result<Vec<usize>> {
            let text = lines.next().ok_or_else(|| perr(line, format!("missing `{key}:` line")))?;
            let rest = text
                .trim()
                .strip_prefix(key)
                .and_then(|r| r.strip_prefix(':'))
                .ok_or_else(|| perr(line, format!("expected `{key}: …`")))?;
            rest.split(',')
                .map(str::trim)
                .filter(|t| !t.is_empty())
                .map(|t| t.parse().map_err(|_| perr(line, format!("bad location id `{t}`"))))
                .collect()
        };
        let sensed = field(1, "sensed")?;
        let unsensed = field(2, "unsensed")?;
        SensingPartition::new(sensed, unsensed)
    }
}

/// How unsensed locations are chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionMode {
    /// Every location is equally likely to be unsensed.
    Random,
    /// Sensors are placed sequentially with probability proportional to mean flow.
    Weighted,
}

impl FromStr for SelectionMode {
    type Err = StpsError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Self::Random),
            "weighted" => Ok(Self::Weighted),
            other => Err(StpsError::invalid(format!("unknown selection mode `{other}`"))),
        }
    }
}

/// Chooses `m_prime` unsensed locations.
///
/// `table` should be the training split; weighted mode scores each location
/// by its mean rate over it.
pub fn select_locations(
    table: &TrafficTable,
    graph: &RoadGraph,
    m_prime: usize,
    mode: SelectionMode,
    seed: u64,
) -> Result<SensingPartition> {
    let n = table.n_locations();
    if graph.n_locations() != n {
        return Err(StpsError::shape(
            "select_locations",
            format!("table has {n} locations, graph {}", graph.n_locations()),
        ));
    }
    if m_prime == 0 || m_prime >= n {
        return Err(StpsError::invalid(format!("m' = {m_prime} must lie in (0, {n})")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut is_sensed = vec![false; n];
    match mode {
        SelectionMode::Random => {
            is_sensed.iter_mut().for_each(|s| *s = true);
            for i in index::sample(&mut rng, n, m_prime) {
                is_sensed[i] = false;
            }
        }
        SelectionMode::Weighted => {
            let scores: Vec<f64> = (0..n).map(|i| table.mean_rate(i).max(0.0)).collect();
            for _ in 0..n - m_prime {
                let pick = weighted_draw(&scores, &is_sensed, &mut rng);
                is_sensed[pick] = true;
            }
        }
    }
    let sensed = (0..n).filter(|&i| is_sensed[i]).collect();
    let unsensed = (0..n).filter(|&i| !is_sensed[i]).collect();
    SensingPartition::new(sensed, unsensed)
}

/// One draw among unselected locations, proportional to score (uniform if all zero).
fn weighted_draw(scores: &[f64], taken: &[bool], rng: &mut impl Rng) -> usize {
    let free: Vec<usize> = (0..scores.len()).filter(|&i| !taken[i]).collect();
    let total: f64 = free.iter().map(|&i| scores[i]).sum();
    if !(total > 0.0) {
        return free[rng.gen_range(0..free.len())];
    }
    let mut u = rng.gen::<f64>() * total;
    for &i in &free {
        if u < scores[i] {
            return i;
        }
        u -= scores[i];
    }
    *free.iter().rev().find(|&&i| scores[i] > 0.0).expect("positive total")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::table::parse_timestamp;

    fn table(rates: &[f64]) -> TrafficTable {
        let t = 4;
        let values = rates.iter().flat_map(|&r| vec![r; t]).collect();
        TrafficTable::new(rates.len(), t, values, parse_timestamp("2024-01-01 00:00").unwrap()).unwrap()
    }

    fn ring(n: usize) -> RoadGraph {
        let edges: Vec<_> = (0..n).map(|i| (i, (i + 1) % n)).collect();
        RoadGraph::from_edges(n, &edges).unwrap()
    }

    #[test]
    fn partition_validation_and_file_round_trip() {
        assert!(SensingPartition::new(vec![0, 1], vec![1]).is_err());
        assert!(SensingPartition::new(vec![0, 1], vec![]).is_err());
        assert!(SensingPartition::new(vec![0, 3], vec![1]).is_err());
        let p = SensingPartition::new(vec![2, 0], vec![1, 3]).unwrap();
        assert_eq!(p.to_string(), "sensed: 2,0\nunsensed: 1,3\n");
        assert_eq!(p.to_string().parse::<SensingPartition>().unwrap(), p);
        assert_eq!(p.all(), vec![2, 0, 1, 3]);
        assert!("sensed: 0\nunsensed: x".parse::<SensingPartition>().is_err());
    }

    #[test]
    fn selection_is_deterministic_and_valid() {
        let t = table(&[5.0, 1.0, 9.0, 3.0, 7.0, 2.0]);
        let g = ring(6);
        for mode in [SelectionMode::Random, SelectionMode::Weighted] {
            let a = select_locations(&t, &g, 2, mode, 7).unwrap();
            let b = select_locations(&t, &g, 2, mode, 7).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.m_prime(), 2);
            let mut all = a.all();
            all.sort();
            assert_eq!(all, (0..6).collect::<Vec<_>>());
        }
        assert!(select_locations(&t, &g, 0, SelectionMode::Random, 1).is_err());
        assert!(select_locations(&t, &g, 6, SelectionMode::Random, 1).is_err());
    }

    #[test]
    fn equal_rates_make_weighted_uniform_over_sets() {
        let t = table(&[4.0; 4]);
        let g = ring(4);
        let mut counts = std::collections::HashMap::new();
        let trials = 6000;
        for seed in 0..trials {
            let p = select_locations(&t, &g, 2, SelectionMode::Weighted, seed).unwrap();
            *counts.entry(p.unsensed().to_vec()).or_insert(0usize) += 1;
        }
        assert_eq!(counts.len(), 6);
        for (_, c) in counts {
            assert!((c as f64 - 1000.0).abs() < 150.0, "{c}");
        }
    }
}
