//! Nearest-sensed-neighbour persistence baseline.

use crate::dataio::{RoadGraph, SensingPartition, WindowSet};
use crate::error::{Result, StpsError};

/// For each unsensed location (partition order), the sensed location with
/// the fewest hops; ties and unreachable cases go to the lowest index.
pub fn nearest_sensed(graph: &RoadGraph, partition: &SensingPartition) -> Result<Vec<usize>> {
    if graph.n_locations() != partition.n() {
        return Err(StpsError::invalid("graph and partition sizes differ"));
    }
    let mut sensed = partition.sensed().to_vec();
    sensed.sort_unstable();
    Ok(partition
        .unsensed()
        .iter()
        .map(|&u| {
            let dist = graph.hop_distances(u);
            *sensed.iter().min_by_key(|&&s| (dist[s], s)).expect("sensed set is non-empty")
        })
        .collect())
}

/// Truth and forecast laid out `[windows, m′, l′]`. Each unsensed location
/// repeats the last observed value of its nearest sensed location over the
/// whole horizon.
pub fn nearest_sensed_copy(graph: &RoadGraph, windows: &WindowSet<'_>) -> Result<(Vec<f64>, Vec<f64>)> {
    let partition = windows.partition();
    let source = nearest_sensed(graph, partition)?;
    let pos: Vec<usize> = source
        .iter()
        .map(|s| partition.sensed().iter().position(|x| x == s).expect("sensed"))
        .collect();
    let (l, lp) = (windows.l(), windows.l_prime());
    let (mut truth, mut pred) = (Vec::new(), Vec::new());
    for w in windows.iter() {
        truth.extend_from_slice(&w.x_mp_tp);
        for &k in &pos {
            let last = w.x_m_t[k * l + l - 1];
            pred.extend(std::iter::repeat(last).take(lp));
        }
    }
    Ok((truth, pred))
}
