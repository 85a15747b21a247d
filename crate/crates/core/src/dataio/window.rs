//! Sliding windows over a split, cut into the four sensed/unsensed ×
//! past/future blocks.

use crate::dataio::select::SensingPartition;
use crate::dataio::table::TrafficTable;
use crate::error::{Result, StpsError};

/// One instance: past window `T` of length `l` immediately followed by the
/// future window `T′` of length `l′`. Blocks are row-major `rows × len`.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowSample {
    /// Start of `T` within the split.
    pub start: usize,
    pub l: usize,
    pub l_prime: usize,
    pub x_m_t: Vec<f64>,
    pub x_mp_t: Vec<f64>,
    pub x_m_tp: Vec<f64>,
    pub x_mp_tp: Vec<f64>,
    /// Calendar of the first interval of `T`.
    pub tod_index: usize,
    pub dow_index: usize,
    /// Calendar of the first interval of `T′`.
    pub tod_index_future: usize,
    pub dow_index_future: usize,
}

fn block(table: &TrafficTable, rows: &[usize], start: usize, len: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows.len() * len);
    for &r in rows {
        out.extend_from_slice(&table.series(r)[start..start + len]);
    }
    out
}

/// Lazily materialised windows of one split.
#[derive(Clone, Debug)]
pub struct WindowSet<'a> {
    table: &'a TrafficTable,
    partition: &'a SensingPartition,
    l: usize,
    l_prime: usize,
    starts: Vec<usize>,
}

impl<'a> WindowSet<'a> {
    pub fn len(&self) -> usize {
        self.starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }

    pub fn l(&self) -> usize {
        self.l
    }

    pub fn l_prime(&self) -> usize {
        self.l_prime
    }

    pub fn table(&self) -> &'a TrafficTable {
        self.table
    }

    pub fn partition(&self) -> &'a SensingPartition {
        self.partition
    }

    pub fn starts(&self) -> &[usize] {
        &self.starts
    }

    pub fn get(&self, i: usize) -> WindowSample {
        let s = self.starts[i];
        let (l, lp) = (self.l, self.l_prime);
        let (m, mp) = (self.partition.sensed(), self.partition.unsensed());
        WindowSample {
            start: s,
            l,
            l_prime: lp,
            x_m_t: block(self.table, m, s, l),
            x_mp_t: block(self.table, mp, s, l),
            x_m_tp: block(self.table, m, s + l, lp),
            x_mp_tp: block(self.table, mp, s + l, lp),
            tod_index: self.table.tod_index(s),
            dow_index: self.table.dow_index(s),
            tod_index_future: self.table.tod_index(s + l),
            dow_index_future: self.table.dow_index(s + l),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = WindowSample> + '_ {
        (0..self.len()).map(move |i| self.get(i))
    }
}

/// All windows of `split` at the given stride. A split shorter than
/// `l + l′` yields an empty set.
pub fn make_windows<'a>(
    split: &'a TrafficTable,
    partition: &'a SensingPartition,
    l: usize,
    l_prime: usize,
    stride: usize,
) -> Result<WindowSet<'a>> {
    if l == 0 || l_prime == 0 || stride == 0 {
        return Err(StpsError::invalid("window lengths and stride must be positive"));
    }
    if partition.n() != split.n_locations() {
        return Err(StpsError::shape(
            "make_windows",
            format!(
                "partition covers {} locations, table has {}",
                partition.n(),
                split.n_locations()
            ),
        ));
    }
    let span = l + l_prime;
    let starts = if split.n_intervals() >= span {
        (0..=split.n_intervals() - span).step_by(stride).collect()
    } else {
        log::warn!(
            "split of {} intervals is shorter than one window ({span}); no windows",
            split.n_intervals()
        );
        Vec::new()
    };
    Ok(WindowSet {
        table: split,
        partition,
        l,
        l_prime,
        starts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::table::parse_timestamp;

    fn table(n: usize, t: usize) -> TrafficTable {
        let values = (0..n * t).map(|k| k as f64).collect();
        TrafficTable::new(n, t, values, parse_timestamp("2024-01-01T00:00:00").unwrap()).unwrap()
    }

    #[test]
    fn counts_and_block_widths() {
        let t = table(4, 108);
        let p = SensingPartition::new(vec![0, 2, 3], vec![1]).unwrap();
        let w = make_windows(&t, &p, 12, 96, 1).unwrap();
        assert_eq!(w.len(), 1);
        let s = w.get(0);
        assert_eq!(s.x_m_t.len(), 3 * 12);
        assert_eq!(s.x_mp_tp.len(), 96);

        let t = table(4, 500);
        let w = make_windows(&t, &p, 12, 96, 1).unwrap();
        assert_eq!(w.len(), 500 - 108 + 1);
        let short = table(4, 50);
        assert!(make_windows(&short, &p, 12, 96, 1).unwrap().is_empty());
    }

    #[test]
    fn calendar_of_window_start() {
        let t = table(2, 700);
        let p = SensingPartition::new(vec![0], vec![1]).unwrap();
        let w = make_windows(&t, &p, 12, 96, 1).unwrap();
        let s = w.get(300);
        assert_eq!((s.tod_index, s.dow_index), (12, 1));
        assert_eq!(s.tod_index_future, 24);
    }

    #[test]
    fn blocks_reassemble_the_table_slice() {
        let t = table(5, 40);
        let p = SensingPartition::new(vec![4, 1], vec![0, 3, 2]).unwrap();
        let (l, lp) = (3, 5);
        let w = make_windows(&t, &p, l, lp, 1).unwrap();
        for s in w.iter() {
            for (k, &loc) in p.sensed().iter().enumerate() {
                let row: Vec<f64> = s.x_m_t[k * l..(k + 1) * l]
                    .iter()
                    .chain(&s.x_m_tp[k * lp..(k + 1) * lp])
                    .copied()
                    .collect();
                assert_eq!(row, t.series(loc)[s.start..s.start + l + lp]);
            }
            for (k, &loc) in p.unsensed().iter().enumerate() {
                let row: Vec<f64> = s.x_mp_t[k * l..(k + 1) * l]
                    .iter()
                    .chain(&s.x_mp_tp[k * lp..(k + 1) * lp])
                    .copied()
                    .collect();
                assert_eq!(row, t.series(loc)[s.start..s.start + l + lp]);
            }
        }
    }
}
