use crate::dataio::table::TrafficTable;
use crate::error::{Result, StpsError};

/// Chronological train/validation/test split.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub train: TrafficTable,
    pub val: TrafficTable,
    pub test: TrafficTable,
}

/// Split sizes `⌊0.6T⌋`, `⌊0.2T⌋`, remainder.
pub fn split_sizes(total: usize) -> (usize, usize, usize) {
    let train = total * 3 / 5;
    let val = total / 5;
    (train, val, total - train - val)
}

/// 3:1:1 contiguous split in time order.
pub fn chronological_split(table: &TrafficTable) -> Result<Split> {
    let (tr, va, te) = split_sizes(table.n_intervals());
    if tr == 0 || va == 0 || te == 0 {
        return Err(StpsError::TooShort(format!(
            "{} intervals cannot be split 3:1:1",
            table.n_intervals()
        )));
    }
    Ok(Split {
        train: table.slice_time(0, tr)?,
        val: table.slice_time(tr, tr + va)?,
        test: table.slice_time(tr + va, tr + va + te)?,
    })
}
