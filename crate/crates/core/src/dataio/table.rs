//! Traffic tables, road graphs, and their CSV formats.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use chrono::{Datelike, Duration, NaiveDateTime, Timelike};

use crate::error::{Result, StpsError};

/// Minutes per measurement interval.
pub const INTERVAL_MINUTES: i64 = 5;
/// Intervals per day.
pub const INTERVALS_PER_DAY: usize = 288;
pub const DAYS_PER_WEEK: usize = 7;

const TIMESTAMP_FORMATS: [&str; 4] = [
    "%Y-%m-%dT%H:%M:%S",
    "%Y-%m-%d %H:%M:%S",
    "%Y-%m-%dT%H:%M",
    "%Y-%m-%d %H:%M",
];

pub fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    let s = s.trim().trim_end_matches('Z');
    TIMESTAMP_FORMATS
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
}

pub fn format_timestamp(t: NaiveDateTime) -> String {
    t.format("%Y-%m-%dT%H:%M:%S").to_string()
}

/// Flow rates over `n_locations × n_intervals`, stored location-major.
#[derive(Clone, Debug, PartialEq)]
pub struct TrafficTable {
    n_locations: usize,
    n_intervals: usize,
    values: Vec<f64>,
    start_epoch: NaiveDateTime,
}

impl TrafficTable {
    /// `values[i * n_intervals + t]` is the rate of location `i` at interval `t`.
    pub fn new(
        n_locations: usize,
        n_intervals: usize,
        values: Vec<f64>,
        start_epoch: NaiveDateTime,
    ) -> Result<Self> {
        if values.len() != n_locations * n_intervals {
            return Err(StpsError::shape(
                "traffic table",
                format!(
                    "{n_locations} x {n_intervals} needs {} values, got {}",
                    n_locations * n_intervals,
                    values.len()
                ),
            ));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(StpsError::invalid(format!("non-finite flow rate {v}")));
        }
        Ok(Self {
            n_locations,
            n_intervals,
            values,
            start_epoch,
        })
    }

    pub fn n_locations(&self) -> usize {
        self.n_locations
    }

    pub fn n_intervals(&self) -> usize {
        self.n_intervals
    }

    pub fn start_epoch(&self) -> NaiveDateTime {
        self.start_epoch
    }

    pub fn interval_minutes(&self) -> i64 {
        INTERVAL_MINUTES
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, location: usize, interval: usize) -> f64 {
        self.values[location * self.n_intervals + interval]
    }

    /// Time series of one location.
    pub fn series(&self, location: usize) -> &[f64] {
        &self.values[location * self.n_intervals..(location + 1) * self.n_intervals]
    }

    pub fn mean_rate(&self, location: usize) -> f64 {
        let s = self.series(location);
        s.iter().sum::<f64>() / s.len().max(1) as f64
    }

    /// Contiguous time range `[start, end)` as a new table with shifted epoch.
    pub fn slice_time(&self, start: usize, end: usize) -> Result<Self> {
        if start > end || end > self.n_intervals {
            return Err(StpsError::invalid(format!(
                "time range {start}..{end} outside 0..{}",
                self.n_intervals
            )));
        }
        let len = end - start;
        let mut values = Vec::with_capacity(self.n_locations * len);
        for i in 0..self.n_locations {
            values.extend_from_slice(&self.series(i)[start..end]);
        }
        Ok(Self {
            n_locations: self.n_locations,
            n_intervals: len,
            values,
            start_epoch: self.start_epoch + Duration::minutes(INTERVAL_MINUTES * start as i64),
        })
    }

    /// Same table with every value transformed.
    pub fn map_values(&self, f: impl FnMut(f64) -> f64) -> Result<Self> {
        Self::new(
            self.n_locations,
            self.n_intervals,
            self.values.iter().copied().map(f).collect(),
            self.start_epoch,
        )
    }

    /// Interval-of-day of the table's first interval.
    fn epoch_offset(&self) -> usize {
        let t = self.start_epoch;
        (t.hour() as usize * 60 + t.minute() as usize) / INTERVAL_MINUTES as usize
    }

    /// Time-of-day slot in `[0, 288)` of interval `t`.
    pub fn tod_index(&self, t: usize) -> usize {
        (t + self.epoch_offset()) % INTERVALS_PER_DAY
    }

    /// Day-of-week in `[0, 7)` of interval `t`, Monday = 0.
    pub fn dow_index(&self, t: usize) -> usize {
        let start_dow = self.start_epoch.weekday().num_days_from_monday() as usize;
        ((t + self.epoch_offset()) / INTERVALS_PER_DAY + start_dow) % DAYS_PER_WEEK
    }

    pub fn timestamp(&self, t: usize) -> NaiveDateTime {
        self.start_epoch + Duration::minutes(INTERVAL_MINUTES * t as i64)
    }
}

/// Reads a traffic CSV: header `timestamp,loc_0,…`, one row per interval.
pub fn load_traffic_table(path: impl AsRef<Path>) -> Result<TrafficTable> {
    let path = path.as_ref();
    let perr = |line: usize, message: String| StpsError::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| perr(0, e.to_string()))?;
    let header = reader.headers().map_err(|e| perr(1, e.to_string()))?.clone();
    if header.get(0) != Some("timestamp") {
        return Err(perr(1, "first column must be `timestamp`".into()));
    }
    let n = header.len() - 1;
    if n == 0 {
        return Err(perr(1, "no location columns".into()));
    }
    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); n];
    let mut start: Option<NaiveDateTime> = None;
    for (row, record) in reader.records().enumerate() {
        let line = row + 2;
        let record = record.map_err(|e| perr(line, e.to_string()))?;
        if record.len() != n + 1 {
            return Err(perr(line, format!("expected {} fields, found {}", n + 1, record.len())));
        }
        let ts = parse_timestamp(&record[0])
            .ok_or_else(|| perr(line, format!("bad timestamp `{}`", &record[0])))?;
        match start {
            None => start = Some(ts),
            Some(s) => {
                let expected = s + Duration::minutes(INTERVAL_MINUTES * row as i64);
                if ts != expected {
                    return Err(perr(
                        line,
                        format!("timestamp {ts} breaks the 5-minute grid (expected {expected})"),
                    ));
                }
            }
        }
        for (j, cell) in record.iter().skip(1).enumerate() {
            let v: f64 = cell
                .parse()
                .map_err(|_| perr(line, format!("non-numeric cell `{cell}` in column {}", j + 1)))?;
            if !v.is_finite() || v < 0.0 {
                return Err(perr(line, format!("invalid flow rate `{cell}` in column {}", j + 1)));
            }
            columns[j].push(v);
        }
    }
    let start = start.ok_or_else(|| perr(2, "no data rows".into()))?;
    let t = columns[0].len();
    TrafficTable::new(n, t, columns.concat(), start)
}

pub fn write_traffic_table(table: &TrafficTable, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "timestamp")?;
    for i in 0..table.n_locations() {
        write!(w, ",loc_{i}")?;
    }
    writeln!(w)?;
    for t in 0..table.n_intervals() {
        write!(w, "{}", format_timestamp(table.timestamp(t)))?;
        for i in 0..table.n_locations() {
            write!(w, ",{}", table.get(i, t))?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

/// Symmetric 0/1 adjacency with zero diagonal.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RoadGraph {
    n_locations: usize,
    adjacency: Vec<u8>,
}

impl RoadGraph {
    /// Builds a graph from undirected edges; self loops are dropped.
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut adjacency = vec![0u8; n * n];
        for &(i, j) in edges {
            if i >= n || j >= n {
                return Err(StpsError::Bounds {
                    what: "edge endpoint",
                    index: i.max(j),
                    bound: n,
                });
            }
            if i != j {
                adjacency[i * n + j] = 1;
                adjacency[j * n + i] = 1;
            }
        }
        Ok(Self {
            n_locations: n,
            adjacency,
        })
    }

    pub fn n_locations(&self) -> usize {
        self.n_locations
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.adjacency[i * self.n_locations + j] != 0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        f64::from(self.adjacency[i * self.n_locations + j])
    }

    /// Dense adjacency as `f64`, row-major.
    pub fn dense(&self) -> Vec<f64> {
        self.adjacency.iter().map(|&a| f64::from(a)).collect()
    }

    pub fn edges(&self) -> Vec<(usize, usize)> {
        let n = self.n_locations;
        (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .filter(|&(i, j)| self.has_edge(i, j))
            .collect()
    }

    pub fn neighbors(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.n_locations).filter(move |&j| self.has_edge(i, j))
    }

    /// Hop distances from `src` (usize::MAX when unreachable).
    pub fn hop_distances(&self, src: usize) -> Vec<usize> {
        let mut dist = vec![usize::MAX; self.n_locations];
        let mut queue = std::collections::VecDeque::new();
        dist[src] = 0;
        queue.push_back(src);
        while let Some(u) = queue.pop_front() {
            for v in self.neighbors(u) {
                if dist[v] == usize::MAX {
                    dist[v] = dist[u] + 1;
                    queue.push_back(v);
                }
            }
        }
        dist
    }
}

/// Reads an edge list (`i,j` per line, 0-based) and symmetrises it.
pub fn load_adjacency(path: impl AsRef<Path>, n: usize) -> Result<RoadGraph> {
    let path = path.as_ref();
    let reader = BufReader::new(File::open(path)?);
    let mut edges = Vec::new();
    for (k, line) in reader.lines().enumerate() {
        let line_no = k + 1;
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let perr = |message: String| StpsError::Parse {
            path: path.to_path_buf(),
            line: line_no,
            message,
        };
        let mut parts = line.split(',').map(str::trim);
        let (Some(a), Some(b), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(perr(format!("expected `i,j`, found `{line}`")));
        };
        let parse = |s: &str| s.parse::<usize>().map_err(|_| perr(format!("bad node id `{s}`")));
        let (i, j) = (parse(a)?, parse(b)?);
        if i >= n || j >= n {
            return Err(perr(format!("edge ({i},{j}) out of range for {n} locations")));
        }
        edges.push((i, j));
    }
    RoadGraph::from_edges(n, &edges)
}

pub fn write_adjacency(graph: &RoadGraph, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for (i, j) in graph.edges() {
        writeln!(w, "{i},{j}")?;
    }
    w.flush()?;
    Ok(())
}
