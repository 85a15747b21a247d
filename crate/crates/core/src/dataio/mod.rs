//! Data ingestion, normalisation, splitting, windowing, sensor selection,
//! noise injection, and synthetic data.

pub mod noise;
pub mod normalize;
pub mod select;
pub mod split;
pub mod synth;
pub mod table;
pub mod window;

pub use noise::inject_noise;
pub use normalize::{Direction, Normalizer};
pub use select::{select_locations, SelectionMode, SensingPartition};
pub use split::{chronological_split, split_sizes, Split};
pub use synth::{generate_synthetic, Closure, SynthConfig, SyntheticData};
pub use table::{
    load_adjacency, load_traffic_table, write_adjacency, write_traffic_table, RoadGraph,
    TrafficTable, DAYS_PER_WEEK, INTERVALS_PER_DAY,
};
pub use window::{make_windows, WindowSample, WindowSet};
