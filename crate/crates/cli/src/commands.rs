use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use stps::dataio::{
    chronological_split, generate_synthetic, inject_noise, load_adjacency, load_traffic_table, make_windows,
    select_locations, write_adjacency, write_traffic_table, Normalizer, RoadGraph, SensingPartition, Split,
    TrafficTable,
};
use stps::metrics::{binned_improvement, build_report};
use stps::pipeline::{checkpoint_load, checkpoint_save, nearest_sensed_copy, predict_windows, train_all, Calendar, StageLog};
use stps::{Model, Tensor};

use crate::config::{RunConfig, SplitName};
use crate::error::CliError;
use crate::svg::line_chart;

pub const CHECKPOINT_FILE: &str = "checkpoint.stps";
pub const LOSS_FILE: &str = "loss.csv";
pub const PARTITION_FILE: &str = "partition.txt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SLICES_FILE: &str = "slices.csv";
pub const BINS_FILE: &str = "bins.csv";
pub const RMSE_SVG_FILE: &str = "rmse.svg";
pub const FORECAST_FILE: &str = "forecast.csv";
pub const TRAFFIC_FILE: &str = "traffic.csv";
pub const ADJACENCY_FILE: &str = "adjacency.csv";
pub const CLOSURES_FILE: &str = "closures.csv";

struct Dataset {
    table: TrafficTable,
    graph: RoadGraph,
}

fn load_dataset(cfg: &RunConfig) -> Result<Dataset, CliError> {
    if let Some(spec) = &cfg.synthetic {
        let data = generate_synthetic(&spec.to_synth_config(cfg.seed))?;
        return Ok(Dataset {
            table: data.table,
            graph: data.graph,
        });
    }
    let data = cfg
        .data
        .as_ref()
        .ok_or_else(|| CliError::Data("no dataset: pass --data or --synthetic".into()))?;
    let adjacency = cfg
        .adjacency
        .as_ref()
        .ok_or_else(|| CliError::Data("no road graph: pass --adjacency with --data".into()))?;
    let table = load_traffic_table(data)?;
    let graph = load_adjacency(adjacency, table.n_locations())?;
    Ok(Dataset { table, graph })
}

fn resolve_partition(cfg: &RunConfig, train: &TrafficTable, graph: &RoadGraph) -> Result<SensingPartition, CliError> {
    if let Some(path) = &cfg.partition {
        let p = SensingPartition::load(path)?;
        if p.n() != train.n_locations() {
            return Err(CliError::Data(format!(
                "partition covers {} locations, dataset has {}",
                p.n(),
                train.n_locations()
            )));
        }
        return Ok(p);
    }
    let m_prime = cfg
        .m_prime
        .ok_or_else(|| CliError::Usage("pass --partition or --m-prime".into()))?;
    Ok(select_locations(train, graph, m_prime, cfg.select, cfg.seed)?)
}

/// Echo file of the resolved config for `command`.
pub fn config_file(command: &str) -> String {
    format!("{command}-config.json")
}

fn prepare_out(cfg: &RunConfig, command: &str) -> Result<(), CliError> {
    fs::create_dir_all(&cfg.out)?;
    let json = serde_json::to_string_pretty(cfg).expect("config serialises");
    fs::write(cfg.out.join(config_file(command)), json + "\n")?;
    Ok(())
}

fn create(path: PathBuf) -> Result<BufWriter<File>, CliError> {
    Ok(BufWriter::new(File::create(path)?))
}

fn checkpoint_path(cfg: &RunConfig) -> PathBuf {
    cfg.checkpoint.clone().unwrap_or_else(|| cfg.out.join(CHECKPOINT_FILE))
}

fn split_of(split: &Split, which: SplitName) -> &TrafficTable {
    match which {
        SplitName::Train => &split.train,
        SplitName::Val => &split.val,
        SplitName::Test => &split.test,
    }
}

fn write_loss_csv(logs: &[StageLog], path: PathBuf) -> Result<(), CliError> {
    let mut w = create(path)?;
    writeln!(w, "stage,epoch,train_mae,val_mae")?;
    for log in logs {
        for e in &log.epochs {
            let val = e.val_mae.map(|v| v.to_string()).unwrap_or_default();
            writeln!(w, "{},{},{},{val}", log.stage.number(), e.epoch, e.train_mae)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn cmd_synth(cfg: &RunConfig) -> Result<(), CliError> {
    let spec = cfg
        .synthetic
        .as_ref()
        .ok_or_else(|| CliError::Usage("synth needs --synthetic key=value ...".into()))?;
    prepare_out(cfg, "synth")?;
    let data = generate_synthetic(&spec.to_synth_config(cfg.seed))?;
    write_traffic_table(&data.table, cfg.out.join(TRAFFIC_FILE))?;
    write_adjacency(&data.graph, cfg.out.join(ADJACENCY_FILE))?;
    let mut w = create(cfg.out.join(CLOSURES_FILE))?;
    writeln!(w, "location,start,len,factor")?;
    for c in &data.closures {
        writeln!(w, "{},{},{},{}", c.location, c.start, c.len, c.factor)?;
    }
    w.flush()?;
    println!(
        "wrote {} locations x {} intervals ({} closures) to {}",
        data.table.n_locations(),
        data.table.n_intervals(),
        data.closures.len(),
        cfg.out.display()
    );
    Ok(())
}

pub fn cmd_select(cfg: &RunConfig) -> Result<(), CliError> {
    let ds = load_dataset(cfg)?;
    let split = chronological_split(&ds.table)?;
    let partition = resolve_partition(cfg, &split.train, &ds.graph)?;
    prepare_out(cfg, "select")?;
    partition.save(cfg.out.join(PARTITION_FILE))?;
    println!("unsensed: {:?}", partition.unsensed());
    Ok(())
}

pub fn cmd_train(cfg: &RunConfig) -> Result<(), CliError> {
    let ds = load_dataset(cfg)?;
    let split = chronological_split(&ds.table)?;
    let partition = resolve_partition(cfg, &split.train, &ds.graph)?;
    prepare_out(cfg, "train")?;
    partition.save(cfg.out.join(PARTITION_FILE))?;
    if cfg.synthetic.is_some() {
        write_traffic_table(&ds.table, cfg.out.join(TRAFFIC_FILE))?;
        write_adjacency(&ds.graph, cfg.out.join(ADJACENCY_FILE))?;
    }
    let train = if cfg.noise_variance > 0.0 {
        inject_noise(&split.train, cfg.noise_variance, cfg.seed)?
    } else {
        split.train.clone()
    };
    let normalizer = Normalizer::fit(train.values())?;
    let mc = &cfg.model;
    let train_w = make_windows(&train, &partition, mc.l, mc.l_prime, mc.window_stride)?;
    let val_w = make_windows(&split.val, &partition, mc.l, mc.l_prime, mc.window_stride)?;
    log::info!(
        "{} training and {} validation windows; variant {}",
        train_w.len(),
        val_w.len(),
        mc.ablation
    );
    let mut model = Model::new(mc.clone(), ds.graph.clone(), partition.clone(), normalizer)?;
    let logs = train_all(&mut model, &train_w, &val_w)?;
    write_loss_csv(&logs, cfg.out.join(LOSS_FILE))?;
    checkpoint_save(&model, checkpoint_path(cfg))?;
    for log in &logs {
        let best = &log.epochs[log.best_epoch - 1];
        println!(
            "{}: {} epochs, best epoch {} (train MAE {:.4}{})",
            log.stage,
            log.epochs.len(),
            log.best_epoch,
            best.train_mae,
            best.val_mae.map(|v| format!(", val MAE {v:.4}")).unwrap_or_default()
        );
    }
    println!("checkpoint written to {}", checkpoint_path(cfg).display());
    Ok(())
}

fn load_model(cfg: &RunConfig, n: usize) -> Result<Model, CliError> {
    let model: Model = checkpoint_load(checkpoint_path(cfg))?;
    if model.n() != n {
        return Err(CliError::Data(format!(
            "checkpoint covers {} locations, dataset has {n}",
            model.n()
        )));
    }
    Ok(model)
}

pub fn cmd_evaluate(cfg: &RunConfig) -> Result<(), CliError> {
    let ds = load_dataset(cfg)?;
    let model = load_model(cfg, ds.table.n_locations())?;
    let split = chronological_split(&ds.table)?;
    let table = split_of(&split, cfg.split);
    let (l, lp) = (model.config().l, model.config().l_prime);
    let windows = make_windows(table, model.partition(), l, lp, 1)?;
    if windows.is_empty() {
        return Err(CliError::Data(format!("{:?} split has no complete window", cfg.split)));
    }
    let (truth, pred) = predict_windows(&model, &windows)?;
    let rows = windows.len() * model.partition().m_prime();
    let report = build_report(&truth, &pred, rows, lp)?;
    prepare_out(cfg, "evaluate")?;
    let mut w = create(cfg.out.join(METRICS_FILE))?;
    report.write_csv(&mut w)?;
    w.flush()?;
    let mut w = create(cfg.out.join(SLICES_FILE))?;
    report.write_slices_csv(&mut w)?;
    w.flush()?;
    let rmse: Vec<f64> = report.per_horizon.iter().map(|h| h.rmse).collect();
    fs::write(cfg.out.join(RMSE_SVG_FILE), line_chart("RMSE by forecast interval", "RMSE", &rmse))?;
    if let Some(bins) = cfg.bins {
        let (_, baseline) = nearest_sensed_copy(model.road_graph(), &windows)?;
        let improvement = binned_improvement(&truth, &baseline, &pred, rows, lp, bins)?;
        let mut w = create(cfg.out.join(BINS_FILE))?;
        writeln!(w, "bin,improvement_pct")?;
        for (k, v) in improvement.iter().enumerate() {
            writeln!(w, "{},{}", k + 1, v.map(|v| v.to_string()).unwrap_or_default())?;
        }
        w.flush()?;
    }
    println!(
        "{} windows: MAE {:.4}, RMSE {:.4}, MAPE {}",
        windows.len(),
        report.avg_mae,
        report.avg_rmse,
        report.avg_mape.map(|v| format!("{v:.2}%")).unwrap_or_else(|| "n/a".into())
    );
    Ok(())
}

pub fn cmd_forecast(cfg: &RunConfig) -> Result<(), CliError> {
    let ds = load_dataset(cfg)?;
    let model = load_model(cfg, ds.table.n_locations())?;
    let (l, lp) = (model.config().l, model.config().l_prime);
    let t = ds.table.n_intervals();
    if t < l {
        return Err(CliError::Data(format!("dataset has {t} intervals, the model needs {l}")));
    }
    let start = t - l;
    let sensed = model.partition().sensed();
    let mut x = Vec::with_capacity(sensed.len() * l);
    for &i in sensed {
        x.extend_from_slice(&ds.table.series(i)[start..]);
    }
    let x = Tensor::new(vec![sensed.len(), l], x)?;
    let calendar = Calendar::single(
        ds.table.tod_index(start),
        ds.table.dow_index(start),
        ds.table.tod_index(t),
        ds.table.dow_index(t),
    );
    let forecast = model.infer(&x, &calendar)?;
    prepare_out(cfg, "forecast")?;
    write_forecast(&forecast, lp, &cfg.out.join(FORECAST_FILE))?;
    model.partition().save(cfg.out.join(PARTITION_FILE))?;
    println!(
        "forecast of {} unsensed locations over {lp} intervals from {}",
        model.partition().m_prime(),
        ds.table.timestamp(t)
    );
    Ok(())
}

/// One row per unsensed location in partition order, one column per interval.
fn write_forecast(forecast: &Tensor, lp: usize, path: &Path) -> Result<(), CliError> {
    let mut w = create(path.to_path_buf())?;
    let header: Vec<String> = (1..=lp).map(|j| format!("t+{j}")).collect();
    writeln!(w, "{}", header.join(","))?;
    for row in forecast.data().chunks(lp) {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(w, "{}", cells.join(","))?;
    }
    w.flush()?;
    Ok(())
}
