//! Campaign output files and their regeneration.
//!
//! Per run `k` (from 1) a campaign writes `pareto_run<k>.csv` (first front of every
//! generation), `hypervolume_run<k>.csv` (population first front) and
//! `hypervolume_archive_run<k>.csv` (everything evaluated so far), plus
//! `campaign.json`. [`regenerate`] derives `pareto_merged.csv`, `genome_stats.csv`
//! and `summary.json` from those files alone.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::metrics::{self, ParetoPoint};
use crate::nsga2::{GenerationRecord, Objectives};
use crate::objectives::{Bounds, Genome};

pub const MANIFEST_FILE: &str = "campaign.json";
pub const MERGED_FILE: &str = "pareto_merged.csv";
pub const STATS_FILE: &str = "genome_stats.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const HV_HEADER: [&str; 3] = ["gen", "hv", "evals"];

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("missing campaign files: {}", .0.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", "))]
    Missing(Vec<PathBuf>),
    #[error("{path}: {msg}")]
    Parse { path: PathBuf, msg: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ReportError + '_ {
    move |source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn parse_err(path: &Path, msg: impl ToString) -> ReportError {
    ReportError::Parse {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    }
}

pub fn pareto_file(run: usize) -> String {
    format!("pareto_run{run}.csv")
}

pub fn hv_file(run: usize) -> String {
    format!("hypervolume_run{run}.csv")
}

pub fn hv_archive_file(run: usize) -> String {
    format!("hypervolume_archive_run{run}.csv")
}

/// What [`regenerate`] needs to know about a campaign besides its CSVs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub runs: usize,
    pub bounds: Bounds,
    pub reference: Objectives,
    /// Settings the campaign ran with, for the record.
    pub config: serde_json::Value,
}

impl Manifest {
    pub fn write(&self, dir: &Path) -> Result<(), ReportError> {
        write_json(&dir.join(MANIFEST_FILE), self)
    }

    pub fn read(dir: &Path) -> Result<Self, ReportError> {
        let path = dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Err(ReportError::Missing(vec![path]));
        }
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        serde_json::from_str(&text).map_err(|e| parse_err(&path, e))
    }
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<(), ReportError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| parse_err(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>, ReportError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    Ok(csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(file))
}

fn csv_fail(path: &Path) -> impl Fn(csv::Error) -> ReportError + '_ {
    move |e| match e.into_kind() {
        csv::ErrorKind::Io(source) => ReportError::Io {
            path: path.to_path_buf(),
            source,
        },
        other => parse_err(path, format!("{other:?}")),
    }
}

pub fn pareto_header(layers: usize) -> Vec<String> {
    let mut h: Vec<String> = ["run", "gen", "f1", "f2", "m", "E"].map(String::from).to_vec();
    h.extend((1..=layers).map(|i| format!("mu_{i}")));
    h.extend((1..=layers).map(|i| format!("b_{i}")));
    h
}

pub fn write_pareto(path: &Path, points: &[ParetoPoint], layers: usize) -> Result<(), ReportError> {
    let fail = csv_fail(path);
    let mut w = csv_writer(path)?;
    w.write_record(pareto_header(layers)).map_err(&fail)?;
    for p in points {
        let mut row = vec![
            p.run_id.to_string(),
            p.generation.to_string(),
            p.f1.to_string(),
            p.f2.to_string(),
        ];
        row.extend(p.genome.to_genes().iter().map(i64::to_string));
        w.write_record(row).map_err(&fail)?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_pareto(path: &Path, layers: usize) -> Result<Vec<ParetoPoint>, ReportError> {
    let fail = csv_fail(path);
    let mut r = csv::Reader::from_path(path).map_err(&fail)?;
    let header: Vec<String> = r.headers().map_err(&fail)?.iter().map(String::from).collect();
    if header != pareto_header(layers) {
        return Err(parse_err(path, "unexpected header"));
    }
    let mut points = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(&fail)?;
        let bad = |what: &str| parse_err(path, format!("row {}: bad {what}", line + 2));
        let run_id = rec[0].parse().map_err(|_| bad("run"))?;
        let generation = rec[1].parse().map_err(|_| bad("gen"))?;
        let f1 = rec[2].parse().map_err(|_| bad("f1"))?;
        let f2 = rec[3].parse().map_err(|_| bad("f2"))?;
        let genes: Vec<i64> = rec
            .iter()
            .skip(4)
            .map(|s| s.parse())
            .collect::<Result<_, _>>()
            .map_err(|_| bad("genome"))?;
        let genome = Genome::from_genes(&genes).map_err(|e| parse_err(path, e))?;
        points.push(ParetoPoint {
            run_id,
            generation,
            f1,
            f2,
            genome,
        });
    }
    Ok(points)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HvRow {
    pub gen: usize,
    pub hv: f64,
    pub evals: usize,
}

pub fn write_hv(path: &Path, rows: &[HvRow]) -> Result<(), ReportError> {
    let fail = csv_fail(path);
    let mut w = csv_writer(path)?;
    w.write_record(HV_HEADER).map_err(&fail)?;
    for r in rows {
        w.write_record([r.gen.to_string(), r.hv.to_string(), r.evals.to_string()])
            .map_err(&fail)?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_hv(path: &Path) -> Result<Vec<HvRow>, ReportError> {
    let fail = csv_fail(path);
    let mut r = csv::Reader::from_path(path).map_err(&fail)?;
    if r.headers().map_err(&fail)?.iter().ne(HV_HEADER) {
        return Err(parse_err(path, "unexpected header"));
    }
    r.deserialize().map(|row| row.map_err(&fail)).collect()
}

/// Turns one run's history into its pareto rows and both hypervolume traces.
pub fn run_tables(
    run: usize,
    history: &[GenerationRecord],
) -> Result<(Vec<ParetoPoint>, Vec<HvRow>, Vec<HvRow>), ReportError> {
    let mut points = Vec::new();
    let mut hv = Vec::new();
    let mut hv_archive = Vec::new();
    for rec in history {
        for e in &rec.front1 {
            points.push(ParetoPoint {
                run_id: run,
                generation: rec.gen,
                f1: e.objectives.f1,
                f2: e.objectives.f2,
                genome: Genome::from_genes(&e.genes).map_err(|e| parse_err(Path::new(""), e))?,
            });
        }
        hv.push(HvRow {
            gen: rec.gen,
            hv: rec.hypervolume,
            evals: rec.evals,
        });
        hv_archive.push(HvRow {
            gen: rec.gen,
            hv: rec.archive_hypervolume,
            evals: rec.evals,
        });
    }
    Ok((points, hv, hv_archive))
}

pub fn write_run(dir: &Path, run: usize, layers: usize, history: &[GenerationRecord]) -> Result<(), ReportError> {
    let (points, hv, hv_archive) = run_tables(run, history)?;
    write_pareto(&dir.join(pareto_file(run)), &points, layers)?;
    write_hv(&dir.join(hv_file(run)), &hv)?;
    write_hv(&dir.join(hv_archive_file(run)), &hv_archive)
}

/// Rows of the last generation present in a run's pareto table.
pub fn final_front(points: &[ParetoPoint]) -> Vec<ParetoPoint> {
    let Some(last) = points.iter().map(|p| p.generation).max() else {
        return Vec::new();
    };
    points.iter().filter(|p| p.generation == last).cloned().collect()
}

/// Highest `f2`, ties to lower `f1`.
pub fn best_accuracy(front: &[ParetoPoint]) -> Option<&ParetoPoint> {
    front.iter().min_by(|a, b| {
        b.f2.total_cmp(&a.f2)
            .then(a.f1.total_cmp(&b.f1))
            .then_with(|| metrics::front_order(a, b))
    })
}

/// Lowest `f1`, ties to higher `f2`.
pub fn lowest_comm(front: &[ParetoPoint]) -> Option<&ParetoPoint> {
    front.iter().min_by(|a, b| metrics::front_order(a, b))
}

pub fn elbow(front: &[ParetoPoint]) -> Option<&ParetoPoint> {
    let mut sorted: Vec<&ParetoPoint> = front.iter().collect();
    sorted.sort_by(|a, b| metrics::front_order(a, b));
    let objs: Vec<Objectives> = sorted.iter().map(|p| p.objectives()).collect();
    metrics::elbow_index(&objs).map(|i| sorted[i])
}

pub fn coordinate_names(layers: usize) -> Vec<String> {
    pareto_header(layers).split_off(4)
}

/// Genome coordinates mapped to `[0, 1]` by their bounds.
pub fn normalized(g: &Genome, bounds: &Bounds) -> Vec<f64> {
    g.to_genes()
        .iter()
        .zip(bounds.genes())
        .map(|(&v, b)| {
            if b.hi == b.lo {
                0.0
            } else {
                (v - b.lo) as f64 / (b.hi - b.lo) as f64
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatRow {
    pub selection: String,
    pub coordinate: String,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
}

/// Quartiles over runs of each normalised coordinate of the per-run
/// best-accuracy, elbow and lowest-communication points.
pub fn genome_stats(fronts: &[Vec<ParetoPoint>], bounds: &Bounds) -> Vec<StatRow> {
    type Pick = for<'a> fn(&'a [ParetoPoint]) -> Option<&'a ParetoPoint>;
    let picks: [(&str, Pick); 3] = [
        ("best_accuracy", best_accuracy),
        ("elbow", elbow),
        ("lowest_comm", lowest_comm),
    ];
    let names = coordinate_names(bounds.layers);
    let mut rows = Vec::new();
    for (label, pick) in picks {
        let chosen: Vec<Vec<f64>> = fronts
            .iter()
            .filter_map(|f| pick(f))
            .map(|p| normalized(&p.genome, bounds))
            .collect();
        for (c, name) in names.iter().enumerate() {
            let values: Vec<f64> = chosen.iter().map(|v| v[c]).collect();
            if let Some((q1, median, q3)) = metrics::quartiles(&values) {
                rows.push(StatRow {
                    selection: label.to_string(),
                    coordinate: name.clone(),
                    q1,
                    median,
                    q3,
                });
            }
        }
    }
    rows
}

pub fn write_stats(path: &Path, rows: &[StatRow]) -> Result<(), ReportError> {
    let fail = csv_fail(path);
    let mut w = csv_writer(path)?;
    w.write_record(["selection", "coordinate", "q1", "median", "q3"])
        .map_err(&fail)?;
    for r in rows {
        w.write_record([
            r.selection.clone(),
            r.coordinate.clone(),
            r.q1.to_string(),
            r.median.to_string(),
            r.q3.to_string(),
        ])
        .map_err(&fail)?;
    }
    w.flush().map_err(io_err(path))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run: usize,
    pub generations: usize,
    pub evals: usize,
    pub front_size: usize,
    pub final_hv: f64,
    pub final_hv_archive: f64,
    pub best_accuracy: Option<ParetoPoint>,
    pub lowest_comm: Option<ParetoPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub runs: usize,
    pub merged_front_size: usize,
    pub merged_hv: f64,
    pub mean_final_hv: f64,
    pub mean_final_hv_archive: f64,
    pub best_accuracy: Option<ParetoPoint>,
    pub elbow: Option<ParetoPoint>,
    pub lowest_comm: Option<ParetoPoint>,
    pub per_run: Vec<RunSummary>,
}

/// Rebuilds the merged front, genome statistics and summary from the per-run
/// files in `dir`. Running it twice leaves every file byte-identical.
pub fn regenerate(dir: &Path) -> Result<Summary, ReportError> {
    let manifest = Manifest::read(dir)?;
    let layers = manifest.bounds.layers;
    let mut missing = Vec::new();
    for k in 1..=manifest.runs {
        for name in [pareto_file(k), hv_file(k), hv_archive_file(k)] {
            let p = dir.join(name);
            if !p.exists() {
                missing.push(p);
            }
        }
    }
    if !missing.is_empty() {
        return Err(ReportError::Missing(missing));
    }

    let mut fronts = Vec::with_capacity(manifest.runs);
    let mut per_run = Vec::with_capacity(manifest.runs);
    for k in 1..=manifest.runs {
        let front = final_front(&read_pareto(&dir.join(pareto_file(k)), layers)?);
        let hv = read_hv(&dir.join(hv_file(k)))?;
        let hv_archive = read_hv(&dir.join(hv_archive_file(k)))?;
        per_run.push(RunSummary {
            run: k,
            generations: hv.last().map_or(0, |r| r.gen),
            evals: hv.last().map_or(0, |r| r.evals),
            front_size: front.len(),
            final_hv: hv.last().map_or(0.0, |r| r.hv),
            final_hv_archive: hv_archive.last().map_or(0.0, |r| r.hv),
            best_accuracy: best_accuracy(&front).cloned(),
            lowest_comm: lowest_comm(&front).cloned(),
        });
        fronts.push(front);
    }

    let merged = metrics::merge_pseudo_optimal(&fronts);
    write_pareto(&dir.join(MERGED_FILE), &merged, layers)?;
    write_stats(&dir.join(STATS_FILE), &genome_stats(&fronts, &manifest.bounds))?;

    let mean = |f: fn(&RunSummary) -> f64| {
        if per_run.is_empty() {
            0.0
        } else {
            per_run.iter().map(f).sum::<f64>() / per_run.len() as f64
        }
    };
    let merged_objs: Vec<Objectives> = merged.iter().map(ParetoPoint::objectives).collect();
    let summary = Summary {
        runs: manifest.runs,
        merged_front_size: merged.len(),
        merged_hv: metrics::hypervolume_within(&merged_objs, manifest.reference),
        mean_final_hv: mean(|r| r.final_hv),
        mean_final_hv_archive: mean(|r| r.final_hv_archive),
        best_accuracy: best_accuracy(&merged).cloned(),
        elbow: elbow(&merged).cloned(),
        lowest_comm: lowest_comm(&merged).cloned(),
        per_run,
    };
    write_json(&dir.join(SUMMARY_FILE), &summary)?;
    Ok(summary)
}
