use std::fmt;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde_json::json;

use flcop::campaign::{self, CampaignConfig, CampaignError};
use flcop::data::{self, LabeledDataset};
use flcop::federation::{RoundObserver, RoundRecord};
use flcop::nsga2::GenerationRecord;
use flcop::objectives::{self, Bounds, EvalEnv, Evaluation, Genome};
use flcop::report::{self, ReportError};
use flcop::seed::{derive_seed, stream};

use crate::settings::{Settings, SettingsError};

pub const EXIT_CONFIG: u8 = 1;
pub const EXIT_DATA: u8 = 2;
pub const EXIT_RUNTIME: u8 = 3;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Data(String),
    Runtime(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Data(_) => EXIT_DATA,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) | CliError::Data(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<SettingsError> for CliError {
    fn from(e: SettingsError) -> Self {
        CliError::Config(e.0)
    }
}

impl From<CampaignError> for CliError {
    fn from(e: CampaignError) -> Self {
        match e {
            CampaignError::Data(d) => CliError::Data(d.to_string()),
            CampaignError::Report(r) => report_error(r),
            other => CliError::Config(other.to_string()),
        }
    }
}

fn report_error(e: ReportError) -> CliError {
    match e {
        ReportError::Missing(_) | ReportError::Parse { .. } => CliError::Data(e.to_string()),
        ReportError::Io { .. } => CliError::Runtime(e.to_string()),
    }
}

fn io_fail(path: &Path) -> impl FnOnce(io::Error) -> CliError + '_ {
    move |e| CliError::Runtime(format!("{}: {e}", path.display()))
}

pub fn resolve(flags: &Settings, config: Option<&Path>) -> Result<Settings, CliError> {
    Ok(Settings::resolve(flags, config)?)
}

fn load_mnist(dir: &Path) -> Result<(LabeledDataset, LabeledDataset), CliError> {
    data::load_mnist_dir(dir).map_err(|e| {
        CliError::Data(format!(
            "cannot load MNIST from {}: {e} (set --mnist-dir or FLCOP_MNIST_DIR)",
            dir.display()
        ))
    })
}

fn create_out(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(io_fail(dir))
}

fn create_file(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path).map(BufWriter::new).map_err(io_fail(path))
}

pub fn optimize(s: &Settings, trace: Option<&Path>) -> Result<(), CliError> {
    let cfg = s.campaign();
    cfg.validate()?;
    let (train, test) = load_mnist(&s.mnist_dir())?;
    let out = s.out_dir();
    let mut trace = trace.map(|p| Ok::<_, CliError>((p.to_path_buf(), create_file(p)?))).transpose()?;
    let mut trace_err: Option<CliError> = None;
    log::info!(
        "optimising {:?}: {} run(s) x {} generations x population {}",
        cfg.model,
        cfg.runs,
        cfg.generations,
        cfg.pop_size
    );
    let summary = campaign::run_campaign(&cfg, &train, &test, &out, &mut |run, rec| {
        log::info!(
            "run {run} gen {}: front {} hv {:.6} archive hv {:.6} evals {}",
            rec.gen,
            rec.front1.len(),
            rec.hypervolume,
            rec.archive_hypervolume,
            rec.evals
        );
        if let Some((path, w)) = trace.as_mut() {
            if let Err(e) = writeln!(w, "{}", generation_line(run, rec)) {
                trace_err.get_or_insert(CliError::Runtime(format!("{}: {e}", path.display())));
            }
        }
    })?;
    if let Some(e) = trace_err {
        return Err(e);
    }
    if let Some((path, mut w)) = trace {
        w.flush().map_err(io_fail(&path))?;
    }
    let point = |p: &Option<flcop::metrics::ParetoPoint>| match p {
        Some(p) => format!("f1 = {} f2 = {} genome {} (run {})", p.f1, p.f2, p.genome, p.run_id),
        None => "none".into(),
    };
    println!("merged front size: {}", summary.merged_front_size);
    println!("best f2: {}", point(&summary.best_accuracy));
    println!("min f1: {}", point(&summary.lowest_comm));
    println!("outputs in {}", out.display());
    Ok(())
}

fn generation_line(run: usize, rec: &GenerationRecord) -> String {
    let front: Vec<serde_json::Value> = rec
        .front1
        .iter()
        .map(|e| json!([e.objectives.f1, e.objectives.f2, e.genes]))
        .collect();
    json!({
        "run": run,
        "gen": rec.gen,
        "front1": front,
        "hypervolume": rec.hypervolume,
        "archive_hypervolume": rec.archive_hypervolume,
        "evals": rec.evals,
    })
    .to_string()
}

/// Writes round records as JSON lines.
struct RoundLog {
    path: PathBuf,
    out: BufWriter<File>,
    accuracy: bool,
    error: Option<io::Error>,
}

impl RoundObserver for RoundLog {
    fn wants_accuracy(&self) -> bool {
        self.accuracy
    }

    fn on_round(&mut self, record: &RoundRecord) {
        if self.error.is_none() {
            let line = serde_json::to_string(record).expect("record serialises");
            if let Err(e) = writeln!(self.out, "{line}") {
                self.error = Some(e);
            }
        }
    }
}

impl RoundLog {
    fn finish(mut self) -> Result<(), CliError> {
        match self.error.take() {
            Some(e) => Err(CliError::Runtime(format!("{}: {e}", self.path.display()))),
            None => self.out.flush().map_err(io_fail(&self.path)),
        }
    }
}

fn simulate(
    cfg: &CampaignConfig,
    s: &Settings,
    genome: &Genome,
    trace: Option<&Path>,
    trace_accuracy: bool,
) -> Result<Evaluation, CliError> {
    cfg.validate()?;
    let spec = cfg.spec();
    cfg.genome_bounds()?;
    objectives::Bounds::preset(cfg.bounds, cfg.n_clients, spec.num_arrays())
        .and_then(|b| b.check(genome))
        .map_err(|e| CliError::Config(e.to_string()))?;
    let (train, test) = load_mnist(&s.mnist_dir())?;
    let (parts, test) = campaign::prepare_data(cfg, &train, &test)?;
    let env = EvalEnv {
        spec: &spec,
        partition: &parts,
        test: &test,
        train: cfg.train,
        epochs: cfg.epochs,
        init_seed: cfg.init_seed(),
    };
    let seed = derive_seed(cfg.seed, &[stream::EVAL]);
    let pool = campaign::thread_pool(cfg.workers)?;
    let mut log = match trace {
        Some(p) => Some(RoundLog {
            path: p.to_path_buf(),
            out: create_file(p)?,
            accuracy: trace_accuracy,
            error: None,
        }),
        None => None,
    };
    let result = pool.install(|| match log.as_mut() {
        Some(l) => objectives::evaluate_genome_observed::<f32>(genome, &env, seed, l),
        None => objectives::evaluate_genome::<f32>(genome, &env, seed),
    });
    if let Some(l) = log {
        l.finish()?;
    }
    let ev = result.map_err(|e| CliError::Config(e.to_string()))?;
    if let Some(f) = &ev.failure {
        log::warn!("training failed: {f}");
    }
    Ok(ev)
}

pub fn baseline(s: &Settings, trace: Option<&Path>, trace_accuracy: bool) -> Result<(), CliError> {
    let cfg = s.campaign();
    let genome = Genome::brute_force(cfg.n_clients, cfg.spec().num_arrays());
    let ev = simulate(&cfg, s, &genome, trace, trace_accuracy)?;
    let out = s.out_dir();
    create_out(&out)?;
    let path = out.join("baseline.json");
    let doc = json!({
        "model": cfg.model,
        "config": CampaignConfig { workers: 0, ..cfg.clone() },
        "evaluation": ev,
    });
    report::write_json(&path, &doc).map_err(report_error)?;
    println!("f1 = {}", ev.objectives.f1_comm);
    println!("f2 = {}", ev.objectives.f2_acc);
    println!("written {}", path.display());
    if ev.failure.is_some() {
        return Err(CliError::Runtime("baseline training failed".into()));
    }
    Ok(())
}

pub fn eval(
    s: &Settings,
    genome_json: &str,
    layer_sizes: Option<&[usize]>,
    trace: Option<&Path>,
    trace_accuracy: bool,
) -> Result<(), CliError> {
    let genome: Genome =
        serde_json::from_str(genome_json).map_err(|e| CliError::Config(format!("bad genome: {e}")))?;
    let cfg = s.campaign();
    let doc = match layer_sizes {
        Some(sizes) => {
            if sizes.contains(&0) {
                return Err(CliError::Config("layer sizes must be positive".into()));
            }
            Bounds::preset(cfg.bounds, cfg.n_clients, sizes.len())
                .and_then(|b| b.check(&genome))
                .map_err(|e| CliError::Config(e.to_string()))?;
            let cf = objectives::comm_fraction(&genome, sizes, cfg.n_clients);
            json!({
                "genome": genome,
                "objectives": { "f1_comm": cf.f1, "alpha": cf.alpha, "beta": cf.beta },
            })
        }
        None => serde_json::to_value(simulate(&cfg, s, &genome, trace, trace_accuracy)?).expect("serialises"),
    };
    println!("{}", serde_json::to_string_pretty(&doc).expect("serialises"));
    Ok(())
}

pub fn report(dir: &Path) -> Result<(), CliError> {
    let summary = report::regenerate(dir).map_err(report_error)?;
    println!("runs: {}", summary.runs);
    println!("merged front size: {}", summary.merged_front_size);
    println!("merged hypervolume: {}", summary.merged_hv);
    Ok(())
}
