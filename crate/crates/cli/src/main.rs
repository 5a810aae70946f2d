//! `fhrctl`: command-line driver for the supervisory-control stack.
//!
//! Exit codes: 0 on success, 2 for bad arguments or configuration, 3 for
//! numerical failures.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use fhrctl_core::linalg::RankRule;
use fhrctl_core::ops::Session;
use fhrctl_core::scenario::{
    fit_model, generate_training_set, governor_states, load_or_fit_model, run_scenario, simulate_profile,
    training_columns, training_profiles, tune_loop, validation_profile, LoopId, ScenarioConfig, INPUT_CHANNEL,
    MANDATORY_STATES,
};
use fhrctl_core::sffs::{round_robin_folds, select, SelectionProblem};
use fhrctl_core::sysid::{Centering, StateSpaceModel};
use fhrctl_core::trajectory::Trajectory;
use fhrctl_service::{Engine, EngineOptions};

#[derive(Debug, Parser)]
#[command(name = "fhrctl", version, about = "Reference-governed load-follow simulator and tools")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Args)]
struct Common {
    /// Scenario config (JSON). Built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the noise seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Enable measurement noise and the robust constraint margin.
    #[arg(long)]
    noise: bool,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Run one closed-loop scenario.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Directory for run.csv and summary.json.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        no_governor: bool,
        /// Governor model (JSON). Fitted on the fly when omitted.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Generate the training and validation trajectories.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the governor model by DMDc.
    Fit {
        #[command(flatten)]
        common: Common,
        /// Output of `gen-data`. Generated in memory when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Model file to write.
        #[arg(long)]
        out: PathBuf,
        /// Fixed SVD rank instead of the energy rule.
        #[arg(long)]
        rank: Option<usize>,
    },
    /// Select supplementary model states by SFFS.
    Select {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Directory for trace.csv and selection.json.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        max_added: usize,
        #[arg(long, default_value_t = 3)]
        folds: usize,
    },
    /// Grid-search the gains of one PI loop.
    Tune {
        #[command(flatten)]
        common: Common,
        #[arg(long = "loop", value_enum)]
        which: LoopArg,
        #[arg(long, value_delimiter = ',', required = true)]
        kp: Vec<f64>,
        #[arg(long, value_delimiter = ',', required = true)]
        ki: Vec<f64>,
        /// Directory for tune.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the live operations service.
    Serve {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        no_governor: bool,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        /// Run as fast as possible instead of in scaled real time.
        #[arg(long)]
        no_pace: bool,
        /// Wait for a resume command before the first tick.
        #[arg(long)]
        paused: bool,
        /// Directory for the tick log and command log.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum LoopArg {
    Power,
    CoreOutlet,
    CoreInlet,
}

impl From<LoopArg> for LoopId {
    fn from(l: LoopArg) -> Self {
        match l {
            LoopArg::Power => LoopId::Power,
            LoopArg::CoreOutlet => LoopId::CoreOutlet,
            LoopArg::CoreInlet => LoopId::CoreInlet,
        }
    }
}

#[derive(Debug)]
enum Failure {
    Config(String),
    Numeric(String),
}

impl From<fhrctl_core::Error> for Failure {
    fn from(e: fhrctl_core::Error) -> Self {
        if e.is_config() {
            Failure::Config(e.to_string())
        } else {
            Failure::Numeric(e.to_string())
        }
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Failure + '_ {
    move |e| Failure::Config(format!("{}: {e}", path.display()))
}

type Result<T> = std::result::Result<T, Failure>;

fn load_config(c: &Common) -> Result<ScenarioConfig> {
    let mut cfg = match &c.config {
        Some(p) => ScenarioConfig::load(p)?,
        None => ScenarioConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if c.noise {
        cfg.noise_enabled = true;
        cfg.robust_margin = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(io_err(path))
}

fn mkdir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))
}

fn json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializable")
}

/// Model for a governed run, or `None` when the governor is off.
fn governor_model(cfg: &mut ScenarioConfig, model: Option<&Path>, no_governor: bool) -> Result<Option<StateSpaceModel>> {
    if no_governor {
        cfg.governor.enabled = false;
    }
    if !cfg.governor.enabled {
        return Ok(None);
    }
    Ok(Some(match model {
        Some(p) => StateSpaceModel::load(p)?,
        None => {
            log::info!("no model given, fitting one on generated data");
            load_or_fit_model(cfg)?
        }
    }))
}

fn read_dir_csv(dir: &Path) -> Result<Vec<Trajectory>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Failure::Config(format!("no CSV trajectories in {}", dir.display())));
    }
    paths.iter().map(|p| Trajectory::load_csv(p).map_err(Failure::from)).collect()
}

fn training_data(cfg: &ScenarioConfig, data: Option<&Path>) -> Result<Vec<Trajectory>> {
    match data {
        Some(d) => read_dir_csv(&d.join("train")),
        None => {
            let t = generate_training_set(cfg, &training_profiles(cfg.plant.anchors.q_rx_mw));
            if t.is_empty() {
                return Err(Failure::Numeric("every training profile diverged".into()));
            }
            Ok(t)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Simulate {
            common,
            out,
            no_governor,
            model,
        } => {
            let mut cfg = load_config(&common)?;
            let model = governor_model(&mut cfg, model.as_deref(), no_governor)?;
            let log_path = match &out {
                Some(dir) => {
                    mkdir(dir)?;
                    Some(dir.join("run.csv"))
                }
                None => None,
            };
            let output = run_scenario(&cfg, model, log_path.as_deref())?;
            let summary = json(&output.summary);
            if let Some(dir) = &out {
                write(&dir.join("summary.json"), &summary)?;
            }
            println!("{summary}");
        }
        Cmd::GenData { common, out } => {
            let cfg = load_config(&common)?;
            let rated = cfg.plant.anchors.q_rx_mw;
            let profiles = training_profiles(rated);
            let train = generate_training_set(&cfg, &profiles);
            if train.len() < profiles.len() {
                log::warn!("{} of {} profiles diverged", profiles.len() - train.len(), profiles.len());
            }
            let val = simulate_profile(&cfg, &validation_profile(rated))?;
            mkdir(&out.join("train"))?;
            mkdir(&out.join("validation"))?;
            for t in &train {
                t.save_csv(out.join("train").join(format!("{}.csv", t.name)))?;
            }
            val.save_csv(out.join("validation").join(format!("{}.csv", val.name)))?;
            println!("{} training and 1 validation trajectories in {}", train.len(), out.display());
        }
        Cmd::Fit {
            common,
            data,
            out,
            rank,
        } => {
            let cfg = load_config(&common)?;
            let trajs = training_data(&cfg, data.as_deref())?;
            let rule = rank.map(RankRule::Fixed).unwrap_or_else(|| cfg.model.rank_rule());
            let model = fit_model(&trajs, &governor_states(), rule)?;
            if model.spectral_radius >= 1.0 {
                log::warn!("fitted model is not stable (spectral radius {})", model.spectral_radius);
            }
            model.save(&out)?;
            let val = match data.as_deref().map(|d| d.join("validation")) {
                Some(d) if d.is_dir() => read_dir_csv(&d)?,
                _ => vec![simulate_profile(&cfg, &validation_profile(cfg.plant.anchors.q_rx_mw))?],
            };
            let mut scores = serde_json::Map::new();
            for v in &val {
                for s in model.score(v)? {
                    scores.insert(format!("{}/{}", v.name, s.name), serde_json::json!(s.r2));
                }
            }
            println!(
                "{}",
                json(&serde_json::json!({
                    "model": out,
                    "rank": model.rank,
                    "spectral_radius": model.spectral_radius,
                    "validation_r2": scores,
                }))
            );
        }
        Cmd::Select {
            common,
            data,
            out,
            max_added,
            folds,
        } => {
            let cfg = load_config(&common)?;
            let trajs = training_data(&cfg, data.as_deref())?;
            let mandatory: Vec<String> = MANDATORY_STATES.iter().map(|s| s.to_string()).collect();
            let candidates: Vec<String> = training_columns()
                .into_iter()
                .filter(|c| c != INPUT_CHANNEL && !mandatory.contains(c))
                .collect();
            let problem = SelectionProblem {
                mandatory,
                candidates,
                inputs: vec![INPUT_CHANNEL.into()],
                max_added,
                folds: round_robin_folds(trajs.len(), folds),
                trajectories: trajs,
                rank: cfg.model.rank_rule(),
                centering: Centering::FirstSample,
                floating: true,
            };
            let res = select(&problem)?;
            if let Some(dir) = &out {
                mkdir(dir)?;
                write(&dir.join("trace.csv"), &res.trace_csv())?;
                write(&dir.join("selection.json"), &json(&res))?;
            }
            println!("{}", json(&serde_json::json!({ "added": res.added, "states": res.states })));
        }
        Cmd::Tune {
            common,
            which,
            kp,
            ki,
            out,
        } => {
            let cfg = load_config(&common)?;
            let report = tune_loop(&cfg, which.into(), &kp, &ki)?;
            if let Some(dir) = &out {
                mkdir(dir)?;
                write(&dir.join("tune.csv"), &report.to_csv())?;
            }
            println!("{}", json(&report.best));
        }
        Cmd::Serve {
            common,
            model,
            no_governor,
            addr,
            no_pace,
            paused,
            out,
        } => {
            let mut cfg = load_config(&common)?;
            let model = governor_model(&mut cfg, model.as_deref(), no_governor)?;
            if let Some(dir) = &out {
                mkdir(dir)?;
            }
            let opts = EngineOptions {
                paced: !no_pace,
                start_paused: paused,
                log_path: out.as_ref().map(|d| d.join("run.csv")),
                ..EngineOptions::default()
            };
            let engine = Engine::start(Session::new(&cfg, model)?, opts)
                .map_err(|e| Failure::Config(format!("engine: {e}")))?;
            let rt = tokio::runtime::Runtime::new().map_err(|e| Failure::Config(e.to_string()))?;
            let state = engine.state();
            let ctrl_c = async {
                if let Err(e) = tokio::signal::ctrl_c().await {
                    log::error!("signal handler: {e}");
                    std::future::pending::<()>().await;
                }
            };
            rt.block_on(fhrctl_service::serve(&engine, addr, ctrl_c))
                .map_err(|e| Failure::Config(format!("{addr}: {e}")))?;
            if let Some(dir) = &out {
                let log = rt.block_on(state.command_log());
                write(&dir.join("commands.json"), &json(&log))?;
            }
            engine.shutdown();
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Numeric(m)) => {
            eprintln!("numerical failure: {m}");
            ExitCode::from(3)
        }
    }
}
