use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use deskagent_core::curriculum::Pool;
use deskagent_core::grounder::NoiseModel;
use deskagent_core::harness::{
    ablation_interface, bc_corpus, ground_bench, grounding_corpus, pass_at_2_with_logs, render_markdown, report_emit,
    run_curriculum, run_suite_with_logs, serve_tcp, write_trajectory_log, ExperimentConfig, GroundingCase,
    MetricsReport, RunConfig,
};
use deskagent_core::planner::{Planner, PolicyCheckpoint, PolicyParams};
use deskagent_core::rl::bc_train;
use deskagent_core::rollout::InterfaceMode;
use deskagent_core::seed::stable_hash;
use deskagent_core::sim::{generate_world, sample_template, TaskSpec, TaskTemplate, World};
use deskagent_core::trajectory::Trajectory;

#[derive(Parser)]
#[command(name = "deskagent", version, about = "Synthetic GUI-agent workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Csv,
    Md,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Intermediate,
    EndToEnd,
}

#[derive(Subcommand)]
enum Command {
    /// Generate worlds with their tasks as JSON lines.
    GenWorld {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        difficulty: u32,
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate an evaluation suite (instruction records as JSON lines).
    GenSuite {
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 300)]
        count: usize,
        #[arg(long, default_value_t = 1)]
        min_difficulty: u32,
        #[arg(long, default_value_t = 6)]
        max_difficulty: u32,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate oracle demonstrations for behavior cloning.
    GenBc {
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 1000)]
        count: usize,
        #[arg(long, default_value_t = 2)]
        max_difficulty: u32,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the softmax policy to demonstrations.
    TrainBc {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.1)]
        lr: f64,
        #[arg(long, default_value_t = 10)]
        epochs: usize,
    },
    /// Run BC warm start plus self-evolving curriculum RL.
    TrainRl {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Start from this checkpoint instead of training BC.
        #[arg(long)]
        init_policy: Option<PathBuf>,
    },
    /// Evaluate a planner on a suite.
    Eval {
        /// Checkpoint path, `oracle`, or `scripted-noisy:<p>`.
        #[arg(long)]
        policy: String,
        #[arg(long)]
        suite: PathBuf,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[arg(long, default_value_t = 0)]
        master_seed: u64,
        #[arg(long)]
        pass_at_2: bool,
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        #[arg(long, value_enum, default_value_t = Mode::Intermediate)]
        interface: Mode,
        #[arg(long)]
        perturb: bool,
        /// `host:port` of a worker started with `serve-worker`.
        #[arg(long)]
        remote: Option<String>,
        #[arg(long, default_value = "report")]
        out_dir: PathBuf,
    },
    /// Generate a grounding benchmark corpus.
    GenGrounding {
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 10_000)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Measure grounding accuracy and noise calibration on a corpus.
    GroundBench {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        epsilon: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Intermediate vs end-to-end interface with a scripted-noisy planner.
    AblateInterface {
        #[arg(long)]
        suite: PathBuf,
        #[arg(long)]
        perturb: bool,
        #[arg(long, default_value_t = 0.1)]
        noise_p: f64,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[arg(long, default_value_t = 0)]
        master_seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render one or more report.json files.
    Report {
        #[arg(long = "in", required = true, num_args = 1..)]
        inputs: Vec<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Md)]
        format: Format,
    },
    /// Serve episodes over newline-delimited JSON.
    ServeWorker {
        #[arg(long, default_value = "127.0.0.1:7878")]
        addr: String,
    },
}

#[derive(Serialize)]
#[serde(rename_all = "camelCase")]
struct GeneratedTask<'a> {
    template: &'a TaskTemplate,
    world: &'a World,
    task: &'a TaskSpec,
}

fn write_jsonl<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<usize> {
    let mut out = BufWriter::new(fs::File::create(path).with_context(|| format!("creating {}", path.display()))?);
    let mut n = 0;
    for item in items {
        serde_json::to_writer(&mut out, &item)?;
        out.write_all(b"\n")?;
        n += 1;
    }
    out.flush()?;
    Ok(n)
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut items = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        items.push(serde_json::from_str(&line).with_context(|| format!("{}:{}", path.display(), i + 1))?);
    }
    Ok(items)
}

fn load_policy(path: &Path) -> Result<PolicyParams> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let ckpt: PolicyCheckpoint = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    PolicyParams::try_from(ckpt).map_err(|e| anyhow!("{}: {e}", path.display()))
}

fn parse_planner(spec: &str) -> Result<Planner> {
    if spec == "oracle" {
        return Ok(Planner::Oracle);
    }
    if let Some(p) = spec.strip_prefix("scripted-noisy:") {
        let p: f64 = p.parse().context("noise probability")?;
        if !(0.0..=1.0).contains(&p) {
            bail!("noise probability must lie in [0, 1]");
        }
        return Ok(Planner::ScriptedNoisy { p });
    }
    Ok(Planner::Softmax { params: load_policy(Path::new(spec))? })
}

fn load_suite(path: &Path) -> Result<Pool> {
    let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(Pool::load_jsonl(BufReader::new(file))?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn summary_line(m: &MetricsReport) -> String {
    format!(
        "{}: SR {:.3}  pass@2 {:.3}  partial {:.3}  fail {:.3}  ({} tasks, {} episodes)",
        m.method, m.sr, m.pass_at2, m.partial_rate, m.fail_rate, m.tasks, m.episodes
    )
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenWorld { seed, difficulty, count, out } => {
            let mut rows = Vec::with_capacity(count);
            for i in 0..count as u64 {
                let s = if count == 1 { seed } else { stable_hash(&[seed, i]) };
                let template = sample_template(s, difficulty)?;
                let (world, task) = generate_world(s, difficulty)?;
                rows.push((template, world, task));
            }
            let n =
                write_jsonl(&out, rows.iter().map(|(template, world, task)| GeneratedTask { template, world, task }))?;
            println!("wrote {n} worlds to {}", out.display());
        }
        Command::GenSuite { seed, count, min_difficulty, max_difficulty, out } => {
            if min_difficulty == 0 || min_difficulty > max_difficulty {
                bail!("difficulty range must satisfy 1 <= min <= max");
            }
            let span = max_difficulty - min_difficulty + 1;
            let pool = Pool::from_seeds(
                (0..count as u64).map(|i| (stable_hash(&[seed, i]), min_difficulty + (i as u32 % span))),
            )?;
            let mut w = BufWriter::new(fs::File::create(&out)?);
            pool.save_jsonl(&mut w)?;
            w.flush()?;
            println!("wrote {} records to {}", pool.len(), out.display());
        }
        Command::GenBc { seed, count, max_difficulty, out } => {
            let corpus = bc_corpus(seed, count, max_difficulty)?;
            let n = write_jsonl(&out, &corpus)?;
            println!("wrote {n} oracle trajectories to {}", out.display());
        }
        Command::TrainBc { data, out, lr, epochs } => {
            let corpus: Vec<Trajectory> = read_jsonl(&data)?;
            let (params, trace) = bc_train(&corpus, &PolicyParams::default(), lr, epochs)?;
            for (e, nll) in trace.iter().enumerate() {
                println!("epoch {:>3}  mean NLL {nll:.5}", e + 1);
            }
            write_json(&out, &PolicyCheckpoint::from(&params))?;
            println!("wrote checkpoint v{} to {}", params.version, out.display());
        }
        Command::TrainRl { config, out_dir, init_policy } => {
            let text = fs::read_to_string(&config).with_context(|| format!("reading {}", config.display()))?;
            let cfg: ExperimentConfig =
                serde_json::from_str(&text).with_context(|| format!("parsing {}", config.display()))?;
            let init = init_policy.as_deref().map(load_policy).transpose()?;
            let run = run_curriculum(&cfg, init, Some(&out_dir))?;
            println!("BC eval SR {:.3}", run.bc_eval_sr);
            for r in &run.iterations {
                println!(
                    "iter {:>2}  train SR {:.3}  eval SR {:.3}  KL {:.4}  buffer {}  pool {}",
                    r.stats.iteration, r.stats.sr, r.eval_sr, r.stats.mean_kl, r.stats.buffer_size, r.pool_size
                );
            }
            println!("artifacts in {}", out_dir.display());
        }
        Command::Eval {
            policy,
            suite,
            workers,
            master_seed,
            pass_at_2,
            noise,
            interface,
            perturb,
            remote,
            out_dir,
        } => {
            let pool = load_suite(&suite)?;
            let cfg = RunConfig {
                master_seed,
                workers,
                grounder_noise: noise,
                interface_mode: match interface {
                    Mode::Intermediate => InterfaceMode::Intermediate,
                    Mode::EndToEnd => InterfaceMode::EndToEnd,
                },
                perturb_layout: perturb,
                remote,
                ..RunConfig::new(pool.records().to_vec(), parse_planner(&policy)?)
            };
            fs::create_dir_all(&out_dir)?;
            let report = if pass_at_2 {
                let (m, first, second) = pass_at_2_with_logs(&cfg)?;
                write_trajectory_log(&out_dir.join("trajectories-attempt1.jsonl"), &first)?;
                write_trajectory_log(&out_dir.join("trajectories-attempt2.jsonl"), &second)?;
                m
            } else {
                let (m, trajs) = run_suite_with_logs(&cfg)?;
                write_trajectory_log(&out_dir.join("trajectories-attempt1.jsonl"), &trajs)?;
                m
            };
            report_emit(&report, &out_dir)?;
            println!("{}", summary_line(&report));
            let dropped = report.results.iter().filter(|r| r.transport_error).count();
            if dropped > 0 {
                println!("{dropped} episodes lost to transport errors (counted as Fail)");
            }
        }
        Command::GenGrounding { seed, count, out } => {
            let cases = grounding_corpus(seed, count)?;
            let n = write_jsonl(&out, &cases)?;
            println!("wrote {n} grounding cases to {}", out.display());
        }
        Command::GroundBench { corpus, epsilon, seed } => {
            let cases: Vec<GroundingCase> = read_jsonl(&corpus)?;
            let report = ground_bench(&cases, &NoiseModel::new(epsilon, seed));
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::AblateInterface { suite, perturb, noise_p, workers, master_seed, out } => {
            let pool = load_suite(&suite)?;
            let cfg = RunConfig {
                master_seed,
                workers,
                perturb_layout: perturb,
                ..RunConfig::new(pool.records().to_vec(), Planner::ScriptedNoisy { p: noise_p })
            };
            let ab = ablation_interface(&cfg)?;
            println!("{}", summary_line(&ab.end_to_end));
            println!("{}", summary_line(&ab.intermediate));
            println!("delta (intermediate - end-to-end): {:+.1} points", 100.0 * ab.delta);
            if let Some(path) = out {
                write_json(&path, &ab)?;
            }
        }
        Command::Report { inputs, format } => {
            let mut reports = Vec::new();
            for p in &inputs {
                let path = if p.is_dir() { p.join("report.json") } else { p.clone() };
                let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
                reports.push(
                    serde_json::from_str::<MetricsReport>(&text)
                        .with_context(|| format!("parsing {}", path.display()))?,
                );
            }
            match format {
                Format::Md => print!("{}", render_markdown(&reports.iter().collect::<Vec<_>>())),
                Format::Json => println!("{}", serde_json::to_string_pretty(&reports)?),
                Format::Csv => {
                    println!("method,SR,passAt2,partialRate,failRate,tasks,episodes");
                    for m in &reports {
                        println!(
                            "\"{}\",{},{},{},{},{},{}",
                            m.method.replace('"', "\"\""),
                            m.sr,
                            m.pass_at2,
                            m.partial_rate,
                            m.fail_rate,
                            m.tasks,
                            m.episodes
                        );
                    }
                }
            }
        }
        Command::ServeWorker { addr } => {
            let listener = TcpListener::bind(&addr).with_context(|| format!("binding {addr}"))?;
            eprintln!("serving episodes on {}", listener.local_addr()?);
            serve_tcp(listener)?;
        }
    }
    Ok(())
}

fn main() -> Result<()> {
    run(Cli::parse())
}
