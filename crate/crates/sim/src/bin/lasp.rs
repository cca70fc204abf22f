//! `lasp` — chunked linear attention with simulated sequence parallelism.
//!
//! Subcommands: `verify` (equivalence suites), `gradcheck` (finite-difference
//! gradients), `simulate` (scatter/forward/backward with tensor and trace
//! artifacts), `comm-report` (analytic and measured communication volumes),
//! `bench` (wall-time sweep). Exit codes: 0 all checks passed, 1 a property
//! failed or the run broke mid-flight, 2 usage or configuration error.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use lasp_core::comm::{self, CommParams};
use lasp_core::matrix::Matrix;
use lasp_core::oracle::Grads;
use lasp_sim::config::{PartialConfig, RunConfig};
use lasp_sim::runtime::{
    allreduce_mean_gradients, random_problem, BatchInputs, LayerInputs, SimProblem, SpWorld,
};
use lasp_sim::topology::plan_distribution;
use lasp_sim::{fixtures, report, tracefile, verify, SimError};
use serde_json::json;

#[derive(Parser)]
#[command(
    name = "lasp",
    version,
    about = "Chunked causal linear attention with decay, run across simulated sequence-parallel workers"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Debug, Default)]
struct CommonArgs {
    /// Sequence length N
    #[arg(long)]
    n: Option<usize>,
    /// Model dimension d
    #[arg(long)]
    d: Option<usize>,
    /// Attention head count h
    #[arg(long)]
    heads: Option<usize>,
    /// Number of batches B
    #[arg(long)]
    batch: Option<usize>,
    /// World size W (simulated workers)
    #[arg(long)]
    world: Option<usize>,
    /// Sequence-parallel size T
    #[arg(long)]
    sp_size: Option<usize>,
    /// Decay rate in (0, 1]; 1 disables decay
    #[arg(long)]
    lambda: Option<f64>,
    /// Fixture seed (splitmix64 stream)
    #[arg(long)]
    seed: Option<u64>,
    /// Scheduling: lockstep | concurrent
    #[arg(long)]
    mode: Option<String>,
    /// Independent attention layers per run
    #[arg(long)]
    layers: Option<usize>,
    /// Output directory for reports and artifacts
    #[arg(long)]
    out: Option<PathBuf>,
    /// JSON config file; flags override its fields
    #[arg(long)]
    config: Option<PathBuf>,
}

impl CommonArgs {
    fn resolve(self) -> Result<RunConfig, SimError> {
        let file = match &self.config {
            Some(path) => PartialConfig::from_file(path)?,
            None => PartialConfig::default(),
        };
        let flags = PartialConfig {
            n: self.n,
            d: self.d,
            heads: self.heads,
            batch: self.batch,
            world: self.world,
            sp_size: self.sp_size,
            lambda: self.lambda,
            seed: self.seed,
            mode: self.mode,
            layers: self.layers,
            out: self.out,
            fixtures: None,
        };
        RunConfig::resolve(flags.merged_over(file))
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the oracle-equivalence, chunk-invariance and parallel-equivalence suites
    Verify(CommonArgs),
    /// Check simulated ring gradients against central finite differences
    Gradcheck {
        #[command(flatten)]
        common: CommonArgs,
        /// Finite-difference step sizes
        #[arg(long, value_delimiter = ',', default_values_t = [1e-5, 1e-6])]
        eps: Vec<f64>,
    },
    /// Scatter, forward, backward, gradient sync; write tensors, trace and summary
    Simulate(CommonArgs),
    /// Analytic communication volumes, optionally reconciled with a trace
    CommReport {
        #[command(flatten)]
        common: CommonArgs,
        /// JSON-lines trace to measure
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Restrict the table to one method
        #[arg(long)]
        method: Option<String>,
    },
    /// Wall-time sweep over sequence lengths at fixed T (CPU simulation timings)
    Bench {
        #[command(flatten)]
        common: CommonArgs,
        /// Comma-separated sequence lengths
        #[arg(long, value_delimiter = ',')]
        sweep: Vec<usize>,
    },
    /// List the generalized-recurrence model registry as JSON
    Models {
        /// Write the listing to a file instead of stdout
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                SimError::Protocol { .. } | SimError::State { .. } => ExitCode::from(1),
                _ => ExitCode::from(2),
            }
        }
    }
}

fn run(cmd: Cmd) -> Result<bool, SimError> {
    match cmd {
        Cmd::Verify(common) => cmd_verify(common.resolve()?),
        Cmd::Gradcheck { common, eps } => cmd_gradcheck(common.resolve()?, &eps),
        Cmd::Simulate(common) => cmd_simulate(common.resolve()?),
        Cmd::CommReport {
            common,
            trace,
            method,
        } => cmd_comm_report(common.resolve()?, trace, method),
        Cmd::Bench { common, sweep } => cmd_bench(common.resolve()?, &sweep),
        Cmd::Models { out } => cmd_models(out),
    }
}

fn cmd_models(out: Option<PathBuf>) -> Result<bool, SimError> {
    let entries: Vec<_> = lasp_core::recurrence::REGISTRY
        .iter()
        .map(|e| {
            json!({
                "name": e.name,
                "input": e.input,
                "expand": e.expand,
                "oscillation": e.oscillation,
                "shrink": e.shrink,
                "k": e.memory_k,
                "d": e.memory_d,
                "oscillation_kind": e.oscillation_kind,
                "executable": e.executable,
                "note": e.note,
            })
        })
        .collect();
    let value = json!(entries);
    match out {
        Some(path) => report::write_json(&path, &value)?,
        None => println!("{}", serde_json::to_string_pretty(&value)?),
    }
    Ok(true)
}

fn status(pass: bool) -> &'static str {
    if pass {
        "pass"
    } else {
        "FAIL"
    }
}

fn cmd_verify(cfg: RunConfig) -> Result<bool, SimError> {
    let results = verify::verify_suite(&cfg)?;
    let rows: Vec<Vec<String>> = results
        .iter()
        .map(|r| {
            vec![
                r.name.clone(),
                format!("{:.3e}", r.max_error),
                format!("{:.1e}", r.tolerance),
                status(r.pass).to_string(),
            ]
        })
        .collect();
    print!(
        "{}",
        report::render_table(&["property", "max error", "tolerance", "status"], &rows)
    );
    let pass = results.iter().all(|r| r.pass);
    println!("verify: {}", status(pass));

    if let Some(out) = &cfg.out {
        report::ensure_dir(out)?;
        let properties: Vec<_> = results
            .iter()
            .map(|r| {
                json!({
                    "name": r.name,
                    "max_error": r.max_error,
                    "tolerance": r.tolerance,
                    "pass": r.pass,
                })
            })
            .collect();
        report::write_json(
            &out.join("verify.json"),
            &json!({"config": cfg.to_json(), "properties": properties, "pass": pass}),
        )?;
    }
    Ok(pass)
}

fn cmd_gradcheck(cfg: RunConfig, eps: &[f64]) -> Result<bool, SimError> {
    let rep = verify::gradcheck(&cfg, eps)?;
    let rows: Vec<Vec<String>> = rep
        .cases
        .iter()
        .map(|c| {
            vec![
                format!("{}", c.lambda),
                format!("{:.1e}", c.eps),
                format!("{:.3e}", c.max_rel_error),
                status(c.pass).to_string(),
            ]
        })
        .collect();
    print!(
        "{}",
        report::render_table(&["lambda", "eps", "max rel error", "status"], &rows)
    );
    println!("gradcheck threshold {:.1e}: {}", rep.threshold, status(rep.pass));

    if let Some(out) = &cfg.out {
        report::ensure_dir(out)?;
        let cases: Vec<_> = rep
            .cases
            .iter()
            .map(|c| {
                json!({
                    "lambda": c.lambda,
                    "eps": c.eps,
                    "max_rel_error": c.max_rel_error,
                    "pass": c.pass,
                })
            })
            .collect();
        report::write_json(
            &out.join("gradcheck.json"),
            &json!({
                "config": cfg.to_json(),
                "threshold": rep.threshold,
                "cases": cases,
                "pass": rep.pass,
            }),
        )?;
    }
    Ok(rep.pass)
}

fn load_fixture_problem(cfg: &RunConfig) -> Result<(SimProblem, Vec<Vec<Matrix>>), SimError> {
    let plan = plan_distribution(cfg.n, cfg.world, cfg.sp_size, cfg.batch)?;
    let paths = cfg.fixtures.as_ref().expect("caller checked");
    let q = fixtures::read_matrix(&paths.q)?;
    let k = fixtures::read_matrix(&paths.k)?;
    let v = fixtures::read_matrix(&paths.v)?;
    for (name, m) in [("q", &q), ("k", &k), ("v", &v)] {
        if m.shape() != (cfg.n, cfg.d) {
            return Err(SimError::Config {
                detail: format!(
                    "fixture {name} is {}x{}, config expects {}x{}",
                    m.rows(),
                    m.cols(),
                    cfg.n,
                    cfg.d
                ),
            });
        }
    }
    let dout = match &paths.dout {
        Some(p) => {
            let m = fixtures::read_matrix(p)?;
            if m.shape() != (cfg.n, cfg.d) {
                return Err(SimError::Config {
                    detail: format!(
                        "fixture dout is {}x{}, config expects {}x{}",
                        m.rows(),
                        m.cols(),
                        cfg.n,
                        cfg.d
                    ),
                });
            }
            m
        }
        None => lasp_core::rng::SplitMix64::new(cfg.seed).matrix(cfg.n, cfg.d),
    };
    let problem = SimProblem::new(
        plan,
        cfg.heads,
        cfg.lambda,
        vec![BatchInputs {
            layers: vec![LayerInputs { q, k, v }],
        }],
    )?;
    Ok((problem, vec![vec![dout]]))
}

fn cmd_simulate(cfg: RunConfig) -> Result<bool, SimError> {
    let out = cfg
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("lasp-out"));
    report::ensure_dir(&out)?;

    let (problem, douts) = if cfg.fixtures.is_some() {
        load_fixture_problem(&cfg)?
    } else {
        let plan = plan_distribution(cfg.n, cfg.world, cfg.sp_size, cfg.batch)?;
        random_problem(plan, cfg.heads, cfg.lambda, cfg.layers, cfg.d, cfg.seed)?
    };

    let placements = problem.plan.placements();
    let mut world = SpWorld::new(problem, cfg.mode)?;
    if world.decay_underflow() {
        eprintln!(
            "warning: lambda^C underflowed below 1e-300 (lambda = {}, C = {}); \
             cross-chunk history is fully decayed",
            cfg.lambda,
            world.plan().chunk_size()
        );
    }
    world.run_forward()?;
    world.run_backward(&douts)?;

    for batch in 0..cfg.batch {
        for layer in 0..cfg.layers {
            let o = world.output(batch, layer)?;
            fixtures::write_matrix(&out.join(format!("output_b{batch}_l{layer}.laspt1")), &o)?;
            let g = world.gradients(batch, layer)?;
            fixtures::write_matrix(&out.join(format!("dq_b{batch}_l{layer}.laspt1")), &g.dq)?;
            fixtures::write_matrix(&out.join(format!("dk_b{batch}_l{layer}.laspt1")), &g.dk)?;
            fixtures::write_matrix(&out.join(format!("dv_b{batch}_l{layer}.laspt1")), &g.dv)?;
        }
    }

    // Data-sequence hybrid sync: average each full round of batches over groups.
    let groups = cfg.group_count();
    let full_rounds = cfg.batch / groups;
    if groups > 1 {
        for round in 0..full_rounds {
            for layer in 0..cfg.layers {
                let sets: Vec<Grads> = (0..groups)
                    .map(|g| world.gradients(round * groups + g, layer))
                    .collect::<Result<_, _>>()?;
                let mean = allreduce_mean_gradients(&sets)?;
                fixtures::write_matrix(
                    &out.join(format!("mean_dq_r{round}_l{layer}.laspt1")),
                    &mean.dq,
                )?;
                fixtures::write_matrix(
                    &out.join(format!("mean_dk_r{round}_l{layer}.laspt1")),
                    &mean.dk,
                )?;
                fixtures::write_matrix(
                    &out.join(format!("mean_dv_r{round}_l{layer}.laspt1")),
                    &mean.dv,
                )?;
            }
        }
    }

    tracefile::write_trace(&out.join("trace.jsonl"), world.trace())?;

    let params = CommParams::new(
        cfg.batch as u64,
        cfg.n as u64,
        cfg.d as u64,
        cfg.heads as u64,
        cfg.sp_size as u64,
    )?;
    let measured = comm::measure_trace(world.trace(), &params)?;

    let placement_rows: Vec<Vec<String>> = placements
        .iter()
        .map(|p| {
            vec![
                p.batch.to_string(),
                p.group.to_string(),
                p.src_rank.to_string(),
                format!("{:?}", p.ranks),
            ]
        })
        .collect();
    print!(
        "{}",
        report::render_table(&["batch", "group", "src rank", "ranks"], &placement_rows)
    );
    println!(
        "messages: {} forward + {} backward, {} elements each; artifacts in {}",
        measured.forward_messages,
        measured.backward_messages,
        measured.elements_per_message,
        out.display()
    );

    let placements_json: Vec<_> = placements
        .iter()
        .map(|p| {
            json!({
                "batch": p.batch,
                "group": p.group,
                "src_rank": p.src_rank,
                "ranks": p.ranks,
            })
        })
        .collect();
    report::write_json(
        &out.join("summary.json"),
        &json!({
            "config": cfg.to_json(),
            "placements": placements_json,
            "chunk_size": world.plan().chunk_size(),
            "lambda_pow_c_underflow": world.decay_underflow(),
            "messages": {
                "forward": measured.forward_messages,
                "backward": measured.backward_messages,
                "elements_per_message": measured.elements_per_message,
                "total_bytes": measured.total_bytes(),
            },
            "full_rounds_averaged": if groups > 1 { full_rounds } else { 0 },
        }),
    )?;
    Ok(true)
}

fn cmd_comm_report(
    cfg: RunConfig,
    trace: Option<PathBuf>,
    method: Option<String>,
) -> Result<bool, SimError> {
    let params = CommParams::new(
        cfg.batch as u64,
        cfg.n as u64,
        cfg.d as u64,
        cfg.heads as u64,
        cfg.sp_size as u64,
    )?;
    let mut rows = comm::volume_rows(&params)?;
    if let Some(filter) = &method {
        let wanted = comm::SpMethod::parse(filter).map_err(|e| SimError::Config {
            detail: e.to_string(),
        })?;
        rows.retain(|r| r.method == wanted);
    }
    let crossover = comm::crossover_check(&params)?;
    let measured = match &trace {
        Some(path) => Some(comm::measure_trace(&tracefile::read_trace(path)?, &params)?),
        None => None,
    };

    let table_rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.method.name().to_string(),
                r.full_elements.to_string(),
                (r.full_elements * 8).to_string(),
                r.simplified_elements.to_string(),
            ]
        })
        .collect();
    print!(
        "{}",
        report::render_table(
            &["method", "elements/layer", "bytes/layer", "simplified"],
            &table_rows
        )
    );
    let verdict = if crossover.lasp_strictly_lowest {
        "LASP has the strictly lowest simplified volume"
    } else if crossover.lasp_tied_lowest {
        "LASP ties for the lowest simplified volume"
    } else {
        "LASP does not have the lowest simplified volume"
    };
    println!(
        "crossover (N/T = {}): {}",
        params.seq_len / params.sp_size,
        verdict
    );
    if let Some(m) = &measured {
        println!(
            "measured: {} fwd + {} bwd messages of {} elements ({} bytes total)",
            m.forward_messages,
            m.backward_messages,
            m.elements_per_message,
            m.total_bytes()
        );
    }

    if let Some(out) = &cfg.out {
        report::ensure_dir(out)?;
        report::write_json(
            &out.join("comm_report.json"),
            &report::comm_rows_json(&params, &rows, &crossover, measured.as_ref()),
        )?;
        std::fs::write(out.join("comm_report.csv"), report::comm_rows_csv(&rows))?;
    }
    Ok(true)
}

fn cmd_bench(cfg: RunConfig, sweep: &[usize]) -> Result<bool, SimError> {
    if sweep.is_empty() {
        return Err(SimError::Config {
            detail: "bench needs a non-empty --sweep of sequence lengths".into(),
        });
    }
    let mut rows = Vec::new();
    let mut csv = String::from("n,sp_size,chunk_size,forward_backward_seconds,tokens_per_second\n");
    for &n in sweep {
        if n == 0 || n % cfg.sp_size != 0 {
            return Err(SimError::Config {
                detail: format!(
                    "sweep value {n} is not divisible by sequence-parallel size {}",
                    cfg.sp_size
                ),
            });
        }
        let plan = plan_distribution(n, cfg.world, cfg.sp_size, cfg.batch)?;
        let (problem, douts) =
            random_problem(plan, cfg.heads, cfg.lambda, cfg.layers, cfg.d, cfg.seed)?;
        let start = Instant::now();
        let mut world = SpWorld::new(problem, cfg.mode)?;
        world.run_forward()?;
        world.run_backward(&douts)?;
        let secs = start.elapsed().as_secs_f64();
        let tokens = (n * cfg.batch * cfg.layers) as f64 / secs;
        rows.push(vec![
            n.to_string(),
            cfg.sp_size.to_string(),
            (n / cfg.sp_size).to_string(),
            format!("{secs:.4}"),
            format!("{tokens:.0}"),
        ]);
        csv.push_str(&format!(
            "{n},{},{},{secs:.6},{tokens:.1}\n",
            cfg.sp_size,
            n / cfg.sp_size
        ));
    }
    print!(
        "{}",
        report::render_table(
            &["n", "T", "C", "fwd+bwd seconds", "tokens/s"],
            &rows
        )
    );
    println!("note: single-process CPU simulation timings, not device throughput");
    if let Some(out) = &cfg.out {
        report::ensure_dir(out)?;
        std::fs::write(out.join("bench.csv"), csv)?;
    }
    Ok(true)
}
