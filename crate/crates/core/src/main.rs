use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use contdepth::harness::experiment::{corpus_tokens, pretrain, steer, ExperimentConfig};
use contdepth::harness::probes::{
    control_sweep, cross_solver_disagreement, latency_bench, linear_probe, max_interior_spike, nfe_probe,
    nfe_growth, nfe_strictly_increasing, probe_controls, solver_invariance_test, sweep_grid, PROBE_TAUS,
};
use contdepth::harness::report::{write_csv, Cell};
use contdepth::harness::{SteeringTask, Tokenizer};
use contdepth::model::{checkpoint, Arch, Model, TokenBatch};
use contdepth::solvers::Method;
use contdepth::Error;

#[derive(Parser)]
#[command(name = "contdepth", about = "Continuous-depth hybrid transformer experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Plain-text `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    solver: Option<Method>,
    /// Fixed-step count.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    rtol: Option<f64>,
    #[arg(long)]
    atol: Option<f64>,
    #[arg(long, default_value_t = 1.0, allow_hyphen_values = true)]
    u: f64,
    /// Input checkpoint; each subcommand has a default under `--out`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain the baseline and the hybrid on the generated corpus.
    Train(Common),
    /// Freeze the pretrained hybrid and train its ODE block to follow `u`.
    Steer(Common),
    /// Euler(4) against dopri5 trajectory divergence.
    Invariance(Common),
    /// Answer probabilities over `u` in [-2, 2].
    Sweep(Common),
    /// Step-count and linear probes.
    Probe(Common),
    /// Forward latency of baseline and hybrid.
    Bench(Common),
}

fn setup(c: &Common) -> contdepth::Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    cfg.override_solver(c.solver, c.steps, c.rtol, c.atol)?;
    std::fs::create_dir_all(&c.out).map_err(|e| Error::io(&c.out, e))?;
    Ok(cfg)
}

fn input(c: &Common, default: &str) -> PathBuf {
    c.checkpoint.clone().unwrap_or_else(|| c.out.join(default))
}

/// Load a checkpoint and apply the configured solver to it.
fn load_model(path: &Path, cfg: &ExperimentConfig) -> contdepth::Result<Model<f32>> {
    let mut m: Model<f32> = checkpoint::load(path)?;
    m.config.solver = cfg.model.solver.clone();
    Ok(m)
}

fn train(c: &Common) -> contdepth::Result<()> {
    let cfg = setup(c)?;
    let corpus = corpus_tokens(&cfg.corpus)?;
    let mut rows = Vec::new();
    for (arch, metrics, ckpt) in [
        (Arch::Hybrid, "metrics.jsonl", "model.ckpt"),
        (Arch::Baseline, "metrics_baseline.jsonl", "baseline.ckpt"),
    ] {
        let abort = c.out.join(format!("abort_{ckpt}"));
        let (model, recs) = pretrain(&cfg, arch, c.seed, &corpus, Some(&c.out.join(metrics)), Some(&abort))?;
        checkpoint::save(&model, &c.out.join(ckpt))?;
        let last = recs.last().expect("at least one step");
        println!(
            "{arch}: {} params, final loss {:.4}, exploded {}, vanished {}",
            model.param_count(),
            last.loss,
            recs.iter().filter(|r| r.exploded).count(),
            recs.iter().filter(|r| r.vanished).count()
        );
        rows.push(vec![
            Cell::from(arch.to_string().as_str()),
            Cell::from(model.param_count()),
            Cell::from(recs.len()),
            Cell::from(recs[0].loss),
            Cell::from(last.loss),
            Cell::from(recs.iter().filter(|r| r.exploded).count()),
            Cell::from(recs.iter().filter(|r| r.vanished).count()),
            Cell::from(recs[0].alpha),
            Cell::from(model.alpha()),
        ]);
    }
    write_csv(
        &c.out,
        "train",
        &["arch", "params", "steps", "first_loss", "final_loss", "exploded", "vanished", "alpha_start", "alpha_end"],
        rows,
    )?;
    Ok(())
}

fn steer_cmd(c: &Common) -> contdepth::Result<()> {
    let cfg = setup(c)?;
    let mut model = load_model(&input(c, "model.ckpt"), &cfg)?;
    let report = steer(&cfg, &mut model, Some(&c.out.join("metrics_steer.jsonl")))?;
    checkpoint::save(&model, &c.out.join("steered.ckpt"))?;
    let rows = report
        .rows
        .iter()
        .map(|r| {
            println!("u={:+.2} P(good)={:.4} P(bad)={:.4} {}", r.u, r.p_good, r.p_bad, verdict(r.success));
            vec![Cell::from(r.u), Cell::from(r.p_good), Cell::from(r.p_bad), Cell::from(verdict(r.success))]
        })
        .collect();
    write_csv(&c.out, "steering", &["u", "p_good", "p_bad", "verdict"], rows)?;
    Ok(())
}

fn verdict(ok: bool) -> &'static str {
    if ok {
        "success"
    } else {
        "fail"
    }
}

fn invariance(c: &Common) -> contdepth::Result<()> {
    let cfg = setup(c)?;
    let model = load_model(&input(c, "model.ckpt"), &cfg)?;
    let task = SteeringTask::new(&Tokenizer::default())?;
    let (batch, _) = task.batch(&task.prompts)?;
    let div = solver_invariance_test(&model, &batch, c.u)?;
    println!("trajectory divergence at u={}: {div:.6}%", c.u);
    write_csv(&c.out, "invariance", &["u", "divergence_percent"], vec![vec![Cell::from(c.u), Cell::from(div)]])?;
    Ok(())
}

fn sweep(c: &Common) -> contdepth::Result<()> {
    let cfg = setup(c)?;
    let model = load_model(&input(c, "steered.ckpt"), &cfg)?;
    let task = SteeringTask::new(&Tokenizer::default())?;
    let report = control_sweep(&model, &task, &sweep_grid(), &cfg.model.solver)?;
    println!("max p_good drop {:.4}, monotone {}", report.max_drop, report.monotone);
    let rows = report
        .rows
        .iter()
        .map(|r| vec![Cell::from(r.u), Cell::from(r.p_good), Cell::from(r.p_bad)])
        .collect();
    write_csv(&c.out, "sweep", &["u", "p_good", "p_bad"], rows)?;
    Ok(())
}

fn probe(c: &Common) -> contdepth::Result<()> {
    let cfg = setup(c)?;
    let model = load_model(&input(c, "steered.ckpt"), &cfg)?;
    let task = SteeringTask::new(&Tokenizer::default())?;
    let (cells, scaling) = nfe_probe(&model, &task, &cfg.probe)?;
    let rows = cells
        .iter()
        .map(|x| {
            vec![
                Cell::from(x.u),
                Cell::from(x.solver.as_str()),
                Cell::from(x.rtol),
                Cell::from(x.atol),
                Cell::from(x.accepted_steps),
                Cell::from(x.rejected_steps),
                Cell::from(x.nfe),
                Cell::from(x.error.as_deref()),
            ]
        })
        .collect();
    write_csv(
        &c.out,
        "nfe",
        &["u", "solver", "rtol", "atol", "accepted_steps", "rejected_steps", "nfe", "error"],
        rows,
    )?;
    let rows = scaling
        .iter()
        .map(|r| vec![Cell::from(r.rtol), Cell::from(r.atol), Cell::from(r.accepted_steps), Cell::from(r.nfe)])
        .collect();
    write_csv(&c.out, "tolerance", &["rtol", "atol", "accepted_steps", "nfe"], rows)?;
    let acc = linear_probe(&model, &task, &probe_controls(), &PROBE_TAUS, c.seed)?;
    let rows = acc.iter().map(|&(t, a)| vec![Cell::from(t), Cell::from(a)]).collect();
    write_csv(&c.out, "probe", &["tau", "accuracy_percent"], rows)?;
    if let Some(d) = cross_solver_disagreement(&cells, Method::Dopri5, Method::AdaptiveHeun) {
        println!("max dopri5/adaptive_heun accepted-step disagreement {:.1}%", 100.0 * d);
    }
    println!(
        "accepted steps strictly increasing with tolerance: {}; growth over 1000x tighter {:?}",
        nfe_strictly_increasing(&scaling),
        nfe_growth(&scaling)
    );
    println!("probe accuracy by tau: {acc:?}; max interior spike {:.1}", max_interior_spike(&acc));
    Ok(())
}

fn bench(c: &Common) -> contdepth::Result<()> {
    let cfg = setup(c)?;
    let seed = c.seed;
    let hybrid = load_or_fresh(&input(c, "model.ckpt"), &cfg, Arch::Hybrid, seed)?;
    let baseline = load_or_fresh(&c.out.join("baseline.ckpt"), &cfg, Arch::Baseline, seed)?;
    let seq = cfg.model.max_seq_len;
    let tokens = corpus_tokens(&cfg.corpus)?;
    let need = cfg.bench_batch * seq;
    let batch = TokenBatch::new(tokens[..need.min(tokens.len())].to_vec(), cfg.bench_batch, seq)?;
    let r = latency_bench(&baseline, &hybrid, &batch, &cfg.model.solver, cfg.bench_warmup, cfg.bench_trials)?;
    println!(
        "baseline {:.2}±{:.2} ms, hybrid {:.2}±{:.2} ms, ratio {:.3} (pinned: {})",
        r.baseline.median_ms, r.baseline.std_ms, r.hybrid.median_ms, r.hybrid.std_ms, r.ratio, r.pinned
    );
    write_csv(
        &c.out,
        "latency",
        &["model", "median_ms", "std_ms", "relative"],
        vec![
            vec![Cell::from("baseline"), Cell::from(r.baseline.median_ms), Cell::from(r.baseline.std_ms), Cell::from(1.0)],
            vec![Cell::from("hybrid"), Cell::from(r.hybrid.median_ms), Cell::from(r.hybrid.std_ms), Cell::from(r.ratio)],
        ],
    )?;
    Ok(())
}

/// Latency does not depend on trained weights, so a fresh model stands in
/// for a missing checkpoint.
fn load_or_fresh(path: &Path, cfg: &ExperimentConfig, arch: Arch, seed: u64) -> contdepth::Result<Model<f32>> {
    if path.exists() {
        load_model(path, cfg)
    } else {
        Model::new(cfg.model.clone().with_arch(arch), seed)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(c) => train(c),
        Command::Steer(c) => steer_cmd(c),
        Command::Invariance(c) => invariance(c),
        Command::Sweep(c) => sweep(c),
        Command::Probe(c) => probe(c),
        Command::Bench(c) => bench(c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_solver_failure() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
