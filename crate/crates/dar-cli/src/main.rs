//! `dar` — train, sample, evaluate, and dissect the routed diffusion models.
//!
//! Every subcommand resolves its configuration the same way: built-in
//! defaults, then `--config file`, then trailing `key=value` overrides; the
//! fully resolved table is written to `<out>/manifest.json` so a run is
//! reproducible from its artifacts alone. Checkpoint-consuming commands take
//! the model shape from the checkpoint and reject explicit overrides that
//! contradict it.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use dar_lab::backbone::Model;
use dar_lab::checkpoint::{load_checkpoint, save_checkpoint, Loaded};
use dar_lab::config::{Config, Settings};
use dar_lab::cost;
use dar_lab::diagnostics::{
    gate_gradients, make_diag_batch, routing_map, state_profiles, t_grid, timestep_probe,
    ProbeResult,
};
use dar_lab::eval::evaluate;
use dar_lab::fused;
use dar_lab::plot::line_plot;
use dar_lab::router::{RouteMode, RouterConfig};
use dar_lab::sample::generate;
use dar_lab::train;

#[derive(Parser)]
#[command(name = "dar", version, about = "diffusion-adaptive routing lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model (or a sweep of routing variants) and write curves + checkpoint.
    Train(TrainArgs),
    /// Draw samples from a checkpoint.
    Sample(CkptArgs),
    /// Validation MSE and two-sample distances for a checkpoint.
    Evaluate(CkptArgs),
    /// Emit diagnostics.csv, gates.csv, routing.csv, and probe.csv for a checkpoint.
    Diagnose(DiagnoseArgs),
    /// Timestep-decoding ridge probe for a checkpoint.
    Probe(CkptArgs),
    /// Chunk-size cost curve and closed-form minimizer.
    CostModel(CostArgs),
    /// Micro-benchmark of the fused streaming aggregator vs the reference.
    BenchAgg(BenchArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Line-oriented `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for artifacts and the manifest.
    #[arg(long, default_value = "run")]
    out: PathBuf,
    /// Inline overrides applied after the config file.
    #[arg(value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Also write an SVG of the validation curves.
    #[arg(long)]
    svg: bool,
}

#[derive(Args)]
struct CkptArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct DiagnoseArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Also write SVG line plots next to the CSVs.
    #[arg(long)]
    svg: bool,
    /// Additionally sweep the state profiles over the t grid
    /// (diagnostics_sweep.csv) instead of only the configured diag.t.
    #[arg(long)]
    sweep_t: bool,
}

#[derive(Args)]
struct CostArgs {
    /// Total sublayer count L.
    #[arg(long = "L", value_name = "N")]
    l: usize,
    /// Summary-coarseness weight in (0,1).
    #[arg(long)]
    alpha: f64,
    /// Tabulate S* across an alpha grid instead of a single point.
    #[arg(long)]
    sweep: bool,
    #[arg(long, default_value = "run")]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    /// Source counts to benchmark.
    #[arg(long, value_delimiter = ',', default_values_t = vec![1usize, 4, 16, 57, 128])]
    n: Vec<usize>,
    /// Model width.
    #[arg(long, default_value_t = 64)]
    d: usize,
    /// Timing repetitions (minimum is reported).
    #[arg(long, default_value_t = 7)]
    reps: usize,
    #[arg(long, default_value = "run")]
    out: PathBuf,
}

fn main() {
    if let Err(err) = run() {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}

fn run() -> Result<()> {
    match Cli::parse().command {
        Command::Train(args) => cmd_train(args),
        Command::Sample(args) => cmd_sample(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Diagnose(args) => cmd_diagnose(args),
        Command::Probe(args) => cmd_probe(args),
        Command::CostModel(args) => cmd_cost_model(args),
        Command::BenchAgg(args) => cmd_bench_agg(args),
    }
}

/// Defaults → config file → inline overrides. Returns the resolved config
/// plus the set of keys the user touched explicitly.
fn resolve(args: &ConfigArgs) -> Result<(Config, BTreeSet<String>)> {
    let mut cfg = Config::default();
    let mut explicit = BTreeSet::new();
    if let Some(path) = &args.config {
        let before = cfg.clone();
        cfg.read_file(path)?;
        for (k, v) in cfg.entries() {
            if before.get(k) != v {
                explicit.insert(k.to_string());
            }
        }
    }
    for pair in &args.overrides {
        let Some((k, v)) = pair.split_once('=') else {
            bail!("override `{pair}` is not of the form key=value");
        };
        let (k, v) = (k.trim(), v.trim());
        cfg.set(k, v)
            .with_context(|| format!("override `{pair}`"))?;
        explicit.insert(k.to_string());
    }
    Ok((cfg, explicit))
}

fn write_artifact(dir: &Path, name: &str, contents: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)
        .with_context(|| format!("creating output directory {}", dir.display()))?;
    let path = dir.join(name);
    std::fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

fn write_manifest(dir: &Path, cfg: &Config) -> Result<()> {
    write_artifact(dir, "manifest.json", &cfg.manifest_json())?;
    Ok(())
}

/// Load a checkpoint, reject explicit schema overrides that contradict it,
/// and fold its model/router keys into the working config.
fn open_checkpoint(
    path: &Path,
    cfg: &mut Config,
    explicit: &BTreeSet<String>,
) -> Result<Loaded<f32>> {
    let loaded = load_checkpoint::<f32>(path)
        .with_context(|| format!("loading checkpoint {}", path.display()))?;
    for key in explicit {
        if !(key.starts_with("model.") || key.starts_with("router.")) {
            continue;
        }
        let current = cfg.get(key).to_string();
        match loaded.echo.get(key) {
            Some(stored) if *stored == current => {}
            Some(stored) => bail!(
                "config/checkpoint mismatch at `{key}`: checkpoint has `{stored}`, requested `{current}`"
            ),
            None => bail!("config/checkpoint mismatch: checkpoint does not record `{key}`"),
        }
    }
    cfg.adopt_schema(&loaded.echo)
        .context("adopting checkpoint schema")?;
    Ok(loaded)
}

fn route_key_values(route: &RouterConfig) -> [(&'static str, String); 4] {
    let mode = match route.mode {
        RouteMode::Standard => "standard",
        RouteMode::UnetSkip => "unet_skip",
        RouteMode::Dar => "dar",
    };
    let query = match route.query {
        dar_lab::router::QueryVariant::Static => "static",
        dar_lab::router::QueryVariant::ExplicitT => "explicit_t",
        dar_lab::router::QueryVariant::Dynamic => "dynamic",
    };
    let pooling = match route.pooling {
        dar_lab::router::Pooling::PerToken => "per_token",
        dar_lab::router::Pooling::MeanPooled => "mean_pooled",
    };
    [
        ("router.mode", mode.to_string()),
        ("router.query", query.to_string()),
        ("router.chunk", route.chunk.to_string()),
        ("router.pooling", pooling.to_string()),
    ]
}

fn curves_csv(run: &train::TrainRun<f32>) -> (String, String) {
    let mut loss = String::from("step,loss\n");
    for (step, l) in &run.loss_curve {
        let _ = writeln!(loss, "{step},{l}");
    }
    let mut val = String::from("step,val_mse\n");
    for (step, v) in &run.val_curve {
        let _ = writeln!(val, "{step},{v}");
    }
    (loss, val)
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let (cfg, _) = resolve(&args.cfg)?;
    let out = &args.cfg.out;
    write_manifest(out, &cfg)?;
    let settings: Settings = cfg.settings()?;

    if settings.sweep.is_empty() {
        let run = train::train::<f32>(&settings).context("training failed")?;
        let (loss, val) = curves_csv(&run);
        write_artifact(out, "loss.csv", &loss)?;
        write_artifact(out, "val.csv", &val)?;
        save_checkpoint(
            &out.join("checkpoint.bin"),
            &run.model,
            Some(&run.opt),
            settings.train.steps as u64,
            Some(&run.rng),
            &cfg.schema_echo(),
        )?;
        let (step, mse) = *run.val_curve.last().expect("non-empty val curve");
        println!("trained {step} steps; final val MSE {mse:.6}");
        if args.svg {
            let series = vec![(
                "val_mse".to_string(),
                run.val_curve.iter().map(|&(s, v)| (s as f64, v)).collect(),
            )];
            write_artifact(
                out,
                "val.svg",
                &line_plot("validation MSE", "step", "mse", &series),
            )?;
        }
        return Ok(());
    }

    // Sweep: one run per routing variant, shared data/seeds, combined curve.
    let mut combined = String::from("label,step,val_mse\n");
    let mut series = Vec::new();
    for entry in &settings.sweep {
        let mut sub = settings.clone();
        sub.route = entry.route.clone();
        sub.sweep.clear();
        let run = train::train::<f32>(&sub)
            .with_context(|| format!("training sweep entry `{}`", entry.label))?;
        let (loss, val) = curves_csv(&run);
        write_artifact(out, &format!("loss_{}.csv", entry.label), &loss)?;
        write_artifact(out, &format!("val_{}.csv", entry.label), &val)?;

        let mut echo = cfg.schema_echo();
        for (k, v) in route_key_values(&entry.route) {
            echo.insert(k.to_string(), v);
        }
        save_checkpoint(
            &out.join(format!("checkpoint_{}.bin", entry.label)),
            &run.model,
            Some(&run.opt),
            sub.train.steps as u64,
            Some(&run.rng),
            &echo,
        )?;
        for (step, v) in &run.val_curve {
            let _ = writeln!(combined, "{},{step},{v}", entry.label);
        }
        let (step, mse) = *run.val_curve.last().expect("non-empty val curve");
        println!("{}: {step} steps, final val MSE {mse:.6}", entry.label);
        series.push((
            entry.label.clone(),
            run.val_curve.iter().map(|&(s, v)| (s as f64, v)).collect(),
        ));
    }
    write_artifact(out, "convergence.csv", &combined)?;
    if args.svg {
        write_artifact(
            out,
            "convergence.svg",
            &line_plot("validation MSE by variant", "step", "mse", &series),
        )?;
    }
    Ok(())
}

fn cmd_sample(args: CkptArgs) -> Result<()> {
    let (mut cfg, explicit) = resolve(&args.cfg)?;
    let loaded = open_checkpoint(&args.checkpoint, &mut cfg, &explicit)?;
    write_manifest(&args.cfg.out, &cfg)?;
    let settings = cfg.settings()?;

    let s = &settings.sample;
    let samples = generate(&loaded.model, s.n, s.seed, s.cfg, s.steps);
    let mut csv = String::from("id,class");
    for p in 0..dar_lab::data::PIXELS {
        let _ = write!(csv, ",p{p}");
    }
    csv.push('\n');
    for (i, (class, img)) in samples.iter().enumerate() {
        let _ = write!(csv, "{i},{class}");
        for v in img {
            let _ = write!(csv, ",{v}");
        }
        csv.push('\n');
    }
    let path = write_artifact(&args.cfg.out, "samples.csv", &csv)?;
    println!(
        "wrote {} samples ({} ODE steps, cfg {}) to {}",
        s.n,
        s.steps,
        s.cfg,
        path.display()
    );
    Ok(())
}

fn cmd_evaluate(args: CkptArgs) -> Result<()> {
    let (mut cfg, explicit) = resolve(&args.cfg)?;
    let loaded = open_checkpoint(&args.checkpoint, &mut cfg, &explicit)?;
    write_manifest(&args.cfg.out, &cfg)?;
    let settings = cfg.settings()?;

    let report = evaluate(&loaded.model, &settings);
    let json = serde_json::json!({
        "val_mse": report.val_mse,
        "mmd": report.mmd,
        "energy_distance": report.energy,
        "per_class": report.per_class.iter().map(|c| serde_json::json!({
            "class": c.class,
            "mmd": c.mmd,
            "energy_distance": c.energy,
            "n_generated": c.n_gen,
            "n_reference": c.n_ref,
        })).collect::<Vec<_>>(),
    });
    write_artifact(
        &args.cfg.out,
        "report.json",
        &serde_json::to_string_pretty(&json).expect("report serializes"),
    )?;
    println!(
        "val MSE {:.6}  MMD {:.6}  energy {:.6}",
        report.val_mse, report.mmd, report.energy
    );
    Ok(())
}

fn probe_csv(probe: &ProbeResult) -> String {
    let mut csv = String::from("depth,stream,r2\n");
    let _ = writeln!(csv, "0,baseline,{}", probe.baseline_r2);
    let _ = writeln!(csv, "0,control,{}", probe.control_r2);
    for row in &probe.rows {
        let _ = writeln!(csv, "{},{},{}", row.block, row.stream, row.r2);
    }
    csv
}

fn run_probe(model: &Model<f32>, settings: &Settings) -> ProbeResult {
    let pairs = make_diag_batch(settings.probe.seed, settings.probe.pairs);
    let grid = t_grid(settings.diag.t_points);
    timestep_probe(
        model,
        &pairs,
        &grid,
        settings.probe.lambda,
        settings.probe.train_frac,
    )
}

fn cmd_diagnose(args: DiagnoseArgs) -> Result<()> {
    let (mut cfg, explicit) = resolve(&args.cfg)?;
    let loaded = open_checkpoint(&args.checkpoint, &mut cfg, &explicit)?;
    write_manifest(&args.cfg.out, &cfg)?;
    let settings = cfg.settings()?;
    let out = &args.cfg.out;
    let model = &loaded.model;

    let batch = make_diag_batch(settings.data.seed, settings.diag.samples);
    let grid = t_grid(settings.diag.t_points);

    // diagnostics.csv: per-block profiles at the configured t.
    let profile = state_profiles(model, &batch, settings.diag.t, 1.0);
    let mut diag = String::from("block,rms_fwd,rms_grad,cos_sim\n");
    for k in 0..profile.rms_fwd.len() {
        let cos = profile
            .cos_sim
            .get(k)
            .map(|c| c.to_string())
            .unwrap_or_default();
        let _ = writeln!(diag, "{},{},{},{cos}", k + 1, profile.rms_fwd[k], profile.rms_grad[k]);
    }
    write_artifact(out, "diagnostics.csv", &diag)?;

    if args.sweep_t {
        let mut sweep = String::from("t,block,rms_fwd,rms_grad,cos_sim\n");
        for &t in &grid {
            let p = state_profiles(model, &batch, t, 1.0);
            for k in 0..p.rms_fwd.len() {
                let cos = p.cos_sim.get(k).map(|c| c.to_string()).unwrap_or_default();
                let _ = writeln!(sweep, "{t},{},{},{},{cos}", k + 1, p.rms_fwd[k], p.rms_grad[k]);
            }
        }
        write_artifact(out, "diagnostics_sweep.csv", &sweep)?;
    }

    // gates.csv: counterfactual importances, defined on the standard stream.
    let mut gates = String::from("layer,source,t,grad\n");
    let mut gate_cells = Vec::new();
    if model.route_cfg.mode == RouteMode::Standard {
        gate_cells = gate_gradients(model, &batch, &grid);
        for c in &gate_cells {
            let _ = writeln!(gates, "{},{},{},{}", c.consumer, c.source, c.t, c.grad);
        }
    }
    write_artifact(out, "gates.csv", &gates)?;

    // routing.csv: learned weights, defined on softmax routing.
    let mut routing = String::from("layer,source,t,weight\n");
    let mut route_cells = Vec::new();
    if model.route_cfg.mode == RouteMode::Dar {
        route_cells = routing_map(model, &batch, &grid);
        for c in &route_cells {
            let _ = writeln!(routing, "{},{},{},{}", c.consumer, c.origin, c.t, c.weight);
        }
    }
    write_artifact(out, "routing.csv", &routing)?;

    let probe = run_probe(model, &settings);
    write_artifact(out, "probe.csv", &probe_csv(&probe))?;

    if args.svg {
        let blocks: Vec<f64> = (1..=profile.rms_fwd.len()).map(|k| k as f64).collect();
        let series = vec![
            (
                "rms_fwd".to_string(),
                blocks.iter().zip(&profile.rms_fwd).map(|(&b, &v)| (b, v)).collect(),
            ),
            (
                "rms_grad_x100".to_string(),
                blocks.iter().zip(&profile.rms_grad).map(|(&b, &v)| (b, 100.0 * v)).collect(),
            ),
            (
                "cos_to_next".to_string(),
                blocks[..profile.cos_sim.len()]
                    .iter()
                    .zip(&profile.cos_sim)
                    .map(|(&b, &v)| (b, v))
                    .collect(),
            ),
        ];
        write_artifact(
            out,
            "diagnostics.svg",
            &line_plot("state profiles", "block", "value", &series),
        )?;

        // For the t-resolved maps, plot the final consumer's edges.
        let final_consumer = |cells: &[(usize, usize, f64, f64)]| -> Vec<(String, Vec<(f64, f64)>)> {
            let top = cells.iter().map(|c| c.0).max().unwrap_or(0);
            let mut sources: Vec<usize> = cells.iter().filter(|c| c.0 == top).map(|c| c.1).collect();
            sources.sort_unstable();
            sources.dedup();
            sources
                .into_iter()
                .map(|s| {
                    (
                        format!("source {s}"),
                        cells
                            .iter()
                            .filter(|c| c.0 == top && c.1 == s)
                            .map(|c| (c.2, c.3))
                            .collect(),
                    )
                })
                .collect()
        };
        if !gate_cells.is_empty() {
            let cells: Vec<_> = gate_cells
                .iter()
                .map(|c| (c.consumer, c.source, c.t, c.grad))
                .collect();
            write_artifact(
                out,
                "gates.svg",
                &line_plot("head gate gradients", "t", "dL/dgate", &final_consumer(&cells)),
            )?;
        }
        if !route_cells.is_empty() {
            let cells: Vec<_> = route_cells
                .iter()
                .map(|c| (c.consumer, c.origin, c.t, c.weight))
                .collect();
            write_artifact(
                out,
                "routing.svg",
                &line_plot("final aggregator weights", "t", "weight", &final_consumer(&cells)),
            )?;
        }
        let mut probe_series = vec![
            (
                "attn".to_string(),
                probe
                    .rows
                    .iter()
                    .filter(|r| r.stream == "attn")
                    .map(|r| (r.block as f64, r.r2))
                    .collect::<Vec<_>>(),
            ),
            (
                "mlp".to_string(),
                probe
                    .rows
                    .iter()
                    .filter(|r| r.stream == "mlp")
                    .map(|r| (r.block as f64, r.r2))
                    .collect::<Vec<_>>(),
            ),
        ];
        let depth = model.cfg.n_blocks as f64;
        probe_series.push((
            "baseline".to_string(),
            vec![(1.0, probe.baseline_r2), (depth, probe.baseline_r2)],
        ));
        write_artifact(
            out,
            "probe.svg",
            &line_plot("timestep decodability", "block", "test R^2", &probe_series),
        )?;
    }

    println!(
        "diagnostics for {} blocks at t={} (+{} gate cells, {} routing cells) in {}",
        model.cfg.n_blocks,
        settings.diag.t,
        gates.lines().count() - 1,
        routing.lines().count() - 1,
        out.display()
    );
    Ok(())
}

fn cmd_probe(args: CkptArgs) -> Result<()> {
    let (mut cfg, explicit) = resolve(&args.cfg)?;
    let loaded = open_checkpoint(&args.checkpoint, &mut cfg, &explicit)?;
    write_manifest(&args.cfg.out, &cfg)?;
    let settings = cfg.settings()?;

    let probe = run_probe(&loaded.model, &settings);
    write_artifact(&args.cfg.out, "probe.csv", &probe_csv(&probe))?;
    println!(
        "baseline R² {:.4}, control R² {:.6} ({} train / {} test rows)",
        probe.baseline_r2, probe.control_r2, probe.n_train, probe.n_test
    );
    for row in &probe.rows {
        println!("  block {} {:<4} R² {:.4}", row.block, row.stream, row.r2);
    }
    Ok(())
}

fn cmd_cost_model(args: CostArgs) -> Result<()> {
    let l = args.l as f64;
    let star = cost::s_star(l, args.alpha)?;
    let rec = cost::recommended_chunk(args.l, args.alpha)?;
    let verify = cost::verify_unimodal(l, args.alpha, 0.01)?;
    println!(
        "L={} alpha={}: s_star = {star:.6}, grid argmin = {:.2}, recommended divisor = {rec}",
        args.l, args.alpha, verify.argmin
    );

    let mut cost_csv = String::from("S,cost\n");
    for (s, c) in cost::cost_curve(l, args.alpha, 400)? {
        let _ = writeln!(cost_csv, "{s},{c}");
    }
    write_artifact(&args.out, "cost.csv", &cost_csv)?;

    let mut sstar_csv = String::from("L,alpha,s_star\n");
    if args.sweep {
        for k in 1..=19 {
            let alpha = k as f64 * 0.05;
            let s = cost::s_star(l, alpha)?;
            let _ = writeln!(sstar_csv, "{},{alpha},{s}", args.l);
            println!(
                "  alpha {alpha:.2}: s_star {s:.4}, divisor {}",
                cost::recommended_chunk(args.l, alpha)?
            );
        }
    } else {
        let _ = writeln!(sstar_csv, "{},{},{star}", args.l, args.alpha);
    }
    write_artifact(&args.out, "sstar.csv", &sstar_csv)?;
    Ok(())
}

fn cmd_bench_agg(args: BenchArgs) -> Result<()> {
    if args.n.is_empty() {
        bail!("need at least one source count");
    }
    let rows = fused::bench(&args.n, args.d, args.reps.max(1));
    let mut csv = String::from("N,d,ref_live,fused_live,ref_ns,fused_ns\n");
    println!("{:>6} {:>4} {:>10} {:>10} {:>12} {:>12}", "N", "d", "ref_live", "fused_live", "ref_ns", "fused_ns");
    for r in &rows {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{}",
            r.n, r.d, r.ref_live, r.fused_live, r.ref_ns, r.fused_ns
        );
        println!(
            "{:>6} {:>4} {:>10} {:>10} {:>12} {:>12}",
            r.n, r.d, r.ref_live, r.fused_live, r.ref_ns, r.fused_ns
        );
    }
    write_artifact(&args.out, "bench.csv", &csv)?;
    Ok(())
}
