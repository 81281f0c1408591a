use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use nmfnet::bench::{bench_backward, emit_report, parse_arms, BenchConfig};
use nmfnet::classic::factorize;
use nmfnet::experiment::{self, mean_accuracy, Protocol};
use nmfnet::gradcheck::{run_gradcheck, table_header};
use nmfnet::io::{load_checkpoint, load_cifar10, load_cifar10_subset, load_cifar10_test, load_config, read_matrix, save_checkpoint, write_matrix, Dataset, RunConfig};
use nmfnet::network::{build, NetworkConfig, Preset};
use nmfnet::train::{evaluate, fit};

#[derive(Parser)]
#[command(name = "nmfnet", version, about = "NMF networks: factorization, training, gradient checks and benchmarks")]
struct Cli {
    /// Worker threads for data-parallel work (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Factorize a non-negative matrix (rows are samples) with KL-NMF.
    Factorize(FactorizeArgs),
    /// Finite-difference checks of the NMF layer derivatives.
    Gradcheck {
        #[arg(long, default_value_t = 50)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a network on CIFAR-10.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the CIFAR-10 test set.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Backward-pass time and memory of cnn, unrolled and approximate arms.
    Bench(BenchArgs),
    /// Parameter counts over widths and group counts.
    Sweep {
        #[arg(long, default_value = "cnn,cnmf,cnn_mix,cnmf_mix")]
        presets: String,
        #[arg(long, default_value = "1,2,4,8")]
        widths: String,
        #[arg(long, default_value = "1,2,4,8,16")]
        groups: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// The subset protocol: all presets plus the local-NMF baseline, several seeds.
    Protocol(ProtocolArgs),
}

#[derive(Args)]
struct FactorizeArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    rank: usize,
    #[arg(long, default_value_t = 200)]
    iters: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory receiving W.csv and H.csv.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Use only the first K training images of each class.
    #[arg(long)]
    per_class: Option<usize>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value = "S=1600,I=64,N=20/40/80,B=32")]
    layer: String,
    #[arg(long, default_value = "cnn,unrolled,approx")]
    arms: String,
    #[arg(long, default_value_t = 11)]
    reps: usize,
    #[arg(long, default_value_t = 3)]
    warmup: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Memory budget of the unrolled arm in bytes.
    #[arg(long)]
    budget: Option<usize>,
    /// Threads inside the benchmark (1 keeps timings stable).
    #[arg(long, default_value_t = 1)]
    bench_threads: usize,
    #[arg(long, default_value = "report.csv")]
    out: PathBuf,
}

#[derive(Args)]
struct ProtocolArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 500)]
    per_class: usize,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value = "0,1,2")]
    seeds: String,
    #[arg(long)]
    nmf_iters: Option<usize>,
}

fn parse_list<T: std::str::FromStr>(s: &str) -> Result<Vec<T>>
where
    T::Err: std::error::Error + Send + Sync + 'static,
{
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| p.trim().parse::<T>().with_context(|| format!("bad list item `{p}`")))
        .collect()
}

fn cmd_factorize(a: &FactorizeArgs) -> Result<()> {
    let x = read_matrix(&a.input)?;
    let fac = factorize(&x, a.rank, a.iters, a.seed)?;
    fs::create_dir_all(&a.out)?;
    write_matrix(&a.out.join("W.csv"), &fac.w)?;
    write_matrix(&a.out.join("H.csv"), &fac.h)?;
    println!("round,divergence");
    for (k, d) in fac.divergence_history.iter().enumerate() {
        println!("{k},{d:.12e}");
    }
    Ok(())
}

fn cmd_gradcheck(instances: usize, seed: u64) -> Result<bool> {
    let rows = run_gradcheck(instances, seed)?;
    println!("{}", table_header());
    for r in &rows {
        println!("{r}");
    }
    Ok(rows.iter().all(|r| r.passed()))
}

fn load_data(dir: &Path, per_class: Option<usize>) -> Result<(Dataset, Dataset)> {
    let sets = match per_class {
        Some(k) => load_cifar10_subset(dir, k),
        None => load_cifar10(dir),
    };
    sets.with_context(|| format!("reading CIFAR-10 from {}", dir.display()))
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let cfg = match &a.config {
        Some(p) => load_config(p)?,
        None => RunConfig::default(),
    };
    let (train, test) = load_data(&a.data, a.per_class)?;
    let (tr, val) = train.stratified_split(cfg.train.val_fraction, cfg.train.seed)?;
    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join("config.toml"), cfg.to_toml()?)?;
    let mut model = build::<f64>(&cfg.network, cfg.train.seed)?;
    println!(
        "{} parameters, {} train / {} val / {} test images",
        model.param_count(),
        tr.len(),
        val.len(),
        test.len()
    );
    let report = fit(&mut model, &tr, &val, &cfg.train, |r| {
        println!(
            "epoch {:>3}  train {:.4}  val {:.4}  acc {:.4}  lr {:.1e}  {:.1}s",
            r.epoch, r.train_loss, r.val_loss, r.val_acc, r.lr, r.seconds
        );
    })?;
    report.write_csv(&a.out.join("report.csv"))?;
    let test_eval = evaluate(&model, &test, &cfg.train.loss(), cfg.train.eval_batch_size)?;
    let mut summary = report.summary_json();
    summary["test_loss"] = test_eval.loss.into();
    summary["test_acc"] = test_eval.accuracy.into();
    fs::write(a.out.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    save_checkpoint(&a.out.join("best.ckpt"), &model, &summary)?;
    println!(
        "best epoch {} (val acc {:.4}), test acc {:.4}",
        report.best_epoch, report.best_val_acc, test_eval.accuracy
    );
    Ok(())
}

fn cmd_eval(checkpoint: &Path, data: &Path) -> Result<()> {
    let (model, _) = load_checkpoint::<f64>(checkpoint)?;
    let test = load_cifar10_test(data).with_context(|| format!("reading CIFAR-10 from {}", data.display()))?;
    let ev = evaluate(&model, &test, &Default::default(), 256)?;
    println!("test loss {:.6}  test acc {:.4}  ({} images)", ev.loss, ev.accuracy, test.len());
    Ok(())
}

fn cmd_bench(a: &BenchArgs) -> Result<()> {
    let mut cfg = BenchConfig {
        layer: a.layer.parse()?,
        arms: parse_arms(&a.arms)?,
        repetitions: a.reps,
        warmup: a.warmup,
        seed: a.seed,
        threads: a.bench_threads,
        ..BenchConfig::default()
    };
    if let Some(b) = a.budget {
        cfg.budget_bytes = b;
    }
    let report = bench_backward(&cfg)?;
    print!("{}", emit_report(&report, &a.out)?);
    Ok(())
}

fn cmd_sweep(presets: &str, widths: &str, groups: &str, out: Option<&Path>) -> Result<()> {
    let presets: Vec<Preset> = parse_list(presets)?;
    let widths: Vec<usize> = parse_list(widths)?;
    let groups: Vec<usize> = parse_list(groups)?;
    let mut csv = String::from("preset,width,groups,params\n");
    for &p in &presets {
        for &w in &widths {
            for &g in &groups {
                let cfg = NetworkConfig::preset(p, w, g);
                let cell = match build::<f64>(&cfg, 0) {
                    Ok(m) => m.param_count().to_string(),
                    Err(e) => {
                        eprintln!("{p} width {w} groups {g}: {e}");
                        "invalid".into()
                    }
                };
                csv.push_str(&format!("{p},{w},{g},{cell}\n"));
            }
        }
    }
    match out {
        Some(path) => fs::write(path, &csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn cmd_protocol(a: &ProtocolArgs) -> Result<()> {
    let proto = Protocol {
        per_class: a.per_class,
        epochs: a.epochs,
        seeds: parse_list(&a.seeds)?,
        nmf_iters: a.nmf_iters,
        ..Protocol::default()
    };
    let mut arms: Vec<experiment::Arm> = Preset::ALL.iter().map(|&p| experiment::Arm::Backprop(p)).collect();
    arms.push(experiment::Arm::Local);
    fs::create_dir_all(&a.out)?;
    let runs = proto.run_all(&a.data, &arms, |r| {
        println!("{:<15} seed {}  test acc {:.4}", r.arm.to_string(), r.seed, r.test_accuracy);
        let path = a.out.join(format!("{}_seed{}.csv", r.arm, r.seed));
        if let Err(e) = r.report.write_csv(&path) {
            eprintln!("{}: {e}", path.display());
        }
    })?;
    let mut csv = String::from("arm,seed,test_acc\n");
    for r in &runs {
        csv.push_str(&format!("{},{},{}\n", r.arm, r.seed, r.test_accuracy));
    }
    fs::write(a.out.join("protocol.csv"), csv)?;
    for &arm in &arms {
        if let Some(m) = mean_accuracy(&runs, arm) {
            println!("{:<15} mean test acc {:.4}", arm.to_string(), m);
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!("--threads must be positive");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    match &cli.command {
        Command::Factorize(a) => cmd_factorize(a)?,
        Command::Gradcheck { instances, seed } => return cmd_gradcheck(*instances, *seed),
        Command::Train(a) => cmd_train(a)?,
        Command::Eval { checkpoint, data } => cmd_eval(checkpoint, data)?,
        Command::Bench(a) => cmd_bench(a)?,
        Command::Sweep {
            presets,
            widths,
            groups,
            out,
        } => cmd_sweep(presets, widths, groups, out.as_deref())?,
        Command::Protocol(a) => cmd_protocol(a)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
