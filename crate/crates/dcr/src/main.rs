use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dcr::ada::{prepare_inputs, train_ada};
use dcr::afd::{train_afd, Pathway};
use dcr::datagen::{save_dataset, SplitName};
use dcr::eval::ablation::{ablation_runner, parse_variants};
use dcr::eval::csv::{num, Table};
use dcr::eval::{action_distribution, topk_confidence_curve};
use dcr::pipeline::{
    action_table, ada_checkpoint, ada_history_table, afd_checkpoint, afd_history_table,
    conflict_table, general_encoder, load_checkpoint, load_or_generate, metrics_table,
    pathway_predictions, prepare_out, restore_ada, restore_afd, run_sequential, save_checkpoint,
    score, stage_splits, RunConfig, SeedResult,
};
use dcr::{Error, Result};

#[derive(Parser)]
#[command(
    name = "dcr",
    version,
    about = "Dual-path conflict resolution on synthetic multimodal data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration (`key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Use only this seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (a file path for `generate`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dataset file written by `generate`.
    #[arg(long)]
    dataset: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset and its split index.
    Generate(Common),
    /// Train the experts and write their checkpoint.
    TrainAfd(Common),
    /// Train the agent over a frozen expert checkpoint.
    TrainAda {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        afd: PathBuf,
    },
    /// Both stages for every seed, with result tables.
    Run(Common),
    /// Score saved checkpoints on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        afd: PathBuf,
        #[arg(long)]
        ada: Option<PathBuf>,
        /// k for the top-k confidence table.
        #[arg(long, default_value_t = 2)]
        k: usize,
    },
    /// Compare variants under shared seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated, e.g. `full,afd_only,ada_only,neither`.
        #[arg(long, default_value = "full,afd_only,ada_only,neither")]
        variants: String,
    },
}

fn config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seeds = vec![s];
    }
    if c.dataset.is_some() {
        cfg.dataset.clone_from(&c.dataset);
    }
    if c.out.is_some() {
        cfg.out.clone_from(&c.out);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let out = cfg
        .out
        .clone()
        .ok_or_else(|| Error::Argument("--out is required".into()))?;
    prepare_out(&out)?;
    Ok(out)
}

fn emit(table: &Table, out: &Path, name: &str) -> Result<()> {
    table.write(&out.join(name))?;
    println!("{}", out.join(name).display());
    Ok(())
}

fn generate(c: &Common) -> Result<()> {
    let mut cfg = config(c)?;
    cfg.dataset = None;
    if let Some(s) = c.seed {
        cfg.data.seed = s;
    }
    let path = c
        .out
        .clone()
        .ok_or_else(|| Error::Argument("--out <file> is required".into()))?;
    let ds = load_or_generate(&cfg)?;
    save_dataset(&ds, &path)?;
    let mut t = Table::new(["split", "samples"]);
    for s in SplitName::ALL {
        t.push([s.name().to_string(), ds.split.get(s).len().to_string()]);
    }
    print!("{}", t.to_csv());
    Ok(())
}

fn train_afd_cmd(c: &Common) -> Result<()> {
    let cfg = config(c)?;
    let out = out_dir(&cfg)?;
    let ds = load_or_generate(&cfg)?;
    for &seed in &cfg.seeds {
        let (afd_cfg, _) = cfg.for_seed(seed);
        let (fit, _) = stage_splits(&ds, seed, cfg.stage2_fraction);
        let afd = train_afd(&fit, &ds.subset(SplitName::Valid), &ds.manifest, &afd_cfg)?;
        emit(
            &afd_history_table(&afd),
            &out,
            &format!("afd_history_seed{seed}.csv"),
        )?;
        let path = out.join(format!("afd_seed{seed}.ckpt"));
        save_checkpoint(&afd_checkpoint(&afd, &ds, &afd_cfg), &path)?;
        println!("{}", path.display());
    }
    Ok(())
}

fn train_ada_cmd(c: &Common, afd_path: &Path) -> Result<()> {
    let cfg = config(c)?;
    let out = out_dir(&cfg)?;
    let ds = load_or_generate(&cfg)?;
    let (bundle, snap) = restore_afd(&load_checkpoint(afd_path)?)?;
    let hash = bundle.content_hash();
    for &seed in &cfg.seeds {
        let (_, ada_cfg) = cfg.for_seed(seed);
        let (fit, stage2) = stage_splits(&ds, seed, cfg.stage2_fraction);
        let general = general_encoder(&ds, &fit, &cfg, &snap.afd, seed)?;
        let train = prepare_inputs(&bundle, &general, &stage2)?;
        let valid = prepare_inputs(&bundle, &general, &ds.subset(SplitName::Valid))?;
        let ada = train_ada(&bundle, &train, &valid, &ada_cfg)?;
        if bundle.content_hash() != hash {
            return Err(Error::Integrity(
                "expert parameters changed during agent training".into(),
            ));
        }
        emit(
            &ada_history_table(&ada),
            &out,
            &format!("ada_history_seed{seed}.csv"),
        )?;
        let path = out.join(format!("ada_seed{seed}.ckpt"));
        save_checkpoint(&ada_checkpoint(&ada, &general, &ds, &ada_cfg, &hash), &path)?;
        println!("{}", path.display());
    }
    Ok(())
}

fn run_cmd(c: &Common) -> Result<()> {
    let cfg = config(c)?;
    let out = run_sequential(&cfg)?;
    let mut t = Table::new([
        "seed",
        "method",
        "accuracy",
        "weighted_f1",
        "benign_acc",
        "severe_acc",
    ]);
    let rows = |s: &SeedResult| {
        s.methods
            .iter()
            .map(|m| {
                [
                    s.seed.to_string(),
                    m.method.clone(),
                    num(Some(m.report.accuracy)),
                    num(Some(m.report.weighted_f1)),
                    num(m.benign_accuracy),
                    num(m.severe_accuracy),
                ]
            })
            .collect::<Vec<_>>()
    };
    for s in &out.seeds {
        for r in rows(s) {
            t.push(r);
        }
    }
    print!("{}", t.to_csv());
    Ok(())
}

fn eval_cmd(c: &Common, afd_path: &Path, ada_path: Option<&Path>, k: usize) -> Result<()> {
    let cfg = config(c)?;
    let out = out_dir(&cfg)?;
    let ds = load_or_generate(&cfg)?;
    let (bundle, _) = restore_afd(&load_checkpoint(afd_path)?)?;
    let test = ds.subset(SplitName::Test);

    let thresholds: Vec<f64> = (0..=20).map(|i| i as f64 / 20.0).collect();
    let mut topk = Table::new(["pathway", "threshold", "ratio"]);
    let experts = bundle.predict(&test)?;
    for p in Pathway::ALL {
        let dists: Vec<Vec<f64>> = experts.iter().map(|e| e.probs[p.index()].clone()).collect();
        for (t, r) in thresholds
            .iter()
            .zip(topk_confidence_curve(&dists, k, &thresholds)?)
        {
            topk.push([p.name().to_string(), num(Some(*t)), num(Some(r))]);
        }
    }
    emit(&topk, &out, "topk_confidence.csv")?;

    let Some(ada_path) = ada_path else {
        let inputs = dcr::ada::AdaInputs {
            states: Vec::new(),
            experts,
            labels: test.iter().map(|s| s.label()).collect(),
            conflict: test.iter().map(|s| s.conflict_class).collect(),
        };
        let mut t = Table::new([
            "method",
            "accuracy",
            "weighted_f1",
            "benign_acc",
            "severe_acc",
        ]);
        for p in Pathway::ALL {
            let m = score(
                &format!("always_{}", p.name()),
                &pathway_predictions(&inputs, p),
                &inputs,
                &ds,
            )?;
            t.push([
                m.method,
                num(Some(m.report.accuracy)),
                num(Some(m.report.weighted_f1)),
                num(m.benign_accuracy),
                num(m.severe_accuracy),
            ]);
        }
        return emit(&t, &out, "metrics.csv");
    };
    let ckpt = load_checkpoint(ada_path)?;
    let (agent, general, snap) = restore_ada(&ckpt)?;
    if snap.experts_hash != bundle.content_hash() {
        return Err(Error::Integrity(
            "agent checkpoint was trained over different experts".into(),
        ));
    }
    let inputs = prepare_inputs(&bundle, &general, &test)?;
    let (actions, predictions) = agent.predict(&inputs)?;
    let mut methods = vec![score("dcr", &predictions, &inputs, &ds)?];
    for p in Pathway::ALL {
        methods.push(score(
            &format!("always_{}", p.name()),
            &pathway_predictions(&inputs, p),
            &inputs,
            &ds,
        )?);
    }
    let actions_dist = action_distribution(&actions, &inputs.conflict, snap.ada.action_space)?;
    let result = SeedResult {
        seed: snap.ada.seed,
        afd: dcr::afd::TrainedAfd {
            bundle,
            history: Vec::new(),
            best_epoch: 0,
            best_valid_wf1: f64::NAN,
        },
        general,
        ada: agent,
        baseline: None,
        experts_hash: snap.experts_hash,
        test: inputs,
        actions,
        predictions,
        methods,
        actions_dist,
    };
    emit(&metrics_table(&result), &out, "metrics.csv")?;
    emit(&conflict_table(&result)?, &out, "conflict_subsets.csv")?;
    emit(&action_table(&result.actions_dist), &out, "actions.csv")
}

fn ablate_cmd(c: &Common, variants: &str) -> Result<()> {
    let variants = parse_variants(variants)?;
    let cfg = config(c)?;
    let ds = load_or_generate(&cfg)?;
    let table = ablation_runner(&ds, &cfg, &variants)?.to_table();
    match &cfg.out {
        Some(_) => emit(&table, &out_dir(&cfg)?, "ablation.csv"),
        None => {
            print!("{}", table.to_csv());
            Ok(())
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Argument(_) | Error::Config(_) => 2,
        Error::Integrity(_) | Error::Schema(_) | Error::Stage { .. } | Error::Parse { .. } => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match &cli.command {
        Command::Generate(c) => generate(c),
        Command::TrainAfd(c) => train_afd_cmd(c),
        Command::TrainAda { common, afd } => train_ada_cmd(common, afd),
        Command::Run(c) => run_cmd(c),
        Command::Eval {
            common,
            afd,
            ada,
            k,
        } => eval_cmd(common, afd, ada.as_deref(), *k),
        Command::Ablate { common, variants } => ablate_cmd(common, variants),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
