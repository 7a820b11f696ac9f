use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};
use xego::dataset::{write_archive, SplitName};
use xego::harness::{
    ablation_csv, analyze_embeddings, build_dataset, default_grid, evaluate_sizes, paired_arms, prepare,
    run_ablation, simulate_corpus, sweep_csv, train_arm, ExperimentResult, Prepared, RunConfig,
};
use xego::model::Model;
use xego::sim::{SimConfig, TrajectoryRound};
use xego::trajio::{inspect, read_round, write_round, EXTENSION};
use xego::Error;

const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(name = "xego", version, about = "Cross-ego contrastive learning lab")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Run configuration (JSON). Defaults to the reference profile.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configuration's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Directory of `.xego` rounds; simulated from the configuration when absent.
    #[arg(long = "in")]
    input: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate rounds and write one `.xego` file per round.
    Simulate {
        /// Simulator settings (JSON); a run configuration is also accepted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        rounds: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "rounds")]
        out: PathBuf,
    },
    /// Segment, label and split a corpus; write a manifest and per-split archives.
    BuildDataset(Common),
    /// Train the configured arm; write a checkpoint, training log and test metrics.
    Train(Common),
    /// Score a checkpoint on the test split for every configured pov size.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train contrastive and baseline arms on shared data; write the pov table.
    SweepPov(Common),
    /// Train one arm per (bias, temperature) cell of the default grid.
    Ablate(Common),
    /// Teammate cosine alignment and side separation before and after training.
    AnalyzeEmbeddings(Common),
    /// Print a `.xego` file's header and event summary as JSON.
    Inspect { file: PathBuf },
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Json(_) => Failure::Config(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type Outcome = Result<(), Failure>;

fn read_config_text(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::Config(format!("cannot read config {}: {e}", path.display())))
}

fn load_config(common: &Common) -> Result<RunConfig, Failure> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::from_json(&read_config_text(p)?)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn corpus(cfg: &RunConfig, input: Option<&Path>) -> Result<Vec<TrajectoryRound>, Failure> {
    let Some(dir) = input else {
        return Ok(simulate_corpus(cfg));
    };
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == EXTENSION))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Failure::Config(format!("no .{EXTENSION} files in {}", dir.display())));
    }
    paths
        .iter()
        .map(|p| {
            let r = read_round(BufReader::new(File::open(p)?))
                .map_err(|e| Failure::Runtime(format!("{}: {e}", p.display())))?;
            Ok(r)
        })
        .collect()
}

fn prepared(cfg: &RunConfig, input: Option<&Path>) -> Result<Prepared, Failure> {
    let rounds = corpus(cfg, input)?;
    Ok(prepare(cfg, build_dataset(cfg, &rounds)?, cfg.masked)?)
}

fn write_text(path: &Path, text: &str) -> Outcome {
    fs::write(path, text).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn write_json(path: &Path, v: &impl serde::Serialize) -> Outcome {
    let text = serde_json::to_string_pretty(v).map_err(|e| Failure::Runtime(e.to_string()))?;
    write_text(path, &text)
}

fn simulate(config: Option<PathBuf>, rounds: Option<usize>, seed: Option<u64>, out: &Path) -> Outcome {
    let mut cfg = RunConfig::default();
    if let Some(p) = config {
        let text = read_config_text(&p)?;
        let doc: Value = serde_json::from_str(&text).map_err(|e| Failure::Config(format!("config JSON: {e}")))?;
        let is_run = doc.get("sim").is_some() || doc.get("profile").is_some() || doc.get("rounds").is_some();
        if is_run {
            cfg = RunConfig::from_json(&text)?;
        } else {
            cfg.sim = serde_json::from_value::<SimConfig>(doc).map_err(|e| Failure::Config(format!("sim config: {e}")))?;
            cfg.sim.validate()?;
        }
    }
    if let Some(n) = rounds {
        cfg.rounds = n;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    fs::create_dir_all(out)?;
    let mut total = 0;
    for r in simulate_corpus(&cfg) {
        let path = out.join(format!("round_{:05}.{EXTENSION}", r.round_id));
        let mut w = BufWriter::new(File::create(&path)?);
        total += write_round(&r, &mut w)?;
        w.flush()?;
    }
    println!("{}", json!({"rounds": cfg.rounds, "bytes": total, "out": out}));
    Ok(())
}

fn build(common: &Common) -> Outcome {
    let cfg = load_config(common)?;
    let rounds = corpus(&cfg, common.input.as_deref())?;
    let ds = build_dataset(&cfg, &rounds)?;
    fs::create_dir_all(&common.out)?;
    let mut splits = serde_json::Map::new();
    for (name, split) in [("train", SplitName::Train), ("val", SplitName::Val), ("test", SplitName::Test)] {
        let groups = ds.groups(split);
        let members: Vec<usize> = groups.iter().flat_map(|g| g.members.iter().copied()).collect();
        let items: Vec<_> = members.iter().map(|&i| (&ds.segments[i], &ds.labels[i])).collect();
        let file = format!("{name}.xseg");
        let mut w = BufWriter::new(File::create(common.out.join(&file))?);
        write_archive(&mut w, &items)?;
        w.flush()?;
        let inventory: Vec<Value> = groups
            .iter()
            .map(|g| json!({"round_uid": g.key.round_uid, "slot": g.key.slot_index, "team": g.key.team, "size": g.members.len()}))
            .collect();
        splits.insert(
            name.into(),
            json!({"rounds": ds.split.get(split), "archive": file, "segments": items.len(), "groups": inventory}),
        );
    }
    let manifest = json!({
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
        "masked": false,
        "frames": cfg.window.frames(),
        "splits": splits,
    });
    write_json(&common.out.join("manifest.json"), &manifest)?;
    println!("{}", json!({"segments": ds.segments.len(), "out": common.out}));
    Ok(())
}

fn train_cmd(common: &Common) -> Outcome {
    let cfg = load_config(common)?;
    let prep = prepared(&cfg, common.input.as_deref())?;
    let arm = paired_arms(&cfg)?[0].clone();
    let mut outcome = train_arm(&cfg, &prep, &arm)?;
    fs::create_dir_all(&common.out)?;
    let ckpt = common.out.join("model.ckpt");
    let mut w = BufWriter::new(File::create(&ckpt)?);
    outcome.model.save(&mut w)?;
    w.flush()?;
    outcome.result.checkpoint = Some(ckpt.display().to_string());
    write_json(&common.out.join("train_log.json"), &outcome.log)?;
    let sidecar = json!({"seed": cfg.seed, "config_hash": cfg.hash(), "config": cfg});
    write_json(&common.out.join("model.ckpt.json"), &sidecar)?;
    write_json(&common.out.join("result.json"), &ExperimentResult { arms: vec![outcome.result.clone()] })?;
    write_text(&common.out.join("metrics.csv"), &sweep_csv(&[outcome.result]))
}

fn evaluate_cmd(common: &Common, checkpoint: &Path) -> Outcome {
    let cfg = load_config(common)?;
    let model = Model::load(BufReader::new(File::open(checkpoint)?))?;
    if model.cfg != cfg.model {
        return Err(Failure::Config("checkpoint model dimensions differ from the configuration".into()));
    }
    let prep = prepared(&cfg, common.input.as_deref())?;
    let reports = evaluate_sizes(&model, &prep, SplitName::Test, &cfg.model.pov_sizes)?;
    fs::create_dir_all(&common.out)?;
    let logits: Vec<Value> = reports
        .iter()
        .map(|r| json!({"task": r.task, "pov": r.pov, "logits": r.logits, "labels": r.labels}))
        .collect();
    write_json(&common.out.join("logits.json"), &logits)?;
    write_json(&common.out.join("evaluation.json"), &reports)?;
    let arm = xego::harness::ArmResult {
        arm: "checkpoint".into(),
        lambda: cfg.lambda,
        seed: cfg.seed,
        config_hash: cfg.hash(),
        t_init: cfg.t_init,
        b_init: model.contrastive()?.b,
        bias_trainable: cfg.bias_trainable,
        best_epoch: 0,
        reports,
        checkpoint: Some(checkpoint.display().to_string()),
        wall_s: 0.0,
    };
    let csv = sweep_csv(&[arm]);
    print!("{csv}");
    write_text(&common.out.join("metrics.csv"), &csv)
}

fn sweep(common: &Common) -> Outcome {
    let cfg = load_config(common)?;
    let prep = prepared(&cfg, common.input.as_deref())?;
    let arms = paired_arms(&cfg)?
        .iter()
        .map(|a| Ok(train_arm(&cfg, &prep, a)?.result))
        .collect::<Result<Vec<_>, Failure>>()?;
    fs::create_dir_all(&common.out)?;
    let csv = sweep_csv(&arms);
    print!("{csv}");
    write_text(&common.out.join("sweep.csv"), &csv)?;
    write_json(&common.out.join("result.json"), &ExperimentResult { arms })
}

fn ablate(common: &Common) -> Outcome {
    let cfg = load_config(common)?;
    let prep = prepared(&cfg, common.input.as_deref())?;
    let rows = run_ablation(&cfg, &prep, &default_grid())?;
    fs::create_dir_all(&common.out)?;
    let csv = ablation_csv(&rows);
    print!("{csv}");
    write_text(&common.out.join("ablation.csv"), &csv)?;
    write_json(&common.out.join("ablation.json"), &rows)
}

fn analyze(common: &Common) -> Outcome {
    let cfg = load_config(common)?;
    let prep = prepared(&cfg, common.input.as_deref())?;
    let arm = paired_arms(&cfg)?[0].clone();
    let outcome = train_arm(&cfg, &prep, &arm)?;
    let a = analyze_embeddings(&outcome.initial, &outcome.model, &prep, SplitName::Test)?;
    fs::create_dir_all(&common.out)?;
    let mut csv = String::from("stage,side,x,y\n");
    for (stage, snap) in [("before", &a.before), ("after", &a.after)] {
        for (p, side) in snap.points.iter().zip(&a.sides) {
            csv.push_str(&format!("{stage},{side},{},{}\n", p[0], p[1]));
        }
    }
    write_text(&common.out.join("points.csv"), &csv)?;
    let summary = json!({
        "before": {"cos_pos": a.before.cosine.positive, "cos_neg": a.before.cosine.negative,
                   "cos_gap": a.before.cosine.gap(), "separation": a.before.separation},
        "after": {"cos_pos": a.after.cosine.positive, "cos_neg": a.after.cosine.negative,
                  "cos_gap": a.after.cosine.gap(), "separation": a.after.separation},
    });
    println!("{summary}");
    write_json(&common.out.join("embeddings.json"), &summary)
}

fn run(cli: Cli) -> Outcome {
    match cli.cmd {
        Cmd::Simulate {
            config,
            rounds,
            seed,
            out,
        } => simulate(config, rounds, seed, &out),
        Cmd::BuildDataset(c) => build(&c),
        Cmd::Train(c) => train_cmd(&c),
        Cmd::Evaluate { common, checkpoint } => evaluate_cmd(&common, &checkpoint),
        Cmd::SweepPov(c) => sweep(&c),
        Cmd::Ablate(c) => ablate(&c),
        Cmd::AnalyzeEmbeddings(c) => analyze(&c),
        Cmd::Inspect { file } => {
            let report = inspect(BufReader::new(File::open(&file)?))?;
            let text = serde_json::to_string_pretty(&report).map_err(|e| Failure::Runtime(e.to_string()))?;
            println!("{text}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    // clap exits with status 2 on usage errors.
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}
