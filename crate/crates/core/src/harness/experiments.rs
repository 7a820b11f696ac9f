use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::train::{embed, evaluate, model_seed, train, PovReport, Prepared, TrainLog};
use crate::dataset::{SplitName, Task};
use crate::error::{Error, Result};
use crate::metrics::{pca_2d, separation_ratio, MetricsReport};
use crate::model::Model;
use crate::objectives::ContrastiveParams;
use crate::sim::FRAME_DIM;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ArmResult {
    pub arm: String,
    pub lambda: f64,
    pub seed: u64,
    pub config_hash: String,
    pub t_init: f64,
    pub b_init: f64,
    pub bias_trainable: bool,
    pub best_epoch: usize,
    pub reports: Vec<PovReport>,
    pub checkpoint: Option<String>,
    pub wall_s: f64,
}

impl ArmResult {
    pub fn report(&self, task: Task, pov: usize) -> Option<&MetricsReport> {
        self.reports.iter().find(|r| r.task == task && r.pov == pov).map(|r| &r.report)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub arms: Vec<ArmResult>,
}

pub struct ArmOutcome {
    pub result: ArmResult,
    pub initial: Model,
    pub model: Model,
    pub log: TrainLog,
}

/// What distinguishes one arm from another within a run.
#[derive(Clone, Debug)]
pub struct ArmSpec {
    pub name: String,
    pub lambda: f64,
    pub contrastive: ContrastiveParams,
    pub bias_trainable: bool,
}

/// Trains one arm from the run's shared initialization and scores it on the
/// test split.
pub fn train_arm(cfg: &RunConfig, prep: &Prepared, arm: &ArmSpec) -> Result<ArmOutcome> {
    let start = Instant::now();
    let initial = Model::new(cfg.model.clone(), FRAME_DIM, model_seed(cfg), arm.contrastive, arm.bias_trainable)?;
    let (model, log) = train(cfg, prep, initial.clone(), arm.lambda)?;
    let reports = evaluate(&model, prep, SplitName::Test)?;
    Ok(ArmOutcome {
        result: ArmResult {
            arm: arm.name.clone(),
            lambda: arm.lambda,
            seed: cfg.seed,
            config_hash: cfg.hash(),
            t_init: arm.contrastive.t(),
            b_init: arm.contrastive.b,
            bias_trainable: arm.bias_trainable,
            best_epoch: log.best_epoch,
            reports,
            checkpoint: None,
            wall_s: start.elapsed().as_secs_f64(),
        },
        initial,
        model,
        log,
    })
}

/// The configured contrastive arm and its λ = 0 twin.
pub fn paired_arms(cfg: &RunConfig) -> Result<[ArmSpec; 2]> {
    let c = cfg.contrastive()?;
    Ok([
        ArmSpec {
            name: "cecl".into(),
            lambda: cfg.lambda,
            contrastive: c,
            bias_trainable: cfg.bias_trainable,
        },
        ArmSpec {
            name: "baseline".into(),
            lambda: 0.0,
            contrastive: c,
            bias_trainable: cfg.bias_trainable,
        },
    ])
}

pub const SWEEP_HEADER: &str = "task,pov,arm,subset_acc,hamming,macro_f1,micro_f1";

pub fn sweep_csv(arms: &[ArmResult]) -> String {
    let mut s = String::from(SWEEP_HEADER);
    s.push('\n');
    for task in Task::ALL {
        for arm in arms {
            for r in arm.reports.iter().filter(|r| r.task == task) {
                let m = &r.report;
                let _ = writeln!(
                    s,
                    "{},{},{},{:.4},{:.4},{:.4},{:.4}",
                    task.name(),
                    r.pov,
                    arm.arm,
                    m.subset_acc,
                    m.hamming_dist,
                    m.macro_f1,
                    m.micro_f1
                );
            }
        }
    }
    s
}

/// One cell of the bias/temperature grid; `b0 = None` pins the bias at 0.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub b0: Option<f64>,
    pub t0: f64,
}

impl AblationCell {
    pub fn label(&self) -> String {
        match self.b0 {
            Some(b) => format!("b={b},t={}", self.t0),
            None => format!("b=n/a,t={}", self.t0),
        }
    }
}

pub fn default_grid() -> Vec<AblationCell> {
    let cell = |b0, t0| AblationCell { b0, t0 };
    vec![
        cell(None, 10.0),
        cell(Some(0.0), 10.0),
        cell(Some(0.0), 1.0),
        cell(Some(-3.0), 10.0),
        cell(Some(-3.0), 1.0),
        cell(Some(-10.0), 10.0),
        cell(Some(-10.0), 1.0),
    ]
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationRow {
    pub cell: AblationCell,
    pub result: ArmResult,
}

/// Trains one contrastive arm per cell on shared data and initialization.
pub fn run_ablation(cfg: &RunConfig, prep: &Prepared, grid: &[AblationCell]) -> Result<Vec<AblationRow>> {
    if grid.is_empty() {
        return Err(Error::Config("ablation grid is empty".into()));
    }
    grid.iter()
        .map(|&cell| {
            let arm = ArmSpec {
                name: cell.label(),
                lambda: cfg.lambda,
                contrastive: ContrastiveParams::new(cell.t0, cell.b0.unwrap_or(0.0))?,
                bias_trainable: cell.b0.is_some(),
            };
            Ok(AblationRow {
                cell,
                result: train_arm(cfg, prep, &arm)?.result,
            })
        })
        .collect()
}

pub const ABLATION_HEADER: &str = "bias,temperature,task,pov,subset_acc,hamming,macro_f1,micro_f1";

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from(ABLATION_HEADER);
    s.push('\n');
    for row in rows {
        let b = row.cell.b0.map_or("n/a".to_string(), |b| b.to_string());
        for r in &row.result.reports {
            let m = &r.report;
            let _ = writeln!(
                s,
                "{b},{},{},{},{:.4},{:.4},{:.4},{:.4}",
                row.cell.t0,
                r.task.name(),
                r.pov,
                m.subset_acc,
                m.hamming_dist,
                m.macro_f1,
                m.micro_f1
            );
        }
    }
    s
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CosineStats {
    pub positive: f64,
    pub negative: f64,
}

impl CosineStats {
    pub fn gap(&self) -> f64 {
        self.positive - self.negative
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EmbeddingSnapshot {
    pub cosine: CosineStats,
    /// Side separation of the PCA projection (T vs CT).
    pub separation: f64,
    pub points: Vec<[f64; 2]>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EmbeddingAnalysis {
    pub before: EmbeddingSnapshot,
    pub after: EmbeddingSnapshot,
    /// 0 = T, 1 = CT, aligned with `points`.
    pub sides: Vec<usize>,
}

fn unit_rows(e: &crate::ndmath::Tensor) -> Vec<Vec<f64>> {
    let d = e.shape()[1];
    e.data()
        .chunks(d)
        .map(|r| {
            let n = r.iter().map(|x| x * x).sum::<f64>().sqrt() + crate::ndmath::NORM_EPS;
            r.iter().map(|x| x / n).collect()
        })
        .collect()
}

fn snapshot(model: &Model, prep: &Prepared, split: SplitName) -> Result<(EmbeddingSnapshot, Vec<usize>)> {
    let groups = prep.groups(split);
    let idx: Vec<usize> = groups.iter().flat_map(|g| g.members.iter().copied()).collect();
    let owner: Vec<usize> = groups.iter().enumerate().flat_map(|(gi, g)| g.members.iter().map(move |_| gi)).collect();
    let u = unit_rows(&embed(model, prep, &idx)?);
    let (mut pos, mut n_pos, mut neg, mut n_neg) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..u.len() {
        for j in 0..u.len() {
            if i == j {
                continue;
            }
            let c: f64 = u[i].iter().zip(&u[j]).map(|(a, b)| a * b).sum();
            if owner[i] == owner[j] {
                pos += c;
                n_pos += 1;
            } else {
                neg += c;
                n_neg += 1;
            }
        }
    }
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::domain("split lacks positive or negative pairs"));
    }
    let sides: Vec<usize> = idx.iter().map(|&i| prep.dataset.segments[i].team.index()).collect();
    let points = pca_2d(&u)?;
    Ok((
        EmbeddingSnapshot {
            cosine: CosineStats {
                positive: pos / n_pos as f64,
                negative: neg / n_neg as f64,
            },
            separation: separation_ratio(&points, &sides)?,
            points,
        },
        sides,
    ))
}

/// Teammate alignment and side separation of unit embeddings on a split,
/// before and after training.
pub fn analyze_embeddings(initial: &Model, trained: &Model, prep: &Prepared, split: SplitName) -> Result<EmbeddingAnalysis> {
    let (before, sides) = snapshot(initial, prep, split)?;
    let (after, _) = snapshot(trained, prep, split)?;
    Ok(EmbeddingAnalysis { before, after, sides })
}
