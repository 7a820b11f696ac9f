use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::dataset::{apply_leak_mask, plan_batches, BatchPlan, Dataset, Group, LabelVector, PairMask, SplitName, Task};
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::model::{check_single_team, FrozenExtractor, Model, Subsets};
use crate::ndmath::{adamw_step, AdamWState, Bound, Tape, Tensor, Var};
use crate::objectives::{bce_loss_tape, cecl_loss_tape, total_loss, BIAS_KEY, T_LOG_KEY};
use crate::seed::derive_seed;
use crate::sim::{build_default_map, generate_round, Team, TrajectoryRound, FRAME_DIM, N_AREAS};

// Stream ids for derive_seed.
const CORPUS: u64 = 1;
const DATA: u64 = 2;
const MODEL: u64 = 3;
const PLAN: u64 = 4;
const SUBSET: u64 = 5;

pub fn model_seed(cfg: &RunConfig) -> u64 {
    derive_seed(cfg.seed, &[MODEL])
}

/// Simulated rounds with ids `0..rounds`.
pub fn simulate_corpus(cfg: &RunConfig) -> Vec<TrajectoryRound> {
    let map = build_default_map();
    (0..cfg.rounds)
        .map(|i| {
            let mut r = generate_round(&map, &cfg.sim, derive_seed(cfg.sim.seed, &[CORPUS, cfg.seed, i as u64]));
            r.round_id = i as u32;
            r
        })
        .collect()
}

/// Dataset plus the frozen extractor's pooled output for every segment.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub dataset: Dataset,
    pub pooled: Vec<Vec<f64>>,
    pub train: Vec<Group>,
    pub val: Vec<Group>,
    pub test: Vec<Group>,
    pub masked: bool,
}

impl Prepared {
    pub fn groups(&self, split: SplitName) -> &[Group] {
        match split {
            SplitName::Train => &self.train,
            SplitName::Val => &self.val,
            SplitName::Test => &self.test,
        }
    }
}

pub fn build_dataset(cfg: &RunConfig, rounds: &[TrajectoryRound]) -> Result<Dataset> {
    Dataset::build(
        &build_default_map(),
        rounds,
        &cfg.window,
        &cfg.obs(),
        cfg.split,
        derive_seed(cfg.seed, &[DATA]),
    )
}

pub fn prepare(cfg: &RunConfig, dataset: Dataset, masked: bool) -> Result<Prepared> {
    let extractor = FrozenExtractor::new(FRAME_DIM, cfg.model.d_h, cfg.model.d_enc, model_seed(cfg));
    let pooled = dataset
        .segments
        .iter()
        .map(|s| extractor.encode(&apply_leak_mask(s, masked).features))
        .collect::<Result<Vec<_>>>()?;
    Ok(Prepared {
        train: dataset.groups(SplitName::Train),
        val: dataset.groups(SplitName::Val),
        test: dataset.groups(SplitName::Test),
        dataset,
        pooled,
        masked,
    })
}

/// One batch laid out for the tape: rows grouped team by team.
#[derive(Clone, Debug)]
pub struct BatchInput {
    /// `[n, d_enc]`.
    pub pooled: Tensor,
    pub mask: PairMask,
    pub teams: Vec<Team>,
    pub groups: Vec<Range<usize>>,
    /// One label vector per group (shared by its members).
    pub labels: Vec<LabelVector>,
}

impl BatchInput {
    pub fn from_plan(prep: &Prepared, plan: &BatchPlan) -> Result<Self> {
        let idx = plan.indices();
        let d = prep.pooled.first().map_or(0, Vec::len);
        let data = idx.iter().flat_map(|&i| prep.pooled[i].iter().copied()).collect();
        let mut groups = Vec::with_capacity(plan.groups.len());
        let mut start = 0;
        for g in &plan.groups {
            groups.push(start..start + g.members.len());
            start += g.members.len();
        }
        Ok(Self {
            pooled: Tensor::new(&[idx.len(), d], data)?,
            mask: PairMask::from_keys(&plan.keys()),
            teams: idx.iter().map(|&i| prep.dataset.segments[i].team).collect(),
            groups,
            labels: plan.groups.iter().map(|g| prep.dataset.labels[g.members[0]].clone()).collect(),
        })
    }
}

pub struct LossParts {
    pub total: Var,
    pub bce: Var,
    pub cecl: Option<Var>,
}

fn label_tensor(labels: &[&LabelVector], task: Task) -> Tensor {
    let data = labels
        .iter()
        .flat_map(|l| l.for_task(task).iter().map(|&b| b as f64))
        .collect();
    Tensor::new(&[labels.len(), N_AREAS], data).expect("label shape")
}

/// Training subsets of size `k`: every row alone for `k = 1`, otherwise one
/// seeded `k`-subset per group in ascending agent order.
fn training_subsets(input: &BatchInput, k: usize, rng: &mut ChaCha8Rng) -> Result<(Subsets, Vec<usize>)> {
    let mut rows = Vec::new();
    let mut teams = Vec::new();
    let mut label_of = Vec::new();
    for (g, range) in input.groups.iter().enumerate() {
        if k == 1 {
            for r in range.clone() {
                rows.push(vec![r]);
                teams.push(input.teams[r]);
                label_of.push(g);
            }
        } else {
            let mut pick = rand::seq::index::sample(rng, range.len(), k).into_vec();
            pick.sort_unstable();
            let members: Vec<usize> = pick.into_iter().map(|p| range.start + p).collect();
            let member_teams: Vec<Team> = members.iter().map(|&r| input.teams[r]).collect();
            teams.push(check_single_team(&member_teams)?);
            rows.push(members);
            label_of.push(g);
        }
    }
    Ok((Subsets { rows, teams }, label_of))
}

/// `λ · CECL + BCE`, with BCE summed over both heads and averaged over the
/// configured subset sizes.
pub fn batch_loss(
    model: &Model,
    tape: &mut Tape,
    bound: &Bound,
    input: &BatchInput,
    lambda: f64,
    subset_seed: u64,
) -> Result<LossParts> {
    let x = tape.leaf(input.pooled.clone());
    let e = model.project(tape, bound, x)?;
    let cecl = if lambda > 0.0 {
        let u = tape.l2_normalize_rows(e)?;
        Some(cecl_loss_tape(tape, u, &input.mask, bound.get(T_LOG_KEY)?, bound.get(BIAS_KEY)?)?)
    } else {
        None
    };
    let mut rng = ChaCha8Rng::seed_from_u64(subset_seed);
    let mut terms = Vec::new();
    for &k in &model.cfg.pov_sizes {
        let (subsets, label_of) = training_subsets(input, k, &mut rng)?;
        let labels: Vec<&LabelVector> = label_of.iter().map(|&g| &input.labels[g]).collect();
        for task in Task::ALL {
            let logits = model.predict_tape(tape, bound, e, &subsets, task)?;
            terms.push(bce_loss_tape(tape, logits, &label_tensor(&labels, task))?);
        }
    }
    let mut summed = terms[0];
    for &t in &terms[1..] {
        summed = tape.add(summed, t)?;
    }
    let bce = tape.scale(summed, 1.0 / model.cfg.pov_sizes.len() as f64);
    let total = total_loss(tape, cecl, bce, lambda)?;
    Ok(LossParts { total, bce, cecl })
}

/// Parameter prefixes that take part in a step.
pub fn trained_prefixes(lambda: f64) -> Vec<&'static str> {
    let mut p = vec!["agg", "head.", "projector.", "side."];
    if lambda > 0.0 {
        p.push("contrastive.");
    }
    p
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StepLog {
    pub epoch: usize,
    pub batch: usize,
    pub total: f64,
    pub bce: f64,
    pub cecl: Option<f64>,
    pub t: f64,
    pub b: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_total: f64,
    pub val_tln_subset_acc: f64,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepLog>,
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val: f64,
}

/// The batch plans of one epoch; identical for every arm of a run.
pub fn epoch_plans(cfg: &RunConfig, prep: &Prepared, epoch: usize) -> Result<Vec<BatchPlan>> {
    plan_batches(
        &prep.train,
        cfg.optim.groups,
        cfg.optim.agents,
        derive_seed(cfg.seed, &[PLAN, epoch as u64]),
    )
}

fn norms(model: &Model) -> String {
    model
        .params
        .iter()
        .map(|(k, p)| format!("{k}={:.4e}", p.value.data().iter().map(|x| x * x).sum::<f64>().sqrt()))
        .collect::<Vec<_>>()
        .join(", ")
}

/// Trains for the configured epochs and returns the parameters of the epoch
/// with the best validation TLN subset accuracy (mean over subset sizes).
pub fn train(cfg: &RunConfig, prep: &Prepared, mut model: Model, lambda: f64) -> Result<(Model, TrainLog)> {
    let adamw = cfg.optim.adamw();
    let mut state = AdamWState::default();
    let prefixes = trained_prefixes(lambda);
    let mut log = TrainLog {
        best_val: f64::NEG_INFINITY,
        ..TrainLog::default()
    };
    let mut best = model.clone();
    for epoch in 0..cfg.optim.epochs {
        let plans = epoch_plans(cfg, prep, epoch)?;
        let mut sum = 0.0;
        for (bi, plan) in plans.iter().enumerate() {
            let input = BatchInput::from_plan(prep, plan)?;
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, &prefixes);
            let parts = batch_loss(
                &model,
                &mut tape,
                &bound,
                &input,
                lambda,
                derive_seed(cfg.seed, &[SUBSET, epoch as u64, bi as u64]),
            )?;
            let total = tape.scalar_value(parts.total);
            if !total.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss {total} at epoch {epoch} batch {bi}; parameter norms: {}",
                    norms(&model)
                )));
            }
            tape.backward(parts.total)?;
            model.params.collect_grads(&tape, &bound);
            adamw_step(&mut model.params, &mut state, &adamw)?;
            model.params.zero_grads();
            let c = model.contrastive()?;
            log.steps.push(StepLog {
                epoch,
                batch: bi,
                total,
                bce: tape.scalar_value(parts.bce),
                cecl: parts.cecl.map(|v| tape.scalar_value(v)),
                t: c.t(),
                b: c.b,
            });
            sum += total;
        }
        let val = evaluate(&model, prep, SplitName::Val)?;
        let tln: Vec<f64> = val.iter().filter(|r| r.task == Task::Tln).map(|r| r.report.subset_acc).collect();
        let val_acc = tln.iter().sum::<f64>() / tln.len() as f64;
        log.epochs.push(EpochLog {
            epoch,
            mean_total: sum / plans.len().max(1) as f64,
            val_tln_subset_acc: val_acc,
        });
        if val_acc > log.best_val {
            log.best_val = val_acc;
            log.best_epoch = epoch;
            best = model.clone();
        }
    }
    Ok((best, log))
}

/// Embeddings `[n, d_proj]` for pooled rows.
pub fn embed(model: &Model, prep: &Prepared, idx: &[usize]) -> Result<Tensor> {
    let d = prep.pooled.first().map_or(0, Vec::len);
    let data = idx.iter().flat_map(|&i| prep.pooled[i].iter().copied()).collect();
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, &["projector."]);
    let x = tape.leaf(Tensor::new(&[idx.len(), d], data)?);
    let e = model.project(&mut tape, &bound, x)?;
    Ok(tape.value(e).clone())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PovReport {
    pub task: Task,
    pub pov: usize,
    pub report: MetricsReport,
    #[serde(skip)]
    pub logits: Vec<Vec<f64>>,
    #[serde(skip)]
    pub labels: Vec<Vec<u8>>,
}

/// Scores every group of a split on its `k` lowest agent ids, for every
/// configured subset size and both tasks.
pub fn evaluate(model: &Model, prep: &Prepared, split: SplitName) -> Result<Vec<PovReport>> {
    evaluate_sizes(model, prep, split, &model.cfg.pov_sizes)
}

pub fn evaluate_sizes(model: &Model, prep: &Prepared, split: SplitName, sizes: &[usize]) -> Result<Vec<PovReport>> {
    let groups = prep.groups(split);
    let idx: Vec<usize> = groups.iter().flat_map(|g| g.members.iter().copied()).collect();
    let emb = embed(model, prep, &idx)?;
    let mut out = Vec::new();
    for &k in sizes {
        let mut rows = Vec::new();
        let mut teams = Vec::new();
        let mut owner = Vec::new();
        let mut start = 0;
        for g in groups {
            if g.members.len() < k {
                return Err(Error::domain(format!("group {:?} has fewer than {k} members", g.key)));
            }
            rows.push((start..start + k).collect());
            teams.push(g.key.team);
            owner.push(g.members[0]);
            start += g.members.len();
        }
        let subsets = Subsets { rows, teams };
        for task in Task::ALL {
            let mut tape = Tape::new();
            let agg = crate::model::agg_prefix(k);
            let head = crate::model::head_prefix(task, k);
            let bound = model.bind(&mut tape, &[agg.as_str(), head.as_str(), "side."]);
            let e = tape.leaf(emb.clone());
            let logits = model.predict_tape(&mut tape, &bound, e, &subsets, task)?;
            let logits: Vec<Vec<f64>> = tape.value(logits).data().chunks(N_AREAS).map(<[f64]>::to_vec).collect();
            let labels: Vec<Vec<u8>> = owner.iter().map(|&m| prep.dataset.labels[m].for_task(task).to_vec()).collect();
            out.push(PovReport {
                task,
                pov: k,
                report: MetricsReport::from_logits(&logits, &labels)?,
                logits,
                labels,
            });
        }
    }
    Ok(out)
}
