//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails. Run with `cargo test --release -p xego --test acceptance`.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xego::dataset::{GroupKey, LabelVector, PairMask, SplitName, Task};
use xego::harness::{
    analyze_embeddings, batch_loss, build_dataset, default_grid, paired_arms, prepare, run_ablation,
    simulate_corpus, train_arm, trained_prefixes, AblationCell, ArmOutcome, BatchInput, RunConfig,
};
use xego::metrics::{hamming_distance, macro_f1, micro_f1, pca_2d, separation_ratio, subset_accuracy};
use xego::model::{Model, ModelConfig};
use xego::ndmath::{grad_check, Bound, Tensor, GRAD_CHECK_EPS};
use xego::objectives::{cecl_loss, init_bias, BiasMode, ContrastiveParams};
use xego::sim::{build_default_map, generate_round, SimConfig, Team, FRAME_DIM, N_AREAS};
use xego::trajio::{read_round, write_round};

const SEEDS: [u64; 3] = [0, 1, 2];

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

// ---------------------------------------------------------------- 1

fn criterion_loss_oracle() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.gen_range(4..=30);
        let d = rng.gen_range(2..=16);
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n {
            let row: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            data.extend(row.iter().map(|x| x / norm));
        }
        let u = Tensor::new(&[n, d], data).unwrap();
        let keys: Vec<GroupKey> = (0..n)
            .map(|_| GroupKey {
                round_uid: rng.gen_range(0..3),
                slot_index: rng.gen_range(0..3),
                team: if rng.gen_bool(0.5) { Team::T } else { Team::CT },
            })
            .collect();
        let mask = PairMask::from_keys(&keys);
        let p = ContrastiveParams::new(rng.gen_range(0.5..20.0), rng.gen_range(-10.0..2.0)).unwrap();
        let mut slow = 0.0;
        for i in 0..n {
            for j in 0..n {
                let same = keys[i] == keys[j];
                let m = if same { 1.0 } else { -1.0 };
                let dot: f64 = u.row(i).iter().zip(u.row(j)).map(|(a, b)| a * b).sum();
                slow += -(1.0 + (-(m * (p.t() * dot - p.b))).exp()).ln();
            }
        }
        slow = -slow / n as f64;
        let fast = cecl_loss(&u, &mask, &p).unwrap();
        worst = worst.max(((fast - slow) / slow).abs());
    }
    let elapsed = start.elapsed();
    verdict(
        worst <= 1e-12 && elapsed < Duration::from_secs(5),
        format!("max rel err {worst:.2e}, {:.2}s", elapsed.as_secs_f64()),
    )
}

// ---------------------------------------------------------------- 2

fn criterion_grad_check() -> Verdict {
    let start = Instant::now();
    let cfg = ModelConfig {
        d_h: 8,
        d_enc: 6,
        d_proj: 8,
        d_agg: 6,
        d_s: 3,
        pov_sizes: vec![1, 2, 3],
    };
    let model = Model::new(cfg, FRAME_DIM, 5, ContrastiveParams::default(), true).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    // Two groups of three agents, four frames per segment.
    let mut pooled = Vec::new();
    for _ in 0..6 {
        let frames = Tensor::new(&[4, FRAME_DIM], (0..4 * FRAME_DIM).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap();
        pooled.extend(model.extractor.encode(&frames).unwrap());
    }
    let key = |team| GroupKey {
        round_uid: 0,
        slot_index: 0,
        team,
    };
    let keys = [key(Team::T), key(Team::T), key(Team::T), key(Team::CT), key(Team::CT), key(Team::CT)];
    let label = |rng: &mut ChaCha8Rng| {
        let mut l = LabelVector {
            teammate: [0; N_AREAS],
            enemy: [0; N_AREAS],
        };
        for a in 0..N_AREAS {
            l.teammate[a] = u8::from(rng.gen_bool(0.15));
            l.enemy[a] = u8::from(rng.gen_bool(0.15));
        }
        l
    };
    let input = BatchInput {
        pooled: Tensor::new(&[6, 6], pooled).unwrap(),
        mask: PairMask::from_keys(&keys),
        teams: keys.iter().map(|k| k.team).collect(),
        groups: vec![0..3, 3..6],
        labels: vec![label(&mut rng), label(&mut rng)],
    };
    let prefixes = trained_prefixes(1.0);
    let (names, values): (Vec<String>, Vec<Tensor>) = model
        .params
        .iter()
        .filter(|(k, p)| p.trainable && prefixes.iter().any(|pre| k.starts_with(pre)))
        .map(|(k, p)| (k.to_string(), p.value.clone()))
        .unzip();
    let err = grad_check(
        |tape, vars| {
            let mut bound = Bound::default();
            for (n, &v) in names.iter().zip(vars) {
                bound.insert(n.clone(), v);
            }
            Ok(batch_loss(&model, tape, &bound, &input, 1.0, 3)?.total)
        },
        &values,
        GRAD_CHECK_EPS,
    )
    .unwrap();
    let elapsed = start.elapsed();
    let n: usize = values.iter().map(|v| v.data().len()).sum();
    verdict(
        err < 1e-4 && elapsed < Duration::from_secs(30),
        format!("{n} parameters, max rel err {err:.2e}, {:.2}s", elapsed.as_secs_f64()),
    )
}

// ---------------------------------------------------------------- 3

fn criterion_bias_init() -> Verdict {
    let b = init_bias(BiasMode::Nominal, 32, 1).unwrap();
    verdict((b - (-3.4340)).abs() <= 1e-4, format!("b0 = {b:.6}"))
}

// ---------------------------------------------------------------- 4

fn criterion_metric_oracles() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let n = rng.gen_range(1..30);
        let p = rng.gen_range(0.02..0.5);
        let y: Vec<Vec<u8>> = (0..n).map(|_| (0..N_AREAS).map(|_| u8::from(rng.gen_bool(p))).collect()).collect();
        let flip = rng.gen_range(0.0..0.3);
        let pred: Vec<Vec<u8>> = y
            .iter()
            .map(|r| r.iter().map(|&b| if rng.gen_bool(flip) { 1 - b } else { b }).collect())
            .collect();
        let (mut exact, mut wrong) = (0usize, 0usize);
        let (mut tp, mut fp, mut fneg) = ([0usize; N_AREAS], [0usize; N_AREAS], [0usize; N_AREAS]);
        for (pr, t) in pred.iter().zip(&y) {
            let mut all = true;
            for a in 0..N_AREAS {
                match (pr[a], t[a]) {
                    (1, 1) => tp[a] += 1,
                    (1, 0) => {
                        fp[a] += 1;
                        wrong += 1;
                        all = false;
                    }
                    (0, 1) => {
                        fneg[a] += 1;
                        wrong += 1;
                        all = false;
                    }
                    _ => {}
                }
            }
            exact += usize::from(all);
        }
        let f1 = |tp: usize, fp: usize, fneg: usize| {
            if tp + fp + fneg == 0 {
                0.0
            } else {
                100.0 * 2.0 * tp as f64 / (2 * tp + fp + fneg) as f64
            }
        };
        let subset = 100.0 * exact as f64 / n as f64;
        let hamming = 100.0 * wrong as f64 / (n * N_AREAS) as f64;
        let micro = f1(tp.iter().sum(), fp.iter().sum(), fneg.iter().sum());
        let macro_ = (0..N_AREAS).map(|a| f1(tp[a], fp[a], fneg[a])).sum::<f64>() / N_AREAS as f64;
        let ok = subset_accuracy(&pred, &y).unwrap() == subset
            && hamming_distance(&pred, &y).unwrap() == hamming
            && micro_f1(&pred, &y).unwrap() == micro
            && macro_f1(&pred, &y).unwrap() == macro_;
        mismatches += usize::from(!ok);
    }
    verdict(mismatches == 0, format!("{mismatches}/1000 mismatches"))
}

// ---------------------------------------------------------------- 5

fn criterion_format_round_trip() -> Verdict {
    let map = build_default_map();
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mut failures = 0;
    let mut last = Vec::new();
    for _ in 0..100 {
        let cfg = SimConfig {
            tickrate: [8, 16, 32][rng.gen_range(0..3)],
            duration_s: rng.gen_range(2.0..12.0),
            flash_rate: rng.gen_range(0.0..0.5),
            vis_radius: rng.gen_range(4.0..14.0),
            noise_std: rng.gen_range(0.0..2.0),
            seed: rng.gen(),
        };
        let mut round = generate_round(&map, &cfg, rng.gen());
        round.match_id = rng.gen();
        round.round_id = rng.gen();
        let mut bytes = Vec::new();
        write_round(&round, &mut bytes).unwrap();
        let back = read_round(&bytes[..]);
        let mut again = Vec::new();
        let ok = match back {
            Ok(r) => r == round && write_round(&r, &mut again).is_ok() && again == bytes,
            Err(_) => false,
        };
        failures += usize::from(!ok);
        last = bytes;
    }
    let mut rejected = 0;
    for i in 0..4 {
        let mut bad = last.clone();
        bad[i] ^= 0x20;
        rejected += usize::from(read_round(&bad[..]).is_err());
    }
    verdict(
        failures == 0 && rejected == 4,
        format!("{failures}/100 round-trip failures, {rejected}/4 corrupted magics rejected"),
    )
}

// ---------------------------------------------------------------- 6, 7, 9, 10

struct SeedRun {
    cecl: ArmOutcome,
    baseline: ArmOutcome,
    unmasked_eln: f64,
    masked_eln: f64,
    prep_group_ratio: (f64, f64),
    analysis: xego::harness::EmbeddingAnalysis,
}

fn tln1(o: &ArmOutcome, k: usize) -> f64 {
    o.result.report(Task::Tln, k).unwrap().subset_acc
}

/// Separation ratio with each team-time group as its own class.
fn group_ratio(model: &Model, prep: &xego::harness::Prepared) -> f64 {
    let groups = prep.groups(SplitName::Test);
    let idx: Vec<usize> = groups.iter().flat_map(|g| g.members.iter().copied()).collect();
    let owner: Vec<usize> = groups.iter().enumerate().flat_map(|(i, g)| g.members.iter().map(move |_| i)).collect();
    let e = xego::harness::embed(model, prep, &idx).unwrap();
    let d = e.shape()[1];
    let rows: Vec<Vec<f64>> = e
        .data()
        .chunks(d)
        .map(|r| {
            let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            r.iter().map(|x| x / n).collect()
        })
        .collect();
    separation_ratio(&pca_2d(&rows).unwrap(), &owner).unwrap()
}

fn desk_runs() -> (Vec<SeedRun>, Duration) {
    let mut runs = Vec::new();
    let mut paired_time = Duration::ZERO;
    for seed in SEEDS {
        let mut cfg = RunConfig::desk();
        cfg.seed = seed;
        let start = Instant::now();
        let rounds = simulate_corpus(&cfg);
        let dataset = build_dataset(&cfg, &rounds).unwrap();
        let prep = prepare(&cfg, dataset.clone(), true).unwrap();
        let arms = paired_arms(&cfg).unwrap();
        let cecl = train_arm(&cfg, &prep, &arms[0]).unwrap();
        let baseline = train_arm(&cfg, &prep, &arms[1]).unwrap();
        paired_time += start.elapsed();

        let open = prepare(&cfg, dataset, false).unwrap();
        let leaky = train_arm(&cfg, &open, &arms[0]).unwrap();
        let analysis = analyze_embeddings(&cecl.initial, &cecl.model, &prep, SplitName::Test).unwrap();
        runs.push(SeedRun {
            unmasked_eln: leaky.result.report(Task::Eln, 1).unwrap().subset_acc,
            masked_eln: cecl.result.report(Task::Eln, 1).unwrap().subset_acc,
            prep_group_ratio: (group_ratio(&cecl.initial, &prep), group_ratio(&cecl.model, &prep)),
            analysis,
            cecl,
            baseline,
        });
    }
    (runs, paired_time)
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn criterion_low_pov_gain(runs: &[SeedRun], time: Duration) -> Verdict {
    let per_seed: Vec<String> = runs
        .iter()
        .map(|r| format!("{:.2}/{:.2}", tln1(&r.cecl, 1), tln1(&r.baseline, 1)))
        .collect();
    let gap = mean(runs.iter().map(|r| tln1(&r.cecl, 1) - tln1(&r.baseline, 1)));
    verdict(
        gap >= 2.0 && time < Duration::from_secs(600),
        format!(
            "mean pov-1 TLN gain {gap:+.2} (cecl/baseline per seed: {}), {:.0}s",
            per_seed.join(", "),
            time.as_secs_f64()
        ),
    )
}

fn criterion_diminishing_gain(runs: &[SeedRun]) -> Verdict {
    let gap = |k| mean(runs.iter().map(|r| tln1(&r.cecl, k) - tln1(&r.baseline, k)));
    let gaps: Vec<String> = (1..=5).map(|k| format!("{:+.2}", gap(k))).collect();
    verdict(gap(1) > gap(5), format!("mean gap by pov 1..5: {}", gaps.join(" ")))
}

fn criterion_leak(runs: &[SeedRun]) -> Verdict {
    let open = mean(runs.iter().map(|r| r.unmasked_eln));
    let masked = mean(runs.iter().map(|r| r.masked_eln));
    verdict(
        open > 90.0 && open - masked >= 30.0,
        format!("ELN pov-1 unmasked {open:.2}, masked {masked:.2} (mean of {} seeds)", runs.len()),
    )
}

fn criterion_alignment(runs: &[SeedRun]) -> Verdict {
    let a = &runs[0].analysis;
    let (before, after) = (a.before.cosine.gap(), a.after.cosine.gap());
    let (sb, sa) = (a.before.separation, a.after.separation);
    let (gb, ga) = runs[0].prep_group_ratio;
    verdict(
        after > 0.0 && after >= 3.0 * before && sa > sb,
        format!(
            "cos gap {before:.4} -> {after:.4} ({:.2}x); side separation {sb:.3} -> {sa:.3} (group separation {gb:.3} -> {ga:.3})",
            after / before
        ),
    )
}

// ---------------------------------------------------------------- 8

fn criterion_ablation() -> Verdict {
    let grid = default_grid();
    let mut score = vec![0.0; grid.len()];
    for seed in SEEDS {
        let mut cfg = RunConfig::desk();
        cfg.seed = seed;
        let rounds = simulate_corpus(&cfg);
        let prep = prepare(&cfg, build_dataset(&cfg, &rounds).unwrap(), true).unwrap();
        for (i, row) in run_ablation(&cfg, &prep, &grid).unwrap().iter().enumerate() {
            score[i] += row.result.report(Task::Tln, 1).unwrap().subset_acc / SEEDS.len() as f64;
        }
    }
    let find = |b: Option<f64>, t: f64| grid.iter().position(|c: &AblationCell| c.b0 == b && c.t0 == t).unwrap();
    let collapse = score[find(Some(-10.0), 1.0)];
    let default = score[find(Some(-3.0), 10.0)];
    let min = score.iter().copied().fold(f64::INFINITY, f64::min);
    let max = score.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let table: Vec<String> = grid.iter().zip(&score).map(|(c, s)| format!("{}={s:.2}", c.label())).collect();
    let last = collapse == min && score.iter().filter(|&&s| s == min).count() == 1;
    verdict(last && default == max, format!("mean pov-1 TLN: {}", table.join(" ")))
}

fn main() {
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    if !filter.is_empty() && !filter.iter().any(|f| "acceptance".contains(f.as_str())) {
        return;
    }
    let mut results: Vec<(usize, &str, Verdict)> = vec![
        (1, "loss oracle", criterion_loss_oracle()),
        (2, "gradient check", criterion_grad_check()),
        (3, "bias initialization", criterion_bias_init()),
        (4, "metric oracles", criterion_metric_oracles()),
        (5, "format round-trip", criterion_format_round_trip()),
    ];
    let (runs, time) = desk_runs();
    results.push((6, "contrastive gain at pov 1", criterion_low_pov_gain(&runs, time)));
    results.push((7, "gain shrinks with pov count", criterion_diminishing_gain(&runs)));
    results.push((8, "bias/temperature ablation", criterion_ablation()));
    results.push((9, "leak sentinel", criterion_leak(&runs)));
    results.push((10, "embedding alignment", criterion_alignment(&runs)));
    results.sort_by_key(|r| r.0);
    let mut failed = 0;
    for (n, name, v) in &results {
        let tag = if v.pass { "PASS" } else { "FAIL" };
        println!("criterion {n:>2} {tag} {name}: {}", v.detail);
        failed += usize::from(!v.pass);
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
