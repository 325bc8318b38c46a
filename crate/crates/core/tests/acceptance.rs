//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::path::Path;
use std::time::Instant;

use rand::Rng as _;

use tds_core::augment::AugmentConfig;
use tds_core::dataset::{
    full_batch, CateFeature, FeatureSchema, Manifest, Record, SeqFeature, Side, SpanDataset, StatFeature,
};
use tds_core::eval::{auc, coefficient_of_variation, gauc, jsd};
use tds_core::generator::{generate_dataset, Generator, GeneratorConfig};
use tds_core::losses::{gaussian_entropy, prior_loss, LossWeights};
use tds_core::model::{TowerConfig, TwinTower};
use tds_core::nn::{finite_diff_check_with, Checkpoint, Matrix, Stencil};
use tds_core::rng::substream;
use tds_core::trainer::{
    accumulate_gradients, check_future_blind, checkpoint_file, evaluate, recon_targets, train_incremental,
    train_on_spans, Method, RunLog, TrainConfig, TrainOptions, CHECKPOINT_DIR, FINAL_CHECKPOINT, RUNLOG_FILE,
};

const SEEDS: u64 = 5;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

// ---------------------------------------------------------------- toy problem

fn toy_schema() -> FeatureSchema {
    let stat = |name: &str, side| StatFeature {
        name: name.into(),
        side,
        n_buckets: 5,
        min: 0.0,
        max: 1.0,
    };
    let seq = |name: &str, side| SeqFeature {
        name: name.into(),
        side,
        vocab_size: 6,
        max_len: 3,
    };
    let cate = |name: &str, side| CateFeature {
        name: name.into(),
        side,
        vocab_size: 4,
    };
    FeatureSchema {
        stat: vec![stat("us0", Side::User), stat("us1", Side::User), stat("is0", Side::Item)],
        seq: vec![seq("uq0", Side::User), seq("iq0", Side::Item), seq("iq1", Side::Item)],
        cate: vec![cate("uc0", Side::User), cate("ic0", Side::Item), cate("ic1", Side::Item)],
        n_tasks: 2,
    }
}

/// Every (user, item) pair of a 2×2 world, with random features and cascaded labels.
fn toy_span(seed: u64) -> SpanDataset {
    let mut rng = substream(seed, &[7]);
    let records = (0..4)
        .map(|k| {
            let a = rng.random_bool(0.5);
            Record {
                user: (k % 2) as u32,
                item: (k / 2) as u32,
                labels: vec![u8::from(a), u8::from(a && rng.random_bool(0.5))],
                stat: (0..3).map(|_| rng.random_range(-0.1..1.1)).collect(),
                seq: (0..3)
                    .map(|_| {
                        let len = rng.random_range(0..=3);
                        (0..len).map(|_| rng.random_range(1..6)).collect()
                    })
                    .collect(),
                cate: (0..3).map(|_| rng.random_range(0..4)).collect(),
            }
        })
        .collect();
    SpanDataset { span: 0, records }
}

fn toy_config(method: Method, seed: u64) -> TrainConfig {
    TrainConfig {
        method,
        batch_size: 4,
        augment: AugmentConfig {
            p: 0.5,
            ..AugmentConfig::default()
        },
        weights: LossWeights {
            alpha: 0.7,
            tau: 0.5,
            listwise: true,
        },
        seed,
        tower: TowerConfig {
            embed_dim: 3,
            encoder_hidden: vec![5],
            d_z: 4,
            decoder_hidden: vec![5],
            init_scale: 0.5,
        },
        ..TrainConfig::default()
    }
}

// ---------------------------------------------------------------- AC1-3

fn ac1_gradients() -> Outcome {
    let start = Instant::now();
    let schema = toy_schema();
    let mut worst: f64 = 0.0;
    let mut failures = Vec::new();
    for method in Method::ALL {
        for seed in 0..20 {
            let cfg = toy_config(method, seed);
            let mut model = TwinTower::new(&schema, &cfg.tower, cfg.adam(), seed).unwrap();
            let batch = full_batch(&schema, &toy_span(seed));
            let targets = recon_targets(&model, &batch, &cfg, 0).unwrap();
            let mut store = model.store.clone();
            let report = finite_diff_check_with(
                &mut store,
                |s| {
                    std::mem::swap(&mut model.store, s);
                    let r = accumulate_gradients(&mut model, &batch, &cfg, 0, Some(&targets)).map(|l| l.total);
                    std::mem::swap(&mut model.store, s);
                    r
                },
                1e-5,
                1e-4,
                Stencil::Central4,
            )
            .unwrap();
            if let Some(w) = report.worst() {
                worst = worst.max(w.rel_error);
            }
            if !report.passed() {
                failures.push(format!("{method}/{seed}"));
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        failures.is_empty() && secs < 60.0,
        format!("4 methods x 20 seeds, worst relative error {worst:.2e}, {secs:.1}s, failing {failures:?}"),
    )
}

fn brute_prior(views: &[Vec<Vec<f64>>]) -> f64 {
    let j = views.len() as f64;
    let n = views[0].len();
    let d = views[0][0].len();
    let mut total = 0.0;
    for r in 0..n {
        let mean: Vec<f64> = (0..d).map(|c| views.iter().map(|v| v[r][c]).sum::<f64>() / j).collect();
        let mut per_row = 0.0;
        for v in views {
            per_row += (0..d).map(|c| (v[r][c] - mean[c]).powi(2)).sum::<f64>() / d as f64;
        }
        total += per_row / j;
    }
    total / n as f64
}

fn to_matrices(views: &[Vec<Vec<f64>>]) -> Vec<Matrix> {
    views
        .iter()
        .map(|v| Matrix::from_vec(v.len(), v[0].len(), v.concat()).unwrap())
        .collect()
}

fn ac2_prior_oracle() -> Outcome {
    let mut rng = substream(2024, &[2]);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let j = rng.random_range(1..=8);
        let d = rng.random_range(1..=16);
        let n = rng.random_range(1..=4);
        let views: Vec<Vec<Vec<f64>>> = (0..j)
            .map(|_| (0..n).map(|_| (0..d).map(|_| rng.random_range(-3.0..3.0)).collect()).collect())
            .collect();
        let z = to_matrices(&views);
        let (got, _) = prior_loss(&z, &z).unwrap();
        // Both sides carry the same latents, so the sum is twice the oracle.
        worst = worst.max((got - 2.0 * brute_prior(&views)).abs());
    }
    let one = |x: f64| Matrix::from_vec(1, 1, vec![x]).unwrap();
    let (worked, _) = prior_loss(&[one(1.0), one(3.0)], &[one(0.0), one(0.0)]).unwrap();
    outcome(
        worst <= 1e-12 && worked == 1.0,
        format!("1000 instances, max |diff| {worst:.1e}; worked example J=2 z={{1,3}} -> {worked}"),
    )
}

fn ac3_entropy() -> Outcome {
    let schema = toy_schema();
    let mut worst: f64 = 0.0;
    let mut steps_match = true;
    for seed in 0..20 {
        let cfg = toy_config(Method::ElboTds, seed);
        let batch = full_batch(&schema, &toy_span(seed));
        let base = TwinTower::new(&schema, &cfg.tower, cfg.adam(), seed).unwrap();
        let constant = 2.0 * cfg.augment.j as f64 * gaussian_entropy(cfg.tower.d_z);
        let run = |with_entropy: bool| {
            let mut m = base.clone();
            m.store.zero_grads();
            let l = accumulate_gradients(&mut m, &batch, &cfg, 0, None).unwrap();
            let objective = if with_entropy { l.total - cfg.weights.alpha * constant } else { l.total };
            let grads: Vec<f64> = m.store.params().iter().flat_map(|p| p.grad.data().to_vec()).collect();
            m.store.adam_step().unwrap();
            let values: Vec<u64> = m.store.params().iter().flat_map(|p| p.value.data().iter().map(|x| x.to_bits())).collect();
            (objective, grads, values)
        };
        let (o0, g0, v0) = run(false);
        let (o1, g1, v1) = run(true);
        assert!(o0 != o1);
        for (a, b) in g0.iter().zip(&g1) {
            worst = worst.max((a - b).abs());
        }
        steps_match &= v0 == v1;
    }
    outcome(
        worst == 0.0 && steps_match,
        format!("20 instances, max |grad diff| {worst}, post-step parameters identical: {steps_match}"),
    )
}

// ---------------------------------------------------------------- experiments

fn reference_generator(seed: u64) -> GeneratorConfig {
    GeneratorConfig {
        n_users: 1000,
        interactions_per_user: 20,
        n_spans: 8,
        rho: 0.6,
        spurious_weight: 0.5,
        shock_span: None,
        seed,
        ..GeneratorConfig::default()
    }
}

fn reference_train(method: Method, seed: u64) -> TrainConfig {
    TrainConfig {
        method,
        seed,
        augment: AugmentConfig {
            r: 2,
            p_seq: 0.2,
            p_cate: 0.2,
            p: 0.2,
            j: 4,
            seed,
        },
        ..TrainConfig::default()
    }
}

fn run(g: &GeneratorConfig, method: Method, seed: u64) -> RunLog {
    let generator = Generator::new(g.clone()).unwrap();
    let spans = generator.spans().unwrap();
    train_on_spans(&g.schema(), &spans, &reference_train(method, seed), &TrainOptions::default())
        .unwrap()
        .log
}

/// Runs of `methods` on `seeds` fresh datasets; `logs[method][seed]`.
fn experiment(g: impl Fn(u64) -> GeneratorConfig, methods: &[Method]) -> Vec<Vec<RunLog>> {
    methods
        .iter()
        .map(|&m| (0..SEEDS).map(|s| run(&g(s), m, s)).collect())
        .collect()
}

fn mean_auc(log: &RunLog) -> f64 {
    log.mean("auc.task0").unwrap()
}

fn avg(xs: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.into_iter().collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn last(log: &RunLog, metric: &str) -> f64 {
    log.series(metric).last().unwrap().1
}

fn ac4_direction(reference: &[Vec<RunLog>], secs: f64) -> Outcome {
    let [erm, aug, _, elbo] = [0, 1, 2, 3].map(|k| avg(reference[k].iter().map(mean_auc)));
    outcome(
        elbo >= erm + 0.005 && elbo >= aug && secs < 900.0,
        format!("mean AUC erm {erm:.4} aug {aug:.4} elbo_tds {elbo:.4} (elbo-erm {:+.4}), {secs:.0}s", elbo - erm),
    )
}

fn ac5_no_shift() -> Outcome {
    let g = |s| GeneratorConfig {
        rho: 1.0,
        spurious_weight: 0.0,
        shock_span: None,
        ..reference_generator(s)
    };
    let logs = experiment(g, &[Method::Erm, Method::ElboTds]);
    let erm = avg(logs[0].iter().map(mean_auc));
    let elbo = avg(logs[1].iter().map(mean_auc));
    outcome(
        (elbo - erm).abs() <= 0.005,
        format!("mean AUC erm {erm:.4} elbo_tds {elbo:.4} (|diff| {:.4})", (elbo - erm).abs()),
    )
}

fn ac6_collapse(reference: &[Vec<RunLog>]) -> Outcome {
    let mut wins = 0;
    let mut rows = Vec::new();
    for s in 0..SEEDS as usize {
        let (nce, elbo) = (&reference[2][s], &reference[3][s]);
        let vv = (last(nce, "rel_view_variance"), last(elbo, "rel_view_variance"));
        let pe = (last(nce, "rel_probe_error"), last(elbo, "rel_probe_error"));
        if vv.0 < vv.1 && pe.0 > pe.1 {
            wins += 1;
        }
        rows.push(format!("[var {:.3}/{:.3} probe {:.3}/{:.3}]", vv.0, vv.1, pe.0, pe.1));
    }
    outcome(wins >= 4, format!("{wins}/5 seeds; infonce/elbo_tds {}", rows.join(" ")))
}

fn ac7_shock() -> Outcome {
    let g = |s| GeneratorConfig {
        shock_span: Some(6),
        shock_scale: 3.0,
        ..reference_generator(s)
    };
    let logs = experiment(g, &[Method::Erm, Method::ElboTds]);
    let drop = |log: &RunLog| log.get(5, "auc.task0").unwrap() - log.get(6, "auc.task0").unwrap();
    let mut wins = 0;
    let mut rows = Vec::new();
    for s in 0..SEEDS as usize {
        let (e, b) = (drop(&logs[0][s]), drop(&logs[1][s]));
        if b < e {
            wins += 1;
        }
        rows.push(format!("{e:+.4}/{b:+.4}"));
    }
    outcome(wins >= 4, format!("{wins}/5 seeds; 5->6 AUC drop erm/elbo_tds {}", rows.join(" ")))
}

// ---------------------------------------------------------------- AC8

fn pair_count_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] == 1 && labels[j] == 0 {
                den += 1.0;
                num += if si > sj {
                    1.0
                } else if si == sj {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    num / den
}

fn ac8_metrics() -> Outcome {
    let mut rng = substream(8, &[8]);
    let mut worst: f64 = 0.0;
    let mut gauc_ok = true;
    for _ in 0..100 {
        let n = rng.random_range(2..60);
        // Coarse scores so ties occur.
        let scores: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..10u8)) / 10.0).collect();
        let mut labels: Vec<u8> = (0..n).map(|_| u8::from(rng.random_bool(0.4))).collect();
        labels[0] = 1;
        labels[1] = 0;
        let a = auc(&scores, &labels).unwrap();
        worst = worst.max((a - pair_count_auc(&scores, &labels)).abs());
        let g = gauc(&scores, &labels, &vec![3; n]).unwrap();
        gauc_ok &= (g.value - a).abs() <= 1e-12;
    }
    let p = [0.2, 0.5, 0.3];
    let q = [0.6, 0.1, 0.3];
    let jsd_self = jsd(&p, &p).unwrap();
    let symmetric = jsd(&p, &q).unwrap() == jsd(&q, &p).unwrap();
    let disjoint = jsd(&[1.0, 0.0], &[0.0, 1.0]).unwrap();
    let cv = coefficient_of_variation(&[1.0, 3.0]).unwrap();
    outcome(
        worst <= 1e-12 && gauc_ok && jsd_self == 0.0 && symmetric && (disjoint - 1.0).abs() < 1e-15 && cv == 0.5,
        format!(
            "AUC max |diff| {worst:.1e}; single-group GAUC matches AUC {gauc_ok}; JSD(p,p) {jsd_self}, symmetric {symmetric}, disjoint {disjoint}; CV {cv}"
        ),
    )
}

// ---------------------------------------------------------------- AC9-10

fn small_generator(seed: u64) -> GeneratorConfig {
    GeneratorConfig {
        n_users: 60,
        n_items: 40,
        interactions_per_user: 8,
        n_spans: 5,
        seed,
        ..GeneratorConfig::default()
    }
}

fn small_train(method: Method, seed: u64) -> TrainConfig {
    TrainConfig {
        method,
        seed,
        batch_size: 32,
        augment: AugmentConfig { seed, ..AugmentConfig::default() },
        probe_rows: 256,
        ..TrainConfig::default()
    }
}

fn param_bits(m: &TwinTower) -> Vec<u64> {
    m.store.params().iter().flat_map(|p| p.value.data().iter().map(|x| x.to_bits())).collect()
}

fn ac9_protocol() -> Outcome {
    let mut problems = Vec::new();
    for method in Method::ALL {
        let dir = tempfile::tempdir().unwrap();
        let manifest = generate_dataset(small_generator(9), &dir.path().join("data")).unwrap();
        let cfg = small_train(method, 9);
        let out_dir = dir.path().join("run");
        let full = train_incremental(
            &manifest,
            &cfg,
            &TrainOptions {
                out_dir: Some(out_dir.clone()),
                ..TrainOptions::default()
            },
        )
        .unwrap();

        for (span, counts) in &full.visits {
            if counts.iter().any(|&c| c != 1) {
                problems.push(format!("{method}: span {span} not consumed exactly once"));
            }
        }
        if full.visits.len() != manifest.n_spans() - 1 {
            problems.push(format!("{method}: trained {} spans", full.visits.len()));
        }
        for t in 0..manifest.n_spans() - 1 {
            let ck = Checkpoint::load(&out_dir.join(CHECKPOINT_DIR).join(checkpoint_file(t)), None).unwrap();
            if check_future_blind(&ck, t as u32 + 1).is_err() {
                problems.push(format!("{method}: checkpoint {t} has seen span {}", t + 1));
            }
            if check_future_blind(&ck, t as u32).is_ok() {
                problems.push(format!("{method}: checkpoint {t} passes blindness on its own span"));
            }
        }

        let head = train_incremental(
            &manifest,
            &cfg,
            &TrainOptions {
                stop_after_span: Some(1),
                ..TrainOptions::default()
            },
        )
        .unwrap();
        let reloaded = Checkpoint::read_from(head.checkpoint.to_bytes().as_slice(), None).unwrap();
        let tail = train_incremental(
            &manifest,
            &cfg,
            &TrainOptions {
                resume: Some(reloaded),
                ..TrainOptions::default()
            },
        )
        .unwrap();
        let mut joined = head.log.clone();
        joined.extend(&tail.log);
        if param_bits(&tail.model) != param_bits(&full.model) || joined != full.log || tail.checkpoint != full.checkpoint {
            problems.push(format!("{method}: resumed run differs from uninterrupted run"));
        }
    }
    outcome(
        problems.is_empty(),
        if problems.is_empty() {
            "all methods: visit counts all 1, every checkpoint future-blind, resume bit-exact".to_owned()
        } else {
            problems.join("; ")
        },
    )
}

fn files_under(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().display().to_string();
                out.push((rel, std::fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

/// Generates, trains and evaluates into `root`; returns the final evaluation report rendered as text.
fn pipeline(root: &Path) -> String {
    let manifest = generate_dataset(small_generator(10), &root.join("data")).unwrap();
    let cfg = small_train(Method::ElboTds, 10);
    train_incremental(
        &Manifest::load(&root.join("data").join(tds_core::dataset::format::MANIFEST_FILE)).unwrap(),
        &cfg,
        &TrainOptions {
            out_dir: Some(root.join("run")),
            ..TrainOptions::default()
        },
    )
    .unwrap();
    let ck = Checkpoint::load(&root.join("run").join(FINAL_CHECKPOINT), None).unwrap();
    let mut model = TwinTower::new(&manifest.schema, &cfg.tower, cfg.adam(), cfg.seed).unwrap();
    ck.restore_into(&mut model.store).unwrap();
    let last = manifest.n_spans() - 1;
    check_future_blind(&ck, last as u32).unwrap();
    let report = evaluate(&model, &manifest.load_span(last).unwrap(), &cfg).unwrap();
    format!("{report:?}")
}

fn ac10_determinism() -> Outcome {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = pipeline(a.path());
    let rb = pipeline(b.path());
    let fa = files_under(a.path());
    let fb = files_under(b.path());
    // Wall-clock timings are the only intended difference between runs.
    let keep = |f: &Vec<(String, Vec<u8>)>| -> Vec<(String, Vec<u8>)> {
        f.iter().filter(|(n, _)| !n.ends_with("timing.jsonl")).cloned().collect()
    };
    let data = fa.iter().filter(|(n, _)| n.starts_with("data")).count();
    let required = [RUNLOG_FILE, FINAL_CHECKPOINT].iter().all(|f| fa.iter().any(|(n, _)| n.ends_with(f)));
    let same_files = keep(&fa) == keep(&fb);
    outcome(
        same_files && required && ra == rb,
        format!("{} files compared ({data} data), byte-identical: {same_files}, final eval identical: {}", keep(&fa).len(), ra == rb),
    )
}

fn main() {
    let mut results: Vec<(&str, Outcome)> = Vec::new();
    let mut report = |id: &'static str, o: Outcome| {
        println!("{id} {}: {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
        results.push((id, o));
    };
    report("AC1 gradient suite", ac1_gradients());
    report("AC2 prior oracle", ac2_prior_oracle());
    report("AC3 entropy cancellation", ac3_entropy());

    let start = Instant::now();
    let reference = experiment(reference_generator, &[Method::Erm, Method::Aug, Method::Infonce, Method::ElboTds]);
    let secs = start.elapsed().as_secs_f64();
    report("AC4 direction of effect", ac4_direction(&reference, secs));
    report("AC5 no-shift control", ac5_no_shift());
    report("AC6 collapse diagnostic", ac6_collapse(&reference));
    report("AC7 shock robustness", ac7_shock());
    report("AC8 metric oracles", ac8_metrics());
    report("AC9 protocol invariants", ac9_protocol());
    report("AC10 end-to-end determinism", ac10_determinism());

    let failed: Vec<&str> = results.iter().filter(|(_, o)| !o.passed).map(|(id, _)| *id).collect();
    if failed.is_empty() {
        println!("acceptance: all {} criteria passed", results.len());
    } else {
        println!("acceptance: {} of {} criteria failed: {}", failed.len(), results.len(), failed.join(", "));
        std::process::exit(1);
    }
}
