//! Acceptance criteria 1-8. Each test prints one PASS/FAIL line to stderr
//! (bypassing output capture) before asserting.

use std::io::Write;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use idf::analysis::{
    agreement_sweep, default_epsilons, estimator_matrix_run, estimator_means, toy_model_config,
    toy_pmf, toy_train_config, train_toy, EstimatorCombo,
};
use idf::autodiff::rounding::{BackwardRounding, ForwardRounding, RoundingConfig};
use idf::config::RunConfig;
use idf::data::synth8x8;
use idf::flows::{
    build_flatten_flow, entropy_bits, factorization_gap, flatten_bpd, pushforward,
    verify_bijection, FlowModel, Mode, ModelConfig,
};
use idf::grid::GridTensor;
use idf::nn::{BackboneSpec, BlockVariant};
use idf::rans::{
    compress, decode_symbols, decompress, encode_symbols, quantize_cdf, CompressionReport,
    QuantizedCdf,
};
use idf::train::{evaluate_bpd, random_images, Trainer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn report(n: u32, name: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(
        std::io::stderr(),
        "criterion {n} ({name}): {verdict} | {detail}"
    );
    assert!(pass, "criterion {n} ({name}) failed: {detail}");
}

fn within(t: Instant, limit: Duration) -> (bool, String) {
    let e = t.elapsed();
    (
        e < limit,
        format!(
            "runtime {:.1}s (limit {}s)",
            e.as_secs_f64(),
            limit.as_secs()
        ),
    )
}

fn config_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name)
}

// ----- 1 -----

#[test]
fn criterion_1_exact_invertibility() {
    let t = Instant::now();
    let mut configs = 0;
    let mut failures = Vec::new();
    for bits in [1u32, 4, 8] {
        for levels in [1usize, 2, 3] {
            for steps in [0usize, 2, 4] {
                for invert in [false, true] {
                    let backbone = BackboneSpec::DenseNet {
                        variant: BlockVariant::Idfpp,
                        depth: 1,
                        channels: 8,
                    };
                    let cfg = ModelConfig {
                        bits,
                        levels,
                        steps,
                        invert_perms: invert,
                        backbone,
                        prior_backbone: backbone,
                        seed: configs as u64,
                        ..ModelConfig::tiny_idfpp()
                    };
                    let mut m = FlowModel::new(cfg).unwrap();
                    // Non-trivial translations: large rezero scales on random nets.
                    let mut rng = ChaCha8Rng::seed_from_u64(100 + configs as u64);
                    for i in 0..m.store().len() {
                        if m.store().get(i).name.ends_with(".alpha") {
                            m.store_mut().get_mut(i).value.data_mut()[0] = rng.gen_range(-4.0..4.0);
                        }
                    }
                    let x = random_images([8, 8, 3], bits, 1000, &mut rng).unwrap();
                    let z = m.model_forward(&x).unwrap();
                    let back = m.model_inverse(&z).unwrap();
                    if back != x {
                        failures.push(format!("bits={bits} L={levels} K={steps} invert={invert}"));
                    }
                    configs += 1;
                }
            }
        }
    }
    let (fast, time) = within(t, Duration::from_secs(120));
    let detail = format!(
        "{configs} configurations x 1000 inputs, {} mismatches; {time}",
        failures.len()
    );
    report(
        1,
        "exact invertibility",
        failures.is_empty() && configs == 54 && fast,
        &detail,
    );
}

// ----- 2 -----

#[test]
fn criterion_2_lemma_demonstrations() {
    let t = Instant::now();
    // One-bit toy table on {0,1}^2, flattened into the first axis of {0..3}^2.
    let toy = toy_pmf(1).unwrap();
    let flow = build_flatten_flow(&[2, 2]).unwrap();
    let pmf: Vec<(Vec<i64>, f64)> = flow
        .support()
        .unwrap()
        .into_iter()
        .map(|x| {
            let p = toy.prob(x[0] as usize, x[1] as usize);
            (x, p)
        })
        .collect();
    let pushed = pushforward(&flow, &pmf).unwrap();
    let mut column = [f64::NAN; 4];
    let mut off_axis = false;
    for (y, q) in &pushed {
        if y[1] != 0 || !(0..4).contains(&y[0]) {
            off_axis = true;
        } else {
            column[y[0] as usize] = *q;
        }
    }
    let image_ok = !off_axis && column == [0.1, 0.2, 0.3, 0.4] && factorization_gap(&pushed) == 0.0;

    // Brute-force bijectivity over every class-count vector with two or
    // three axes of at most 12 classes, plus vectors at the 10^4 bound.
    let mut flows = 0;
    let mut points = 0;
    let mut bijective = true;
    let mut shapes: Vec<Vec<i64>> = Vec::new();
    for a in 1..=12 {
        for b in 1..=12 {
            shapes.push(vec![a, b]);
            for c in 1..=12 {
                shapes.push(vec![a, b, c]);
            }
        }
    }
    shapes.extend([
        vec![10_000, 1],
        vec![1, 10_000],
        vec![100, 100],
        vec![10, 10, 100],
        vec![10, 10, 10, 10],
        vec![2; 13],
        vec![7, 1, 3, 1, 11, 2],
    ]);
    for k in &shapes {
        let f = build_flatten_flow(k).unwrap();
        match verify_bijection(&f) {
            Ok(r) => points += r.points,
            Err(_) => bijective = false,
        }
        flows += 1;
    }

    // flatten_bpd equals H(p)/d for random pmfs.
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = (flatten_bpd(&flow, &pmf).unwrap() - entropy_bits(&pmf) / 2.0).abs();
    for k in [vec![3, 5], vec![4, 4, 4], vec![2, 3, 2, 5], vec![17, 1]] {
        let f = build_flatten_flow(&k).unwrap();
        let pts = f.support().unwrap();
        let w: Vec<f64> = pts
            .iter()
            .map(|_| rng.gen_range(0.0..1.0f64).powi(3))
            .collect();
        let z: f64 = w.iter().sum();
        let p: Vec<(Vec<i64>, f64)> = pts.into_iter().zip(w.into_iter().map(|v| v / z)).collect();
        worst = worst.max((flatten_bpd(&f, &p).unwrap() - entropy_bits(&p) / k.len() as f64).abs());
    }
    let bpd_ok = worst <= 1e-12;
    let (fast, time) = within(t, Duration::from_secs(60));
    let detail = format!(
        "image column {column:?}; {flows} flows / {points} points bijective={bijective}; max |flatten_bpd - H/d| = {worst:.1e}; {time}"
    );
    report(
        2,
        "lemma demonstrations",
        image_ok && bijective && bpd_ok && fast,
        &detail,
    );
}

// ----- 3 -----

#[test]
fn criterion_3_learned_toy_factorization() {
    let t = Instant::now();
    let toy = toy_pmf(1).unwrap();
    let entropy = toy.entropy_bpd();
    let mut results = Vec::new();
    for seed in 0..10u64 {
        let cfg = toy_model_config(1, Mode::Discrete, RoundingConfig::STRAIGHT_THROUGH, seed);
        let run = train_toy(
            &toy,
            FlowModel::new(cfg).unwrap(),
            toy_train_config(seed),
            3000,
            0,
        )
        .unwrap();
        results.push(toy.expected_bpd(&run.model, 1).unwrap());
    }
    let best = results.iter().copied().fold(f64::INFINITY, f64::min);
    let (fast, time) = within(t, Duration::from_secs(600));
    let detail = format!(
        "best of 10 seeds {best:.5} bpd (target <= 0.94, entropy {entropy:.5}, factorized marginals {:.5}); all {:?}; {time}",
        toy.factorized_bpd(),
        results.iter().map(|v| (v * 1e4).round() / 1e4).collect::<Vec<_>>()
    );
    report(
        3,
        "learned toy factorization",
        best <= 0.94 && fast,
        &detail,
    );
}

// ----- 4 -----

#[test]
fn criterion_4_gradient_agreement() {
    let t = Instant::now();
    let eps = default_epsilons();
    let mut means = Vec::new();
    for bits in [8u32, 1] {
        let toy = toy_pmf(bits).unwrap();
        let cfg = toy_model_config(bits, Mode::Discrete, RoundingConfig::STRAIGHT_THROUGH, 0);
        let run = train_toy(
            &toy,
            FlowModel::new(cfg).unwrap(),
            toy_train_config(0),
            3000,
            0,
        )
        .unwrap();
        let sweep = agreement_sweep(&run.model, &toy, &eps, 10, 128, 1).unwrap();
        means.push(sweep.summary.iter().map(|s| s.mean).collect::<Vec<_>>());
    }
    let eight_ok = means[0].iter().all(|&m| m > 0.0);
    let one_min = means[1].iter().copied().fold(f64::INFINITY, f64::min);
    let (fast, time) = within(t, Duration::from_secs(900));
    let fmt = |v: &[f64]| {
        v.iter()
            .map(|m| format!("{m:.3}"))
            .collect::<Vec<_>>()
            .join(" ")
    };
    let detail = format!(
        "8-bit mean cosines [{}] (all > 0: {eight_ok}); 1-bit [{}] min {one_min:.3} (<= 0.2); {time}",
        fmt(&means[0]),
        fmt(&means[1])
    );
    report(
        4,
        "gradient agreement",
        eight_ok && one_min <= 0.2 && fast,
        &detail,
    );
}

// ----- 5 -----

#[test]
fn criterion_5_estimator_directions() {
    let t = Instant::now();
    let toy = toy_pmf(8).unwrap();
    let st = EstimatorCombo {
        mode: Mode::Discrete,
        rounding: RoundingConfig::STRAIGHT_THROUGH,
    };
    let soft = EstimatorCombo {
        mode: Mode::Discrete,
        rounding: RoundingConfig {
            forward: ForwardRounding::HardRound,
            backward: BackwardRounding::SoftRoundDerivative { temperature: 1.0 },
        },
    };
    let cont = EstimatorCombo {
        mode: Mode::Continuous,
        rounding: RoundingConfig::STRAIGHT_THROUGH,
    };
    let combos = [st, soft, cont];
    let rows = estimator_matrix_run(&toy, &combos, &[0, 1, 2], 3000).unwrap();
    let m = estimator_means(&rows, &combos);
    let soft_ok = m[1] >= m[0] - 0.02;
    let cont_ok = m[2] >= m[0];
    let (fast, time) = within(t, Duration::from_secs(1800));
    let detail = format!(
        "8-bit toy, 3 seeds: discrete rnd/id {:.5}, rnd/dsigma1 {:.5}, continuous rnd/id {:.5} bpd; {time}",
        m[0], m[1], m[2]
    );
    report(
        5,
        "estimator directions",
        soft_ok && cont_ok && fast,
        &detail,
    );
}

// ----- 6 -----

fn random_cdf(rng: &mut ChaCha8Rng, n: usize) -> QuantizedCdf {
    let mut pmf: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0f64).powi(4)).collect();
    if rng.gen_bool(0.2) {
        // A few symbols with no mass at all.
        for p in pmf.iter_mut().take(n / 3) {
            *p = 0.0;
        }
        pmf[n - 1] += 1.0;
    }
    let z: f64 = pmf.iter().sum();
    quantize_cdf(&pmf.iter().map(|p| p / z).collect::<Vec<_>>(), 24).unwrap()
}

#[test]
fn criterion_6_coder_suite() {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut failures = 0;
    for _ in 0..10_000 {
        let len = rng.gen_range(0..40);
        let shared = rng.gen_bool(0.5);
        let n = rng.gen_range(1..300);
        let base = random_cdf(&mut rng, n);
        let mut cdfs = Vec::with_capacity(len);
        for _ in 0..len {
            let n = rng.gen_range(1..300);
            cdfs.push(if shared {
                base.clone()
            } else {
                random_cdf(&mut rng, n)
            });
        }
        let symbols: Vec<usize> = cdfs.iter().map(|c| rng.gen_range(0..c.len())).collect();
        let ok = encode_symbols(&symbols, &cdfs)
            .and_then(|bytes| decode_symbols(&bytes, &cdfs))
            .map(|back| back == symbols)
            .unwrap_or(false);
        if !ok {
            failures += 1;
        }
    }

    // Rate against the quantized cross-entropy on 10^4-symbol streams.
    let mut worst_excess = f64::NEG_INFINITY;
    for (k, n) in [
        (2usize, 10_000usize),
        (16, 10_000),
        (256, 10_000),
        (2048, 10_000),
    ] {
        let cdf = random_cdf(&mut rng, k);
        let total = cdf.cum()[cdf.len()] as f64;
        let mut symbols = Vec::with_capacity(n);
        for _ in 0..n {
            let u = rng.gen_range(0.0..total) as u32;
            symbols.push(cdf.cum().partition_point(|&c| c <= u) - 1);
        }
        let cdfs = vec![cdf.clone(); n];
        let bytes = encode_symbols(&symbols, &cdfs).unwrap();
        let info: f64 = symbols.iter().map(|&s| cdf.bits(s)).sum();
        let excess = 8.0 * bytes.len() as f64 - info - (0.01 * n as f64 + 256.0);
        worst_excess = worst_excess.max(excess);
    }

    // Byte-identical streams across runs, for raw symbols and whole images.
    let cdfs: Vec<QuantizedCdf> = (0..500).map(|_| random_cdf(&mut rng, 50)).collect();
    let symbols: Vec<usize> = cdfs.iter().map(|c| rng.gen_range(0..c.len())).collect();
    let same_symbols =
        encode_symbols(&symbols, &cdfs).unwrap() == encode_symbols(&symbols, &cdfs).unwrap();
    let model = FlowModel::new(ModelConfig::tiny_idfpp()).unwrap();
    let x = synth8x8(4, 9).unwrap();
    let a = compress(&model, &x).unwrap().to_bytes().unwrap();
    let b = compress(&model, &x).unwrap().to_bytes().unwrap();
    let deterministic = same_symbols && a == b;

    let (fast, time) = within(t, Duration::from_secs(300));
    let detail = format!(
        "10000 fuzz cases, {failures} failures; worst rate excess over bound {worst_excess:.1} bits (<= 0); deterministic {deterministic}; {time}"
    );
    report(
        6,
        "coder suite",
        failures == 0 && worst_excess <= 0.0 && deterministic && fast,
        &detail,
    );
}

// ----- 7 -----

fn train_from_config(name: &str, seed: u64) -> (FlowModel, f64) {
    let cfg = RunConfig::load(&config_path(name)).unwrap();
    let (train, valid) = cfg.load_data().unwrap();
    let valid = valid.expect("validation split");
    let mut trainer = Trainer::new(
        FlowModel::new(cfg.model_config(seed).unwrap()).unwrap(),
        cfg.train_config(seed),
    )
    .unwrap();
    trainer.fit(&train, Some(&valid)).unwrap();
    let model = trainer.eval_model();
    let bpd = evaluate_bpd(&model, &valid, 100).unwrap();
    (model, bpd)
}

#[test]
fn criterion_7_end_to_end_codec() {
    let t = Instant::now();
    let (model, _) = train_from_config("tiny_idfpp.toml", 0);
    // Held out: a seed the training configuration never uses.
    let test: GridTensor = synth8x8(200, 7_777).unwrap();
    let stream = compress(&model, &test).unwrap();
    let restored = decompress(&model, &stream).unwrap();
    let exact = (0..200)
        .all(|i| restored.batch_slice(i, i + 1).unwrap() == test.batch_slice(i, i + 1).unwrap());
    let r = CompressionReport::new(&stream).unwrap();
    let nll = evaluate_bpd(&model, &test, 100).unwrap();
    let rate_ok = r.coded_bpd <= nll + 0.05 && r.file_bpd <= nll + 0.05;
    let (fast, time) = within(t, Duration::from_secs(1800));
    let detail = format!(
        "200 images bit-exact {exact}; actual {:.4} bpd (file incl. header {:.4}) vs NLL {nll:.4} (+0.05 allowed); NLL < 8: {}; {time}",
        r.coded_bpd,
        r.file_bpd,
        nll < 8.0
    );
    report(
        7,
        "end-to-end codec",
        exact && rate_ok && nll < 8.0 && fast,
        &detail,
    );
}

// ----- 8 -----

#[test]
fn criterion_8_modification_ablation() {
    let seeds = [0u64, 1];
    let mean = |name: &str| {
        seeds
            .iter()
            .map(|&s| train_from_config(name, s).1)
            .sum::<f64>()
            / seeds.len() as f64
    };
    let full = mean("tiny_idfpp.toml");
    let base = mean("tiny_idf.toml");
    let detail = format!(
        "mean validation bpd over seeds {seeds:?}: all flags {full:.4}, no flags {base:.4}"
    );
    report(8, "modification ablation", full <= base, &detail);
}
