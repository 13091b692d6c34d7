//! Acceptance suite. Each test prints one `PASS`/`FAIL` line for its
//! criterion before asserting, so
//! `cargo test -p monet-core --test acceptance -- --nocapture --test-threads=1`
//! reads as a report. The long training criteria (7, 8, 9) are ignored by
//! default; add `--include-ignored` to run them.

use std::fs;
use std::path::PathBuf;
use std::time::Instant;

use monet_core::autograd::Graph;
use monet_core::component_vae::{spatial_broadcast, VaeArch};
use monet_core::data::{generate_multidsprites, DatasetHeader, DatasetReader, DatasetWriter, SpriteConfig};
use monet_core::decomposition::{decompose, AttentionArch, LogMaskStack};
use monet_core::evaluation::{score_source, AblationReport, AblationRun};
use monet_core::model::{MaskSource, MonetArch};
use monet_core::nn::{Bound, ParamKind, ParamStore};
use monet_core::objective::{latent_kl, logsumexp, mask_kl, mixture_nll, LossConfig};
use monet_core::training::{
    init_params, read_metrics, Checkpoint, MaskMode, MetricWriter, ProceduralSource, SceneSource, TrainConfig, Trainer,
};
use monet_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn report(id: u32, pass: bool, what: &str, detail: &str) {
    println!("[{}] criterion {id:>2}: {what}: {detail}", if pass { "PASS" } else { "FAIL" });
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Truncated-normal weights with biases drawn uniformly from ±0.2, so that
/// no unit sits exactly on a ReLU kink.
fn random_params(arch: &MonetArch, rng: &mut ChaCha8Rng) -> ParamStore<f64> {
    let specs = arch.param_specs().unwrap();
    let mut p = ParamStore::<f64>::init(&specs, rng);
    for s in specs.iter().filter(|s| s.kind == ParamKind::Bias) {
        p.get_mut(&s.name).unwrap().data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.2..0.2));
    }
    p
}

fn softmax_stack(rng: &mut ChaCha8Rng, b: usize, k: usize, plane: usize) -> Vec<f64> {
    let logits: Vec<f64> = (0..b * k * plane).map(|_| rng.random_range(-3.0..3.0)).collect();
    let mut out = vec![0.0; logits.len()];
    for i in 0..b {
        for p in 0..plane {
            let col: Vec<f64> = (0..k).map(|s| logits[(i * k + s) * plane + p]).collect();
            let lse = logsumexp(&col);
            for s in 0..k {
                out[(i * k + s) * plane + p] = col[s] - lse;
            }
        }
    }
    out
}

#[test]
fn c01_mask_normalization() {
    let start = Instant::now();
    let arch = MonetArch::new(16, 16).attention;
    let mut worst: f64 = 0.0;
    for draw in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + draw);
        let full = MonetArch::new(16, 16);
        let params: ParamStore<f32> = random_params(&full, &mut rng).cast();
        let x: Tensor<f32> = Tensor::new(&[1, 3, 16, 16], (0..768).map(|_| rng.random::<f32>()).collect()).unwrap();
        for k in [2, 5, 11] {
            let mut g = Graph::new();
            let mut bound = Bound::frozen(&params);
            let xv = g.constant(x.clone());
            let d = decompose(&arch, &mut g, &mut bound, xv, k).unwrap();
            let stack = LogMaskStack::from_slots(&g, &d.log_masks).unwrap();
            worst = worst.max(stack.normalization_error());
        }
    }
    let pass = worst < 1e-5;
    let detail = format!(
        "max |logsumexp_k log m_k| = {worst:.2e} < 1e-5 over 100 draws x K in {{2,5,11}} ({:.1?})",
        start.elapsed()
    );
    report(1, pass, "mask normalization", &detail);
    assert!(pass);
}

#[test]
fn c02_log_linear_equivalence() {
    let start = Instant::now();
    let arch = AttentionArch::new(8, 8, 3);
    let full = MonetArch { attention: arch.clone(), vae: VaeArch::new(8, 8) };
    let mut worst: f64 = 0.0;
    for case in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + case);
        let params = random_params(&full, &mut rng);
        let x = random_tensor(&mut rng, &[1, 3, 8, 8], 0.0, 1.0);
        let k = rng.random_range(2..=6);

        let mut g = Graph::new();
        let mut bound = Bound::frozen(&params);
        let xv = g.constant(x.clone());
        let d = decompose(&arch, &mut g, &mut bound, xv, k).unwrap();
        let log_space: Vec<Vec<f64>> =
            d.log_masks.iter().map(|&v| g.value(v).data().iter().map(|l| l.exp()).collect()).collect();

        // m_k = s_{k-1} α_k, s_k = s_{k-1}(1 − α_k), last mask = s_{K-1}
        let mut scope = vec![1.0f64; 64];
        let mut linear = Vec::new();
        for _ in 0..k - 1 {
            let mut g = Graph::new();
            let mut bound = Bound::frozen(&params);
            // batch of one: channel concatenation is plain appending
            let mut data = x.data().to_vec();
            data.extend(scope.iter().map(|s| s.ln()));
            let input = Tensor::new(&[1, 4, 8, 8], data).unwrap();
            let iv = g.constant(input);
            let logits = arch.apply(&mut g, &mut bound, iv).unwrap();
            let alpha: Vec<f64> = g.value(logits).data().iter().map(|&l| 1.0 / (1.0 + (-l).exp())).collect();
            linear.push(scope.iter().zip(&alpha).map(|(s, a)| s * a).collect::<Vec<_>>());
            scope = scope.iter().zip(&alpha).map(|(s, a)| s * (1.0 - a)).collect();
        }
        linear.push(scope);
        for (a, b) in log_space.iter().zip(&linear) {
            for (u, v) in a.iter().zip(b) {
                worst = worst.max((u - v).abs());
            }
        }
    }
    let pass = worst < 1e-5;
    let detail =
        format!("max |exp(log m) - m_linear| = {worst:.2e} < 1e-5 on 20 random 8x8 cases ({:.1?})", start.elapsed());
    report(2, pass, "log/linear recursion equivalence", &detail);
    assert!(pass);
}

#[test]
fn c03_closed_form_kls() {
    let start = Instant::now();
    let triple = [(0.0f64, 1.0f64, 0.0), (1.0, 1.0, 0.5), (0.0, 0.5, 0.318147)];
    let mut kl_err: f64 = 0.0;
    for (mu, sigma, expected) in triple {
        let got = latent_kl(&Tensor::<f64>::full(&[1, 1, 1], mu), &Tensor::full(&[1, 1, 1], sigma.ln())).unwrap();
        kl_err = kl_err.max((got - expected).abs());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut mask_err: f64 = 0.0;
    for _ in 0..50 {
        let (lm, lt) = (softmax_stack(&mut rng, 1, 3, 16), softmax_stack(&mut rng, 1, 3, 16));
        let brute: f64 = lm.iter().zip(&lt).map(|(a, b)| a.exp() * (a - b)).sum();
        let got = mask_kl(&Tensor::new(&[1, 3, 4, 4], lm).unwrap(), &Tensor::new(&[1, 3, 4, 4], lt).unwrap()).unwrap();
        mask_err = mask_err.max((got - brute).abs());
    }
    let pass = kl_err < 1e-6 && mask_err < 1e-6;
    let detail = format!(
        "latent KL triple err {kl_err:.2e}, mask KL brute-force err {mask_err:.2e} (both < 1e-6, {:.1?})",
        start.elapsed()
    );
    report(3, pass, "closed-form KLs", &detail);
    assert!(pass);
}

#[test]
fn c04_mixture_nll_oracle() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (sbg, sfg) = (0.09, 0.11);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let x = random_tensor(&mut rng, &[1, 3, 2, 2], 0.0, 1.0);
        let means = random_tensor(&mut rng, &[1, 3, 3, 2, 2], 0.0, 1.0);
        let lm = softmax_stack(&mut rng, 1, 3, 4);
        let mut brute = 0.0;
        for p in 0..4 {
            let mut mix = 0.0;
            for k in 0..3 {
                let s: f64 = if k == 0 { sbg } else { sfg };
                let mut like = lm[k * 4 + p].exp();
                for c in 0..3 {
                    let d = x.data()[c * 4 + p] - means.data()[(k * 3 + c) * 4 + p];
                    like *= (-0.5 * d * d / (s * s)).exp() / (s * (2.0 * std::f64::consts::PI).sqrt());
                }
                mix += like;
            }
            brute -= mix.ln();
        }
        let got = mixture_nll(&x, &Tensor::new(&[1, 3, 2, 2], lm).unwrap(), &means, sbg, sfg).unwrap();
        worst = worst.max((got - brute).abs());
    }
    let x = Tensor::<f64>::full(&[1, 3, 1, 1], 0.4);
    let perfect =
        mixture_nll(&x, &Tensor::zeros(&[1, 1, 1, 1]), &Tensor::full(&[1, 1, 3, 1, 1], 0.4), 0.09, 0.09).unwrap();
    let pass = worst < 1e-6 && (perfect - -4.46696).abs() < 1e-4;
    let detail = format!(
        "brute-force err {worst:.2e} < 1e-6; perfect pixel {perfect:.6} vs -4.46696 within 1e-4 ({:.1?})",
        start.elapsed()
    );
    report(4, pass, "mixture NLL oracle", &detail);
    assert!(pass);
}

fn total_loss(arch: &MonetArch, params: &ParamStore<f64>, x: &Tensor<f64>, noise: &Tensor<f64>) -> f64 {
    let mut g = Graph::new();
    let mut bound = Bound::frozen(params);
    let out = arch
        .forward(&mut g, &mut bound, x, MaskSource::Learned { slots: 2 }, Some(noise.clone()), &LossConfig::monet())
        .unwrap();
    g.value(out.loss.total).item()
}

struct GradCheck {
    max_rel: f64,
    worst: String,
    elements: usize,
    refined: usize,
    silent: Vec<String>,
}

/// Central differences at step 1e-5 for every parameter element. A ReLU
/// whose input crosses zero inside the stencil breaks the difference
/// quotient, so an element that misses the tolerance is measured again at
/// step 1e-6 and must pass there. A wrong analytic gradient fails at both.
fn gradient_check(seed: u64) -> GradCheck {
    const TOL: f64 = 1e-4;
    let arch = MonetArch::tiny(8, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = random_params(&arch, &mut rng);
    let x = random_tensor(&mut rng, &[2, 3, 8, 8], 0.0, 1.0);
    let noise: Tensor<f64> = arch.draw_noise(&mut rng, 2, 2);

    let mut g = Graph::new();
    let mut bound = Bound::trainable(&params);
    let out = arch
        .forward(&mut g, &mut bound, &x, MaskSource::Learned { slots: 2 }, Some(noise.clone()), &LossConfig::monet())
        .unwrap();
    let mut tape = g.backward(out.loss.total).unwrap();
    let analytic = bound.collect_gradients(&mut tape);
    drop(bound);

    let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-2);
    let mut res = GradCheck { max_rel: 0.0, worst: String::new(), elements: 0, refined: 0, silent: Vec::new() };
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        let grad = analytic.get(&name).unwrap().clone();
        if grad.max_abs() == 0.0 {
            res.silent.push(name.clone());
        }
        for i in 0..grad.numel() {
            let orig = params.get(&name).unwrap().data()[i];
            let mut central = |h: f64| {
                params.get_mut(&name).unwrap().data_mut()[i] = orig + h;
                let fp = total_loss(&arch, &params, &x, &noise);
                params.get_mut(&name).unwrap().data_mut()[i] = orig - h;
                let fm = total_loss(&arch, &params, &x, &noise);
                params.get_mut(&name).unwrap().data_mut()[i] = orig;
                (fp - fm) / (2.0 * h)
            };
            let a = grad.data()[i];
            let mut r = rel(a, central(1e-5));
            if r >= TOL {
                res.refined += 1;
                r = rel(a, central(1e-6));
            }
            if r > res.max_rel {
                res.max_rel = r;
                res.worst = format!("{name}[{i}]");
            }
            res.elements += 1;
        }
    }
    res
}

#[test]
fn c05_gradient_check() {
    let start = Instant::now();
    let mut lines = Vec::new();
    let mut pass = true;
    for seed in 0..3 {
        let r = gradient_check(seed);
        pass &= r.max_rel < 1e-4 && r.silent.is_empty();
        lines.push(format!(
            "seed {seed}: max rel err {:.2e} at {} over {} elements, {} re-measured at 1e-6{}",
            r.max_rel,
            r.worst,
            r.elements,
            r.refined,
            if r.silent.is_empty() { String::new() } else { format!(", zero gradient in {:?}", r.silent) }
        ));
    }
    let detail = format!("{} (threshold 1e-4, {:.1?})", lines.join("; "), start.elapsed());
    report(5, pass, "finite-difference gradient check", &detail);
    assert!(pass);
}

#[test]
fn c06_shape_contracts() {
    let start = Instant::now();
    let mut failures = Vec::new();
    let mut check = |what: &str, got: Vec<usize>, want: Vec<usize>| {
        if got != want {
            failures.push(format!("{what}: {got:?} != {want:?}"));
        }
    };
    let arch = MonetArch::new(64, 64);
    let params = init_params::<f32>(6, &arch).unwrap();
    let mut g = Graph::<f32>::new();
    let mut bound = Bound::frozen(&params);

    let plan = arch.vae.encoder_plan().unwrap();
    check("encoder spatial plan", plan.iter().flat_map(|&(h, w)| [h, w]).collect(), vec![32, 32, 16, 16, 8, 8, 4, 4]);
    let input = g.constant(Tensor::zeros(&[1, 4, 64, 64]));
    let (mu, log_sigma) = arch.vae.encode(&mut g, &mut bound, input).unwrap();
    check("posterior mean", g.shape(mu).to_vec(), vec![1, 16]);
    check("posterior log sigma", g.shape(log_sigma).to_vec(), vec![1, 16]);

    let (gh, gw) = arch.vae.decoder_input_size(64, 64);
    let grid = spatial_broadcast(&mut g, mu, gh, gw).unwrap();
    check("broadcast decoder input", g.shape(grid).to_vec(), vec![1, 18, 72, 72]);
    let decoded = arch.vae.broadcast_decode(&mut g, &mut bound, mu, 64, 64).unwrap();
    check("decoder output", g.shape(decoded).to_vec(), vec![1, 4, 64, 64]);

    let unet = arch.attention.plan().unwrap();
    check("U-Net blocks", vec![unet.down.len()], vec![5]);
    check("U-Net bottleneck", vec![unet.bottleneck.height, unet.bottleneck.width], vec![4, 4]);
    let att_in = g.constant(Tensor::zeros(&[1, 4, 64, 64]));
    let logits = arch.attention.apply(&mut g, &mut bound, att_in).unwrap();
    check("U-Net output", g.shape(logits).to_vec(), vec![1, 1, 64, 64]);

    let pass = failures.is_empty();
    let detail = if pass {
        format!("encoder 64x64 -> (16,16); decoder input 72x72x18; U-Net 4x4 bottleneck ({:.1?})", start.elapsed())
    } else {
        failures.join("; ")
    };
    report(6, pass, "shape contracts", &detail);
    assert!(pass);
}

fn corpus(count: usize, start: u64) -> ProceduralSource {
    ProceduralSource { seed: 2018, start, count, config: SpriteConfig::new(64) }
}

const CORPUS: usize = 50_000;

fn artifacts(name: &str) -> PathBuf {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance").join(name);
    fs::create_dir_all(&dir).unwrap();
    dir
}

/// Trains (or finishes training) and returns the final checkpoint; partial
/// progress is kept so an interrupted run resumes.
fn trained(name: &str, config: TrainConfig, data: &dyn SceneSource) -> (Checkpoint, PathBuf) {
    let dir = artifacts(name);
    let latest = dir.join("latest.ckpt");
    let metrics = dir.join("metrics.csv");
    let mut trainer = match Checkpoint::load(&latest) {
        Ok(ck) if ck.config == config => Trainer::from_checkpoint(ck).unwrap(),
        _ => Trainer::new(MonetArch::new(64, 64), config.clone()).unwrap(),
    };
    let mut writer = MetricWriter::resume(&metrics, trainer.step).unwrap();
    while trainer.step < config.iterations {
        let next = (trainer.step + 500).min(config.iterations);
        trainer.run(data, next, Some(&mut writer), None).unwrap();
        writer.flush().unwrap();
        trainer.checkpoint().save(&latest).unwrap();
    }
    (trainer.checkpoint(), metrics)
}

fn desk_config(seed: u64) -> TrainConfig {
    TrainConfig { batch_size: 16, iterations: 30_000, seed, ..TrainConfig::for_mode(MaskMode::Learned) }
}

#[test]
#[ignore = "trains three 30k-step 64x64 models"]
fn c07_desk_scale_decomposition() {
    let start = Instant::now();
    let held_out = corpus(500, CORPUS as u64);
    let mut medians = Vec::new();
    for seed in 0..3 {
        let (ck, _) = trained(&format!("c07-seed{seed}"), desk_config(seed), &corpus(CORPUS, 0));
        let scores = score_source(&ck.arch, &ck.params, &held_out, 0..500, 5, 16, &ck.config.loss()).unwrap();
        medians.push(scores.fg_ari_median().unwrap_or(f64::NAN));
    }
    let mut sorted = medians.clone();
    sorted.sort_by(f64::total_cmp);
    let pass = sorted[1] > 0.5 && sorted.iter().all(|&m| m > 0.3);
    let detail = format!(
        "median fg-ARI per seed {medians:.3?}; median over seeds {:.3} > 0.5 and every seed > 0.3 ({:.1?})",
        sorted[1],
        start.elapsed()
    );
    report(7, pass, "desk-scale decomposition", &detail);
    assert!(pass);
}

#[test]
#[ignore = "trains nine 10k-step 64x64 models"]
fn c08_ablation_ordering() {
    let start = Instant::now();
    let data = corpus(CORPUS, 0);
    let mut verdicts = Vec::new();
    for seed in 0..3 {
        let runs: Vec<AblationRun> = [MaskMode::AllInOne, MaskMode::ElementMasks, MaskMode::WrongElementMasks]
            .into_iter()
            .map(|mode| {
                let config = TrainConfig { batch_size: 16, iterations: 10_000, seed, ..TrainConfig::for_mode(mode) };
                let (_, metrics) = trained(&format!("c08-seed{seed}-{mode}"), config.clone(), &data);
                AblationRun { config, metrics: read_metrics(metrics).unwrap() }
            })
            .collect();
        verdicts.push(AblationReport::from_runs(&runs).unwrap().nll_ordering_holds());
    }
    let holds = verdicts.iter().filter(|&&v| v).count();
    let pass = holds >= 2;
    let detail =
        format!("nll(element) < nll(all_in_one) < nll(wrong) on {holds}/3 seeds, need 2 ({:.1?})", start.elapsed());
    report(8, pass, "provided-mask ablation ordering", &detail);
    assert!(pass);
}

#[test]
#[ignore = "needs the criterion 7 checkpoints"]
fn c09_slot_generalisation() {
    let start = Instant::now();
    let held_out = corpus(500, CORPUS as u64);
    let mut parts = Vec::new();
    let mut pass = true;
    for seed in 0..3 {
        let (ck, _) = trained(&format!("c07-seed{seed}"), desk_config(seed), &corpus(CORPUS, 0));
        let loss = ck.config.loss();
        let k5 = score_source(&ck.arch, &ck.params, &held_out, 0..500, 5, 16, &loss).unwrap();
        let k7 = score_source(&ck.arch, &ck.params, &held_out, 0..500, 7, 16, &loss).unwrap();
        let (m5, m7) = (k5.fg_ari_median().unwrap_or(f64::NAN), k7.fg_ari_median().unwrap_or(f64::NAN));
        let norm = k7.max_normalization_error();
        pass &= norm < 1e-5 && m5 - m7 < 0.1;
        parts.push(format!("seed {seed}: K=5 {m5:.3}, K=7 {m7:.3}, norm err {norm:.1e}"));
    }
    let detail = format!("{} (drop < 0.1, norm < 1e-5, {:.1?})", parts.join("; "), start.elapsed());
    report(9, pass, "slot generalisation K_test=7", &detail);
    assert!(pass);
}

#[test]
fn c10_determinism_and_persistence() {
    let start = Instant::now();
    let data = ProceduralSource { seed: 10, start: 0, count: 200, config: SpriteConfig::new(16) };
    let config = TrainConfig { batch_size: 4, iterations: 100, seed: 3, ..TrainConfig::for_mode(MaskMode::Learned) };
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str, resume_at: Option<u64>| -> Vec<u8> {
        let path = dir.path().join(name);
        let mut trainer = Trainer::new(MonetArch::new(16, 16), config.clone()).unwrap();
        let mut w = MetricWriter::create(&path).unwrap();
        if let Some(step) = resume_at {
            trainer.run(&data, step, Some(&mut w), None).unwrap();
            drop(w);
            let ck_path = dir.path().join(format!("{name}.ckpt"));
            trainer.checkpoint().save(&ck_path).unwrap();
            drop(trainer);
            trainer = Trainer::from_checkpoint(Checkpoint::load(&ck_path).unwrap()).unwrap();
            w = MetricWriter::resume(&path, trainer.step).unwrap();
        }
        trainer.run(&data, 100, Some(&mut w), None).unwrap();
        drop(w);
        fs::read(&path).unwrap()
    };
    let first = run("a.csv", None);
    let rerun_identical = first == run("b.csv", None);
    let resume_identical = first == run("c.csv", Some(37));

    let scenes = generate_multidsprites(11, 0, 64, &SpriteConfig::new(32)).unwrap();
    let file = dir.path().join("d.bin");
    let header = DatasetHeader::new(64, 32, 32, 5, 4, "multi-dsprites");
    DatasetWriter::write_all(&file, header.clone(), &scenes).unwrap();
    let read = DatasetReader::open(&file).unwrap().read_all().unwrap();
    let copy = dir.path().join("e.bin");
    DatasetWriter::write_all(&copy, header, &read).unwrap();
    let round_trip = read == scenes && fs::read(&file).unwrap() == fs::read(&copy).unwrap();

    let pass = rerun_identical && resume_identical && round_trip;
    let detail = format!(
        "rerun CSV identical {rerun_identical}, resume at step 37 identical {resume_identical}, dataset round trip {round_trip} ({:.1?})",
        start.elapsed()
    );
    report(10, pass, "determinism and persistence", &detail);
    assert!(pass);
}
