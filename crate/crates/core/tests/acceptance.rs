//! Acceptance gate: one PASS/FAIL line per criterion. Exits non-zero when any
//! criterion fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use pyrexpose::autodiff::{Graph, Shape, Tensor, Var};
use pyrexpose::imaging::{
    apply_relative_ev, save_image, synthesize_dataset, synthetic::scene, Image, Split, DEFAULT_EVS,
};
use pyrexpose::infer::{bgu_apply, bgu_fit, correct_direct};
use pyrexpose::losses::{
    adversarial_generator_loss, discriminator_loss, pyramid_level_weight, pyramid_loss, pyramid_targets,
    reconstruction_loss,
};
use pyrexpose::metrics::{niqe_fit, niqe_score, perceptual_index, psnr, ssim};
use pyrexpose::model::{Checkpoint, Corrector, Discriminator, DiscriminatorConfig, ModelConfig};
use pyrexpose::pyramid::{laplacian_collapse, laplacian_decompose, ScaleVector};
use pyrexpose::trainer::{RunOutputs, StageConfig, TrainConfig, TrainSummary, Trainer};

use common::{check_ops, check_tiny_model, overfit_pairs, MAX_REL_ERR};

/// Desk-scale learning rate for the short overfit and ablation budgets.
const DESK_LR: f64 = 1e-3;
const OVERFIT_STEPS: u64 = 2000;
const ABLATION_STEPS: u64 = 2000;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn random_image(h: usize, w: usize, rng: &mut ChaCha8Rng, hi: f32) -> Image {
    Image::from_fn(h, w, |_, _, _| rng.gen_range(0.0..hi))
}

fn pyramid_reconstruction() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0f32;
    for _ in 0..50 {
        let h = 8 * rng.gen_range(4..=32);
        let w = 8 * rng.gen_range(4..=32);
        let img = random_image(h, w, &mut rng, 1.0);
        let back = laplacian_collapse(&laplacian_decompose(&img, 4).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
        worst = worst.max(back.max_abs_diff(&img));
    }
    let t = start.elapsed();
    check(
        worst <= 1e-6 && t < Duration::from_secs(10),
        format!("50 images, max error {worst:.2e} (<= 1e-6), {:.2}s (< 10s)", t.as_secs_f64()),
    )
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let (mut worst, mut worst_name) = (0f64, String::new());
    let (mut checked, mut refined, mut skipped) = (0, 0, 0);
    for seed in 0..20 {
        let mut reports = check_ops(seed);
        reports.push(("tiny_model", check_tiny_model(seed)));
        for (name, r) in reports {
            checked += r.checked;
            refined += r.refined;
            skipped += r.skipped;
            if r.max_rel_err > worst {
                worst = r.max_rel_err;
                worst_name = format!("{name} seed {seed}");
            }
        }
    }
    let t = start.elapsed();
    check(
        worst <= MAX_REL_ERR && skipped == 0 && t < Duration::from_secs(120),
        format!(
            "{checked} elements over all ops + tiny model x 20 seeds, max rel err {worst:.2e} ({worst_name}), \
             {refined} re-measured off a kink, {skipped} skipped, {:.1}s (< 120s)",
            t.as_secs_f64()
        ),
    )
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

fn scalar(g: &Graph<f64>, v: Var) -> f64 {
    g.value(v).value()
}

fn loss_oracles() -> Outcome {
    let e = |e: pyrexpose::Error| e.to_string();
    let mut errs = Vec::new();

    let mut g = Graph::<f64>::new();
    let y = g.input(Tensor::full(Shape::new(1, 3, 1, 1), 0.25));
    let t = g.input(Tensor::full(Shape::new(1, 3, 1, 1), 0.75));
    let l = reconstruction_loss(&mut g, y, t).map_err(e)?;
    errs.push(("rec 1.5", rel(scalar(&g, l), 1.5)));

    let weights = [2, 3, 4].map(pyramid_level_weight);
    errs.push(("pyr weights", (weights[0] - 1.0).abs() + (weights[1] - 2.0).abs() + (weights[2] - 4.0).abs()));

    let target = scene(16, 16, 3);
    let targets = pyramid_targets(&target, 4).map_err(e)?;
    let delta = 0.37;
    let mut g = Graph::<f64>::new();
    let tv: Vec<Var> = targets.iter().map(|i| g.input(Tensor::from_images(&[i]).unwrap())).collect();
    let yv: Vec<Var> = targets
        .iter()
        .enumerate()
        .map(|(k, i)| {
            let mut ten = Tensor::<f64>::from_images(&[i]).unwrap();
            // coarsest first: index 1 is level 3
            if k == 1 {
                ten.data_mut()[5] += delta;
            }
            g.input(ten)
        })
        .collect();
    let l = pyramid_loss(&mut g, &yv, &tv).map_err(e)?.ok_or("no pyramid loss")?;
    errs.push(("pyr 2δ", rel(scalar(&g, l), 2.0 * delta)));

    let ln2 = std::f64::consts::LN_2;
    let mut g = Graph::<f64>::new();
    let z = g.input(Tensor::zeros(Shape::new(4, 1, 1, 1)));
    let l = adversarial_generator_loss(&mut g, z, 128, 128, 4, 1.0);
    errs.push(("adv 3·128·128·4·ln2", rel(scalar(&g, l), 3.0 * 128.0 * 128.0 * 4.0 * ln2)));

    let z2 = g.input(Tensor::zeros(Shape::new(4, 1, 1, 1)));
    let l = discriminator_loss(&mut g, z, z2).map_err(e)?;
    errs.push(("dsc 2·ln2", rel(scalar(&g, l), 2.0 * ln2)));

    let worst = errs.iter().map(|x| x.1).fold(0.0, f64::max);
    let detail = errs.iter().map(|(n, r)| format!("{n}: {r:.1e}")).collect::<Vec<_>>().join(", ");
    check(worst <= 1e-6, format!("relative errors {detail} (<= 1e-6)"))
}

fn desk_stage(steps: u64, pairs: usize, batch: usize) -> StageConfig {
    let mut st = StageConfig::new(64, (steps as usize * batch).div_ceil(pairs) + 1, batch);
    st.lr_main = DESK_LR;
    st.max_steps = Some(steps);
    st
}

fn train(config: TrainConfig, pairs: &[(Image, Image)]) -> Result<(Trainer, TrainSummary), String> {
    let mut t = Trainer::new(config).map_err(|e| e.to_string())?;
    let s = t
        .train(pairs, &mut RunOutputs { log: None, checkpoint_dir: None })
        .map_err(|e| e.to_string())?;
    Ok((t, s))
}

fn overfit_run() -> Result<(Trainer, TrainSummary, Duration), String> {
    let pairs = overfit_pairs(8, 64);
    let cfg = TrainConfig::new(
        ModelConfig::desk(),
        DiscriminatorConfig::desk(),
        vec![desk_stage(OVERFIT_STEPS, 8, 4)],
        0,
    );
    let start = Instant::now();
    let (t, s) = train(cfg, &pairs)?;
    Ok((t, s, start.elapsed()))
}

fn desk_overfit(first: &Result<(Trainer, TrainSummary, Duration), String>) -> Outcome {
    let (trainer, summary, time) = first.as_ref().map_err(Clone::clone)?;
    let last = summary.epochs.last().ok_or("no epochs ran")?;
    let gain = last.train_psnr - last.input_psnr;
    let ones = ScaleVector::ones(4);
    let pairs = overfit_pairs(8, 64);
    let mut full = 0.0;
    for (i, t) in &pairs {
        let y = correct_direct(i, trainer.generator(), &ones).map_err(|e| e.to_string())?;
        full += psnr(&y, t).map_err(|e| e.to_string())? - psnr(i, t).map_err(|e| e.to_string())?;
    }
    check(
        gain >= 5.0 && summary.steps.len() as u64 <= OVERFIT_STEPS && *time < Duration::from_secs(900),
        format!(
            "{} steps: train PSNR {:.2} dB vs input {:.2} dB, gain {gain:+.2} dB (>= +5); \
             full-image inference gain {:+.2} dB; {:.0}s (< 900s)",
            summary.steps.len(),
            last.train_psnr,
            last.input_psnr,
            full / pairs.len() as f64,
            time.as_secs_f64()
        ),
    )
}

fn determinism(first: &Result<(Trainer, TrainSummary, Duration), String>) -> Outcome {
    let (a, _, _) = first.as_ref().map_err(Clone::clone)?;
    let (b, _, _) = overfit_run()?;
    let ba = a.checkpoint().and_then(|c| c.to_bytes()).map_err(|e| e.to_string())?;
    let bb = b.checkpoint().and_then(|c| c.to_bytes()).map_err(|e| e.to_string())?;
    check(
        ba == bb,
        format!("two seed-0 desk-overfit runs: checkpoints {} / {} bytes, identical: {}", ba.len(), bb.len(), ba == bb),
    )
}

/// Sum of |Y_l - T_l| per intermediate level (coarsest first) over a set.
fn intermediate_l1(model: &Corrector<f32>, set: &[(Image, Image)]) -> Result<Vec<f64>, String> {
    let e = |e: pyrexpose::Error| e.to_string();
    let ones = ScaleVector::ones(4);
    let mut acc = vec![0.0; 3];
    for (input, target) in set {
        let pyr = laplacian_decompose(input, 4).map_err(e)?;
        let mut g = Graph::<f32>::new();
        let vars = model.params().bind(&mut g, false);
        let levels: Vec<Var> = pyr.levels().iter().map(|l| g.input(Tensor::from_images(&[l]).unwrap())).collect();
        let out = model.forward(&mut g, &vars, &levels, &ones).map_err(e)?;
        for (k, (y, t)) in out.intermediates.iter().zip(pyramid_targets(target, 4).map_err(e)?).enumerate() {
            let yi = g.value(*y).to_image(0).map_err(e)?;
            acc[k] += yi.data().iter().zip(t.data()).map(|(a, b)| (a - b).abs() as f64).sum::<f64>();
        }
    }
    Ok(acc)
}

fn pyramid_loss_ablation() -> Outcome {
    const EVS: [f64; 4] = [-1.5, -1.0, 1.0, 1.5];
    let start = Instant::now();
    let make = |i: usize, base: u64| {
        let t = scene(64, 64, base);
        (apply_relative_ev(&t, EVS[i % 4]).unwrap(), t)
    };
    let train_set: Vec<_> = (0..64).map(|i| make(i, 100 + (i / 4) as u64)).collect();
    let val: Vec<_> = (0..10).map(|i| make(i, 500 + i as u64)).collect();
    let mut results = Vec::new();
    for with_pyr in [true, false] {
        let mut cfg = TrainConfig::new(
            ModelConfig::desk(),
            DiscriminatorConfig::desk(),
            vec![desk_stage(ABLATION_STEPS, 64, 4)],
            7,
        );
        cfg.pyramid_loss = with_pyr;
        let (t, s) = train(cfg, &train_set)?;
        let ones = ScaleVector::ones(4);
        let mut p = 0.0;
        for (i, tg) in &val {
            let y = correct_direct(i, t.generator(), &ones).map_err(|e| e.to_string())?;
            p += psnr(&y, tg).map_err(|e| e.to_string())?;
        }
        results.push((p / val.len() as f64, intermediate_l1(t.generator(), &val)?, s.steps.len()));
    }
    let t = start.elapsed();
    let (with, without) = (&results[0], &results[1]);
    let l1_lower = with.1.iter().zip(&without.1).all(|(a, b)| a < b);
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.0}")).collect::<Vec<_>>().join("/");
    check(
        with.0 >= without.0 - 0.1 && l1_lower && t < Duration::from_secs(1800),
        format!(
            "64 pairs, {} steps each: val PSNR with {:.2} dB vs without {:.2} dB (with >= without - 0.1); \
             L1 to Gaussian targets Y4/Y3/Y2 with {} vs without {} (strictly lower: {l1_lower}); {:.0}s (< 1800s)",
            with.2,
            with.0,
            without.0,
            fmt(&with.1),
            fmt(&without.1),
            t.as_secs_f64()
        ),
    )
}

fn bgu_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst = 0f32;
    let mut dims = (0, 0, 0);
    for k in 0..10 {
        let i = if k % 2 == 0 {
            scene(rng.gen_range(32..128), rng.gen_range(32..128), k)
        } else {
            random_image(rng.gen_range(16..96), rng.gen_range(16..96), &mut rng, 1.0)
        };
        let j = random_image(rng.gen_range(64..200), rng.gen_range(64..200), &mut rng, 1.0);
        let grid = bgu_fit(&i, &i).map_err(|e| e.to_string())?;
        dims = grid.dims();
        worst = worst.max(bgu_apply(&grid, &j).max_abs_diff(&j));
    }
    check(
        worst <= 1e-4 && dims == (22, 22, 8),
        format!("10 pairs, max |apply(fit(I,I),J) - J| {worst:.2e} (<= 1e-4), grid {dims:?}"),
    )
}

fn ev_emulator() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut identity = true;
    let mut worst = 0f32;
    for _ in 0..10 {
        let img = random_image(24, 24, &mut rng, 1.0);
        identity &= apply_relative_ev(&img, 0.0).map_err(|e| e.to_string())? == img;
        // encode(0.5) ~ 0.7354, so +1 EV never clips
        let low = random_image(24, 24, &mut rng, 0.73);
        let up = apply_relative_ev(&low, 1.0).map_err(|e| e.to_string())?;
        let back = apply_relative_ev(&up, -1.0).map_err(|e| e.to_string())?;
        worst = worst.max(back.max_abs_diff(&low));
    }
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let src = dir.path().join("src");
    std::fs::create_dir(&src).map_err(|e| e.to_string())?;
    for k in 0..4 {
        save_image(&scene(32, 32, k), src.join(format!("s{k}.png"))).map_err(|e| e.to_string())?;
    }
    let m = synthesize_dataset(&src, dir.path().join("out"), &DEFAULT_EVS, Split::Train).map_err(|e| e.to_string())?;
    let per_source: Vec<usize> = (0..4)
        .map(|k| m.entries.iter().filter(|e| e.target_path.ends_with(format!("s{k}.png"))).count())
        .collect();
    let five = per_source.iter().all(|&c| c == 5) && m.entries.len() == 20;
    check(
        identity && worst <= 1e-6 && five,
        format!(
            "ev=0 bit-exact: {identity}; +1/-1 round trip max error {worst:.2e} (<= 1e-6); outputs per source {per_source:?}"
        ),
    )
}

fn add_noise(img: &Image, sigma: f64, rng: &mut ChaCha8Rng) -> Image {
    let n = Normal::new(0.0, sigma).unwrap();
    let mut out = img.clone();
    for v in out.data_mut() {
        *v = (*v as f64 + n.sample(rng)).clamp(0.0, 1.0) as f32;
    }
    out
}

fn metrics() -> Outcome {
    let e = |e: pyrexpose::Error| e.to_string();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let a = random_image(32, 32, &mut rng, 1.0);
    let s = ssim(&a, &a).map_err(e)?;
    let p = psnr(&Image::filled(1, 1, 0.0), &Image::filled(1, 1, 0.5)).map_err(e)?;
    let corners = (perceptual_index(10.0, 0.0), perceptual_index(0.0, 10.0));

    let corpus: Vec<Image> = (0..24).map(|k| scene(192, 192, 1000 + k)).collect();
    let model = niqe_fit(&corpus).map_err(e)?;
    let mut held = 0;
    let mut pairs = Vec::new();
    for img in corpus.iter().take(10) {
        let clean = niqe_score(img, &model).map_err(e)?;
        let noisy = niqe_score(&add_noise(img, 0.1, &mut rng), &model).map_err(e)?;
        if clean < noisy {
            held += 1;
        }
        pairs.push(format!("{clean:.1}<{noisy:.1}"));
    }
    check(
        s == 1.0 && (p - 6.0206).abs() <= 1e-3 && corners == (0.0, 10.0) && held >= 9,
        format!(
            "ssim(a,a) = {s}; psnr 0 vs 0.5 = {p:.4} dB; PI corners {corners:?}; \
             NIQE clean < noisy for {held}/10 ({})",
            pairs.join(" ")
        ),
    )
}

fn checkpoint_round_trip() -> Outcome {
    let e = |e: pyrexpose::Error| e.to_string();
    let model = Corrector::<f32>::new(ModelConfig::desk(), 4).map_err(e)?;
    let disc = Discriminator::<f32>::new(DiscriminatorConfig::desk(), 5).map_err(e)?;
    let mut tensors = model.named_tensors();
    tensors.extend(disc.named_tensors());
    let ck = Checkpoint {
        model: model.config().clone(),
        discriminator: Some(disc.config().clone()),
        training: Some(serde_json::json!({ "note": "round trip" })),
        tensors,
    };
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("m.ckpt");
    ck.save(&path).map_err(e)?;
    let back = Checkpoint::load(&path).map_err(e)?;
    let bit_exact = back.tensors.len() == ck.tensors.len()
        && back.tensors.iter().zip(&ck.tensors).all(|((na, a), (nb, b))| {
            na == nb
                && a.shape() == b.shape()
                && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
        })
        && back == ck;

    let bytes = std::fs::read(&path).map_err(|e| e.to_string())?;
    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    let mut bad_version = bytes.clone();
    bad_version[4] = 9;
    let mut bad_meta = bytes.clone();
    bad_meta[12] = b'#';
    let mut trailing = bytes.clone();
    trailing.extend_from_slice(&[0, 1, 2]);
    let cases: [(&str, &[u8], &str); 5] = [
        ("truncated", &bytes[..bytes.len() - 7], "truncated"),
        ("magic", &bad_magic, "magic"),
        ("version", &bad_version, "version"),
        ("metadata", &bad_meta, "metadata"),
        ("trailing", &trailing, "trailing"),
    ];
    let mut diagnostics = Vec::new();
    let mut all_rejected = true;
    for (name, data, needle) in cases {
        let p = dir.path().join(format!("{name}.ckpt"));
        std::fs::write(&p, data).map_err(|e| e.to_string())?;
        match Checkpoint::load(&p) {
            Ok(_) => {
                all_rejected = false;
                diagnostics.push(format!("{name}: accepted"));
            }
            Err(err) => {
                let msg = err.to_string();
                all_rejected &= msg.contains(needle);
                diagnostics.push(format!("{name}: \"{}\"", msg.rsplit(": ").next().unwrap_or(&msg)));
            }
        }
    }
    let strict = Checkpoint::load_strict(&path, &ModelConfig::tiny())
        .err()
        .is_some_and(|e| e.to_string().contains("config mismatch"));
    check(
        bit_exact && all_rejected && strict,
        format!(
            "{} tensors bit-exact: {bit_exact}; corrupt files rejected: {}; strict config mismatch: {strict}",
            ck.tensors.len(),
            diagnostics.join("; ")
        ),
    )
}

fn run(name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into());
        Err(format!("panicked: {msg}"))
    });
    let secs = start.elapsed().as_secs_f64();
    match outcome {
        Ok(detail) => {
            println!("PASS {name} [{secs:.1}s]: {detail}");
            true
        }
        Err(detail) => {
            println!("FAIL {name} [{secs:.1}s]: {detail}");
            false
        }
    }
}

fn main() {
    let mut ok = true;
    ok &= run("pyramid-reconstruction", pyramid_reconstruction);
    ok &= run("gradient-correctness", gradient_correctness);
    ok &= run("loss-oracles", loss_oracles);
    ok &= run("pyramid-loss-ablation", pyramid_loss_ablation);
    let first = overfit_run();
    ok &= run("desk-overfit", || desk_overfit(&first));
    ok &= run("bgu-identity", bgu_identity);
    ok &= run("ev-emulator", ev_emulator);
    ok &= run("metrics", metrics);
    ok &= run("determinism", || determinism(&first));
    ok &= run("checkpoint-round-trip", checkpoint_round_trip);
    if !ok {
        std::process::exit(1);
    }
}
