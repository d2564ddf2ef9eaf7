//! Fixtures shared by the integration and acceptance targets.
#![allow(dead_code)]

use pyrexpose::autodiff::{gradcheck, GradCheckReport, Graph, Shape, Tensor, Var};
use pyrexpose::imaging::{apply_relative_ev, synthetic::scene, Image};
use pyrexpose::losses::{
    adversarial_generator_loss, discriminator_loss, pyramid_loss, pyramid_targets, reconstruction_loss,
};
use pyrexpose::model::{Corrector, Discriminator, DiscriminatorConfig, ModelConfig, LEAKY_SLOPE};
use pyrexpose::pyramid::{laplacian_decompose, ScaleVector};
use pyrexpose::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub const FD_STEP: f64 = 1e-4;
pub const MAX_REL_ERR: f64 = 1e-3;

pub fn randn(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let data = (0..shape.numel()).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Values bounded away from zero so that finite differences do not straddle
/// a kink.
pub fn away_from_zero(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let data = (0..shape.numel())
        .map(|_| {
            let m: f64 = rng.gen_range(0.05..1.5);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Distinct values with spacing far larger than the step, in random order.
pub fn distinct(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.numel();
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.01 - n as f64 * 0.005).collect();
    for i in (1..n).rev() {
        vals.swap(i, rng.gen_range(0..=i));
    }
    Tensor::from_vec(shape, vals).unwrap()
}

/// `sum(x * r)` for a fixed random `r`, turning any node into a scalar with
/// a generic upstream gradient.
pub fn project(g: &mut Graph<f64>, x: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
    let r = g.input(randn(g.shape(x), &mut rng));
    let m = g.mul(x, r)?;
    Ok(g.sum(m))
}

type Case = (&'static str, Vec<Tensor<f64>>, Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>);

/// One gradient check per engine operation and per loss.
pub fn op_cases(seed: u64) -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = |n, c, h, w| Shape::new(n, c, h, w);
    let mut cases: Vec<Case> = Vec::new();
    let mut push = |name, inputs, f: Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>| cases.push((name, inputs, f));

    push(
        "conv2d_s1_p1",
        vec![randn(s(2, 3, 5, 6), &mut rng), randn(s(4, 3, 3, 3), &mut rng), randn(s(1, 4, 1, 1), &mut rng)],
        Box::new(move |g, v| {
            let y = g.conv2d(v[0], v[1], v[2], 1, 1)?;
            project(g, y, seed)
        }),
    );
    push(
        "conv2d_s2_p1",
        vec![randn(s(1, 2, 7, 6), &mut rng), randn(s(3, 2, 3, 3), &mut rng), randn(s(1, 3, 1, 1), &mut rng)],
        Box::new(move |g, v| {
            let y = g.conv2d(v[0], v[1], v[2], 2, 1)?;
            project(g, y, seed)
        }),
    );
    push(
        "conv_transpose2d",
        vec![randn(s(2, 3, 3, 4), &mut rng), randn(s(3, 2, 2, 2), &mut rng), randn(s(1, 2, 1, 1), &mut rng)],
        Box::new(move |g, v| {
            let y = g.conv_transpose2d(v[0], v[1], v[2], 2)?;
            project(g, y, seed)
        }),
    );
    push(
        "leaky_relu",
        vec![away_from_zero(s(2, 2, 3, 3), &mut rng)],
        Box::new(move |g, v| {
            let y = g.leaky_relu(v[0], LEAKY_SLOPE);
            project(g, y, seed)
        }),
    );
    push(
        "sigmoid",
        vec![randn(s(1, 3, 3, 3), &mut rng)],
        Box::new(move |g, v| {
            let y = g.sigmoid(v[0]);
            project(g, y, seed)
        }),
    );
    push(
        "log_sigmoid",
        vec![randn(s(1, 3, 3, 3), &mut rng).scale(4.0)],
        Box::new(move |g, v| {
            let y = g.log_sigmoid(v[0]);
            project(g, y, seed)
        }),
    );
    push(
        "add",
        vec![randn(s(2, 2, 2, 3), &mut rng), randn(s(2, 2, 2, 3), &mut rng)],
        Box::new(move |g, v| {
            let y = g.add(v[0], v[1])?;
            project(g, y, seed)
        }),
    );
    push(
        "sub",
        vec![randn(s(2, 2, 2, 3), &mut rng), randn(s(2, 2, 2, 3), &mut rng)],
        Box::new(move |g, v| {
            let y = g.sub(v[0], v[1])?;
            project(g, y, seed)
        }),
    );
    push(
        "mul",
        vec![randn(s(2, 2, 2, 3), &mut rng), randn(s(2, 2, 2, 3), &mut rng)],
        Box::new(move |g, v| {
            let y = g.mul(v[0], v[1])?;
            project(g, y, seed)
        }),
    );
    push(
        "scale",
        vec![randn(s(1, 3, 2, 2), &mut rng)],
        Box::new(move |g, v| {
            let y = g.scale(v[0], -1.7);
            project(g, y, seed)
        }),
    );
    push(
        "abs",
        vec![away_from_zero(s(1, 3, 3, 3), &mut rng)],
        Box::new(move |g, v| {
            let y = g.abs(v[0]);
            project(g, y, seed)
        }),
    );
    push(
        "concat_channels",
        vec![randn(s(2, 2, 3, 3), &mut rng), randn(s(2, 3, 3, 3), &mut rng)],
        Box::new(move |g, v| {
            let y = g.concat_channels(v[0], v[1])?;
            project(g, y, seed)
        }),
    );
    push(
        "maxpool2x",
        vec![distinct(s(2, 2, 4, 6), &mut rng)],
        Box::new(move |g, v| {
            let y = g.maxpool2x(v[0])?;
            project(g, y, seed)
        }),
    );
    push(
        "sum",
        vec![randn(s(2, 2, 3, 3), &mut rng)],
        Box::new(|g, v| {
            let sq = g.mul(v[0], v[0])?;
            Ok(g.sum(sq))
        }),
    );
    push(
        "global_avg_pool",
        vec![randn(s(2, 3, 4, 5), &mut rng)],
        Box::new(move |g, v| {
            let y = g.global_avg_pool(v[0]);
            project(g, y, seed)
        }),
    );
    push(
        "resize_bilinear_up",
        vec![randn(s(1, 2, 3, 4), &mut rng)],
        Box::new(move |g, v| {
            let y = g.resize_bilinear(v[0], 7, 9)?;
            project(g, y, seed)
        }),
    );
    push(
        "resize_bilinear_down",
        vec![randn(s(1, 2, 8, 10), &mut rng)],
        Box::new(move |g, v| {
            let y = g.resize_bilinear(v[0], 3, 4)?;
            project(g, y, seed)
        }),
    );
    push(
        "pad_replicate",
        vec![randn(s(1, 2, 3, 3), &mut rng)],
        Box::new(move |g, v| {
            let y = g.pad_replicate(v[0], 5, 6)?;
            project(g, y, seed)
        }),
    );
    push(
        "crop",
        vec![randn(s(1, 2, 5, 5), &mut rng)],
        Box::new(move |g, v| {
            let y = g.crop(v[0], 3, 2)?;
            project(g, y, seed)
        }),
    );
    push(
        "reconstruction_loss",
        vec![randn(s(2, 3, 4, 4), &mut rng), randn(s(2, 3, 4, 4), &mut rng)],
        Box::new(|g, v| reconstruction_loss(g, v[0], v[1])),
    );
    push(
        "pyramid_loss",
        vec![
            randn(s(2, 3, 2, 2), &mut rng),
            randn(s(2, 3, 4, 4), &mut rng),
            randn(s(2, 3, 2, 2), &mut rng),
            randn(s(2, 3, 4, 4), &mut rng),
        ],
        Box::new(|g, v| Ok(pyramid_loss(g, &v[..2], &v[2..])?.expect("two levels"))),
    );
    push(
        "adversarial_generator_loss",
        vec![randn(s(3, 1, 1, 1), &mut rng)],
        Box::new(|g, v| Ok(adversarial_generator_loss(g, v[0], 4, 4, 4, 1.0))),
    );
    push(
        "discriminator_loss",
        vec![randn(s(3, 1, 1, 1), &mut rng), randn(s(3, 1, 1, 1), &mut rng)],
        Box::new(|g, v| discriminator_loss(g, v[0], v[1])),
    );
    cases
}

pub fn check_ops(seed: u64) -> Vec<(&'static str, GradCheckReport)> {
    op_cases(seed)
        .into_iter()
        .map(|(name, inputs, f)| (name, gradcheck(&inputs, f, FD_STEP, None).unwrap()))
        .collect()
}

/// Full tiny corrector on an 8x8 pair: gradients of L_rec + L_pyr with
/// respect to every pyramid level and every parameter.
pub fn check_tiny_model(seed: u64) -> GradCheckReport {
    let model = Corrector::<f64>::new(ModelConfig::tiny(), seed).unwrap();
    let target = scene(8, 8, seed);
    let input = apply_relative_ev(&target, -1.0).unwrap();
    let pyr = laplacian_decompose(&input, 4).unwrap();
    let mut inputs: Vec<Tensor<f64>> = pyr.levels().iter().map(|l| Tensor::from_images(&[l]).unwrap()).collect();
    inputs.extend(model.params().iter().map(|p| p.value.clone()));
    let t = Tensor::<f64>::from_images(&[&target]).unwrap();
    let gauss: Vec<Tensor<f64>> = pyramid_targets(&target, 4)
        .unwrap()
        .iter()
        .map(|i| Tensor::from_images(&[i]).unwrap())
        .collect();
    let s = ScaleVector::new(vec![1.3, 0.9, 1.1, 1.0]).unwrap();
    gradcheck(
        &inputs,
        |g, v| {
            let out = model.forward(g, &v[4..], &v[..4], &s)?;
            let tv = g.input(t.clone());
            let rec = reconstruction_loss(g, out.output, tv)?;
            let gt: Vec<Var> = gauss.iter().map(|x| g.input(x.clone())).collect();
            let pyr = pyramid_loss(g, &out.intermediates, &gt)?.expect("n > 1");
            g.add(rec, pyr)
        },
        FD_STEP,
        None,
    )
    .unwrap()
}

/// Desk discriminator on a 64x64 batch, sampled coordinates.
pub fn check_discriminator(seed: u64) -> GradCheckReport {
    let d = Discriminator::<f64>::new(DiscriminatorConfig::desk(), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inputs = vec![randn(Shape::new(2, 3, 64, 64), &mut rng).scale(0.3)];
    inputs.extend(d.params().iter().map(|p| p.value.clone()));
    gradcheck(
        &inputs,
        |g, v| {
            let logits = d.forward(g, &v[1..], v[0])?;
            project(g, logits, seed)
        },
        FD_STEP,
        Some((6, seed)),
    )
    .unwrap()
}

pub fn overfit_pairs(k: usize, size: usize) -> Vec<(Image, Image)> {
    const EVS: [f64; 4] = [-1.5, -1.0, 1.0, 1.5];
    (0..k)
        .map(|i| {
            let t = scene(size, size, i as u64);
            (apply_relative_ev(&t, EVS[i % EVS.len()]).unwrap(), t)
        })
        .collect()
}
