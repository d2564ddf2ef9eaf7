//! Training objectives. Every loss is a per-image sum averaged over the batch.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Real, Var};
use crate::error::{invalid, Result};
use crate::imaging::{Image, CHANNELS};
use crate::pyramid::{gaussian_pyramid, upsample2x};

/// Per-step loss values. `total` is always the sum of the three parts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_rec: f64,
    pub l_pyr: f64,
    pub l_adv: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(l_rec: f64, l_pyr: f64, l_adv: f64) -> Self {
        Self {
            l_rec,
            l_pyr,
            l_adv,
            total: l_rec + l_pyr + l_adv,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.l_rec, self.l_pyr, self.l_adv, self.total].iter().all(|v| v.is_finite())
    }
}

fn batch_l1<T: Real>(g: &mut Graph<T>, y: Var, t: Var) -> Result<Var> {
    let d = g.sub(y, t)?;
    let a = g.abs(d);
    let s = g.sum(a);
    let n = g.shape(y).n;
    Ok(g.scale(s, 1.0 / n as f64))
}

/// `sum |Y - T|` per image, averaged over the batch.
pub fn reconstruction_loss<T: Real>(g: &mut Graph<T>, y: Var, t: Var) -> Result<Var> {
    let (sy, st) = (g.shape(y), g.shape(t));
    if sy != st {
        return Err(invalid(format!("reconstruction loss: output {sy} vs target {st}")));
    }
    batch_l1(g, y, t)
}

/// Upsampled Gaussian targets `up(G_l(T))` for `l = n, ..., 2` (coarsest first),
/// matching the order of the corrector's intermediate outputs.
pub fn pyramid_targets(target: &Image, n: usize) -> Result<Vec<Image>> {
    let gauss = gaussian_pyramid(target, n)?;
    Ok(gauss[1..].iter().rev().map(upsample2x).collect())
}

/// Weight of pyramid level `l` (1-based).
pub fn pyramid_level_weight(l: usize) -> f64 {
    2f64.powi(l as i32 - 2)
}

/// `sum_l 2^(l-2) * sum |Y_l - T_l|` with `intermediates` and `targets`
/// ordered `l = n, ..., 2`.
pub fn pyramid_loss<T: Real>(g: &mut Graph<T>, intermediates: &[Var], targets: &[Var]) -> Result<Option<Var>> {
    if intermediates.len() != targets.len() {
        return Err(invalid(format!(
            "pyramid loss: {} outputs for {} targets",
            intermediates.len(),
            targets.len()
        )));
    }
    let n = intermediates.len() + 1;
    let mut total: Option<Var> = None;
    for (i, (&y, &t)) in intermediates.iter().zip(targets).enumerate() {
        let l = n - i;
        let (sy, st) = (g.shape(y), g.shape(t));
        if sy != st {
            return Err(invalid(format!("pyramid loss level {l}: output {sy} vs target {st}")));
        }
        let term = batch_l1(g, y, t)?;
        let term = g.scale(term, pyramid_level_weight(l));
        total = Some(match total {
            Some(acc) => g.add(acc, term)?,
            None => term,
        });
    }
    Ok(total)
}

/// `-3hwn * log(sigmoid(D(Y)))` averaged over the batch, times `multiplier`.
/// `h, w` are the generator patch dimensions and `n` the pyramid depth.
pub fn adversarial_generator_loss<T: Real>(
    g: &mut Graph<T>,
    fake_logits: Var,
    h: usize,
    w: usize,
    n: usize,
    multiplier: f64,
) -> Var {
    let batch = g.shape(fake_logits).n;
    let ls = g.log_sigmoid(fake_logits);
    let s = g.sum(ls);
    let factor = -((CHANNELS * h * w * n) as f64) * multiplier / batch as f64;
    g.scale(s, factor)
}

/// `-log(sigmoid(D(T))) - log(1 - sigmoid(D(Y)))` averaged over the batch.
pub fn discriminator_loss<T: Real>(g: &mut Graph<T>, real_logits: Var, fake_logits: Var) -> Result<Var> {
    let (sr, sf) = (g.shape(real_logits), g.shape(fake_logits));
    if sr != sf {
        return Err(invalid(format!("discriminator loss: real {sr} vs fake {sf}")));
    }
    // log(1 - sigmoid(x)) = log(sigmoid(-x))
    let real = g.log_sigmoid(real_logits);
    let neg = g.scale(fake_logits, -1.0);
    let fake = g.log_sigmoid(neg);
    let both = g.add(real, fake)?;
    let s = g.sum(both);
    Ok(g.scale(s, -1.0 / sr.n as f64))
}
