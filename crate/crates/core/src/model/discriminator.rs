use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::corrector::Layer;
use super::{DiscriminatorConfig, LEAKY_SLOPE};
use crate::autodiff::{Graph, ParamStore, Real, Shape, Tensor, Var};
use crate::error::{invalid, Error, Result};
use crate::imaging::CHANNELS;

/// Image-level real/fake classifier producing one logit per batch item.
pub struct Discriminator<T> {
    config: DiscriminatorConfig,
    params: ParamStore<T>,
    convs: Vec<Layer>,
    dense: Layer,
}

impl<T: Real> Discriminator<T> {
    pub fn new(config: DiscriminatorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut convs = Vec::new();
        let mut cin = CHANNELS;
        for (i, &c) in config.channels.iter().enumerate() {
            let shape = Shape::new(c, cin, 3, 3);
            convs.push(Layer::new(&mut params, &format!("disc.conv{i}"), shape, c, cin * 9, &mut rng)?);
            cin = c;
        }
        let dense = Layer::new(&mut params, "disc.dense", Shape::new(1, cin, 1, 1), 1, cin, &mut rng)?;
        Ok(Self {
            config,
            params,
            convs,
            dense,
        })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Logits `(N, 1, 1, 1)` for an `(N, 3, s, s)` batch at the configured size.
    pub fn forward(&self, g: &mut Graph<T>, vars: &[Var], x: Var) -> Result<Var> {
        let s = g.shape(x);
        let size = self.config.input_size;
        if s.c != CHANNELS || s.h != size || s.w != size {
            return Err(invalid(format!(
                "discriminator expects (N, 3, {size}, {size}) input, got {s}"
            )));
        }
        if vars.len() != self.params.len() {
            return Err(invalid("bound parameters do not belong to this discriminator"));
        }
        let mut h = x;
        for l in &self.convs {
            h = l.conv(g, vars, h, 2, 1)?;
            h = g.leaky_relu(h, LEAKY_SLOPE);
        }
        let pooled = g.global_avg_pool(h);
        self.dense.conv(g, vars, pooled, 1, 0)
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor<f32>)> {
        self.params.iter().map(|p| (p.name.clone(), p.value.cast())).collect()
    }

    pub fn load_tensors(&mut self, tensors: &[(String, Tensor<f32>)]) -> Result<()> {
        let own = tensors
            .iter()
            .filter(|(name, _)| self.params.id_of(name).is_some())
            .count();
        if own != self.params.len() {
            return Err(Error::Config(format!(
                "checkpoint provides {own} of {} discriminator tensors",
                self.params.len()
            )));
        }
        for (name, t) in tensors {
            if self.params.id_of(name).is_some() {
                self.params.set_value(name, t.cast())?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(g: &mut Graph<f32>, n: usize, size: usize) -> Var {
        let data = (0..n * 3 * size * size).map(|i| (i % 17) as f32 / 17.0).collect();
        g.input(Tensor::from_vec(Shape::new(n, 3, size, size), data).unwrap())
    }

    #[test]
    fn one_logit_per_item_and_size_checked() {
        let d = Discriminator::<f32>::new(DiscriminatorConfig::desk(), 0).unwrap();
        let mut g = Graph::new();
        let vars = d.params().bind(&mut g, false);
        let x = batch(&mut g, 3, 64);
        let y = d.forward(&mut g, &vars, x).unwrap();
        assert_eq!(g.shape(y), Shape::new(3, 1, 1, 1));
        let bad = batch(&mut g, 1, 32);
        assert!(d.forward(&mut g, &vars, bad).is_err());
    }

    #[test]
    fn zero_network_gives_half_probability() {
        let mut d = Discriminator::<f32>::new(DiscriminatorConfig::desk(), 0).unwrap();
        for p in d.params_mut().iter_mut() {
            p.value = Tensor::zeros(p.value.shape());
        }
        let mut g = Graph::new();
        let vars = d.params().bind(&mut g, false);
        let x = batch(&mut g, 2, 64);
        let y = d.forward(&mut g, &vars, x).unwrap();
        let p = g.sigmoid(y);
        assert_eq!(g.value(p).data(), &[0.5, 0.5]);
    }

    #[test]
    fn parameter_total_matches_config() {
        let cfg = DiscriminatorConfig::paper();
        let d = Discriminator::<f32>::new(cfg.clone(), 0).unwrap();
        assert_eq!(d.params().numel(), cfg.count_params());
    }

    #[test]
    fn deterministic() {
        let d = Discriminator::<f32>::new(DiscriminatorConfig::desk(), 4).unwrap();
        let run = || {
            let mut g = Graph::new();
            let vars = d.params().bind(&mut g, false);
            let x = batch(&mut g, 1, 64);
            let y = d.forward(&mut g, &vars, x).unwrap();
            g.value(y).data()[0]
        };
        assert_eq!(run().to_bits(), run().to_bits());
    }
}
