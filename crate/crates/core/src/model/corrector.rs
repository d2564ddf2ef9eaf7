use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ModelConfig, SubnetConfig, LEAKY_SLOPE};
use crate::autodiff::{he_normal, Graph, ParamStore, Real, Shape, Tensor, Var};
use crate::error::{invalid, Error, Result};
use crate::imaging::{Image, CHANNELS};
use crate::pyramid::{Pyramid, ScaleVector};

#[derive(Clone, Copy, Debug)]
pub(crate) struct Layer {
    pub w: usize,
    pub b: usize,
}

impl Layer {
    pub(crate) fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        weight: Shape,
        bias_c: usize,
        fan_in: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let w = store.add(format!("{name}.weight"), he_normal(weight, fan_in, rng))?;
        let b = store.add(format!("{name}.bias"), Tensor::zeros(Shape::new(1, bias_c, 1, 1)))?;
        Ok(Self { w, b })
    }

    pub(crate) fn conv<T: Real>(&self, g: &mut Graph<T>, vars: &[Var], x: Var, stride: usize, pad: usize) -> Result<Var> {
        g.conv2d(x, vars[self.w], vars[self.b], stride, pad)
    }

    fn up<T: Real>(&self, g: &mut Graph<T>, vars: &[Var], x: Var) -> Result<Var> {
        g.conv_transpose2d(x, vars[self.w], vars[self.b], 2)
    }
}

fn conv_layer<T: Real>(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, k: usize, rng: &mut ChaCha8Rng) -> Result<Layer> {
    Layer::new(store, name, Shape::new(cout, cin, k, k), cout, cin * k * k, rng)
}

/// Transposed 2x2 stride-2 layer; each output sees `cin` inputs.
fn up_layer<T: Real>(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Result<Layer> {
    Layer::new(store, name, Shape::new(cin, cout, 2, 2), cout, cin, rng)
}

/// Per-level upscale initialized to nearest-neighbour 2x upsampling of each
/// channel.
fn nearest_upscale_layer<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Result<Layer> {
    let shape = Shape::new(channels, channels, 2, 2);
    let mut w = Tensor::zeros(shape);
    for c in 0..channels {
        let base = (c * channels + c) * 4;
        w.data_mut()[base..base + 4].fill(T::one());
    }
    Ok(Layer {
        w: store.add(format!("{name}.weight"), w)?,
        b: store.add(format!("{name}.bias"), Tensor::zeros(Shape::new(1, channels, 1, 1)))?,
    })
}

struct Subnet {
    depth: usize,
    enc: Vec<[Layer; 2]>,
    /// Deepest first.
    dec: Vec<(Layer, [Layer; 2])>,
    head: Layer,
}

impl Subnet {
    fn build<T: Real>(store: &mut ParamStore<T>, prefix: &str, cfg: &SubnetConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let k = cfg.kernel;
        let mut enc = Vec::new();
        let mut cin = cfg.in_channels;
        for i in 0..=cfg.depth {
            let c = cfg.channels(i);
            enc.push([
                conv_layer(store, &format!("{prefix}.enc{i}.conv0"), cin, c, k, rng)?,
                conv_layer(store, &format!("{prefix}.enc{i}.conv1"), c, c, k, rng)?,
            ]);
            cin = c;
        }
        let mut dec = Vec::new();
        for i in (0..cfg.depth).rev() {
            let c = cfg.channels(i);
            dec.push((
                up_layer(store, &format!("{prefix}.dec{i}.up"), cfg.channels(i + 1), c, rng)?,
                [
                    conv_layer(store, &format!("{prefix}.dec{i}.conv0"), 2 * c, c, k, rng)?,
                    conv_layer(store, &format!("{prefix}.dec{i}.conv1"), c, c, k, rng)?,
                ],
            ));
        }
        let head = conv_layer(store, &format!("{prefix}.head"), cfg.channels(0), cfg.out_channels, 1, rng)?;
        Ok(Self {
            depth: cfg.depth,
            enc,
            dec,
            head,
        })
    }

    fn forward<T: Real>(&self, g: &mut Graph<T>, vars: &[Var], x: Var) -> Result<Var> {
        let block = |g: &mut Graph<T>, layers: &[Layer; 2], mut h: Var| -> Result<Var> {
            for l in layers {
                h = l.conv(g, vars, h, 1, 1)?;
                h = g.leaky_relu(h, LEAKY_SLOPE);
            }
            Ok(h)
        };
        let s = g.shape(x);
        let m = 1usize << self.depth;
        let (ph, pw) = (s.h.div_ceil(m) * m, s.w.div_ceil(m) * m);
        let padded = (ph, pw) != (s.h, s.w);
        let mut h = if padded { g.pad_replicate(x, ph, pw)? } else { x };

        let mut skips = Vec::with_capacity(self.depth);
        for (i, layers) in self.enc.iter().enumerate() {
            if i > 0 {
                skips.push(h);
                h = g.maxpool2x(h)?;
            }
            h = block(g, layers, h)?;
        }
        for (up, layers) in &self.dec {
            let u = up.up(g, vars, h)?;
            let skip = skips.pop().expect("one skip per decoder stage");
            let cat = g.concat_channels(u, skip)?;
            h = block(g, layers, cat)?;
        }
        let out = self.head.conv(g, vars, h, 1, 0)?;
        if padded {
            g.crop(out, s.h, s.w)
        } else {
            Ok(out)
        }
    }
}

/// Graph handles produced by one corrector forward pass.
#[derive(Clone, Debug)]
pub struct CorrectorOutput {
    /// Upscaled intermediate outputs, coarsest first: `Y_n, ..., Y_2`.
    pub intermediates: Vec<Var>,
    /// Final full-resolution output `Y`.
    pub output: Var,
}

impl CorrectorOutput {
    /// Intermediate output at pyramid level `l` (2..=n).
    pub fn level(&self, l: usize, n: usize) -> Var {
        self.intermediates[n - l]
    }
}

/// The n-subnet coarse-to-fine corrector with per-level upscaling layers.
pub struct Corrector<T> {
    config: ModelConfig,
    params: ParamStore<T>,
    subnets: Vec<Subnet>,
    upscales: Vec<Layer>,
}

impl<T: Real> Corrector<T> {
    /// Fresh network: He-normal conv weights, zero biases and
    /// nearest-neighbour pyramid upscales.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut subnets = Vec::new();
        let mut upscales = Vec::new();
        for (i, cfg) in config.subnets.iter().enumerate() {
            let prefix = format!("subnet{}", i + 1);
            subnets.push(Subnet::build(&mut params, &prefix, cfg, &mut rng)?);
            if i + 1 < config.n {
                upscales.push(nearest_upscale_layer(&mut params, &format!("{prefix}.upscale"), CHANNELS)?);
            }
        }
        Ok(Self {
            config,
            params,
            subnets,
            upscales,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.numel()
    }

    /// Same weights in another precision.
    pub fn cast<U: Real>(&self) -> Corrector<U> {
        let (subnets, upscales) = rebuild_layout(&self.config);
        Corrector {
            config: self.config.clone(),
            params: self.params.cast(),
            subnets,
            upscales,
        }
    }

    /// Runs the network on pyramid levels `levels[l - 1] = X_l`, each an
    /// `(N, 3, h_l, w_l)` graph node. `vars` are the bound parameters.
    pub fn forward(&self, g: &mut Graph<T>, vars: &[Var], levels: &[Var], s: &ScaleVector) -> Result<CorrectorOutput> {
        let n = self.config.n;
        if levels.len() != n {
            return Err(invalid(format!("model expects {n} pyramid levels, got {}", levels.len())));
        }
        if s.len() != n {
            return Err(invalid(format!("scale vector has {} entries for {n} levels", s.len())));
        }
        if vars.len() != self.params.len() {
            return Err(invalid("bound parameters do not belong to this model"));
        }
        for l in 1..n {
            let (fine, coarse) = (g.shape(levels[l - 1]), g.shape(levels[l]));
            if fine.h != 2 * coarse.h || fine.w != 2 * coarse.w || fine.n != coarse.n || fine.c != CHANNELS {
                return Err(invalid(format!(
                    "level {} is {fine} but level {} is {coarse}",
                    l,
                    l + 1
                )));
            }
        }
        let sv = s.values();
        let scaled = |g: &mut Graph<T>, l: usize| {
            let f = sv[l - 1] as f64;
            if f == 1.0 {
                levels[l - 1]
            } else {
                g.scale(levels[l - 1], f)
            }
        };

        let mut intermediates = Vec::with_capacity(n - 1);
        let x_n = scaled(g, n);
        let mut z = self.subnets[0].forward(g, vars, x_n)?;
        for l in (1..n).rev() {
            let k = n - l;
            let y = self.upscales[k - 1].up(g, vars, z)?;
            intermediates.push(y);
            let x_l = scaled(g, l);
            let inp = g.add(y, x_l)?;
            let r = self.subnets[k].forward(g, vars, inp)?;
            z = g.add(inp, r)?;
        }
        Ok(CorrectorOutput {
            intermediates,
            output: z,
        })
    }

    /// Inference on one pyramid: returns the unclamped output image.
    pub fn run(&self, pyr: &Pyramid, s: &ScaleVector) -> Result<Image> {
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g, false);
        let levels = pyr
            .levels()
            .iter()
            .map(|img| Tensor::from_images(&[img]).map(|t| g.input(t)))
            .collect::<Result<Vec<_>>>()?;
        let out = self.forward(&mut g, &vars, &levels, s)?;
        g.value(out.output).to_image(0)
    }

    /// Parameters as named f32 tensors in construction order.
    pub fn named_tensors(&self) -> Vec<(String, Tensor<f32>)> {
        self.params.iter().map(|p| (p.name.clone(), p.value.cast())).collect()
    }

    /// Replaces every parameter; names and shapes must match exactly.
    pub fn load_tensors(&mut self, tensors: &[(String, Tensor<f32>)]) -> Result<()> {
        let own = tensors
            .iter()
            .filter(|(name, _)| self.params.id_of(name).is_some())
            .count();
        if own != self.params.len() {
            return Err(Error::Config(format!(
                "checkpoint provides {own} of {} corrector tensors",
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

fn rebuild_layout(config: &ModelConfig) -> (Vec<Subnet>, Vec<Layer>) {
    // Layer ids depend only on the config, so building into a scratch store
    // reproduces them.
    let scratch = Corrector::<f32>::new(config.clone(), 0).expect("validated config");
    (scratch.subnets, scratch.upscales)
}
