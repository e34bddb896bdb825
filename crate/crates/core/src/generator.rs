//! Miniature style-based generator.
//!
//! A mapping network turns a latent `z` into a style row that is broadcast to
//! every layer; the synthesis network starts from a learned constant and, per
//! style layer, runs conv → add scaled noise → leaky ReLU → AdaIN, where the
//! AdaIN scale and shift are affine functions of that layer's style row.
//! Layers come in pairs per resolution stage with 2x upsampling between
//! stages; a final 1x1 conv and a sigmoid produce an RGB image in `[0, 1]`.
//!
//! Style layers are indexed from 0. Stage `k` owns layers `2k` and `2k + 1`;
//! with an odd layer count the last stage owns a single layer.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Graph, Var};
use crate::error::{ensure, Error, Result};
use crate::ntws::WeightStore;
use crate::tensor::Tensor;

/// An image as a `[C,H,W]` tensor with values in `[0, 1]`.
pub type ImageTensor = Tensor;

pub const DEFAULT_LEAKY_SLOPE: f64 = 0.2;
pub const DEFAULT_ADAIN_EPS: f64 = 1e-8;
/// Standard deviation of randomly sampled style vectors.
pub const STYLE_SAMPLE_STD: f64 = 0.5;

/// Layered latent: `layers` rows of `width` values.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleVector {
    values: Tensor,
}

impl StyleVector {
    pub fn zeros(layers: usize, width: usize) -> Self {
        Self {
            values: Tensor::zeros([layers, width]),
        }
    }

    pub fn from_tensor(values: Tensor) -> Result<Self> {
        ensure!(
            values.rank() == 2 && values.shape()[0] >= 2,
            Error::contract(format!(
                "style must be [L,D] with L >= 2, got {:?}",
                values.shape()
            ))
        );
        ensure!(
            values.is_finite(),
            Error::contract("style contains non-finite values")
        );
        Ok(Self { values })
    }

    /// Rows drawn i.i.d. from `N(0, STYLE_SAMPLE_STD^2)`.
    pub fn random(layers: usize, width: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, STYLE_SAMPLE_STD).expect("valid std");
        Self {
            values: Tensor::from_fn([layers, width], |_| normal.sample(&mut rng)),
        }
    }

    pub fn layers(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.width();
        &self.values.data()[i * d..(i + 1) * d]
    }

    pub(crate) fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let d = self.width();
        &mut self.values.data_mut()[i * d..(i + 1) * d]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.values
    }

    pub fn into_tensor(self) -> Tensor {
        self.values
    }

    /// Stores the style as the single entry `"style"` of an NTWS container.
    pub fn to_store(&self) -> WeightStore {
        let mut ws = WeightStore::new();
        ws.insert("style", self.values.clone());
        ws
    }

    pub fn from_store(ws: &WeightStore) -> Result<Self> {
        Self::from_tensor(ws.get("style")?.clone())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_store().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_store(&WeightStore::load(path)?).map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorConfig {
    /// Number of style layers `L`.
    pub layers: usize,
    /// Style row width `D`.
    pub width: usize,
    pub base_resolution: usize,
    /// Feature channels of each resolution stage.
    pub channels: Vec<usize>,
    pub noise_seed: u64,
    pub mapping_depth: usize,
    pub leaky_slope: f64,
    pub adain_eps: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl GeneratorConfig {
    /// `L = 8`, `D = 64`, 8x8 → 64x64, channels 128/64/32/16.
    pub fn desk() -> Self {
        Self {
            layers: 8,
            width: 64,
            base_resolution: 8,
            channels: vec![128, 64, 32, 16],
            noise_seed: 0,
            mapping_depth: 3,
            leaky_slope: DEFAULT_LEAKY_SLOPE,
            adain_eps: DEFAULT_ADAIN_EPS,
        }
    }

    /// `L = 18`, `D = 512`, 4x4 → 1024x1024 with the usual channel ladder.
    pub fn full_scale() -> Self {
        Self {
            layers: 18,
            width: 512,
            base_resolution: 4,
            channels: vec![512, 512, 512, 512, 256, 128, 64, 32, 16],
            noise_seed: 0,
            mapping_depth: 8,
            leaky_slope: DEFAULT_LEAKY_SLOPE,
            adain_eps: DEFAULT_ADAIN_EPS,
        }
    }

    /// A small configuration with `layers` style layers, for tests and sweeps.
    pub fn tiny(layers: usize, width: usize) -> Self {
        let stages = layers.div_ceil(2);
        Self {
            layers,
            width,
            base_resolution: 4,
            channels: (0..stages).map(|k| (8usize >> k.min(2)).max(4)).collect(),
            noise_seed: 0,
            mapping_depth: 2,
            leaky_slope: DEFAULT_LEAKY_SLOPE,
            adain_eps: DEFAULT_ADAIN_EPS,
        }
    }

    pub fn stages(&self) -> usize {
        self.layers.div_ceil(2)
    }

    pub fn output_resolution(&self) -> usize {
        self.base_resolution << (self.stages() - 1)
    }

    pub fn stage_of(&self, layer: usize) -> usize {
        layer / 2
    }

    pub fn layer_resolution(&self, layer: usize) -> usize {
        self.base_resolution << self.stage_of(layer)
    }

    pub fn layer_channels(&self, layer: usize) -> usize {
        self.channels[self.stage_of(layer)]
    }

    fn layer_in_channels(&self, layer: usize) -> usize {
        match layer {
            0 => self.channels[0],
            l if l % 2 == 0 => self.channels[self.stage_of(l) - 1],
            l => self.channels[self.stage_of(l)],
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.layers >= 2 && self.width >= 1,
            Error::contract(format!(
                "generator needs L >= 2 and D >= 1, got L={} D={}",
                self.layers, self.width
            ))
        );
        ensure!(
            self.base_resolution >= 1,
            Error::contract("base resolution must be positive")
        );
        ensure!(
            self.channels.len() == self.stages(),
            Error::contract(format!(
                "{} style layers need {} channel entries, got {}",
                self.layers,
                self.stages(),
                self.channels.len()
            ))
        );
        ensure!(
            self.channels.iter().all(|&c| c > 0),
            Error::contract("channel counts must be positive")
        );
        ensure!(
            self.leaky_slope > 0.0 && self.leaky_slope < 1.0,
            Error::contract("leaky slope must lie in (0, 1)")
        );
        ensure!(self.adain_eps > 0.0, Error::contract("adain eps must be positive"));
        Ok(())
    }

    /// Every weight name with its shape, in store order.
    pub fn weight_layout(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.width;
        let mut out = Vec::new();
        for i in 0..self.mapping_depth {
            out.push((format!("mapping.{i}.weight"), vec![d, d]));
            out.push((format!("mapping.{i}.bias"), vec![d]));
        }
        let b = self.base_resolution;
        out.push(("synthesis.const".into(), vec![self.channels[0], b, b]));
        for l in 0..self.layers {
            let (cin, c) = (self.layer_in_channels(l), self.layer_channels(l));
            let p = format!("synthesis.layer{l}");
            out.push((format!("{p}.conv.weight"), vec![c, cin, 3, 3]));
            out.push((format!("{p}.conv.bias"), vec![c]));
            out.push((format!("{p}.noise_strength"), vec![c]));
            out.push((format!("{p}.style_scale.weight"), vec![c, d]));
            out.push((format!("{p}.style_scale.bias"), vec![c]));
            out.push((format!("{p}.style_shift.weight"), vec![c, d]));
            out.push((format!("{p}.style_shift.bias"), vec![c]));
        }
        let last = *self.channels.last().expect("validated");
        out.push(("synthesis.to_rgb.weight".into(), vec![3, last, 1, 1]));
        out.push(("synthesis.to_rgb.bias".into(), vec![3]));
        out
    }
}

/// Seeded fan-in-scaled Gaussian initialisation. The same seed always yields
/// a bit-identical store.
pub fn init_random_weights(config: &GeneratorConfig, seed: u64) -> Result<WeightStore> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ws = WeightStore::new();
    for (name, shape) in config.weight_layout() {
        let n: usize = shape.iter().product();
        let fan_in: usize = shape.iter().skip(1).product::<usize>().max(1);
        let tensor = if name.ends_with("style_scale.bias") {
            Tensor::full(shape, 1.0)
        } else if name.ends_with("noise_strength") {
            Tensor::full(shape, 0.1)
        } else if name.ends_with(".bias") {
            Tensor::zeros(shape)
        } else {
            let std = if name == "synthesis.const" {
                1.0
            } else if name.contains(".style_") || name.contains("to_rgb") {
                (1.0 / fan_in as f64).sqrt()
            } else {
                (2.0 / fan_in as f64).sqrt()
            };
            let normal = Normal::new(0.0, std).expect("finite std");
            Tensor::new(shape, (0..n).map(|_| normal.sample(&mut rng)).collect())?
        };
        ws.insert(name, tensor);
    }
    Ok(ws)
}

/// Per-layer `[1,H,W]` noise images, fixed by the config's noise seed.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseBank {
    images: Vec<Tensor>,
}

impl NoiseBank {
    pub fn new(config: &GeneratorConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.noise_seed);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let images = (0..config.layers)
            .map(|l| {
                let r = config.layer_resolution(l);
                Tensor::from_fn([1, r, r], |_| normal.sample(&mut rng))
            })
            .collect();
        Self { images }
    }

    pub fn layer(&self, l: usize) -> &Tensor {
        &self.images[l]
    }
}

/// A frozen generator: config, validated weights and noise.
#[derive(Clone, Debug)]
pub struct Generator {
    config: GeneratorConfig,
    weights: WeightStore,
    noise: NoiseBank,
}

impl Generator {
    /// Checks that `weights` holds every entry the config needs.
    pub fn new(config: GeneratorConfig, weights: WeightStore) -> Result<Self> {
        config.validate()?;
        for (name, shape) in config.weight_layout() {
            weights.expect(&name, &shape)?;
        }
        let noise = NoiseBank::new(&config);
        Ok(Self {
            config,
            weights,
            noise,
        })
    }

    pub fn seeded(config: GeneratorConfig, seed: u64) -> Result<Self> {
        let weights = init_random_weights(&config, seed)?;
        Self::new(config, weights)
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn weights(&self) -> &WeightStore {
        &self.weights
    }

    pub fn noise(&self) -> &NoiseBank {
        &self.noise
    }

    fn w(&self, name: &str) -> &Tensor {
        self.weights.get(name).expect("validated at construction")
    }

    /// Mapping network: `depth` affine + leaky-ReLU stages, broadcast to every layer.
    pub fn map_latent(&self, z: &Tensor) -> Result<StyleVector> {
        let d = self.config.width;
        ensure!(
            z.shape() == [d],
            Error::contract(format!("latent must be [{d}], got {:?}", z.shape()))
        );
        ensure!(z.is_finite(), Error::contract("latent contains non-finite values"));
        let mut h = z.clone();
        for i in 0..self.config.mapping_depth {
            let wz = crate::kernels::matvec(self.w(&format!("mapping.{i}.weight")), &h)?;
            let b = self.w(&format!("mapping.{i}.bias"));
            h = crate::kernels::leaky_relu(&wz.zip_map(b, |p, q| p + q)?, self.config.leaky_slope);
        }
        let mut s = StyleVector::zeros(self.config.layers, d);
        for l in 0..self.config.layers {
            s.row_mut(l).copy_from_slice(h.data());
        }
        Ok(s)
    }

    fn check_style_shape(&self, shape: &[usize]) -> Result<()> {
        ensure!(
            shape == [self.config.layers, self.config.width],
            Error::contract(format!(
                "style {:?} does not match generator [{}, {}]",
                shape, self.config.layers, self.config.width
            ))
        );
        Ok(())
    }

    /// Records the synthesis network on `g`, with `style` an `[L,D]` node.
    pub fn synthesize_graph<'g>(&'g self, g: &mut Graph<'g>, style: Var) -> Result<Var> {
        self.check_style_shape(g.value(style).shape())?;
        let cfg = &self.config;
        let mut x = g.constant_ref(self.w("synthesis.const"));
        for l in 0..cfg.layers {
            let p = format!("synthesis.layer{l}");
            if l > 0 && l % 2 == 0 {
                x = g.upsample2x(x)?;
            }
            let k = g.constant_ref(self.w(&format!("{p}.conv.weight")));
            let b = g.constant_ref(self.w(&format!("{p}.conv.bias")));
            x = g.conv2d(x, k, b, 1)?;

            let strength = self.w(&format!("{p}.noise_strength")).data();
            let plane = self.noise.layer(l).data();
            let (c, h, w) = g.value(x).dims3()?;
            let noise = Tensor::from_fn([c, h, w], |i| strength[i / (h * w)] * plane[i % (h * w)]);
            let noise = g.constant(noise);
            x = g.add(x, noise)?;
            x = g.leaky_relu(x, cfg.leaky_slope);

            let row = g.row(style, l)?;
            let scale = self.style_affine(g, row, &p, "style_scale")?;
            let shift = self.style_affine(g, row, &p, "style_shift")?;
            x = g.adain(x, scale, shift, cfg.adain_eps)?;
        }
        let k = g.constant_ref(self.w("synthesis.to_rgb.weight"));
        let b = g.constant_ref(self.w("synthesis.to_rgb.bias"));
        let rgb = g.conv2d(x, k, b, 0)?;
        Ok(g.sigmoid(rgb))
    }

    fn style_affine<'g>(&'g self, g: &mut Graph<'g>, row: Var, prefix: &str, which: &str) -> Result<Var> {
        let w = g.constant_ref(self.w(&format!("{prefix}.{which}.weight")));
        let b = g.constant_ref(self.w(&format!("{prefix}.{which}.bias")));
        let wx = g.matvec(w, row)?;
        g.add(wx, b)
    }

    /// `g(s)`: renders a style vector to a `[3,R,R]` image in `[0, 1]`.
    pub fn synthesize(&self, s: &StyleVector) -> Result<ImageTensor> {
        self.check_style_shape(s.tensor().shape())?;
        let mut g = Graph::new();
        let sv = g.constant_ref(s.tensor());
        let img = self.synthesize_graph(&mut g, sv)?;
        Ok(g.value(img).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_config_shape() {
        let c = GeneratorConfig::desk();
        c.validate().unwrap();
        assert_eq!(c.stages(), 4);
        assert_eq!(c.output_resolution(), 64);
        assert_eq!(c.layer_resolution(7), 64);
    }

    #[test]
    fn full_scale_reaches_1024() {
        let c = GeneratorConfig::full_scale();
        c.validate().unwrap();
        assert_eq!(c.layers, 18);
        assert_eq!(c.width, 512);
        assert_eq!(c.output_resolution(), 1024);
    }

    #[test]
    fn odd_layer_count_has_single_layer_last_stage() {
        let c = GeneratorConfig::tiny(5, 4);
        c.validate().unwrap();
        assert_eq!(c.stages(), 3);
        assert_eq!(c.output_resolution(), 16);
        assert_eq!(c.stage_of(4), 2);
    }

    #[test]
    fn channel_list_must_match_stages() {
        let mut c = GeneratorConfig::desk();
        c.channels.pop();
        assert!(c.validate().is_err());
    }

    #[test]
    fn seeded_weights_are_reproducible() {
        let c = GeneratorConfig::tiny(4, 6);
        assert_eq!(init_random_weights(&c, 7).unwrap(), init_random_weights(&c, 7).unwrap());
        assert_ne!(init_random_weights(&c, 7).unwrap(), init_random_weights(&c, 8).unwrap());
    }

    #[test]
    fn missing_weight_is_named() {
        let c = GeneratorConfig::tiny(4, 6);
        let full = init_random_weights(&c, 1).unwrap();
        let mut partial = WeightStore::new();
        for (name, t) in full.iter().filter(|(n, _)| *n != "synthesis.layer2.conv.bias") {
            partial.insert(name, t.clone());
        }
        let err = Generator::new(c, partial).unwrap_err();
        assert!(err.to_string().contains("synthesis.layer2.conv.bias"), "{err}");
    }

    #[test]
    fn zero_mapping_weights_give_zero_style() {
        let c = GeneratorConfig::tiny(4, 6);
        let mut ws = init_random_weights(&c, 1).unwrap();
        for i in 0..c.mapping_depth {
            ws.insert(format!("mapping.{i}.weight"), Tensor::zeros([6, 6]));
            ws.insert(format!("mapping.{i}.bias"), Tensor::zeros([6]));
        }
        let gen = Generator::new(c, ws).unwrap();
        let s = gen.map_latent(&Tensor::zeros([6])).unwrap();
        assert!(s.tensor().data().iter().all(|&v| v == 0.0));
        assert_eq!(s.layers(), 4);
    }

    #[test]
    fn wrong_style_shape_is_a_contract_error() {
        let gen = Generator::seeded(GeneratorConfig::tiny(4, 6), 0).unwrap();
        let err = gen.synthesize(&StyleVector::zeros(5, 6)).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn style_file_round_trip() {
        let s = StyleVector::random(4, 3, 11);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.ntws");
        s.save(&p).unwrap();
        assert_eq!(StyleVector::load(&p).unwrap(), s);
    }
}
