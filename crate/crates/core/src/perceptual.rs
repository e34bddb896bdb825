//! Image distances used as the inversion objective.
//!
//! `l1` and `l2` are mean absolute and mean squared pixel differences. The
//! `feature` distance is the mean squared difference between activations of a
//! frozen convolutional feature extractor at a selectable stage. All
//! distances are mean-reduced, so values do not scale with resolution.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Graph, Var};
use crate::error::{ensure, Error, Result};
use crate::generator::ImageTensor;
use crate::ntws::WeightStore;
use crate::tensor::Tensor;

const EXTRACTOR_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DistanceKind {
    L1,
    L2,
    Feature,
}

impl fmt::Display for DistanceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DistanceKind::L1 => "l1",
            DistanceKind::L2 => "l2",
            DistanceKind::Feature => "feature",
        })
    }
}

impl FromStr for DistanceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l1" => Ok(Self::L1),
            "l2" => Ok(Self::L2),
            "feature" => Ok(Self::Feature),
            other => Err(Error::contract(format!(
                "unknown distance kind `{other}` (expected l1, l2 or feature)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DistanceSpec {
    pub kind: DistanceKind,
    /// Extractor stage feeding the feature distance; `None` uses the
    /// extractor's own tap.
    pub tap_depth: Option<usize>,
}

impl DistanceSpec {
    pub const L1: Self = Self {
        kind: DistanceKind::L1,
        tap_depth: None,
    };
    pub const L2: Self = Self {
        kind: DistanceKind::L2,
        tap_depth: None,
    };

    pub fn feature(tap_depth: Option<usize>) -> Self {
        Self {
            kind: DistanceKind::Feature,
            tap_depth,
        }
    }
}

/// Frozen conv → leaky ReLU → 2x2 average-pool stages.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureExtractor {
    stages: Vec<(Tensor, Tensor)>,
    tap_depth: usize,
}

impl FeatureExtractor {
    /// Seeded random weights; channels go 3 → 16 → 32 → … doubling per stage.
    /// The tap defaults to the middle stage, `ceil(stages / 2)`.
    pub fn build(seed: u64, stages: usize) -> Result<Self> {
        ensure!(stages >= 1, Error::contract("extractor needs at least one stage"));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cin = 3;
        let mut out = Vec::with_capacity(stages);
        for k in 0..stages {
            let cout = 16 << k;
            let normal = Normal::new(0.0, (2.0 / (cin * 9) as f64).sqrt()).expect("finite std");
            let kernel = Tensor::from_fn([cout, cin, 3, 3], |_| normal.sample(&mut rng));
            out.push((kernel, Tensor::zeros([cout])));
            cin = cout;
        }
        Ok(Self {
            stages: out,
            tap_depth: stages.div_ceil(2),
        })
    }

    pub fn stages(&self) -> usize {
        self.stages.len()
    }

    pub fn tap_depth(&self) -> usize {
        self.tap_depth
    }

    pub fn with_tap_depth(mut self, tap_depth: usize) -> Result<Self> {
        self.check_depth(tap_depth)?;
        self.tap_depth = tap_depth;
        Ok(self)
    }

    fn check_depth(&self, depth: usize) -> Result<()> {
        ensure!(
            (1..=self.stages.len()).contains(&depth),
            Error::contract(format!(
                "tap depth {depth} outside 1..={}",
                self.stages.len()
            ))
        );
        Ok(())
    }

    /// Records stages `1..=depth` on `g`.
    pub fn record<'g>(&'g self, g: &mut Graph<'g>, image: Var, depth: usize) -> Result<Var> {
        self.check_depth(depth)?;
        let mut x = image;
        for (kernel, bias) in &self.stages[..depth] {
            let k = g.constant_ref(kernel);
            let b = g.constant_ref(bias);
            x = g.conv2d(x, k, b, 1)?;
            x = g.leaky_relu(x, EXTRACTOR_SLOPE);
            x = g.avg_pool2x(x)?;
        }
        Ok(x)
    }

    /// Activations after stage `depth`.
    pub fn features(&self, image: &ImageTensor, depth: usize) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.constant_ref(image);
        let f = self.record(&mut g, x, depth)?;
        Ok(g.value(f).clone())
    }

    pub fn to_store(&self) -> WeightStore {
        let mut ws = WeightStore::new();
        for (k, (kernel, bias)) in self.stages.iter().enumerate() {
            ws.insert(format!("extractor.stage{k}.weight"), kernel.clone());
            ws.insert(format!("extractor.stage{k}.bias"), bias.clone());
        }
        ws
    }

    /// Reads consecutive `extractor.stage{k}.*` entries; kernels must be
    /// `[Cout,Cin,k,k]` chaining channel counts from 3.
    pub fn from_store(ws: &WeightStore) -> Result<Self> {
        let mut stages = Vec::new();
        let mut cin = 3;
        while ws.contains(&format!("extractor.stage{}.weight", stages.len())) {
            let k = stages.len();
            let kernel = ws.get(&format!("extractor.stage{k}.weight"))?;
            let &[cout, kc, kh, kw] = kernel.shape() else {
                return Err(Error::Load(format!("extractor.stage{k}.weight must be rank 4")));
            };
            ensure!(
                kc == cin && kh == kw && kh % 2 == 1,
                Error::Load(format!(
                    "extractor.stage{k}.weight has shape {:?}, expected [_, {cin}, k, k] with odd k",
                    kernel.shape()
                ))
            );
            let bias = ws.expect(&format!("extractor.stage{k}.bias"), &[cout])?;
            stages.push((kernel.clone(), bias.clone()));
            cin = cout;
        }
        ensure!(
            !stages.is_empty(),
            Error::Load("missing entry `extractor.stage0.weight`".into())
        );
        let tap_depth = stages.len().div_ceil(2);
        Ok(Self { stages, tap_depth })
    }
}

/// A distance with everything it needs to evaluate.
#[derive(Clone, Debug)]
pub struct Distance {
    spec: DistanceSpec,
    extractor: Option<FeatureExtractor>,
}

/// Target side of a distance, with feature activations cached.
#[derive(Clone, Debug)]
pub struct PreparedTarget<'a> {
    image: &'a ImageTensor,
    features: Option<Tensor>,
}

impl<'a> PreparedTarget<'a> {
    pub fn image(&self) -> &ImageTensor {
        self.image
    }
}

impl Distance {
    pub fn new(spec: DistanceSpec, extractor: Option<FeatureExtractor>) -> Result<Self> {
        if spec.kind == DistanceKind::Feature {
            let ex = extractor.as_ref().ok_or_else(|| {
                Error::contract("feature distance requires a feature extractor")
            })?;
            if let Some(d) = spec.tap_depth {
                ex.check_depth(d)?;
            }
        }
        Ok(Self { spec, extractor })
    }

    pub fn l1() -> Self {
        Self::new(DistanceSpec::L1, None).expect("pixel distance")
    }

    pub fn l2() -> Self {
        Self::new(DistanceSpec::L2, None).expect("pixel distance")
    }

    pub fn spec(&self) -> DistanceSpec {
        self.spec
    }

    pub fn extractor(&self) -> Option<&FeatureExtractor> {
        self.extractor.as_ref()
    }

    fn depth(&self) -> usize {
        let ex = self.extractor.as_ref().expect("checked in new");
        self.spec.tap_depth.unwrap_or(ex.tap_depth)
    }

    pub fn prepare<'a>(&self, target: &'a ImageTensor) -> Result<PreparedTarget<'a>> {
        let features = match self.spec.kind {
            DistanceKind::Feature => Some(
                self.extractor
                    .as_ref()
                    .expect("checked in new")
                    .features(target, self.depth())?,
            ),
            _ => None,
        };
        Ok(PreparedTarget {
            image: target,
            features,
        })
    }

    /// Records `D(a, target)` on `g`; differentiable with respect to `a`.
    pub fn record<'g>(&'g self, g: &mut Graph<'g>, a: Var, target: &'g PreparedTarget<'_>) -> Result<Var> {
        let shape = g.value(a).shape();
        ensure!(
            shape == target.image.shape(),
            Error::contract(format!(
                "distance between images of shape {:?} and {:?}",
                shape,
                target.image.shape()
            ))
        );
        match self.spec.kind {
            DistanceKind::L1 => {
                let b = g.constant_ref(target.image);
                let d = g.sub(a, b)?;
                Ok(g.mean_abs(d))
            }
            DistanceKind::L2 => {
                let b = g.constant_ref(target.image);
                let d = g.sub(a, b)?;
                Ok(g.mean_square(d))
            }
            DistanceKind::Feature => {
                let ex = self.extractor.as_ref().expect("checked in new");
                let fa = ex.record(g, a, self.depth())?;
                let fb = g.constant_ref(target.features.as_ref().expect("prepared"));
                let d = g.sub(fa, fb)?;
                Ok(g.mean_square(d))
            }
        }
    }

    pub fn eval(&self, a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
        self.eval_prepared(a, &self.prepare(b)?)
    }

    pub fn eval_prepared(&self, a: &ImageTensor, target: &PreparedTarget<'_>) -> Result<f64> {
        let mut g = Graph::new();
        let av = g.constant_ref(a);
        let d = self.record(&mut g, av, target)?;
        g.value(d).item()
    }
}

/// `D(a, b)` under `spec`; the extractor is required for the feature kind.
pub fn distance(
    a: &ImageTensor,
    b: &ImageTensor,
    spec: DistanceSpec,
    extractor: Option<&FeatureExtractor>,
) -> Result<f64> {
    Distance::new(spec, extractor.cloned())?.eval(a, b)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(seed: u64, shape: [usize; 3]) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = rand_distr::Uniform::new(0.0, 1.0).unwrap();
        Tensor::from_fn(shape, |_| u.sample(&mut rng))
    }

    #[test]
    fn l2_of_unit_step() {
        let a = Tensor::zeros([1, 1, 1]);
        let b = Tensor::full([1, 1, 1], 1.0);
        assert_eq!(distance(&a, &b, DistanceSpec::L2, None).unwrap(), 1.0);
    }

    #[test]
    fn self_distance_is_zero_for_every_kind() {
        let x = img(3, [3, 8, 8]);
        let ex = FeatureExtractor::build(1, 3).unwrap();
        for spec in [DistanceSpec::L1, DistanceSpec::L2, DistanceSpec::feature(Some(2))] {
            assert_eq!(distance(&x, &x, spec, Some(&ex)).unwrap(), 0.0);
        }
    }

    #[test]
    fn feature_distance_is_symmetric() {
        let (a, b) = (img(1, [3, 8, 8]), img(2, [3, 8, 8]));
        let ex = FeatureExtractor::build(5, 2).unwrap();
        let spec = DistanceSpec::feature(None);
        assert_eq!(
            distance(&a, &b, spec, Some(&ex)).unwrap(),
            distance(&b, &a, spec, Some(&ex)).unwrap()
        );
    }

    #[test]
    fn extractor_is_seed_deterministic() {
        assert_eq!(FeatureExtractor::build(9, 3).unwrap(), FeatureExtractor::build(9, 3).unwrap());
        assert_ne!(FeatureExtractor::build(9, 3).unwrap(), FeatureExtractor::build(10, 3).unwrap());
    }

    #[test]
    fn default_tap_is_middle_stage() {
        assert_eq!(FeatureExtractor::build(0, 1).unwrap().tap_depth(), 1);
        assert_eq!(FeatureExtractor::build(0, 4).unwrap().tap_depth(), 2);
        assert_eq!(FeatureExtractor::build(0, 5).unwrap().tap_depth(), 3);
        assert!(FeatureExtractor::build(0, 0).is_err());
    }

    #[test]
    fn feature_kind_needs_extractor() {
        let x = img(0, [3, 4, 4]);
        assert!(distance(&x, &x, DistanceSpec::feature(None), None).is_err());
        let ex = FeatureExtractor::build(0, 2).unwrap();
        assert!(distance(&x, &x, DistanceSpec::feature(Some(3)), Some(&ex)).is_err());
    }

    #[test]
    fn shape_mismatch_is_contract_error() {
        let err = distance(&img(0, [3, 4, 4]), &img(0, [3, 4, 2]), DistanceSpec::L1, None).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn extractor_store_round_trip() {
        let ex = FeatureExtractor::build(4, 3).unwrap();
        let back = FeatureExtractor::from_store(&ex.to_store()).unwrap();
        assert_eq!(back, ex);
        assert!(FeatureExtractor::from_store(&WeightStore::new()).is_err());
    }
}
