//! Style inference: gradient descent on the style vector so that the frozen
//! generator reproduces a target image.
//!
//! The style starts at zero. Each iteration evaluates `D(g(s), target)`,
//! backpropagates through the synthesis network to `s` and applies the
//! update rule. The returned style is the best-so-far iterate, not the last.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::autodiff::Graph;
use crate::error::{ensure, Error, Result};
use crate::generator::{Generator, ImageTensor, StyleVector};
use crate::perceptual::{Distance, PreparedTarget};
use crate::tensor::Tensor;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Step size used when inverting the desk generator with plain descent under
/// the `l2` distance; see [`calibrate_learning_rate`].
pub const DESK_LEARNING_RATE: f64 = 30.0;
pub const DESK_ITERATIONS: usize = 500;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Optimizer {
    /// `s ← s − lr · ∂D/∂s`.
    Gd,
    Adam,
}

impl FromStr for Optimizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gd" => Ok(Self::Gd),
            "adam" => Ok(Self::Adam),
            other => Err(Error::contract(format!(
                "unknown optimizer `{other}` (expected gd or adam)"
            ))),
        }
    }
}

impl std::fmt::Display for Optimizer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Gd => "gd",
            Self::Adam => "adam",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InversionConfig {
    pub learning_rate: f64,
    pub iterations: usize,
    /// Iterations at which `g(s)` is kept, for progress strips.
    pub snapshot_iters: Vec<usize>,
    pub optimizer: Optimizer,
}

impl Default for InversionConfig {
    fn default() -> Self {
        Self {
            learning_rate: DESK_LEARNING_RATE,
            iterations: DESK_ITERATIONS,
            snapshot_iters: Vec::new(),
            optimizer: Optimizer::Gd,
        }
    }
}

impl InversionConfig {
    /// Plain descent, `lr = 1`, 1000 iterations.
    pub fn reference() -> Self {
        Self {
            learning_rate: 1.0,
            iterations: 1000,
            snapshot_iters: Vec::new(),
            optimizer: Optimizer::Gd,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.learning_rate > 0.0 && self.learning_rate.is_finite(),
            Error::contract(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            ))
        );
        if let Some(&bad) = self.snapshot_iters.iter().find(|&&i| i > self.iterations) {
            return Err(Error::contract(format!(
                "snapshot iteration {bad} beyond {} iterations",
                self.iterations
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct InversionResult {
    /// Lowest-loss iterate.
    pub style: StyleVector,
    /// `(iteration, loss)` for iterations `0..=iterations`.
    pub trace: Vec<(usize, f64)>,
    pub snapshots: Vec<(usize, ImageTensor)>,
    /// Configuration the result was produced with.
    pub config: InversionConfig,
}

impl InversionResult {
    pub fn initial_loss(&self) -> f64 {
        self.trace[0].1
    }

    pub fn best(&self) -> (usize, f64) {
        best_so_far(&self.trace).expect("trace holds the initial loss")
    }
}

/// Minimum-loss entry; ties go to the earliest iteration.
pub fn best_so_far(trace: &[(usize, f64)]) -> Result<(usize, f64)> {
    ensure!(!trace.is_empty(), Error::contract("best_so_far of an empty trace"));
    Ok(trace
        .iter()
        .copied()
        .fold(trace[0], |best, e| if e.1 < best.1 { e } else { best }))
}

/// Running minimum of the loss column.
pub fn best_so_far_envelope(trace: &[(usize, f64)]) -> Vec<f64> {
    trace
        .iter()
        .scan(f64::INFINITY, |m, &(_, l)| {
            *m = m.min(l);
            Some(*m)
        })
        .collect()
}

pub fn trace_to_csv(trace: &[(usize, f64)]) -> String {
    let mut out = String::from("iteration,loss\n");
    for (it, loss) in trace {
        writeln!(out, "{it},{loss:e}").expect("string write");
    }
    out
}

pub fn write_trace_csv(trace: &[(usize, f64)], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, trace_to_csv(trace)).map_err(|e| Error::io(path, e))
}

/// Loss and `∂D(g(s), target)/∂s`, plus the rendered image.
pub fn objective_gradient(
    gen: &Generator,
    distance: &Distance,
    target: &PreparedTarget<'_>,
    style: &Tensor,
) -> Result<(f64, Tensor, ImageTensor)> {
    let mut g = Graph::new();
    let s = g.param(style.clone());
    let img = gen.synthesize_graph(&mut g, s)?;
    let loss = distance.record(&mut g, img, target)?;
    let value = g.value(loss).item()?;
    let mut grads = g.backward(loss)?;
    let grad = grads.take(s).unwrap_or_else(|| Tensor::zeros(style.shape().to_vec()));
    Ok((value, grad, g.value(img).clone()))
}

pub fn objective(
    gen: &Generator,
    distance: &Distance,
    target: &PreparedTarget<'_>,
    style: &Tensor,
) -> Result<(f64, ImageTensor)> {
    let mut g = Graph::new();
    let s = g.constant_ref(style);
    let img = gen.synthesize_graph(&mut g, s)?;
    let loss = distance.record(&mut g, img, target)?;
    Ok((g.value(loss).item()?, g.value(img).clone()))
}

/// Optimiser state for one inversion.
#[derive(Clone, Debug)]
pub struct UpdateRule {
    optimizer: Optimizer,
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl UpdateRule {
    pub fn new(optimizer: Optimizer, lr: f64, len: usize) -> Self {
        Self {
            optimizer,
            lr,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn apply(&mut self, style: &mut Tensor, grad: &Tensor) {
        match self.optimizer {
            Optimizer::Gd => {
                for (s, g) in style.data_mut().iter_mut().zip(grad.data()) {
                    *s -= self.lr * g;
                }
            }
            Optimizer::Adam => {
                self.t += 1;
                let c1 = 1.0 - ADAM_BETA1.powi(self.t);
                let c2 = 1.0 - ADAM_BETA2.powi(self.t);
                for (i, (s, &g)) in style.data_mut().iter_mut().zip(grad.data()).enumerate() {
                    self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * g;
                    self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * g * g;
                    let (mh, vh) = (self.m[i] / c1, self.v[i] / c2);
                    *s -= self.lr * mh / (vh.sqrt() + ADAM_EPS);
                }
            }
        }
    }
}

/// Solves `argmin_s D(g(s), target)` from the zero style.
pub fn invert(
    target: &ImageTensor,
    gen: &Generator,
    distance: &Distance,
    config: &InversionConfig,
) -> Result<InversionResult> {
    config.validate()?;
    let r = gen.config().output_resolution();
    ensure!(
        target.shape() == [3, r, r],
        Error::contract(format!(
            "target {:?} does not match generator output [3, {r}, {r}]",
            target.shape()
        ))
    );
    let prepared = distance.prepare(target)?;
    let (layers, width) = (gen.config().layers, gen.config().width);
    let mut style = Tensor::zeros([layers, width]);
    let mut rule = UpdateRule::new(config.optimizer, config.learning_rate, style.len());
    let mut trace = Vec::with_capacity(config.iterations + 1);
    let mut snapshots = Vec::new();
    let mut best = (f64::INFINITY, style.clone());

    for it in 0..=config.iterations {
        let last = it == config.iterations;
        let (loss, grad, image) = if last {
            let (loss, image) = objective(gen, distance, &prepared, &style)?;
            (loss, None, image)
        } else {
            let (loss, grad, image) = objective_gradient(gen, distance, &prepared, &style)?;
            (loss, Some(grad), image)
        };
        let finite = loss.is_finite() && grad.as_ref().is_none_or(Tensor::is_finite);
        if !finite {
            return Err(Error::Divergence {
                iteration: it,
                loss,
                trace,
            });
        }
        trace.push((it, loss));
        if loss < best.0 {
            best = (loss, style.clone());
        }
        if config.snapshot_iters.contains(&it) {
            snapshots.push((it, image));
        }
        if let Some(grad) = grad {
            rule.apply(&mut style, &grad);
        }
    }

    Ok(InversionResult {
        style: StyleVector::from_tensor(best.1)?,
        trace,
        snapshots,
        config: config.clone(),
    })
}

/// One row of a learning-rate calibration.
#[derive(Clone, Debug)]
pub struct CalibrationRow {
    pub learning_rate: f64,
    /// Median of best-loss / initial-loss across the probe targets; diverged
    /// runs count as infinity.
    pub median_ratio: f64,
    pub diverged: usize,
}

/// Picks a step size for `gen` by inverting self-rendered targets
/// `g(s*)`, `s*` seeded by `seeds`, for each candidate rate. Returns the rows
/// and the candidate with the smallest median ratio (earliest on ties).
pub fn calibrate_learning_rate(
    gen: &Generator,
    distance: &Distance,
    candidates: &[f64],
    seeds: &[u64],
    iterations: usize,
    optimizer: Optimizer,
) -> Result<(Vec<CalibrationRow>, f64)> {
    ensure!(
        !candidates.is_empty() && !seeds.is_empty(),
        Error::contract("calibration needs candidates and seeds")
    );
    let cfg = gen.config();
    let targets = seeds
        .iter()
        .map(|&seed| gen.synthesize(&StyleVector::random(cfg.layers, cfg.width, seed)))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    for &lr in candidates {
        let config = InversionConfig {
            learning_rate: lr,
            iterations,
            snapshot_iters: Vec::new(),
            optimizer,
        };
        let mut ratios = Vec::new();
        let mut diverged = 0;
        for target in &targets {
            match invert(target, gen, distance, &config) {
                Ok(res) => ratios.push(res.best().1 / res.initial_loss()),
                Err(Error::Divergence { .. }) => {
                    diverged += 1;
                    ratios.push(f64::INFINITY);
                }
                Err(e) => return Err(e),
            }
        }
        ratios.sort_by(f64::total_cmp);
        rows.push(CalibrationRow {
            learning_rate: lr,
            median_ratio: ratios[ratios.len() / 2],
            diverged,
        });
    }
    let best = rows
        .iter()
        .fold(&rows[0], |b, r| if r.median_ratio < b.median_ratio { r } else { b })
        .learning_rate;
    Ok((rows, best))
}
