//! End-to-end expression transfer.
//!
//! rectify both faces → invert both crops → fuse → render → warp the
//! rendering back onto the identity image → hull mask, feather, blend.
//!
//! Every image handed from one stage to the next is quantised to 8 bits, so a
//! run of [`run_transfer`] matches chaining the stage subcommands through PNG
//! files exactly.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{ensure, Error, Result};
use crate::fusion::{self, FusionMask, FusionSearchConfig, SearchOutcome};
use crate::generator::{Generator, GeneratorConfig, ImageTensor, StyleVector};
use crate::geometry::{
    blend, erode, estimate_affine, feather, hull_mask, rectify, rectify_transform, warp_affine,
    AffineTransform, CropConfig, LandmarkSet, Mask,
};
use crate::imageio::{load_image, quantize, save_image};
use crate::inversion::{invert, write_trace_csv, InversionConfig, InversionResult, Optimizer};
use crate::ntws::WeightStore;
use crate::perceptual::{Distance, DistanceKind, DistanceSpec, FeatureExtractor};

/// Default feather width as a fraction of the crop side.
pub const FEATHER_FRACTION: f64 = 0.03;

#[derive(Clone, Debug, PartialEq)]
pub enum FusionMode {
    /// Two expression layers at `⌊3L/18⌋`.
    Fixed,
    /// Explicit expression layers.
    Layers(Vec<usize>),
    /// Contiguous-block search over the given lengths.
    Search { lengths: Vec<usize>, lambda: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub generator: GeneratorConfig,
    pub generator_seed: u64,
    /// Weight file replacing the seeded weights.
    pub weights: Option<PathBuf>,
    pub distance: DistanceSpec,
    pub extractor_seed: u64,
    pub extractor_stages: usize,
    pub inversion: InversionConfig,
    pub fusion: FusionMode,
    /// Feather sigma in identity-image pixels; `None` is
    /// `FEATHER_FRACTION` of the crop side.
    pub feather_sigma: Option<f64>,
    /// Resample the rendering to this size before warping it back.
    pub stage_resolution: Option<usize>,
    /// Directory receiving every intermediate artifact.
    pub keep_stages: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            generator: GeneratorConfig::desk(),
            generator_seed: 0,
            weights: None,
            distance: DistanceSpec::L2,
            extractor_seed: 0,
            extractor_stages: 3,
            inversion: InversionConfig::default(),
            fusion: FusionMode::Fixed,
            feather_sigma: None,
            stage_resolution: None,
            keep_stages: None,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::format("config", format!("`{key}`: cannot parse `{value}`")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(|t| parse_num(key, t.trim()))
        .collect()
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

impl PipelineConfig {
    /// Keys accepted by [`PipelineConfig::set`].
    pub const KEYS: &'static [&'static str] = &[
        "generator",
        "generator_seed",
        "noise_seed",
        "weights",
        "distance",
        "feature_tap",
        "extractor_seed",
        "extractor_stages",
        "optimizer",
        "learning_rate",
        "iterations",
        "fusion",
        "search_lengths",
        "search_lambda",
        "feather_sigma",
        "stage_resolution",
        "keep_stages",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "generator" => {
                let noise = self.generator.noise_seed;
                self.generator = match value {
                    "desk" => GeneratorConfig::desk(),
                    "full" => GeneratorConfig::full_scale(),
                    other => {
                        return Err(Error::format(
                            "config",
                            format!("unknown generator `{other}` (desk or full)"),
                        ))
                    }
                };
                self.generator.noise_seed = noise;
            }
            "generator_seed" => self.generator_seed = parse_num(key, value)?,
            "noise_seed" => self.generator.noise_seed = parse_num(key, value)?,
            "weights" => self.weights = Some(PathBuf::from(value)),
            "distance" => self.distance.kind = value.parse()?,
            "feature_tap" => self.distance.tap_depth = Some(parse_num(key, value)?),
            "extractor_seed" => self.extractor_seed = parse_num(key, value)?,
            "extractor_stages" => self.extractor_stages = parse_num(key, value)?,
            "optimizer" => self.inversion.optimizer = value.parse::<Optimizer>()?,
            "learning_rate" => self.inversion.learning_rate = parse_num(key, value)?,
            "iterations" => self.inversion.iterations = parse_num(key, value)?,
            "fusion" => {
                self.fusion = match value {
                    "fixed" => FusionMode::Fixed,
                    "search" => match &self.fusion {
                        s @ FusionMode::Search { .. } => s.clone(),
                        _ => FusionMode::Search {
                            lengths: vec![1, 2, 3],
                            lambda: 1.0,
                        },
                    },
                    list => FusionMode::Layers(parse_list(key, list)?),
                }
            }
            "search_lengths" | "search_lambda" => {
                let (mut lengths, mut lambda) = match &self.fusion {
                    FusionMode::Search { lengths, lambda } => (lengths.clone(), *lambda),
                    _ => (vec![1, 2, 3], 1.0),
                };
                if key == "search_lengths" {
                    lengths = parse_list(key, value)?;
                } else {
                    lambda = parse_num(key, value)?;
                }
                self.fusion = FusionMode::Search { lengths, lambda };
            }
            "feather_sigma" => self.feather_sigma = Some(parse_num(key, value)?),
            "stage_resolution" => self.stage_resolution = Some(parse_num(key, value)?),
            "keep_stages" => self.keep_stages = Some(PathBuf::from(value)),
            other => {
                return Err(Error::format(
                    "config",
                    format!("unknown key `{other}`"),
                ))
            }
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::format("config", format!("line {}: expected key = value", n + 1))
            })?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| Error::io(path, e))
    }

    /// Text form accepted by [`PipelineConfig::parse`].
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let gen = if self.generator == GeneratorConfig::full_scale() {
            "full"
        } else {
            "desk"
        };
        let mut kv = |k: &str, v: String| writeln!(out, "{k} = {v}").expect("string write");
        kv("generator", gen.into());
        kv("generator_seed", self.generator_seed.to_string());
        kv("noise_seed", self.generator.noise_seed.to_string());
        if let Some(w) = &self.weights {
            kv("weights", w.display().to_string());
        }
        kv("distance", self.distance.kind.to_string());
        if let Some(t) = self.distance.tap_depth {
            kv("feature_tap", t.to_string());
        }
        kv("extractor_seed", self.extractor_seed.to_string());
        kv("extractor_stages", self.extractor_stages.to_string());
        kv("optimizer", self.inversion.optimizer.to_string());
        kv("learning_rate", format!("{:?}", self.inversion.learning_rate));
        kv("iterations", self.inversion.iterations.to_string());
        match &self.fusion {
            FusionMode::Fixed => kv("fusion", "fixed".into()),
            FusionMode::Layers(l) => kv("fusion", join(l)),
            FusionMode::Search { lengths, lambda } => {
                kv("fusion", "search".into());
                kv("search_lengths", join(lengths));
                kv("search_lambda", format!("{lambda:?}"));
            }
        }
        if let Some(s) = self.feather_sigma {
            kv("feather_sigma", format!("{s:?}"));
        }
        if let Some(r) = self.stage_resolution {
            kv("stage_resolution", r.to_string());
        }
        if let Some(d) = &self.keep_stages {
            kv("keep_stages", d.display().to_string());
        }
        out
    }

    pub fn load_generator(&self) -> Result<Generator> {
        match &self.weights {
            Some(p) => Generator::new(self.generator.clone(), WeightStore::load(p)?),
            None => Generator::seeded(self.generator.clone(), self.generator_seed),
        }
    }

    pub fn build_distance(&self) -> Result<Distance> {
        let extractor = match self.distance.kind {
            DistanceKind::Feature => Some(FeatureExtractor::build(
                self.extractor_seed,
                self.extractor_stages,
            )?),
            _ => None,
        };
        Distance::new(self.distance, extractor)
    }

    pub fn crop(&self) -> CropConfig {
        CropConfig::new(self.generator.output_resolution())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransferJob {
    pub id: String,
    pub identity: PathBuf,
    pub identity_landmarks: PathBuf,
    pub expression: PathBuf,
    pub expression_landmarks: PathBuf,
    pub output: PathBuf,
}

impl TransferJob {
    /// Job named after the identity image.
    pub fn new(
        identity: impl Into<PathBuf>,
        identity_landmarks: impl Into<PathBuf>,
        expression: impl Into<PathBuf>,
        expression_landmarks: impl Into<PathBuf>,
        output: impl Into<PathBuf>,
    ) -> Self {
        let identity = identity.into();
        let id = identity
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "job".into());
        Self {
            id,
            identity,
            identity_landmarks: identity_landmarks.into(),
            expression: expression.into(),
            expression_landmarks: expression_landmarks.into(),
            output: output.into(),
        }
    }

    fn inputs(&self) -> [&Path; 4] {
        [
            &self.identity,
            &self.identity_landmarks,
            &self.expression,
            &self.expression_landmarks,
        ]
    }
}

/// Rectified crop, quantised, with the landmarks carried into the crop frame.
pub fn rectify_stage(
    image: &ImageTensor,
    lm: &LandmarkSet,
    crop: &CropConfig,
) -> Result<(ImageTensor, LandmarkSet, AffineTransform)> {
    let (img, t) = rectify(image, lm, crop)?;
    let n = crop.output_resolution;
    Ok((quantize(&img), lm.transformed(&t, n, n), t))
}

pub struct FuseOutput {
    pub mask: FusionMask,
    pub style: StyleVector,
    pub search: Option<SearchOutcome>,
}

/// `i1` and `i2` are only rendered against in search mode.
pub fn fuse_stage(
    mode: &FusionMode,
    gen: &Generator,
    distance: &Distance,
    s1: &StyleVector,
    s2: &StyleVector,
    i1: &ImageTensor,
    i2: &ImageTensor,
) -> Result<FuseOutput> {
    let total = s1.layers();
    let (mask, search) = match mode {
        FusionMode::Fixed => (fusion::fixed_expression_mask(total)?, None),
        FusionMode::Layers(l) => (FusionMask::new(l.iter().copied(), total)?, None),
        FusionMode::Search { lengths, lambda } => {
            let cfg = FusionSearchConfig {
                lambda: *lambda,
                d1: distance.clone(),
                d2: distance.clone(),
                ..FusionSearchConfig::new(lengths.clone())
            };
            let out = fusion::search(s1, s2, i1, i2, gen, &cfg)?;
            (out.mask.clone(), Some(out))
        }
    };
    let style = fusion::fuse(s1, s2, &mask)?;
    Ok(FuseOutput {
        mask,
        style,
        search,
    })
}

/// `g(s)` quantised to 8 bits.
pub fn generate_stage(gen: &Generator, style: &StyleVector) -> Result<ImageTensor> {
    Ok(quantize(&gen.synthesize(style)?))
}

pub struct CompositeOutput {
    pub composite: ImageTensor,
    pub warped: ImageTensor,
    pub mask: Mask,
    /// Rendering → identity image.
    pub transform: AffineTransform,
}

/// Pastes the rendering `generated` back onto the identity image.
///
/// The rendering's landmarks are the identity landmarks in the rectified
/// frame. The affine is fitted to the eye and mouth centroids, the warped
/// landmarks' hull is eroded by `ceil(3σ)` and feathered by `σ`, so pixels
/// outside the hull keep their original values exactly.
pub fn composite(
    identity: &ImageTensor,
    identity_lm: &LandmarkSet,
    generated: &ImageTensor,
    crop: &CropConfig,
    feather_sigma: Option<f64>,
    stage_resolution: Option<usize>,
) -> Result<CompositeOutput> {
    let (_, h, w) = identity.dims3()?;
    let (_, gh, gw) = generated.dims3()?;
    let n = crop.output_resolution;
    ensure!(
        gh == n && gw == n,
        Error::contract(format!(
            "rendering is {gh}x{gw}, crop resolution is {n}"
        ))
    );
    let rect = rectify_transform(identity_lm, crop)?;
    let mut lm0 = identity_lm.transformed(&rect, n, n);
    let mut rendered = generated.clone();
    if let Some(r) = stage_resolution {
        ensure!(r > 0, Error::contract("stage resolution must be positive"));
        let k = r as f64 / n as f64;
        let s = AffineTransform {
            m: [[k, 0.0, 0.5 * k - 0.5], [0.0, k, 0.5 * k - 0.5]],
        };
        rendered = quantize(&warp_affine(&rendered, &s, r, r)?);
        lm0 = lm0.transformed(&s, r, r);
    }
    let t = estimate_affine(lm0.anchors(), identity_lm.anchors())?;
    let warped = warp_affine(&rendered, &t, h, w)?;
    let warped_lm = lm0.transformed(&t, w, h);
    let sigma = feather_sigma.unwrap_or_else(|| FEATHER_FRACTION * n as f64 / rect.det().abs().sqrt());
    let hull = hull_mask(&warped_lm, h, w)?;
    let mask = if sigma > 0.0 {
        feather(&erode(&hull, (3.0 * sigma).ceil() as usize), sigma)?
    } else {
        hull
    };
    let composite = quantize(&blend(identity, &warped, &mask)?);
    Ok(CompositeOutput {
        composite,
        warped,
        mask,
        transform: t,
    })
}

pub struct TransferOutput {
    pub composite: ImageTensor,
    pub rectified: [ImageTensor; 2],
    pub inversions: [InversionResult; 2],
    pub fused: FuseOutput,
    pub generated: ImageTensor,
    pub warped: ImageTensor,
    pub mask: Mask,
}

struct Stages<'a> {
    job: &'a TransferJob,
    dir: Option<&'a Path>,
}

impl Stages<'_> {
    fn run<T>(&self, stage: &'static str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        f().map_err(|e| Error::Stage {
            stage,
            job: self.job.id.clone(),
            source: Box::new(e),
        })
    }

    fn keep(&self, stage: &'static str, f: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
        match self.dir {
            Some(d) => self.run(stage, || f(d)),
            None => Ok(()),
        }
    }
}

/// Runs the whole transfer and writes the composite to `job.output`.
pub fn run_transfer(job: &TransferJob, cfg: &PipelineConfig) -> Result<TransferOutput> {
    let st = Stages {
        job,
        dir: cfg.keep_stages.as_deref(),
    };
    let result = transfer_inner(&st, cfg);
    if result.is_err() && cfg.keep_stages.is_none() {
        let _ = fs::remove_file(&job.output);
    }
    result
}

fn transfer_inner(st: &Stages<'_>, cfg: &PipelineConfig) -> Result<TransferOutput> {
    let job = st.job;
    let (gen, distance, i1, lm1, i2, lm2) = st.run("load", || {
        for p in job.inputs() {
            ensure!(p.is_file(), Error::io(p, "no such file"));
        }
        cfg.inversion.validate()?;
        Ok((
            cfg.load_generator()?,
            cfg.build_distance()?,
            load_image(&job.identity)?,
            LandmarkSet::load(&job.identity_landmarks)?,
            load_image(&job.expression)?,
            LandmarkSet::load(&job.expression_landmarks)?,
        ))
    })?;
    st.keep("keep-stages", |d| {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        fs::write(d.join("config.txt"), cfg.to_text()).map_err(|e| Error::io(d, e))
    })?;
    let crop = cfg.crop();

    let (r1, rlm1, _) = st.run("rectify", || rectify_stage(&i1, &lm1, &crop))?;
    let (r2, rlm2, _) = st.run("rectify", || rectify_stage(&i2, &lm2, &crop))?;
    st.keep("rectify", |d| {
        save_image(&r1, d.join("identity_rectified.png"))?;
        rlm1.save(d.join("identity_rectified.json"))?;
        save_image(&r2, d.join("expression_rectified.png"))?;
        rlm2.save(d.join("expression_rectified.json"))
    })?;

    let inv1 = st.run("invert", || invert(&r1, &gen, &distance, &cfg.inversion))?;
    let inv2 = st.run("invert", || invert(&r2, &gen, &distance, &cfg.inversion))?;
    st.keep("invert", |d| {
        inv1.style.save(d.join("identity_style.ntws"))?;
        write_trace_csv(&inv1.trace, d.join("identity_trace.csv"))?;
        inv2.style.save(d.join("expression_style.ntws"))?;
        write_trace_csv(&inv2.trace, d.join("expression_trace.csv"))
    })?;

    let fused = st.run("fuse", || {
        fuse_stage(&cfg.fusion, &gen, &distance, &inv1.style, &inv2.style, &r1, &r2)
    })?;
    st.keep("fuse", |d| {
        fused.style.save(d.join("fused_style.ntws"))?;
        if let Some(s) = &fused.search {
            fusion::write_score_table(&s.table, d.join("fusion_scores.csv"))?;
        }
        Ok(())
    })?;

    let generated = st.run("generate", || generate_stage(&gen, &fused.style))?;
    st.keep("generate", |d| save_image(&generated, d.join("generated.png")))?;

    let out = st.run("composite", || {
        composite(&i1, &lm1, &generated, &crop, cfg.feather_sigma, cfg.stage_resolution)
    })?;
    st.keep("composite", |d| {
        save_image(&quantize(&out.warped), d.join("warped.png"))?;
        save_image(&out.mask.to_image(), d.join("mask.png"))?;
        save_image(&out.composite, d.join("composite.png"))
    })?;
    st.run("write", || {
        if let Some(parent) = job.output.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        save_image(&out.composite, &job.output)
    })?;

    Ok(TransferOutput {
        composite: out.composite,
        rectified: [r1, r2],
        inversions: [inv1, inv2],
        fused,
        generated,
        warped: out.warped,
        mask: out.mask,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_text_round_trip() {
        let mut cfg = PipelineConfig::default();
        cfg.apply_text(
            "# comment\niterations = 12\nlearning_rate=2.5\nfusion = search\nsearch_lambda = 0.5\nfeather_sigma = 1.5 # trailing\n",
        )
        .unwrap();
        assert_eq!(cfg.inversion.iterations, 12);
        assert_eq!(
            cfg.fusion,
            FusionMode::Search {
                lengths: vec![1, 2, 3],
                lambda: 0.5
            }
        );
        assert_eq!(PipelineConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn unknown_key_is_rejected() {
        assert!(matches!(
            PipelineConfig::parse("colour = red"),
            Err(Error::Format { .. })
        ));
        assert!(PipelineConfig::parse("no equals sign").is_err());
    }

    #[test]
    fn explicit_layers_parse() {
        let cfg = PipelineConfig::parse("fusion = 2,3").unwrap();
        assert_eq!(cfg.fusion, FusionMode::Layers(vec![2, 3]));
    }

    #[test]
    fn missing_landmarks_name_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("a.png");
        save_image(&ImageTensor::full([3, 8, 8], 0.5), &img).unwrap();
        let missing = dir.path().join("a.json");
        let out = dir.path().join("out.png");
        let job = TransferJob::new(&img, &missing, &img, &missing, &out);
        match run_transfer(&job, &PipelineConfig::default()) {
            Err(Error::Stage { stage, source, .. }) => {
                assert_eq!(stage, "load");
                assert!(source.to_string().contains("a.json"));
            }
            other => panic!("unexpected {:?}", other.err()),
        }
        assert!(!out.exists());
    }
}
