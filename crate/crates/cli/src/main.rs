//! `stylefuse` command-line tool.
//!
//! Exit codes: 0 on success, 1 when a stage fails (the stage is named on
//! stderr), 2 on usage errors.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgGroup, Args, Parser, Subcommand};
use stylefuse::fixture::{self, FixtureSpec};
use stylefuse::fusion::{self, FusionMask};
use stylefuse::geometry::LandmarkSet;
use stylefuse::imageio::{load_image, save_image};
use stylefuse::inversion::{calibrate_learning_rate, write_trace_csv};
use stylefuse::metrics::MetricReport;
use stylefuse::pipeline::{
    composite, fuse_stage, generate_stage, rectify_stage, run_transfer, FusionMode,
    PipelineConfig, TransferJob,
};
use stylefuse::{invert, Error, StyleVector, Tensor};

#[derive(Parser)]
#[command(name = "stylefuse", version, about = "Expression transfer through style-vector fusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every subcommand. Flags override the config file.
#[derive(Args, Clone, Debug)]
struct Common {
    /// key = value configuration file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra configuration entries, applied after the file
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    generator_seed: Option<u64>,
    /// NTWS weight file for the generator
    #[arg(long)]
    weights: Option<PathBuf>,
    /// l1, l2 or feature
    #[arg(long)]
    distance: Option<String>,
    /// gd or adam
    #[arg(long)]
    optimizer: Option<String>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    iterations: Option<usize>,
}

impl Common {
    fn pipeline(&self) -> Result<PipelineConfig, Error> {
        let mut cfg = match &self.config {
            Some(p) => PipelineConfig::load(p)?,
            None => PipelineConfig::default(),
        };
        for kv in &self.set {
            cfg.apply_text(kv)?;
        }
        let overrides = [
            ("generator_seed", self.generator_seed.map(|v| v.to_string())),
            ("weights", self.weights.as_ref().map(|p| p.display().to_string())),
            ("distance", self.distance.clone()),
            ("optimizer", self.optimizer.clone()),
            ("learning_rate", self.learning_rate.map(|v| v.to_string())),
            ("iterations", self.iterations.map(|v| v.to_string())),
        ];
        for (k, v) in overrides {
            if let Some(v) = v {
                cfg.set(k, &v)?;
            }
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Render g(s) for a seeded or stored style
    #[command(group(ArgGroup::new("source").required(true).args(["seed", "style"])))]
    Generate {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        style: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Also write the style that was rendered
        #[arg(long)]
        out_style: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Recover a style vector for an image
    Invert {
        #[arg(long)]
        image: PathBuf,
        /// Rectify with these landmarks first; without them the image must
        /// already be a generator-sized crop
        #[arg(long)]
        landmarks: Option<PathBuf>,
        #[arg(long)]
        out_style: PathBuf,
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Comma-separated iterations whose renderings are saved
        #[arg(long, value_delimiter = ',', requires = "snapshot_dir")]
        snapshots: Vec<usize>,
        #[arg(long)]
        snapshot_dir: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Splice expression layers of style2 into style1
    #[command(group(ArgGroup::new("mode").required(true).args(["mask", "search"])))]
    Fuse {
        #[arg(long)]
        style1: PathBuf,
        #[arg(long)]
        style2: PathBuf,
        /// Comma-separated layers taken from style2
        #[arg(long)]
        mask: Option<String>,
        /// Search contiguous blocks against --image1 and --image2
        #[arg(long, requires_all = ["image1", "image2"])]
        search: bool,
        #[arg(long)]
        image1: Option<PathBuf>,
        #[arg(long)]
        image2: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        lengths: Vec<usize>,
        #[arg(long, default_value_t = 1.0)]
        lambda: f64,
        /// Score table CSV of the search
        #[arg(long)]
        scores: Option<PathBuf>,
        #[arg(long)]
        out_style: PathBuf,
        /// Also render the fused style
        #[arg(long)]
        out_image: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Rotate, crop and resample a face to the generator resolution
    Rectify {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        landmarks: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        out_landmarks: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Warp a rendering onto the identity image and blend inside the hull
    Composite {
        #[arg(long)]
        identity: PathBuf,
        #[arg(long)]
        landmarks: PathBuf,
        #[arg(long)]
        generated: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        feather_sigma: Option<f64>,
        #[arg(long)]
        mask_out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Full expression transfer
    Transfer {
        #[arg(long)]
        identity: PathBuf,
        #[arg(long)]
        identity_landmarks: PathBuf,
        #[arg(long)]
        expression: PathBuf,
        #[arg(long)]
        expression_landmarks: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Directory for every intermediate artifact
        #[arg(long)]
        keep_stages: Option<PathBuf>,
        #[arg(long, conflicts_with = "mask")]
        search: bool,
        /// Comma-separated expression layers instead of the fixed pair
        #[arg(long)]
        mask: Option<String>,
        #[arg(long)]
        feather_sigma: Option<f64>,
        /// Resample the rendering to this size before warping it back
        #[arg(long)]
        stage_resolution: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Grid of renderings over block lengths and start layers
    Sweep {
        #[arg(long)]
        style1: PathBuf,
        #[arg(long)]
        style2: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        lengths: Vec<usize>,
        /// Start layers; -1 means the last `i` layers
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_value = "0,2,4,-1")]
        starts: Vec<isize>,
        #[command(flatten)]
        common: Common,
    },
    /// ℓ1, ℓ2 and SSIM between image pairs
    Metrics {
        #[arg(long, num_args = 1.., required = true)]
        a: Vec<PathBuf>,
        #[arg(long, num_args = 1.., required = true)]
        b: Vec<PathBuf>,
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Pick a learning rate on self-rendered targets
    Calibrate {
        #[arg(long, value_delimiter = ',', default_value = "10,20,30,40")]
        rates: Vec<f64>,
        #[arg(long, default_value_t = 4)]
        probes: u64,
        #[command(flatten)]
        common: Common,
    },
    /// Write a synthetic identity/expression pair with landmarks
    Fixture {
        #[arg(long)]
        out_dir: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

fn io<E: std::fmt::Display>(path: &Path) -> impl FnOnce(E) -> Error + '_ {
    move |e| Error::Io {
        path: path.to_path_buf(),
        reason: e.to_string(),
    }
}

fn mosaic(grid: &[Vec<Tensor>]) -> Result<Tensor, Error> {
    let (c, h, w) = grid[0][0].dims3()?;
    let (rows, cols) = (grid.len(), grid[0].len());
    let (hh, ww) = (rows * h, cols * w);
    Tensor::new(
        [c, hh, ww],
        (0..c * hh * ww)
            .map(|i| {
                let (ch, y, x) = (i / (hh * ww), (i / ww) % hh, i % ww);
                grid[y / h][x / w].data()[ch * h * w + (y % h) * w + x % w]
            })
            .collect(),
    )
}

fn run(command: Command) -> Result<(), Error> {
    match command {
        Command::Generate {
            seed,
            style,
            out,
            out_style,
            common,
        } => {
            let cfg = common.pipeline()?;
            let gen = cfg.load_generator()?;
            let s = match (seed, style) {
                (_, Some(p)) => StyleVector::load(p)?,
                (Some(seed), None) => {
                    StyleVector::random(cfg.generator.layers, cfg.generator.width, seed)
                }
                (None, None) => unreachable!("clap requires a source"),
            };
            save_image(&generate_stage(&gen, &s)?, &out)?;
            if let Some(p) = out_style {
                s.save(p)?;
            }
        }
        Command::Invert {
            image,
            landmarks,
            out_style,
            trace,
            snapshots,
            snapshot_dir,
            common,
        } => {
            let mut cfg = common.pipeline()?;
            cfg.inversion.snapshot_iters = snapshots;
            let gen = cfg.load_generator()?;
            let mut target = load_image(&image)?;
            if let Some(lm) = landmarks {
                target = rectify_stage(&target, &LandmarkSet::load(lm)?, &cfg.crop())?.0;
            }
            let res = invert(&target, &gen, &cfg.build_distance()?, &cfg.inversion)?;
            res.style.save(&out_style)?;
            if let Some(t) = trace {
                write_trace_csv(&res.trace, t)?;
            }
            if let Some(dir) = snapshot_dir {
                fs::create_dir_all(&dir).map_err(io(&dir))?;
                for (it, img) in &res.snapshots {
                    save_image(img, dir.join(format!("iter_{it:05}.png")))?;
                }
            }
            let (best_it, best) = res.best();
            eprintln!(
                "loss {:.6e} -> {best:.6e} (best at iteration {best_it})",
                res.initial_loss()
            );
        }
        Command::Fuse {
            style1,
            style2,
            mask,
            search,
            image1,
            image2,
            lengths,
            lambda,
            scores,
            out_style,
            out_image,
            common,
        } => {
            let cfg = common.pipeline()?;
            let gen = cfg.load_generator()?;
            let s1 = StyleVector::load(&style1)?;
            let s2 = StyleVector::load(&style2)?;
            let (i1, i2, mode) = if search {
                let i1 = load_image(image1.expect("clap requires image1"))?;
                let i2 = load_image(image2.expect("clap requires image2"))?;
                (i1, i2, FusionMode::Search { lengths, lambda })
            } else {
                let m = FusionMask::parse(mask.as_deref().unwrap_or(""), s1.layers())?;
                let empty = Tensor::zeros([3, 1, 1]);
                (empty.clone(), empty, FusionMode::Layers(m.layers().collect()))
            };
            let out = fuse_stage(&mode, &gen, &cfg.build_distance()?, &s1, &s2, &i1, &i2)?;
            out.style.save(&out_style)?;
            if let (Some(p), Some(s)) = (scores, &out.search) {
                fusion::write_score_table(&s.table, p)?;
            }
            if let Some(p) = out_image {
                save_image(&generate_stage(&gen, &out.style)?, p)?;
            }
            eprintln!(
                "expression layers: {:?}",
                out.mask.layers().collect::<Vec<_>>()
            );
        }
        Command::Rectify {
            image,
            landmarks,
            out,
            out_landmarks,
            common,
        } => {
            let cfg = common.pipeline()?;
            let (img, lm, _) =
                rectify_stage(&load_image(&image)?, &LandmarkSet::load(&landmarks)?, &cfg.crop())?;
            save_image(&img, &out)?;
            if let Some(p) = out_landmarks {
                lm.save(p)?;
            }
        }
        Command::Composite {
            identity,
            landmarks,
            generated,
            out,
            feather_sigma,
            mask_out,
            common,
        } => {
            let cfg = common.pipeline()?;
            let res = composite(
                &load_image(&identity)?,
                &LandmarkSet::load(&landmarks)?,
                &load_image(&generated)?,
                &cfg.crop(),
                feather_sigma.or(cfg.feather_sigma),
                cfg.stage_resolution,
            )?;
            save_image(&res.composite, &out)?;
            if let Some(p) = mask_out {
                save_image(&res.mask.to_image(), p)?;
            }
        }
        Command::Transfer {
            identity,
            identity_landmarks,
            expression,
            expression_landmarks,
            out,
            keep_stages,
            search,
            mask,
            feather_sigma,
            stage_resolution,
            common,
        } => {
            let mut cfg = common.pipeline()?;
            if search {
                cfg.set("fusion", "search")?;
            }
            if let Some(m) = mask {
                cfg.set("fusion", &m)?;
            }
            cfg.feather_sigma = feather_sigma.or(cfg.feather_sigma);
            cfg.stage_resolution = stage_resolution.or(cfg.stage_resolution);
            cfg.keep_stages = keep_stages.or(cfg.keep_stages);
            let job = TransferJob::new(
                identity,
                identity_landmarks,
                expression,
                expression_landmarks,
                out,
            );
            let res = run_transfer(&job, &cfg)?;
            eprintln!(
                "expression layers {:?}; composite written to {}",
                res.fused.mask.layers().collect::<Vec<_>>(),
                job.output.display()
            );
        }
        Command::Sweep {
            style1,
            style2,
            out_dir,
            lengths,
            starts,
            common,
        } => {
            let cfg = common.pipeline()?;
            let gen = cfg.load_generator()?;
            let grid = fusion::sweep(
                &StyleVector::load(&style1)?,
                &StyleVector::load(&style2)?,
                &gen,
                &lengths,
                &starts,
            )?;
            fs::create_dir_all(&out_dir).map_err(io(&out_dir))?;
            for (row, &i) in grid.iter().zip(&lengths) {
                for (img, &j) in row.iter().zip(&starts) {
                    save_image(img, out_dir.join(format!("cell_i{i}_j{j}.png")))?;
                }
            }
            save_image(&mosaic(&grid)?, out_dir.join("grid.png"))?;
        }
        Command::Metrics { a, b, json } => {
            if a.len() != b.len() {
                return Err(Error::Contract(format!(
                    "{} images after --a but {} after --b",
                    a.len(),
                    b.len()
                )));
            }
            let images = a
                .iter()
                .zip(&b)
                .map(|(x, y)| Ok((load_image(x)?, load_image(y)?)))
                .collect::<Result<Vec<_>, Error>>()?;
            let report = MetricReport::evaluate(images.iter().map(|(x, y)| (x, y)))?;
            print!("{}", report.to_table());
            if let Some(p) = json {
                fs::write(&p, report.to_json()).map_err(io(&p))?;
            }
        }
        Command::Calibrate {
            rates,
            probes,
            common,
        } => {
            let cfg = common.pipeline()?;
            let gen = cfg.load_generator()?;
            let seeds: Vec<u64> = (0..probes).collect();
            let (rows, best) = calibrate_learning_rate(
                &gen,
                &cfg.build_distance()?,
                &rates,
                &seeds,
                cfg.inversion.iterations,
                cfg.inversion.optimizer,
            )?;
            println!("learning_rate,median_ratio,diverged");
            for r in rows {
                println!("{},{:e},{}", r.learning_rate, r.median_ratio, r.diverged);
            }
            println!("# best {best}");
        }
        Command::Fixture { out_dir, common } => {
            let cfg = common.pipeline()?;
            let gen = cfg.load_generator()?;
            let spec = FixtureSpec {
                generator_seed: cfg.generator_seed,
                ..FixtureSpec::default()
            };
            fixture::write_pair(&fixture::render_pair(&gen, &spec)?, &out_dir)?;
        }
    }
    Ok(())
}

fn stage_name(command: &Command) -> &'static str {
    match command {
        Command::Generate { .. } => "generate",
        Command::Invert { .. } => "invert",
        Command::Fuse { .. } => "fuse",
        Command::Rectify { .. } => "rectify",
        Command::Composite { .. } => "composite",
        Command::Transfer { .. } => "transfer",
        Command::Sweep { .. } => "sweep",
        Command::Metrics { .. } => "metrics",
        Command::Calibrate { .. } => "calibrate",
        Command::Fixture { .. } => "fixture",
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let stage = stage_name(&cli.command);
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ Error::Stage { .. }) => {
            eprintln!("stylefuse: {e}");
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("stylefuse: stage {stage} failed: {e}");
            ExitCode::FAILURE
        }
    }
}
