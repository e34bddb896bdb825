//! Synthetic face pairs for end-to-end runs.
//!
//! A "face" is the generator's own rendering of a known style, so the
//! inversion target is exactly realisable. Each rendering is placed onto a
//! larger canvas by a known similarity transform over a smooth background,
//! and a 68-point template is carried through the same transform, so the
//! landmarks agree with the pixels by construction.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::generator::{Generator, ImageTensor, StyleVector};
use crate::geometry::{
    blend, warp_affine, AffineTransform, CropConfig, LandmarkSet, Mask, Point, LANDMARK_COUNT,
};
use crate::imageio::{quantize, save_image};
use crate::tensor::Tensor;

/// 68 points in the `res x res` normalised crop.
///
/// Eye centres sit `res/8` either side of the centre line and the mouth
/// `res/4` below the eye line, which makes [`crate::geometry::rectify_transform`]
/// of the template the identity.
pub fn template_landmarks(res: usize) -> Vec<Point> {
    let u = res as f64;
    let half = (u - 1.0) / 2.0;
    let eye_dx = u / 8.0;
    let eye_to_mouth = u / 4.0;
    let eye_y = half - 0.1 * eye_to_mouth;
    let mouth_y = eye_y + eye_to_mouth;
    let mut pts = Vec::with_capacity(LANDMARK_COUNT);

    // jaw: 17 points on a U from temple to temple
    for i in 0..17 {
        let t = std::f64::consts::PI * i as f64 / 16.0;
        pts.push(Point::new(
            half - 0.4 * u * t.cos(),
            eye_y + 0.42 * u * t.sin(),
        ));
    }
    // brows: 5 points each
    for side in [-1.0, 1.0] {
        for i in 0..5 {
            let t = i as f64 / 4.0;
            let x = half + side * (eye_dx + (t - 0.5) * 0.18 * u * side);
            pts.push(Point::new(x, eye_y - 0.09 * u - 0.02 * u * (1.0 - (2.0 * t - 1.0).powi(2))));
        }
    }
    // nose bridge (4) and base (5)
    for i in 0..4 {
        pts.push(Point::new(half, eye_y + eye_to_mouth * 0.15 * i as f64));
    }
    for i in 0..5 {
        pts.push(Point::new(
            half + (i as f64 - 2.0) * 0.025 * u,
            eye_y + 0.62 * eye_to_mouth,
        ));
    }
    // eyes: 6 points each on an ellipse around the centre
    for side in [-1.0, 1.0] {
        for i in 0..6 {
            let t = std::f64::consts::PI * i as f64 / 3.0;
            pts.push(Point::new(
                half + side * eye_dx - 0.05 * u * t.cos(),
                eye_y - 0.02 * u * t.sin(),
            ));
        }
    }
    // mouth: 12 outer and 8 inner points
    for (n, rx, ry) in [(12usize, 0.11, 0.05), (8, 0.07, 0.02)] {
        for i in 0..n {
            let t = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
            pts.push(Point::new(
                half - rx * u * t.cos(),
                mouth_y + ry * u * t.sin(),
            ));
        }
    }
    debug_assert_eq!(pts.len(), LANDMARK_COUNT);
    pts
}

/// Placement of the crop on the canvas: `p ↦ scale · R(angle) (p − c) + center`
/// with `c` the crop centre.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub angle_deg: f64,
    pub scale: f64,
    pub center: Point,
}

impl Pose {
    pub fn transform(&self, crop_res: usize) -> AffineTransform {
        let half = (crop_res as f64 - 1.0) / 2.0;
        let (s, c) = self.angle_deg.to_radians().sin_cos();
        let (a, b, cc, d) = (self.scale * c, -self.scale * s, self.scale * s, self.scale * c);
        AffineTransform {
            m: [
                [a, b, self.center.x - (a * half + b * half)],
                [cc, d, self.center.y - (cc * half + d * half)],
            ],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FixtureSpec {
    pub generator_seed: u64,
    pub identity_seed: u64,
    pub expression_seed: u64,
    pub canvas: usize,
    pub identity_pose: Pose,
    pub expression_pose: Pose,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        Self {
            generator_seed: 0,
            identity_seed: 1001,
            expression_seed: 2002,
            canvas: 112,
            identity_pose: Pose {
                angle_deg: 8.0,
                scale: 1.15,
                center: Point::new(57.0, 54.0),
            },
            expression_pose: Pose {
                angle_deg: -5.0,
                scale: 1.1,
                center: Point::new(54.0, 57.0),
            },
        }
    }
}

#[derive(Clone, Debug)]
pub struct FixtureImage {
    pub image: ImageTensor,
    pub landmarks: LandmarkSet,
    /// Crop → canvas.
    pub transform: AffineTransform,
    pub style: StyleVector,
}

#[derive(Clone, Debug)]
pub struct FixturePair {
    pub identity: FixtureImage,
    pub expression: FixtureImage,
}

/// Smooth three-channel backdrop.
pub fn background(size: usize) -> ImageTensor {
    let n = size as f64;
    Tensor::from_fn([3, size, size], |i| {
        let c = i / (size * size);
        let (y, x) = ((i / size) % size, i % size);
        let (u, v) = (x as f64 / n, y as f64 / n);
        match c {
            0 => 0.35 + 0.2 * (3.0 * u + 1.0).sin() * v,
            1 => 0.45 + 0.15 * (2.5 * v).cos(),
            _ => 0.55 + 0.2 * (u - v),
        }
    })
}

/// Places `crop` on the canvas with `pose` and returns the quantised image.
pub fn embed(crop: &ImageTensor, pose: &Pose, canvas: usize) -> Result<ImageTensor> {
    let (_, res, _) = crop.dims3()?;
    let t = pose.transform(res);
    let warped = warp_affine(crop, &t, canvas, canvas)?;
    let inv = t.inverse()?;
    let lim = res as f64 - 1.0;
    let inside: Vec<f64> = (0..canvas * canvas)
        .map(|i| {
            let q = inv.apply(Point::new((i % canvas) as f64, (i / canvas) as f64));
            let hit = (0.0..=lim).contains(&q.x) && (0.0..=lim).contains(&q.y);
            f64::from(u8::from(hit))
        })
        .collect();
    let mask = Mask::new(canvas, canvas, inside)?;
    Ok(quantize(&blend(&background(canvas), &warped, &mask)?))
}

fn render_one(gen: &Generator, seed: u64, pose: &Pose, canvas: usize) -> Result<FixtureImage> {
    let cfg = gen.config();
    let style = StyleVector::random(cfg.layers, cfg.width, seed);
    let crop = gen.synthesize(&style)?;
    let res = cfg.output_resolution();
    let transform = pose.transform(res);
    let template = LandmarkSet::new(res, res, template_landmarks(res))?;
    Ok(FixtureImage {
        image: embed(&crop, pose, canvas)?,
        landmarks: template.transformed(&transform, canvas, canvas),
        transform,
        style,
    })
}

pub fn render_pair(gen: &Generator, spec: &FixtureSpec) -> Result<FixturePair> {
    Ok(FixturePair {
        identity: render_one(gen, spec.identity_seed, &spec.identity_pose, spec.canvas)?,
        expression: render_one(gen, spec.expression_seed, &spec.expression_pose, spec.canvas)?,
    })
}

/// Crop settings under which the template rectifies to the identity.
pub fn crop_config(gen: &Generator) -> CropConfig {
    CropConfig::new(gen.config().output_resolution())
}

/// Writes `identity.png`, `identity.json`, `identity_style.ntws` and the
/// `expression` counterparts into `dir`.
pub fn write_pair(pair: &FixturePair, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, f) in [("identity", &pair.identity), ("expression", &pair.expression)] {
        save_image(&f.image, dir.join(format!("{name}.png")))?;
        f.landmarks.save(dir.join(format!("{name}.json")))?;
        f.style.save(dir.join(format!("{name}_style.ntws")))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::GeneratorConfig;
    use crate::geometry::rectify_transform;

    #[test]
    fn template_rectifies_to_identity() {
        for res in [16, 64, 256] {
            let lm = LandmarkSet::new(res, res, template_landmarks(res)).unwrap();
            let t = rectify_transform(&lm, &CropConfig::new(res)).unwrap();
            for (got, want) in t.m.iter().flatten().zip(AffineTransform::IDENTITY.m.iter().flatten()) {
                assert!((got - want).abs() < 1e-9, "{res}: {:?}", t.m);
            }
        }
    }

    #[test]
    fn pose_maps_crop_centre_to_pose_centre() {
        let pose = FixtureSpec::default().identity_pose;
        let p = pose.transform(64).apply(Point::new(31.5, 31.5));
        assert!((p.x - pose.center.x).abs() < 1e-12 && (p.y - pose.center.y).abs() < 1e-12);
    }

    #[test]
    fn embedded_crop_fits_on_canvas() {
        let spec = FixtureSpec::default();
        for pose in [spec.identity_pose, spec.expression_pose] {
            let t = pose.transform(64);
            for c in [(0.0, 0.0), (63.0, 0.0), (0.0, 63.0), (63.0, 63.0)] {
                let p = t.apply(Point::new(c.0, c.1));
                assert!(p.x >= 0.0 && p.y >= 0.0 && p.x <= 111.0 && p.y <= 111.0);
            }
        }
    }

    #[test]
    fn pair_is_deterministic() {
        let gen = Generator::seeded(GeneratorConfig::tiny(4, 8), 3).unwrap();
        let spec = FixtureSpec {
            canvas: 16,
            identity_pose: Pose {
                angle_deg: 3.0,
                scale: 1.0,
                center: Point::new(7.5, 7.5),
            },
            expression_pose: Pose {
                angle_deg: 0.0,
                scale: 1.0,
                center: Point::new(7.5, 7.5),
            },
            ..FixtureSpec::default()
        };
        let a = render_pair(&gen, &spec).unwrap();
        let b = render_pair(&gen, &spec).unwrap();
        assert_eq!(a.identity.image, b.identity.image);
        assert_eq!(a.expression.landmarks, b.expression.landmarks);
    }
}
