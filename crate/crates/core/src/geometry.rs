//! Face normalisation and compositing geometry.
//!
//! Coordinates are in pixels with the origin at the centre of the top-left
//! pixel: pixel `(row, col)` sits at `(x = col, y = row)`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::generator::ImageTensor;
use crate::tensor::Tensor;

pub const LANDMARK_COUNT: usize = 68;
pub const LEFT_EYE: std::ops::Range<usize> = 36..42;
pub const RIGHT_EYE: std::ops::Range<usize> = 42..48;
pub const MOUTH: std::ops::Range<usize> = 48..68;

#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn sub(self, o: Point) -> Point {
        Point::new(self.x - o.x, self.y - o.y)
    }

    pub fn add(self, o: Point) -> Point {
        Point::new(self.x + o.x, self.y + o.y)
    }

    pub fn scale(self, k: f64) -> Point {
        Point::new(self.x * k, self.y * k)
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn centroid(points: &[Point]) -> Point {
        let n = points.len() as f64;
        let (sx, sy) = points.iter().fold((0.0, 0.0), |(a, b), p| (a + p.x, b + p.y));
        Point::new(sx / n, sy / n)
    }
}

impl From<[f64; 2]> for Point {
    fn from([x, y]: [f64; 2]) -> Self {
        Self { x, y }
    }
}

impl From<Point> for [f64; 2] {
    fn from(p: Point) -> Self {
        [p.x, p.y]
    }
}

/// `(b - o) x (c - o)`; positive when `o, b, c` turn counter-clockwise in a
/// y-up frame.
fn cross(o: Point, b: Point, c: Point) -> f64 {
    (b.x - o.x) * (c.y - o.y) - (b.y - o.y) * (c.x - o.x)
}

/// 68-point face landmarks in the usual annotation order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandmarkSet {
    pub width: usize,
    pub height: usize,
    pub points: Vec<Point>,
}

impl LandmarkSet {
    pub fn new(width: usize, height: usize, points: Vec<Point>) -> Result<Self> {
        let lm = Self {
            width,
            height,
            points,
        };
        lm.validate()?;
        Ok(lm)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.points.len() == LANDMARK_COUNT,
            Error::format(
                "landmarks",
                format!("expected {LANDMARK_COUNT} points, got {}", self.points.len())
            )
        );
        ensure!(
            self.points.iter().all(|p| p.x.is_finite() && p.y.is_finite()),
            Error::format("landmarks", "non-finite coordinate")
        );
        Ok(())
    }

    pub fn left_eye(&self) -> Point {
        Point::centroid(&self.points[LEFT_EYE])
    }

    pub fn right_eye(&self) -> Point {
        Point::centroid(&self.points[RIGHT_EYE])
    }

    pub fn mouth(&self) -> Point {
        Point::centroid(&self.points[MOUTH])
    }

    /// Left-eye, right-eye and mouth centroids: the affine anchor triple.
    pub fn anchors(&self) -> [Point; 3] {
        [self.left_eye(), self.right_eye(), self.mouth()]
    }

    pub fn transformed(&self, t: &AffineTransform, width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            points: self.points.iter().map(|&p| t.apply(p)).collect(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let lm: Self =
            serde_json::from_str(text).map_err(|e| Error::format("landmarks", e.to_string()))?;
        lm.validate()?;
        Ok(lm)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("landmarks serialise")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::io(path, e))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }
}

/// `[a b tx; c d ty]`, mapping `(x, y)` to `(a x + b y + tx, c x + d y + ty)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineTransform {
    pub m: [[f64; 3]; 2],
}

impl AffineTransform {
    pub const IDENTITY: Self = Self {
        m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
    };

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self {
            m: [[1.0, 0.0, tx], [0.0, 1.0, ty]],
        }
    }

    /// Rotation by `angle` radians (counter-clockwise on screen, y down)
    /// about `center`.
    pub fn rotation_about(center: Point, angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        // p' = R (p - center) + center with R = [c s; -s c]
        Self {
            m: [
                [c, s, center.x - c * center.x - s * center.y],
                [-s, c, center.y + s * center.x - c * center.y],
            ],
        }
    }

    pub fn apply(&self, p: Point) -> Point {
        let [[a, b, tx], [c, d, ty]] = self.m;
        Point::new(a * p.x + b * p.y + tx, c * p.x + d * p.y + ty)
    }

    pub fn det(&self) -> f64 {
        self.m[0][0] * self.m[1][1] - self.m[0][1] * self.m[1][0]
    }

    pub fn inverse(&self) -> Result<Self> {
        let det = self.det();
        ensure!(
            det != 0.0 && det.is_finite(),
            Error::DegenerateGeometry(format!("affine transform is singular (det {det})"))
        );
        let [[a, b, tx], [c, d, ty]] = self.m;
        let (ia, ib, ic, id) = (d / det, -b / det, -c / det, a / det);
        Ok(Self {
            m: [
                [ia, ib, -(ia * tx + ib * ty)],
                [ic, id, -(ic * tx + id * ty)],
            ],
        })
    }

    /// `self ∘ inner`: applies `inner` first.
    pub fn compose(&self, inner: &Self) -> Self {
        let [[a, b, tx], [c, d, ty]] = self.m;
        let [[e, f, ux], [g, h, uy]] = inner.m;
        Self {
            m: [
                [a * e + b * g, a * f + b * h, a * ux + b * uy + tx],
                [c * e + d * g, c * f + d * h, c * ux + d * uy + ty],
            ],
        }
    }

    /// Rotation component, in radians, of a similarity transform.
    pub fn rotation_angle(&self) -> f64 {
        (-self.m[1][0]).atan2(self.m[0][0])
    }
}

/// Exact affine map sending `src[i]` to `dst[i]`.
pub fn estimate_affine(src: [Point; 3], dst: [Point; 3]) -> Result<AffineTransform> {
    let extent = src
        .iter()
        .flat_map(|p| [p.x.abs(), p.y.abs()])
        .fold(1.0, f64::max);
    let area2 = cross(src[0], src[1], src[2]);
    ensure!(
        area2.abs() > 1e-12 * extent * extent,
        Error::DegenerateGeometry(format!("source points are collinear: {src:?}"))
    );
    // Rows [x y 1 | x' y'] reduced with partial pivoting.
    let mut a: [[f64; 5]; 3] =
        std::array::from_fn(|i| [src[i].x, src[i].y, 1.0, dst[i].x, dst[i].y]);
    for col in 0..3 {
        let pivot = (col..3)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .expect("non-empty");
        a.swap(col, pivot);
        for row in 0..3 {
            if row != col {
                let f = a[row][col] / a[col][col];
                for k in col..5 {
                    a[row][k] -= f * a[col][k];
                }
            }
        }
    }
    let sol = |rhs: usize| -> [f64; 3] { std::array::from_fn(|i| a[i][rhs] / a[i][i]) };
    let (xr, yr) = (sol(3), sol(4));
    Ok(AffineTransform { m: [xr, yr] })
}

/// Bilinear sample at `(x, y)` of channel plane `plane` (`h x w`), clamping
/// to the border.
fn sample_bilinear(plane: &[f64], h: usize, w: usize, x: f64, y: f64) -> f64 {
    let (x0f, y0f) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0f, y - y0f);
    let clamp = |v: f64, n: usize| -> usize { v.clamp(0.0, (n - 1) as f64) as usize };
    let (x0, x1) = (clamp(x0f, w), clamp(x0f + 1.0, w));
    let (y0, y1) = (clamp(y0f, h), clamp(y0f + 1.0, h));
    let p = |yy: usize, xx: usize| plane[yy * w + xx];
    let top = (1.0 - fx) * p(y0, x0) + fx * p(y0, x1);
    let bottom = (1.0 - fx) * p(y1, x0) + fx * p(y1, x1);
    (1.0 - fy) * top + fy * bottom
}

/// Resamples `image` so that output pixel `q` holds `image[t⁻¹(q)]`.
pub fn warp_affine(
    image: &ImageTensor,
    t: &AffineTransform,
    out_height: usize,
    out_width: usize,
) -> Result<ImageTensor> {
    let (c, h, w) = image.dims3()?;
    ensure!(
        out_height > 0 && out_width > 0,
        Error::contract("warp output size must be positive")
    );
    let inv = t.inverse()?;
    let coords: Vec<Point> = (0..out_height * out_width)
        .map(|i| inv.apply(Point::new((i % out_width) as f64, (i / out_width) as f64)))
        .collect();
    let mut out = Vec::with_capacity(c * out_height * out_width);
    for ch in 0..c {
        let plane = &image.data()[ch * h * w..(ch + 1) * h * w];
        out.extend(coords.iter().map(|p| sample_bilinear(plane, h, w, p.x, p.y)));
    }
    Tensor::new([c, out_height, out_width], out)
}

/// Single-channel weights in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl Mask {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        ensure!(
            values.len() == height * width && height > 0 && width > 0,
            Error::dim("mask", format!("{height}x{width} mask with {} values", values.len()))
        );
        Ok(Self {
            height,
            width,
            values: values.into_iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self::new(height, width, vec![value; height * width]).expect("positive size")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    /// As a `[1,H,W]` image.
    pub fn to_image(&self) -> ImageTensor {
        Tensor::new([1, self.height, self.width], self.values.clone()).expect("mask shape")
    }
}

/// Convex hull by monotone chain, counter-clockwise in a y-up frame, without
/// collinear vertices.
pub fn convex_hull(points: &[Point]) -> Vec<Point> {
    let mut pts: Vec<Point> = points.to_vec();
    pts.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut hull: Vec<Point> = Vec::with_capacity(2 * pts.len());
    for pass in 0..2 {
        let floor = hull.len();
        let iter: Box<dyn Iterator<Item = &Point>> = if pass == 0 {
            Box::new(pts.iter())
        } else {
            Box::new(pts.iter().rev())
        };
        for &p in iter {
            while hull.len() >= floor + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}

/// Point-in-hull test for a counter-clockwise hull; boundary counts as inside.
pub fn hull_contains(hull: &[Point], p: Point) -> bool {
    (0..hull.len()).all(|i| cross(hull[i], hull[(i + 1) % hull.len()], p) >= 0.0)
}

/// 1 at pixels inside the convex hull of `points`, 0 elsewhere.
pub fn hull_mask_points(points: &[Point], height: usize, width: usize) -> Result<Mask> {
    let hull = convex_hull(points);
    ensure!(
        hull.len() >= 3,
        Error::DegenerateGeometry("hull needs at least three non-collinear points".into())
    );
    let (lo, hi) = hull.iter().fold(
        (Point::new(f64::INFINITY, f64::INFINITY), Point::new(f64::NEG_INFINITY, f64::NEG_INFINITY)),
        |(lo, hi), p| (Point::new(lo.x.min(p.x), lo.y.min(p.y)), Point::new(hi.x.max(p.x), hi.y.max(p.y))),
    );
    let mut values = vec![0.0; height * width];
    for row in 0..height {
        let y = row as f64;
        if y < lo.y || y > hi.y {
            continue;
        }
        for col in 0..width {
            let x = col as f64;
            if x >= lo.x && x <= hi.x && hull_contains(&hull, Point::new(x, y)) {
                values[row * width + col] = 1.0;
            }
        }
    }
    Mask::new(height, width, values)
}

pub fn hull_mask(lm: &LandmarkSet, height: usize, width: usize) -> Result<Mask> {
    hull_mask_points(&lm.points, height, width)
}

/// Normalised Gaussian taps for offsets `-r..=r`, `r = ceil(3 sigma)`.
pub fn gaussian_taps(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let raw: Vec<f64> = (-r..=r)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Gaussian blur with radius `ceil(3 sigma)`, clamped to `[0, 1]`;
/// `sigma = 0` returns the mask unchanged.
pub fn feather(mask: &Mask, sigma: f64) -> Result<Mask> {
    ensure!(
        sigma >= 0.0 && sigma.is_finite(),
        Error::contract(format!("feather sigma must be non-negative, got {sigma}"))
    );
    if sigma == 0.0 {
        return Ok(mask.clone());
    }
    let taps = gaussian_taps(sigma);
    let horizontal = convolve_1d(&mask.values, mask.height, mask.width, &taps, true);
    let both = convolve_1d(&horizontal, mask.height, mask.width, &taps, false);
    Mask::new(mask.height, mask.width, both)
}

fn convolve_1d(src: &[f64], h: usize, w: usize, taps: &[f64], horizontal: bool) -> Vec<f64> {
    let r = (taps.len() / 2) as isize;
    let mut out = vec![0.0; h * w];
    for row in 0..h {
        for col in 0..w {
            let (pos, len) = if horizontal { (col, w) } else { (row, h) };
            let mut acc = 0.0;
            for (t, &k) in taps.iter().enumerate() {
                let j = (pos as isize + t as isize - r).clamp(0, len as isize - 1) as usize;
                acc += k * if horizontal { src[row * w + j] } else { src[j * w + col] };
            }
            out[row * w + col] = acc;
        }
    }
    out
}

/// Minimum over the `(2r+1) x (2r+1)` window, edges clamped.
pub fn erode(mask: &Mask, radius: usize) -> Mask {
    let min_1d = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let (h, w) = (mask.height, mask.width);
        let r = radius as isize;
        let mut out = vec![0.0; h * w];
        for row in 0..h {
            for col in 0..w {
                let (pos, len) = if horizontal { (col, w) } else { (row, h) };
                out[row * w + col] = (-r..=r)
                    .map(|i| {
                        let j = (pos as isize + i).clamp(0, len as isize - 1) as usize;
                        if horizontal {
                            src[row * w + j]
                        } else {
                            src[j * w + col]
                        }
                    })
                    .fold(f64::INFINITY, f64::min);
            }
        }
        out
    };
    let values = min_1d(&min_1d(&mask.values, true), false);
    Mask::new(mask.height, mask.width, values).expect("same size")
}

/// `mask · warped + (1 − mask) · target`, per pixel and channel.
pub fn blend(target: &ImageTensor, warped: &ImageTensor, mask: &Mask) -> Result<ImageTensor> {
    let (c, h, w) = target.dims3()?;
    ensure!(
        warped.shape() == target.shape() && mask.height == h && mask.width == w,
        Error::contract(format!(
            "blend of target {:?}, warped {:?} and {}x{} mask",
            target.shape(),
            warped.shape(),
            mask.height,
            mask.width
        ))
    );
    let plane = h * w;
    Ok(Tensor::from_fn([c, h, w], |i| {
        let m = mask.values[i % plane];
        m * warped.data()[i] + (1.0 - m) * target.data()[i]
    }))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropConfig {
    pub eye_to_eye_scale: f64,
    pub eye_to_mouth_scale: f64,
    pub output_resolution: usize,
}

impl CropConfig {
    pub fn new(output_resolution: usize) -> Self {
        Self {
            eye_to_eye_scale: 4.0,
            eye_to_mouth_scale: 3.6,
            output_resolution,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.eye_to_eye_scale > 1.0 && self.eye_to_mouth_scale > 1.0,
            Error::contract("crop scales must exceed 1")
        );
        ensure!(
            self.output_resolution > 0,
            Error::contract("crop output resolution must be positive")
        );
        Ok(())
    }
}

/// Fraction of the eye-to-mouth vector by which the crop centre sits below
/// the eye midpoint.
pub const CROP_CENTER_OFFSET: f64 = 0.1;

/// Similarity transform from image coordinates to the normalised crop.
///
/// The eye axis becomes horizontal. The crop is a square of side
/// `max(eye_to_eye_scale · |eR − eL|, eye_to_mouth_scale · |mouth − eyeMid|)`
/// centred at `eyeMid + 0.1 · (mouth − eyeMid)`, scaled onto
/// `output_resolution` pixels.
pub fn rectify_transform(lm: &LandmarkSet, cfg: &CropConfig) -> Result<AffineTransform> {
    cfg.validate()?;
    let (el, er, mouth) = (lm.left_eye(), lm.right_eye(), lm.mouth());
    let eye_vec = er.sub(el);
    let eye_dist = eye_vec.norm();
    ensure!(
        eye_dist > 1e-9,
        Error::DegenerateGeometry("eye centres coincide".into())
    );
    let angle = eye_vec.y.atan2(eye_vec.x);
    let eye_mid = el.add(er).scale(0.5);
    let to_mouth = mouth.sub(eye_mid);
    let side = (cfg.eye_to_eye_scale * eye_dist).max(cfg.eye_to_mouth_scale * to_mouth.norm());
    let center = eye_mid.add(to_mouth.scale(CROP_CENTER_OFFSET));

    let k = cfg.output_resolution as f64 / side;
    let (s, c) = angle.sin_cos();
    let half = (cfg.output_resolution as f64 - 1.0) / 2.0;
    // p' = k R(-angle) (p - center) + half
    let (a, b, cc, d) = (k * c, k * s, -k * s, k * c);
    Ok(AffineTransform {
        m: [
            [a, b, half - (a * center.x + b * center.y)],
            [cc, d, half - (cc * center.x + d * center.y)],
        ],
    })
}

/// Rotates, crops and resamples a face to the normalised square.
pub fn rectify(
    image: &ImageTensor,
    lm: &LandmarkSet,
    cfg: &CropConfig,
) -> Result<(ImageTensor, AffineTransform)> {
    let t = rectify_transform(lm, cfg)?;
    let n = cfg.output_resolution;
    Ok((warp_affine(image, &t, n, n)?, t))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tri() -> [Point; 3] {
        [Point::new(1.0, 2.0), Point::new(7.5, 3.0), Point::new(3.0, 9.0)]
    }

    #[test]
    fn affine_identity_and_translation() {
        let t = estimate_affine(tri(), tri()).unwrap();
        for (got, want) in t.m.iter().flatten().zip(AffineTransform::IDENTITY.m.iter().flatten()) {
            assert!((got - want).abs() < 1e-12);
        }
        let shifted = tri().map(|p| p.add(Point::new(5.0, -2.0)));
        let t = estimate_affine(tri(), shifted).unwrap();
        assert!((t.m[0][2] - 5.0).abs() < 1e-12 && (t.m[1][2] + 2.0).abs() < 1e-12);
        assert!((t.m[0][0] - 1.0).abs() < 1e-12 && t.m[0][1].abs() < 1e-12);
    }

    #[test]
    fn collinear_triple_is_degenerate() {
        let line = [Point::new(0.0, 0.0), Point::new(1.0, 1.0), Point::new(3.0, 3.0)];
        assert!(matches!(
            estimate_affine(line, tri()),
            Err(Error::DegenerateGeometry(_))
        ));
    }

    #[test]
    fn inverse_composes_to_identity() {
        let t = AffineTransform {
            m: [[1.2, 0.3, -4.0], [-0.2, 0.9, 7.0]],
        };
        let id = t.compose(&t.inverse().unwrap());
        for (got, want) in id.m.iter().flatten().zip(AffineTransform::IDENTITY.m.iter().flatten()) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_warp_is_bit_exact() {
        let img = Tensor::from_fn([3, 5, 7], |i| ((i * 37) % 101) as f64 / 100.0);
        assert_eq!(warp_affine(&img, &AffineTransform::IDENTITY, 5, 7).unwrap(), img);
    }

    #[test]
    fn integer_translation_shifts_and_clamps() {
        let img = Tensor::from_fn([1, 4, 4], |i| i as f64);
        let out = warp_affine(&img, &AffineTransform::translation(1.0, 0.0), 4, 4).unwrap();
        for row in 0..4 {
            let r = &out.data()[row * 4..row * 4 + 4];
            let s = &img.data()[row * 4..row * 4 + 4];
            assert_eq!(r, [s[0], s[0], s[1], s[2]]);
        }
    }

    #[test]
    fn square_hull_fills_rectangle() {
        let pts = [
            Point::new(2.0, 1.0),
            Point::new(6.0, 1.0),
            Point::new(6.0, 4.0),
            Point::new(2.0, 4.0),
        ];
        let m = hull_mask_points(&pts, 8, 9).unwrap();
        for row in 0..8 {
            for col in 0..9 {
                let inside = (2..=6).contains(&col) && (1..=4).contains(&row);
                assert_eq!(m.get(row, col), inside as u8 as f64, "({row},{col})");
            }
        }
        let mut more = pts.to_vec();
        more.extend([Point::new(3.0, 2.0), Point::new(5.5, 3.5)]);
        assert_eq!(hull_mask_points(&more, 8, 9).unwrap(), m);
    }

    #[test]
    fn collinear_points_have_no_hull() {
        let pts: Vec<Point> = (0..68).map(|i| Point::new(i as f64, 2.0 * i as f64)).collect();
        assert!(matches!(
            hull_mask_points(&pts, 10, 10),
            Err(Error::DegenerateGeometry(_))
        ));
    }

    #[test]
    fn feather_edge_cases() {
        let m = hull_mask_points(&tri(), 12, 12).unwrap();
        assert_eq!(feather(&m, 0.0).unwrap(), m);
        let ones = Mask::filled(6, 5, 1.0);
        let f = feather(&ones, 1.7).unwrap();
        assert!(f.values().iter().all(|&v| (v - 1.0).abs() < 1e-12));
        assert!(feather(&m, -1.0).is_err());
    }

    #[test]
    fn gaussian_radius() {
        assert_eq!(gaussian_taps(2.0).len(), 13);
        assert_eq!(gaussian_taps(0.5).len(), 5);
        assert!((gaussian_taps(1.3).iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn blend_extremes() {
        let t = Tensor::from_fn([3, 4, 4], |i| (i as f64 * 0.1).sin().abs());
        let w = Tensor::from_fn([3, 4, 4], |i| (i as f64 * 0.3).cos().abs());
        assert_eq!(blend(&t, &w, &Mask::filled(4, 4, 0.0)).unwrap(), t);
        assert_eq!(blend(&t, &w, &Mask::filled(4, 4, 1.0)).unwrap(), w);
        let half = blend(&Tensor::zeros([1, 2, 2]), &Tensor::full([1, 2, 2], 1.0), &Mask::filled(2, 2, 0.5)).unwrap();
        assert!(half.data().iter().all(|&v| v == 0.5));
        assert!(blend(&t, &w, &Mask::filled(4, 5, 0.5)).is_err());
    }

    #[test]
    fn erosion_shrinks_support() {
        let m = hull_mask_points(
            &[Point::new(2.0, 2.0), Point::new(7.0, 2.0), Point::new(7.0, 7.0), Point::new(2.0, 7.0)],
            10,
            10,
        )
        .unwrap();
        let e = erode(&m, 1);
        assert_eq!(e.get(3, 3), 1.0);
        assert_eq!(e.get(2, 2), 0.0);
        assert_eq!(e.values().iter().sum::<f64>(), 16.0);
    }

    #[test]
    fn landmark_json_shape() {
        let pts: Vec<Point> = (0..68).map(|i| Point::new(i as f64, 0.5)).collect();
        let lm = LandmarkSet::new(64, 48, pts).unwrap();
        let json = lm.to_json();
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(v["width"], 64);
        assert_eq!(v["points"][3], serde_json::json!([3.0, 0.5]));
        assert_eq!(LandmarkSet::from_json(&json).unwrap(), lm);
        assert!(LandmarkSet::from_json(r#"{"width":1,"height":1,"points":[[0,0]]}"#).is_err());
    }

    #[test]
    fn coincident_eyes_are_degenerate() {
        let lm = LandmarkSet::new(10, 10, vec![Point::new(3.0, 3.0); 68]).unwrap();
        assert!(matches!(
            rectify_transform(&lm, &CropConfig::new(8)),
            Err(Error::DegenerateGeometry(_))
        ));
    }
}
