use proptest::prelude::*;
use stylefuse::fusion::{fuse, FusionMask};
use stylefuse::geometry::{blend, estimate_affine, AffineTransform, Mask, Point};
use stylefuse::inversion::best_so_far_envelope;
use stylefuse::metrics::ssim;
use stylefuse::{Distance, DistanceSpec, FeatureExtractor, StyleVector, Tensor, WeightStore};

const L: usize = 6;
const W: usize = 4;

fn style() -> impl Strategy<Value = StyleVector> {
    prop::collection::vec(-3.0f64..3.0, L * W)
        .prop_map(|v| StyleVector::from_tensor(Tensor::new([L, W], v).unwrap()).unwrap())
}

fn mask() -> impl Strategy<Value = FusionMask> {
    prop::collection::vec(any::<bool>(), L).prop_map(|bits| {
        FusionMask::new((0..L).filter(|&i| bits[i]), L).unwrap()
    })
}

fn image(c: usize, h: usize, w: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(0.0f64..1.0, c * h * w).prop_map(move |v| Tensor::new([c, h, w], v).unwrap())
}

fn point() -> impl Strategy<Value = Point> {
    (-50.0f64..50.0, -50.0f64..50.0).prop_map(|(x, y)| Point::new(x, y))
}

fn bits(s: &StyleVector) -> Vec<u64> {
    s.tensor().data().iter().map(|v| v.to_bits()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fuse_rows_come_from_one_side(s1 in style(), s2 in style(), m in mask()) {
        let f = fuse(&s1, &s2, &m).unwrap();
        for l in 0..L {
            let src = if m.contains(l) { &s2 } else { &s1 };
            prop_assert_eq!(f.row(l), src.row(l));
        }
    }

    #[test]
    fn fuse_involution_and_idempotence(s1 in style(), s2 in style(), m in mask()) {
        let f = fuse(&s1, &s2, &m).unwrap();
        let back = fuse(&f, &s1, &m).unwrap();
        prop_assert_eq!(bits(&back), bits(&s1));
        let twice = fuse(&f, &s2, &m).unwrap();
        prop_assert_eq!(bits(&twice), bits(&f));
        let swapped = fuse(&s2, &s1, &m.complement()).unwrap();
        prop_assert_eq!(bits(&swapped), bits(&f));
    }

    #[test]
    fn empty_and_full_masks(s1 in style(), s2 in style()) {
        prop_assert_eq!(bits(&fuse(&s1, &s2, &FusionMask::empty(L)).unwrap()), bits(&s1));
        prop_assert_eq!(bits(&fuse(&s1, &s2, &FusionMask::full(L)).unwrap()), bits(&s2));
    }

    #[test]
    fn affine_hits_its_defining_points(src in [point(), point(), point()], dst in [point(), point(), point()]) {
        let area = (src[1].x - src[0].x) * (src[2].y - src[0].y)
            - (src[2].x - src[0].x) * (src[1].y - src[0].y);
        prop_assume!(area.abs() > 1.0);
        let t = estimate_affine(src, dst).unwrap();
        for (p, q) in src.iter().zip(&dst) {
            let r = t.apply(*p);
            prop_assert!((r.x - q.x).abs() < 1e-12 * (1.0 + q.x.abs()) * 100.0);
            prop_assert!((r.y - q.y).abs() < 1e-12 * (1.0 + q.y.abs()) * 100.0);
        }
        let id = estimate_affine(src, src).unwrap();
        for (a, b) in id.m.iter().flatten().zip(AffineTransform::IDENTITY.m.iter().flatten()) {
            prop_assert!((a - b).abs() < 1e-12 * 100.0);
        }
    }

    #[test]
    fn blend_is_convex(a in image(3, 5, 4), b in image(3, 5, 4), m in prop::collection::vec(0.0f64..=1.0, 20)) {
        let mask = Mask::new(5, 4, m.clone()).unwrap();
        let out = blend(&a, &b, &mask).unwrap();
        for (i, v) in out.data().iter().enumerate() {
            let (x, y) = (a.data()[i], b.data()[i]);
            prop_assert!(*v >= x.min(y) - 1e-15 && *v <= x.max(y) + 1e-15);
            let alpha = m[i % 20];
            if alpha == 0.0 { prop_assert_eq!(*v, x); }
            if alpha == 1.0 { prop_assert_eq!(*v, y); }
        }
    }

    #[test]
    fn pixel_distances_are_metrics(a in image(3, 8, 8), b in image(3, 8, 8)) {
        for d in [Distance::l1(), Distance::l2()] {
            let ab = d.eval(&a, &b).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert_eq!(ab, d.eval(&b, &a).unwrap());
            prop_assert_eq!(d.eval(&a, &a).unwrap(), 0.0);
            if a != b { prop_assert!(ab > 0.0); }
        }
    }

    #[test]
    fn ssim_is_symmetric_and_bounded(a in image(1, 12, 13), b in image(1, 12, 13)) {
        let ab = ssim(&a, &b).unwrap();
        prop_assert!((ab - ssim(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert!(ab <= 1.0 + 1e-12 && ab >= -1.0 - 1e-12);
        prop_assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn envelope_never_increases(losses in prop::collection::vec(0.0f64..10.0, 1..50)) {
        let trace: Vec<(usize, f64)> = losses.iter().copied().enumerate().collect();
        let env = best_so_far_envelope(&trace);
        prop_assert_eq!(env.len(), losses.len());
        prop_assert!(env.windows(2).all(|w| w[1] <= w[0]));
        for (i, e) in env.iter().enumerate() {
            prop_assert!(*e <= losses[i]);
            prop_assert!(losses[..=i].contains(e));
        }
    }

    #[test]
    fn weight_store_round_trip(
        entries in prop::collection::vec(
            (prop::collection::vec(1usize..4, 0..4), any::<u64>()),
            1..6,
        )
    ) {
        let mut ws = WeightStore::new();
        for (i, (shape, seed)) in entries.iter().enumerate() {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n).map(|k| f64::from_bits(seed.wrapping_add(k as u64) >> 2)).collect();
            ws.insert(format!("t{i}.w"), Tensor::new(shape.clone(), data).unwrap());
        }
        let back = WeightStore::from_bytes(&ws.to_bytes().unwrap()).unwrap();
        prop_assert_eq!(back.len(), ws.len());
        for ((na, a), (nb, b)) in ws.iter().zip(back.iter()) {
            prop_assert_eq!(na, nb);
            prop_assert_eq!(a.shape(), b.shape());
            let ab: Vec<u64> = a.data().iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u64> = b.data().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(ab, bb);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn feature_distance_is_a_pseudometric(a in image(3, 16, 16), b in image(3, 16, 16)) {
        let d = Distance::new(DistanceSpec::feature(None), Some(FeatureExtractor::build(5, 2).unwrap())).unwrap();
        let ab = d.eval(&a, &b).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - d.eval(&b, &a).unwrap()).abs() < 1e-12 * (1.0 + ab));
        prop_assert_eq!(d.eval(&a, &a).unwrap(), 0.0);
    }
}
