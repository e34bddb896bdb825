mod common;

use common::uniform;
use stylefuse::fusion::{fixed_expression_mask, fuse, search, sweep_start, FusionMask, FusionSearchConfig};
use stylefuse::{Distance, Generator, GeneratorConfig, StyleVector, Tensor};

fn style(seed: u64, l: usize, d: usize) -> StyleVector {
    StyleVector::from_tensor(uniform(seed, &[l, d], -1.0, 1.0)).unwrap()
}

// Rows `start..start+len` from s2, the rest from s1, by direct copying.
fn splice(s1: &StyleVector, s2: &StyleVector, start: usize, len: usize) -> StyleVector {
    let (l, d) = (s1.layers(), s1.width());
    let t = Tensor::from_fn([l, d], |i| {
        let r = i / d;
        if (start..start + len).contains(&r) {
            s2.tensor().data()[i]
        } else {
            s1.tensor().data()[i]
        }
    });
    StyleVector::from_tensor(t).unwrap()
}

fn mse(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64
}

/// Enumerates every contiguous block and returns `(len, start, objective)` of the winner.
fn brute_force(
    gen: &Generator,
    s1: &StyleVector,
    s2: &StyleVector,
    i1: &Tensor,
    i2: &Tensor,
    lengths: &[usize],
    lambda: f64,
) -> (usize, usize, f64) {
    let l = s1.layers();
    let mut rows = Vec::new();
    for len in 1..=l {
        if !lengths.contains(&len) {
            continue;
        }
        for start in 0..=l - len {
            let img = gen.synthesize(&splice(s1, s2, start, len)).unwrap();
            rows.push((len, start, mse(&img, i1), mse(&img, i2)));
        }
    }
    let mean_d2 = rows.iter().map(|r| r.3).sum::<f64>() / rows.len() as f64;
    let norm = if mean_d2 > 0.0 { mean_d2 } else { 1.0 };
    let mut best: Option<(usize, usize, f64)> = None;
    for &(len, start, d1, d2) in &rows {
        let obj = d1 + lambda * d2 / norm;
        let better = match best {
            None => true,
            Some((bl, bs, bo)) => obj < bo || (obj == bo && (len, start) < (bl, bs)),
        };
        if better {
            best = Some((len, start, obj));
        }
    }
    best.unwrap()
}

#[test]
fn search_equals_brute_force_on_small_generators() {
    for l in [4, 5, 6] {
        let gen = Generator::seeded(GeneratorConfig::tiny(l, 6), l as u64).unwrap();
        for pair in 0..10u64 {
            let s1 = style(100 * l as u64 + pair, l, 6);
            let s2 = style(100 * l as u64 + pair + 50, l, 6);
            let i1 = gen.synthesize(&s1).unwrap();
            let i2 = gen.synthesize(&s2).unwrap();
            let lengths: Vec<usize> = (1..=l).collect();
            let lambda = [1.0, 0.0, 0.5, 3.0][pair as usize % 4];
            let cfg = FusionSearchConfig {
                lambda,
                ..FusionSearchConfig::new(lengths.clone())
            };
            let got = search(&s1, &s2, &i1, &i2, &gen, &cfg).unwrap();
            let (len, start, obj) = brute_force(&gen, &s1, &s2, &i1, &i2, &lengths, lambda);
            assert_eq!(got.mask, FusionMask::contiguous(start, len, l).unwrap(), "L={l} pair {pair}");
            assert!((got.objective - obj).abs() < 1e-12);
        }
    }
}

#[test]
fn ties_go_to_shorter_then_earlier_block() {
    for l in [4, 5, 6] {
        let gen = Generator::seeded(GeneratorConfig::tiny(l, 6), 1).unwrap();
        let s = style(7, l, 6);
        let img = gen.synthesize(&s).unwrap();
        let lengths = vec![3, 2, 1];
        let got = search(&s, &s, &img, &img, &gen, &FusionSearchConfig::new(lengths.clone())).unwrap();
        assert_eq!(got.mask, FusionMask::contiguous(0, 1, l).unwrap());
        let (len, start, _) = brute_force(&gen, &s, &s, &img, &img, &lengths, 1.0);
        assert_eq!((len, start), (1, 0));
        assert!(got.table.iter().all(|r| r.objective == got.objective));
    }
}

#[test]
fn recorded_objective_recomputes_exactly() {
    let gen = Generator::seeded(GeneratorConfig::tiny(5, 6), 2).unwrap();
    let (s1, s2) = (style(1, 5, 6), style(2, 5, 6));
    let i1 = gen.synthesize(&s1).unwrap();
    let i2 = gen.synthesize(&s2).unwrap();
    let out = search(&s1, &s2, &i1, &i2, &gen, &FusionSearchConfig::new(vec![1, 2])).unwrap();
    let norm = out.table.iter().map(|r| r.d2).sum::<f64>() / out.table.len() as f64;
    let best = out
        .table
        .iter()
        .find(|r| FusionMask::contiguous(r.start, r.block_length, 5).unwrap() == out.mask)
        .expect("winner is a candidate");
    let img = gen.synthesize(&fuse(&s1, &s2, &out.mask).unwrap()).unwrap();
    let l2 = Distance::l2();
    let recomputed = l2.eval(&img, &i1).unwrap() + l2.eval(&img, &i2).unwrap() / norm;
    assert!((recomputed - out.objective).abs() < 1e-12);
    assert_eq!(best.objective, out.objective);
}

#[test]
fn fixed_masks_and_sweep_offsets() {
    assert_eq!(fixed_expression_mask(18).unwrap().layers().collect::<Vec<_>>(), [3, 4]);
    assert_eq!(fixed_expression_mask(8).unwrap().layers().collect::<Vec<_>>(), [1, 2]);
    let s1 = style(1, 18, 4);
    let s2 = style(2, 18, 4);
    let fused = fuse(&s1, &s2, &fixed_expression_mask(18).unwrap()).unwrap();
    for r in 0..18 {
        let want = if r == 3 || r == 4 { s2.row(r) } else { s1.row(r) };
        assert_eq!(fused.row(r), want);
    }
    let start = sweep_start(2, -1, 8).unwrap();
    assert_eq!(FusionMask::contiguous(start, 2, 8).unwrap().layers().collect::<Vec<_>>(), [6, 7]);
}
