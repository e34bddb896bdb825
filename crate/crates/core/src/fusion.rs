//! Layer-wise style fusion.
//!
//! A fused style takes each row either from the identity style `s1` or from
//! the expression style `s2`; a [`FusionMask`] lists the rows taken from `s2`.
//! Layer indices are 0-based. The published two-layer choice, described there
//! as "layers 4 and 5" of an 18-layer style, is `{3, 4}` here.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{ensure, Error, Result};
use crate::generator::{Generator, ImageTensor, StyleVector};
use crate::perceptual::Distance;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FusionMask {
    take_from_expression: BTreeSet<usize>,
    total_layers: usize,
}

impl FusionMask {
    pub fn new(layers: impl IntoIterator<Item = usize>, total_layers: usize) -> Result<Self> {
        let take_from_expression: BTreeSet<usize> = layers.into_iter().collect();
        if let Some(&bad) = take_from_expression.iter().find(|&&i| i >= total_layers) {
            return Err(Error::contract(format!(
                "mask layer {bad} outside 0..{total_layers}"
            )));
        }
        Ok(Self {
            take_from_expression,
            total_layers,
        })
    }

    pub fn empty(total_layers: usize) -> Self {
        Self {
            take_from_expression: BTreeSet::new(),
            total_layers,
        }
    }

    pub fn full(total_layers: usize) -> Self {
        Self {
            take_from_expression: (0..total_layers).collect(),
            total_layers,
        }
    }

    /// `len` consecutive layers starting at `start`.
    pub fn contiguous(start: usize, len: usize, total_layers: usize) -> Result<Self> {
        ensure!(
            len >= 1 && start + len <= total_layers,
            Error::contract(format!(
                "block of {len} layers at {start} does not fit {total_layers} layers"
            ))
        );
        Self::new(start..start + len, total_layers)
    }

    pub fn total_layers(&self) -> usize {
        self.total_layers
    }

    pub fn contains(&self, layer: usize) -> bool {
        self.take_from_expression.contains(&layer)
    }

    pub fn layers(&self) -> impl Iterator<Item = usize> + '_ {
        self.take_from_expression.iter().copied()
    }

    pub fn len(&self) -> usize {
        self.take_from_expression.len()
    }

    pub fn is_empty(&self) -> bool {
        self.take_from_expression.is_empty()
    }

    pub fn complement(&self) -> Self {
        Self {
            take_from_expression: (0..self.total_layers)
                .filter(|i| !self.contains(*i))
                .collect(),
            total_layers: self.total_layers,
        }
    }

    /// The 0/1 diagonal of the selection matrix for `s2`.
    pub fn alpha_diagonal(&self) -> Vec<u8> {
        (0..self.total_layers).map(|i| self.contains(i) as u8).collect()
    }

    /// Parses a comma-separated layer list such as `"3,4"`.
    pub fn parse(text: &str, total_layers: usize) -> Result<Self> {
        let layers = text
            .split(',')
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .map(|t| {
                t.parse::<usize>()
                    .map_err(|_| Error::contract(format!("bad mask layer `{t}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(layers, total_layers)
    }
}

/// Row `i` comes from `s2` when the mask holds `i`, otherwise from `s1`.
pub fn fuse(s1: &StyleVector, s2: &StyleVector, mask: &FusionMask) -> Result<StyleVector> {
    ensure!(
        s1.tensor().shape() == s2.tensor().shape(),
        Error::contract(format!(
            "fusing styles of shape {:?} and {:?}",
            s1.tensor().shape(),
            s2.tensor().shape()
        ))
    );
    ensure!(
        mask.total_layers == s1.layers(),
        Error::contract(format!(
            "mask covers {} layers, styles have {}",
            mask.total_layers,
            s1.layers()
        ))
    );
    let mut out = s1.clone();
    for i in mask.layers() {
        out.row_mut(i).copy_from_slice(s2.row(i));
    }
    Ok(out)
}

/// Two adjacent expression layers at `floor(3L/18)` and the next one,
/// giving `{3, 4}` for `L = 18`.
pub fn fixed_expression_mask(total_layers: usize) -> Result<FusionMask> {
    ensure!(
        total_layers >= 5,
        Error::contract(format!(
            "fixed expression mask needs at least 5 layers, got {total_layers}"
        ))
    );
    let first = 3 * total_layers / 18;
    FusionMask::new([first, first + 1], total_layers)
}

#[derive(Clone, Debug)]
pub struct FusionSearchConfig {
    /// Weight of the expression term.
    pub lambda: f64,
    /// Appearance distance to the identity image.
    pub d1: Distance,
    /// Expression distance to the expression image.
    pub d2: Distance,
    /// Divide `d2` by its mean over all candidates.
    pub normalize_d2: bool,
    pub block_lengths: Vec<usize>,
}

impl FusionSearchConfig {
    pub fn new(block_lengths: Vec<usize>) -> Self {
        Self {
            lambda: 1.0,
            d1: Distance::l2(),
            d2: Distance::l2(),
            normalize_d2: true,
            block_lengths,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreRow {
    pub block_length: usize,
    pub start: usize,
    pub d1: f64,
    /// Raw expression distance, before normalisation.
    pub d2: f64,
    pub objective: f64,
}

#[derive(Clone, Debug)]
pub struct SearchOutcome {
    pub mask: FusionMask,
    pub objective: f64,
    /// Every candidate, ordered by block length then start.
    pub table: Vec<ScoreRow>,
}

/// Exhaustive search over contiguous expression blocks.
///
/// Each candidate block `(length i, start j)` is rendered as
/// `g(fuse(s1, s2, block))` and scored `d1(·, i1) + λ · d2(·, i2)`. Ties go to
/// the shorter block, then the earlier start.
pub fn search(
    s1: &StyleVector,
    s2: &StyleVector,
    i1: &ImageTensor,
    i2: &ImageTensor,
    gen: &Generator,
    cfg: &FusionSearchConfig,
) -> Result<SearchOutcome> {
    ensure!(
        !cfg.block_lengths.is_empty(),
        Error::contract("fusion search needs at least one block length")
    );
    ensure!(
        cfg.lambda >= 0.0,
        Error::contract(format!("lambda must be non-negative, got {}", cfg.lambda))
    );
    let total = s1.layers();
    let lengths: BTreeSet<usize> = cfg.block_lengths.iter().copied().collect();
    if let Some(&bad) = lengths.iter().find(|&&i| i == 0 || i > total) {
        return Err(Error::contract(format!(
            "block length {bad} outside 1..={total}"
        )));
    }
    let candidates: Vec<(usize, usize)> = lengths
        .iter()
        .flat_map(|&i| (0..=total - i).map(move |j| (i, j)))
        .collect();

    let t1 = cfg.d1.prepare(i1)?;
    let t2 = cfg.d2.prepare(i2)?;
    let scored = candidates
        .par_iter()
        .map(|&(i, j)| {
            let s0 = fuse(s1, s2, &FusionMask::contiguous(j, i, total)?)?;
            let img = gen.synthesize(&s0)?;
            let d1 = cfg.d1.eval_prepared(&img, &t1)?;
            let d2 = cfg.d2.eval_prepared(&img, &t2)?;
            Ok((i, j, d1, d2))
        })
        .collect::<Result<Vec<_>>>()?;

    let norm = if cfg.normalize_d2 {
        let mean = scored.iter().map(|r| r.3).sum::<f64>() / scored.len() as f64;
        if mean > 0.0 {
            mean
        } else {
            1.0
        }
    } else {
        1.0
    };
    let table: Vec<ScoreRow> = scored
        .into_iter()
        .map(|(i, j, d1, d2)| ScoreRow {
            block_length: i,
            start: j,
            d1,
            d2,
            objective: d1 + cfg.lambda * (d2 / norm),
        })
        .collect();
    let best = table
        .iter()
        .fold(&table[0], |b, r| if r.objective < b.objective { r } else { b });
    Ok(SearchOutcome {
        mask: FusionMask::contiguous(best.start, best.block_length, total)?,
        objective: best.objective,
        table,
    })
}

pub fn score_table_csv(table: &[ScoreRow]) -> String {
    let mut out = String::from("block_length,start,d1,d2,objective\n");
    for r in table {
        writeln!(
            out,
            "{},{},{:e},{:e},{:e}",
            r.block_length, r.start, r.d1, r.d2, r.objective
        )
        .expect("string write");
    }
    out
}

pub fn write_score_table(table: &[ScoreRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, score_table_csv(table)).map_err(|e| Error::io(path, e))
}

/// Start index of a sweep cell; `-1` means the final `len` layers.
pub fn sweep_start(len: usize, start: isize, total_layers: usize) -> Result<usize> {
    let cell = || format!("sweep cell (i={len}, j={start})");
    ensure!(
        len >= 1 && len <= total_layers,
        Error::contract(format!("{}: length outside 1..={total_layers}", cell()))
    );
    let j = match start {
        -1 => total_layers - len,
        j if j >= 0 => j as usize,
        _ => return Err(Error::contract(format!("{}: start below -1", cell()))),
    };
    ensure!(
        j + len <= total_layers,
        Error::contract(format!("{}: block runs past layer {total_layers}", cell()))
    );
    Ok(j)
}

/// `grid[a][b] = g(fuse(s1, s2, block(lengths[a], starts[b])))`.
pub fn sweep(
    s1: &StyleVector,
    s2: &StyleVector,
    gen: &Generator,
    lengths: &[usize],
    starts: &[isize],
) -> Result<Vec<Vec<ImageTensor>>> {
    let total = s1.layers();
    let cells = lengths
        .iter()
        .flat_map(|&i| starts.iter().map(move |&j| (i, j)))
        .map(|(i, j)| sweep_start(i, j, total).map(|start| (i, start)))
        .collect::<Result<Vec<_>>>()?;
    let images = cells
        .par_iter()
        .map(|&(i, j)| gen.synthesize(&fuse(s1, s2, &FusionMask::contiguous(j, i, total)?)?))
        .collect::<Result<Vec<_>>>()?;
    let mut it = images.into_iter();
    Ok(lengths
        .iter()
        .map(|_| it.by_ref().take(starts.len()).collect())
        .collect())
}
