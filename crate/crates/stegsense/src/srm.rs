//! High-pass residual filter bank with support-constrained reprojection.
//!
//! Thirty 5x5 prediction-error kernels seed the detector's first
//! convolution. After every optimizer step the bank is pulled back onto a
//! canonical form: off-support taps cleared, off-center taps rescaled to sum
//! to 1, center pinned at -1. A kernel in that form computes
//! `predicted - actual` per pixel, so its response to any constant input
//! vanishes and the support pattern fixed at construction never grows.

use std::fmt::{self, Write as _};

use crate::conv::{self, ConvDims};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FILTER_COUNT: usize = 30;
pub const KERNEL_SIZE: usize = 5;
const CELLS: usize = KERNEL_SIZE * KERNEL_SIZE;
const CTR: usize = 2 * KERNEL_SIZE + 2;

/// Off-center sums below this are unrecoverable by rescaling; the kernel is
/// reset to its normalized seed instead.
pub const DEGENERATE_SUM: f64 = 1e-8;
/// Sums already this close to 1 are left alone, so reprojecting an
/// already-projected bank changes no bits.
pub const NORMALIZED_BAND: f64 = 1e-9;

type Cells = [f64; CELLS];

/// Structural family a kernel belongs to; fixed at construction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FilterClass {
    FirstOrder,
    SecondOrder,
    ThirdOrder,
    Square3,
    Edge3,
    Square5,
    Edge5,
}

impl FilterClass {
    pub fn name(self) -> &'static str {
        match self {
            FilterClass::FirstOrder => "first_order",
            FilterClass::SecondOrder => "second_order",
            FilterClass::ThirdOrder => "third_order",
            FilterClass::Square3 => "square3",
            FilterClass::Edge3 => "edge3",
            FilterClass::Square5 => "square5",
            FilterClass::Edge5 => "edge5",
        }
    }
}

/// Which parts of the canonical form the projection enforces.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Constraint {
    /// Support mask, rescale, center pin.
    Ours,
    /// Like `Ours`, but taps whose sign flipped against the seed are also
    /// cleared before rescaling.
    Direction,
    /// Rescale and center pin only; supports may grow.
    Without,
}

impl Constraint {
    pub fn name(self) -> &'static str {
        match self {
            Constraint::Ours => "ours",
            Constraint::Direction => "direction",
            Constraint::Without => "without",
        }
    }

    pub fn parse(s: &str) -> Result<Constraint> {
        match s {
            "ours" => Ok(Constraint::Ours),
            "direction" => Ok(Constraint::Direction),
            "without" => Ok(Constraint::Without),
            other => Err(Error::Config(format!(
                "unknown constraint '{other}' (expected ours, direction or without)"
            ))),
        }
    }
}

impl fmt::Display for Constraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// The canonical integer-weight kernels, immutable once built.
pub struct SeedBank {
    pub kernels: Vec<Cells>,
    pub classes: Vec<FilterClass>,
}

fn cell(r: usize, c: usize) -> usize {
    r * KERNEL_SIZE + c
}

/// Clockwise quarter turn; four applications give the identity.
fn rot90(k: &Cells) -> Cells {
    let mut out = [0.0; CELLS];
    for r in 0..KERNEL_SIZE {
        for c in 0..KERNEL_SIZE {
            out[cell(r, c)] = k[cell(KERNEL_SIZE - 1 - c, r)];
        }
    }
    out
}

fn rotations(seed: Cells, count: usize) -> Vec<Cells> {
    let mut out = Vec::with_capacity(count);
    let mut k = seed;
    for _ in 0..count {
        out.push(k);
        k = rot90(&k);
    }
    out
}

fn from_taps(taps: &[(usize, usize, f64)]) -> Cells {
    let mut k = [0.0; CELLS];
    for &(r, c, v) in taps {
        k[cell(r, c)] = v;
    }
    k
}

/// Builds the 30 seeds: 8 first-order, 4 second-order, 8 third-order,
/// 4 edge 3x3, 1 square 3x3, 4 edge 5x5, 1 square 5x5.
pub fn build_seed_bank() -> SeedBank {
    let first = from_taps(&[(1, 2, 1.0), (2, 2, -1.0)]);
    let first_diag = from_taps(&[(1, 3, 1.0), (2, 2, -1.0)]);
    let second = from_taps(&[(1, 2, 1.0), (2, 2, -2.0), (3, 2, 1.0)]);
    let second_diag = from_taps(&[(1, 3, 1.0), (2, 2, -2.0), (3, 1, 1.0)]);
    let third = from_taps(&[(0, 2, -1.0), (1, 2, 3.0), (2, 2, -3.0), (3, 2, 1.0)]);
    let third_diag = from_taps(&[(0, 4, -1.0), (1, 3, 3.0), (2, 2, -3.0), (3, 1, 1.0)]);
    let edge3 = from_taps(&[
        (1, 1, -1.0),
        (1, 2, 2.0),
        (1, 3, -1.0),
        (2, 1, 2.0),
        (2, 2, -4.0),
        (2, 3, 2.0),
    ]);
    let square3 = from_taps(&[
        (1, 1, -1.0),
        (1, 2, 2.0),
        (1, 3, -1.0),
        (2, 1, 2.0),
        (2, 2, -4.0),
        (2, 3, 2.0),
        (3, 1, -1.0),
        (3, 2, 2.0),
        (3, 3, -1.0),
    ]);
    let square5 = {
        let rows = [
            [-1.0, 2.0, -2.0, 2.0, -1.0],
            [2.0, -6.0, 8.0, -6.0, 2.0],
            [-2.0, 8.0, -12.0, 8.0, -2.0],
            [2.0, -6.0, 8.0, -6.0, 2.0],
            [-1.0, 2.0, -2.0, 2.0, -1.0],
        ];
        let mut k = [0.0; CELLS];
        for (r, row) in rows.iter().enumerate() {
            k[cell(r, 0)..cell(r, 0) + KERNEL_SIZE].copy_from_slice(row);
        }
        k
    };
    let edge5 = {
        let mut k = square5;
        for i in cell(3, 0)..CELLS {
            k[i] = 0.0;
        }
        k
    };

    let mut kernels = Vec::with_capacity(FILTER_COUNT);
    let mut classes = Vec::with_capacity(FILTER_COUNT);
    let mut push = |ks: Vec<Cells>, class: FilterClass| {
        for k in ks {
            kernels.push(k);
            classes.push(class);
        }
    };
    push(rotations(first, 4), FilterClass::FirstOrder);
    push(rotations(first_diag, 4), FilterClass::FirstOrder);
    push(rotations(second, 2), FilterClass::SecondOrder);
    push(rotations(second_diag, 2), FilterClass::SecondOrder);
    push(rotations(third, 4), FilterClass::ThirdOrder);
    push(rotations(third_diag, 4), FilterClass::ThirdOrder);
    push(rotations(edge3, 4), FilterClass::Edge3);
    push(vec![square3], FilterClass::Square3);
    push(rotations(edge5, 4), FilterClass::Edge5);
    push(vec![square5], FilterClass::Square5);
    SeedBank { kernels, classes }
}

/// Support masks: 1 where the seed is non-zero plus the center cell, which
/// the projection manages separately.
pub fn derive_masks(seed: &SeedBank) -> Vec<[u8; CELLS]> {
    seed.kernels
        .iter()
        .map(|k| {
            let mut m = [0u8; CELLS];
            for (i, &v) in k.iter().enumerate() {
                m[i] = u8::from(v != 0.0 || i == CTR);
            }
            m
        })
        .collect()
}

/// Edge-replicating border padding for single-channel image batches. The
/// output is [n, 1, h + 2 pad, w + 2 pad]; corners repeat the corner pixel.
pub fn replicate_pad(images: &Tensor, pad: usize, op: &'static str) -> Result<Tensor> {
    let (n, cin, h, w) = images.dims4(op)?;
    if cin != 1 {
        return Err(Error::dim(
            op,
            format!("expected single-channel input, got {cin} channels"),
        ));
    }
    if h == 0 || w == 0 {
        return Err(Error::dim(op, format!("empty image {h}x{w}")));
    }
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    let mut out = vec![0.0; n * hp * wp];
    for i in 0..n {
        let src = &images.data()[i * h * w..][..h * w];
        let dst = &mut out[i * hp * wp..][..hp * wp];
        for r in 0..hp {
            let sr = r.saturating_sub(pad).min(h - 1);
            for c in 0..wp {
                let sc = c.saturating_sub(pad).min(w - 1);
                dst[r * wp + c] = src[sr * w + sc];
            }
        }
    }
    Tensor::new(&[n, 1, hp, wp], out)
}

fn off_center_sum(w: &[f64]) -> f64 {
    let mut s = 0.0;
    for (i, &v) in w.iter().enumerate() {
        if i != CTR {
            s += v;
        }
    }
    s
}

/// Seed in canonical form: off-center taps divided by their sum, center -1.
fn normalize_seed(seed: &Cells) -> Cells {
    let mut w = *seed;
    w[CTR] = 0.0;
    let s = off_center_sum(&w);
    for (i, v) in w.iter_mut().enumerate() {
        if i != CTR {
            *v /= s;
        }
    }
    w[CTR] = -1.0;
    w
}

/// The trainable bank plus the immutable structure the projection needs.
#[derive(Clone, Debug)]
pub struct FilterBank {
    kernels: Tensor,
    masks: Vec<[u8; CELLS]>,
    seeds: Vec<Cells>,
    reset_targets: Vec<Cells>,
    classes: Vec<FilterClass>,
    constraint: Constraint,
    resets: u64,
}

impl FilterBank {
    /// Bank initialized to the projected seeds.
    pub fn new(constraint: Constraint) -> FilterBank {
        let seed = build_seed_bank();
        let masks = derive_masks(&seed);
        let reset_targets: Vec<Cells> = seed.kernels.iter().map(normalize_seed).collect();
        let mut data = Vec::with_capacity(FILTER_COUNT * CELLS);
        for t in &reset_targets {
            data.extend_from_slice(t);
        }
        let kernels = Tensor::new(&[FILTER_COUNT, 1, KERNEL_SIZE, KERNEL_SIZE], data)
            .expect("seed bank size is fixed");
        FilterBank {
            kernels,
            masks,
            seeds: seed.kernels,
            reset_targets,
            classes: seed.classes,
            constraint,
            resets: 0,
        }
    }

    pub fn kernels(&self) -> &Tensor {
        &self.kernels
    }

    /// The optimizer updates weights through this and must call [`project`]
    /// afterwards.
    ///
    /// [`project`]: FilterBank::project
    pub fn kernels_mut(&mut self) -> &mut Tensor {
        &mut self.kernels
    }

    pub fn constraint(&self) -> Constraint {
        self.constraint
    }

    pub fn classes(&self) -> &[FilterClass] {
        &self.classes
    }

    pub fn mask(&self, k: usize) -> &[u8; CELLS] {
        &self.masks[k]
    }

    /// How many kernels have been reset after their off-center sum collapsed.
    pub fn reset_count(&self) -> u64 {
        self.resets
    }

    /// Pulls every kernel back into canonical form. Projecting twice is a
    /// bit-exact no-op.
    pub fn project(&mut self) {
        let constraint = self.constraint;
        for k in 0..FILTER_COUNT {
            let mask = &self.masks[k];
            let seed = &self.seeds[k];
            let reset = &self.reset_targets[k];
            let w = &mut self.kernels.data_mut()[k * CELLS..(k + 1) * CELLS];
            match constraint {
                Constraint::Ours | Constraint::Direction => {
                    for (v, &m) in w.iter_mut().zip(mask.iter()) {
                        if m == 0 {
                            *v = 0.0;
                        }
                    }
                    if constraint == Constraint::Direction {
                        for (i, v) in w.iter_mut().enumerate() {
                            if i != CTR && *v * seed[i] < 0.0 {
                                *v = 0.0;
                            }
                        }
                    }
                    w[CTR] = 0.0;
                }
                Constraint::Without => {}
            }
            let s = off_center_sum(w);
            // For the sign-preserving variant a negative sum is unusable:
            // rescaling by it would flip every surviving tap against its
            // seed, so it falls into the reset branch with the tiny sums.
            let degenerate = match constraint {
                Constraint::Direction => s < DEGENERATE_SUM,
                _ => s.abs() < DEGENERATE_SUM,
            };
            if degenerate {
                w.copy_from_slice(reset);
                self.resets += 1;
            } else if (s - 1.0).abs() > NORMALIZED_BAND {
                // Zeros are skipped so a negative sum cannot flip them to
                // -0.0 and break bit-exact idempotence.
                for (i, v) in w.iter_mut().enumerate() {
                    if i != CTR && *v != 0.0 {
                        *v /= s;
                    }
                }
            }
            w[CTR] = -1.0;
        }
    }

    /// Verifies the canonical form the projection is supposed to leave
    /// behind; the trainer runs this after every step.
    pub fn check_invariants(&self) -> Result<()> {
        for k in 0..FILTER_COUNT {
            let w = &self.kernels.data()[k * CELLS..(k + 1) * CELLS];
            if w[CTR] != -1.0 {
                return Err(Error::domain(
                    "filter_bank",
                    format!("filter {k}: center is {}, want -1 exactly", w[CTR]),
                ));
            }
            let s = off_center_sum(w);
            if (s - 1.0).abs() > NORMALIZED_BAND {
                return Err(Error::domain(
                    "filter_bank",
                    format!("filter {k}: off-center sum {s} outside 1 +/- {NORMALIZED_BAND}"),
                ));
            }
            if self.constraint != Constraint::Without {
                for (i, &v) in w.iter().enumerate() {
                    if self.masks[k][i] == 0 && v != 0.0 {
                        return Err(Error::domain(
                            "filter_bank",
                            format!("filter {k}: off-support tap {i} is {v}, want 0"),
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    /// One residual plane per filter: same spatial size as the input via
    /// padding 2, stride 1. Border padding replicates the edge pixels, so a
    /// constant image produces (numerically) zero residual everywhere, not
    /// just in the interior.
    pub fn compute_residuals(&self, images: &Tensor) -> Result<Tensor> {
        let pad = KERNEL_SIZE / 2;
        let padded = replicate_pad(images, pad, "compute_residuals")?;
        let (n, _, hp, wp) = padded.dims4("compute_residuals")?;
        let (h, w) = (hp - 2 * pad, wp - 2 * pad);
        let d = ConvDims {
            n,
            cin: 1,
            h: hp,
            w: wp,
            cout: FILTER_COUNT,
            kh: KERNEL_SIZE,
            kw: KERNEL_SIZE,
            stride: 1,
            pad: 0,
            ho: h,
            wo: w,
        };
        let mut out = vec![0.0; n * FILTER_COUNT * h * w];
        conv::forward(padded.data(), self.kernels.data(), &mut out, d);
        Tensor::new(&[n, FILTER_COUNT, h, w], out)
    }

    /// Text dump of the bank, one block per kernel: a `# filter <k> class
    /// <name>` header, then 5 rows of 5 values that reparse bit-exactly.
    pub fn export_filters(&self) -> String {
        let mut out = String::new();
        for k in 0..FILTER_COUNT {
            writeln!(out, "# filter {k} class {}", self.classes[k].name()).unwrap();
            let w = &self.kernels.data()[k * CELLS..(k + 1) * CELLS];
            for r in 0..KERNEL_SIZE {
                let row = &w[r * KERNEL_SIZE..(r + 1) * KERNEL_SIZE];
                let line: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
                writeln!(out, "{}", line.join(" ")).unwrap();
            }
        }
        out
    }
}
