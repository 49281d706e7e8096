//! Cover/stego feature-difference inspection ("white dots"), residual-plane
//! export, and feature-vector export.
//!
//! The white-dot rule: take the elementwise absolute difference D between a
//! cover feature map and its stego counterpart, threshold at mean(D), and
//! measure how the super-threshold cells distribute over the cover's
//! positive and negative regions. Cells where the cover feature is exactly
//! zero belong to neither region.

use crate::error::{Error, Result};
use crate::image::{batch_tensor, Image8};
use crate::network::{forward, forward_graph, Mode, ModelState};
use crate::pgm::write_pgm;
use crate::srm::FilterBank;
use crate::tape::Tape;
use crate::tensor::Tensor;
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiagnosticReport {
    pub pos_fraction: f64,
    pub neg_fraction: f64,
    pub threshold: f64,
    pub white_pos: usize,
    pub pos_total: usize,
    pub white_neg: usize,
    pub neg_total: usize,
    /// Both regions empty (the cover feature map is identically zero).
    pub degenerate: bool,
}

/// Compares a cover feature map against its stego counterpart. Any equal
/// shapes are accepted; the analysis is elementwise. An empty region
/// reports fraction 0.
pub fn white_dot_analysis(feat_cover: &Tensor, feat_stego: &Tensor) -> Result<DiagnosticReport> {
    if feat_cover.shape() != feat_stego.shape() {
        return Err(Error::dim(
            "white_dot_analysis",
            format!(
                "cover {:?} vs stego {:?}",
                feat_cover.shape(),
                feat_stego.shape()
            ),
        ));
    }
    if feat_cover.numel() == 0 {
        return Err(Error::dim("white_dot_analysis", "empty feature map"));
    }
    let c = feat_cover.data();
    let s = feat_stego.data();
    let mut sum = 0.0;
    for (a, b) in c.iter().zip(s) {
        sum += (a - b).abs();
    }
    let threshold = sum / c.len() as f64;
    let (mut white_pos, mut pos_total, mut white_neg, mut neg_total) = (0usize, 0usize, 0usize, 0usize);
    for (a, b) in c.iter().zip(s) {
        let white = (a - b).abs() > threshold;
        if *a > 0.0 {
            pos_total += 1;
            white_pos += usize::from(white);
        } else if *a < 0.0 {
            neg_total += 1;
            white_neg += usize::from(white);
        }
    }
    let frac = |w: usize, t: usize| if t == 0 { 0.0 } else { w as f64 / t as f64 };
    Ok(DiagnosticReport {
        pos_fraction: frac(white_pos, pos_total),
        neg_fraction: frac(white_neg, neg_total),
        threshold,
        white_pos,
        pos_total,
        white_neg,
        neg_total,
        degenerate: pos_total + neg_total == 0,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchWhiteDot {
    pub mean_pos: f64,
    pub mean_neg: f64,
    /// Pairs contributing to the means.
    pub used: usize,
    /// Degenerate pairs excluded from the means.
    pub degenerate: usize,
}

/// Arithmetic mean of per-pair fractions; degenerate pairs are excluded
/// from the means and counted separately.
pub fn batch_white_dot(reports: &[DiagnosticReport]) -> Result<BatchWhiteDot> {
    if reports.is_empty() {
        return Err(Error::Config("white-dot batch needs at least one pair".into()));
    }
    let mut out = BatchWhiteDot {
        mean_pos: 0.0,
        mean_neg: 0.0,
        used: 0,
        degenerate: 0,
    };
    for r in reports {
        if r.degenerate {
            out.degenerate += 1;
        } else {
            out.mean_pos += r.pos_fraction;
            out.mean_neg += r.neg_fraction;
            out.used += 1;
        }
    }
    if out.used > 0 {
        out.mean_pos /= out.used as f64;
        out.mean_neg /= out.used as f64;
    }
    Ok(out)
}

/// Feature maps of one cover/stego pair at the input of the first block's
/// activation, the earliest nonlinearity after the residual stage. Eval
/// mode, so the two rows are independent.
pub fn pair_features(
    model: &ModelState,
    cover: &Image8,
    stego: &Image8,
) -> Result<(Tensor, Tensor)> {
    let images = batch_tensor(&[cover, stego])?;
    let mut tape = Tape::new();
    let out = forward_graph(&mut tape, &images, model, Mode::Eval, false)?;
    let feats = tape.value(out.block1_act_input);
    let (n, c, h, w) = feats.dims4("pair_features")?;
    if n != 2 {
        return Err(Error::dim("pair_features", format!("{n} feature rows")));
    }
    let plane = c * h * w;
    let row = |k: usize| Tensor::new(&[c, h, w], feats.data()[k * plane..][..plane].to_vec());
    Ok((row(0)?, row(1)?))
}

pub fn white_dot_pair(model: &ModelState, cover: &Image8, stego: &Image8) -> Result<DiagnosticReport> {
    let (fc, fs) = pair_features(model, cover, stego)?;
    white_dot_analysis(&fc, &fs)
}

pub const REPORT_HEADER: &str = "pair_id,pos_fraction,neg_fraction,threshold,degenerate";

pub fn report_csv(reports: &[DiagnosticReport]) -> String {
    let mut s = String::from(REPORT_HEADER);
    s.push('\n');
    for (i, r) in reports.iter().enumerate() {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            i, r.pos_fraction, r.neg_fraction, r.threshold, r.degenerate
        ));
    }
    s
}

pub fn write_report_csv(reports: &[DiagnosticReport], path: &Path) -> Result<()> {
    fs::write(path, report_csv(reports)).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Writes each of the bank's residual planes for `image` as a min-max
/// normalized PGM plus a `plane,min,max` sidecar that makes the scaling
/// invertible. A constant plane (min == max) writes all zeros.
pub fn export_residuals(image: &Image8, bank: &FilterBank, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let residuals = bank.compute_residuals(&image.to_tensor())?;
    let (_, k, h, w) = residuals.dims4("export_residuals")?;
    let plane = h * w;
    let mut paths = Vec::with_capacity(k);
    let mut sidecar = String::from("plane,min,max\n");
    for p in 0..k {
        let vals = &residuals.data()[p * plane..][..plane];
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &v in vals {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        let pixels: Vec<u8> = if hi > lo {
            vals.iter()
                .map(|&v| ((v - lo) / (hi - lo) * 255.0).round() as u8)
                .collect()
        } else {
            vec![0; plane]
        };
        let img = Image8::new(w, h, pixels)?;
        let path = out_dir.join(format!("residual_{p:02}.pgm"));
        write_pgm(&img, &path)?;
        sidecar.push_str(&format!("{p},{lo},{hi}\n"));
        paths.push(path);
    }
    let sidecar_path = out_dir.join("residual_scale.csv");
    fs::write(&sidecar_path, sidecar)
        .map_err(|e| Error::io(sidecar_path.display().to_string(), e))?;
    Ok(paths)
}

/// One row per image (cover then stego per pair): the label and the
/// classifier-input feature vector at 17 significant digits.
pub fn export_features(
    model: &ModelState,
    pairs: &[(Image8, Image8)],
    path: &Path,
) -> Result<()> {
    if pairs.is_empty() {
        return Err(Error::Config("feature export needs at least one pair".into()));
    }
    let dim = model.cfg.feature_dim;
    let mut s = String::from("label");
    for i in 0..dim {
        s.push_str(&format!(",f{i}"));
    }
    s.push('\n');
    for group in pairs.chunks(16) {
        let mut refs = Vec::with_capacity(2 * group.len());
        for (c, st) in group {
            refs.push(c);
            refs.push(st);
        }
        let images = batch_tensor(&refs)?;
        let (_, feats) = forward(model, &images, Mode::Eval)?;
        for (i, row) in feats.data().chunks_exact(dim).enumerate() {
            s.push_str(&format!("{}", i % 2));
            for v in row {
                s.push_str(&format!(",{v:.16e}"));
            }
            s.push('\n');
        }
    }
    fs::write(path, s).map_err(|e| Error::io(path.display().to_string(), e))
}
