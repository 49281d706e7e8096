//! Central finite-difference verification of reverse-mode gradients.

use crate::error::{Error, Result};
use crate::rng::stream;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;

/// Compares the recorded gradient of `f` at `x` against central finite
/// differences with step `h` and returns the worst relative error
/// |g_ad - g_fd| / max(floor, |g_ad| + |g_fd|) over the checked coordinates,
/// with floor = max(1e-12, 1e-2 * gmax) and gmax the largest |gradient| seen.
///
/// The floor keeps coordinates whose true gradient is far below the tensor's
/// scale from dominating the result: there the difference quotient is mostly
/// cancellation noise from the loss evaluation, not signal about the
/// recorded gradient.
///
/// Coordinates with |x_i| < 10 h sit too close to the kink of the piecewise
/// ops (relu, abs, tlu, min-zero) for a two-sided difference to be meaningful
/// and are skipped.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, NodeId) -> Result<NodeId>,
{
    let coords: Vec<usize> = (0..x.numel()).collect();
    check_coords(f, x, h, &coords, false)
}

/// Same check restricted to `max_coords` coordinates chosen by `seed`; used
/// where a full sweep would be too slow.
pub fn finite_diff_check_sampled<F>(
    f: F,
    x: &Tensor,
    h: f64,
    max_coords: usize,
    seed: u64,
) -> Result<f64>
where
    F: Fn(&mut Tape, NodeId) -> Result<NodeId>,
{
    let coords = sample_coords(x.numel(), max_coords, seed);
    check_coords(f, x, h, &coords, false)
}

/// Sampled check with the kink-skip rule extended through composition. In a
/// deep function a step of size h can push a downstream value across a kink
/// of relu / abs / tlu even when the leaf coordinate itself sits far from
/// one; the secant then averages two different slopes and stops estimating
/// the derivative at x. The tape records which side of its kink every
/// piecewise element took (`Tape::branch_hash`), and a coordinate whose
/// perturbed evaluations land on a different smooth piece than the base
/// point is skipped. A genuine gradient bug is not maskable this way: where
/// no branch flips, the function is smooth and the quotient is kept. If
/// fewer than a quarter of the candidates survive, the operating point is
/// unusable for finite differences and the check fails instead of passing
/// vacuously.
pub fn finite_diff_check_guarded<F>(
    f: F,
    x: &Tensor,
    h: f64,
    max_coords: usize,
    seed: u64,
) -> Result<f64>
where
    F: Fn(&mut Tape, NodeId) -> Result<NodeId>,
{
    let coords = sample_coords(x.numel(), max_coords, seed);
    check_coords(f, x, h, &coords, true)
}

fn sample_coords(numel: usize, max_coords: usize, seed: u64) -> Vec<usize> {
    let mut coords: Vec<usize> = (0..numel).collect();
    if coords.len() > max_coords {
        let mut rng = stream(seed);
        coords.shuffle(&mut rng);
        coords.truncate(max_coords);
        coords.sort_unstable();
    }
    coords
}

fn check_coords<F>(f: F, x: &Tensor, h: f64, coords: &[usize], guard: bool) -> Result<f64>
where
    F: Fn(&mut Tape, NodeId) -> Result<NodeId>,
{
    let g_ad = {
        let mut tape = Tape::new();
        let id = tape.leaf(x.clone(), true);
        let loss = f(&mut tape, id)?;
        tape.backward(loss)?;
        tape.grad(id).map(<[f64]>::to_vec).unwrap_or_default()
    };
    let eval = |data: &Tensor| -> Result<(f64, u64)> {
        let mut tape = Tape::new();
        let id = tape.leaf(data.clone(), false);
        let loss = f(&mut tape, id)?;
        Ok((tape.value(loss).item()?, tape.branch_hash()))
    };
    let base_hash = if guard { eval(x)?.1 } else { 0 };
    let mut probe = x.clone();
    let mut pairs = Vec::with_capacity(coords.len());
    let mut candidates = 0usize;
    for &i in coords {
        let xi = x.data()[i];
        if xi.abs() < 10.0 * h {
            continue;
        }
        candidates += 1;
        probe.data_mut()[i] = xi + h;
        let (up, hash_up) = eval(&probe)?;
        probe.data_mut()[i] = xi - h;
        let (down, hash_down) = eval(&probe)?;
        probe.data_mut()[i] = xi;
        if guard && (hash_up != base_hash || hash_down != base_hash) {
            continue;
        }
        let g_fd = (up - down) / (2.0 * h);
        let g = if g_ad.is_empty() { 0.0 } else { g_ad[i] };
        pairs.push((g, g_fd));
    }
    if guard && (pairs.is_empty() || pairs.len() * 4 < candidates) {
        return Err(Error::Config(format!(
            "finite differences ill-conditioned at this point: only {} of {candidates} \
             sampled coordinates stay on the base point's smooth piece",
            pairs.len()
        )));
    }
    let gmax = pairs
        .iter()
        .fold(0.0f64, |m, &(a, b)| m.max(a.abs()).max(b.abs()));
    let floor = 1e-12f64.max(1e-2 * gmax);
    Ok(pairs
        .iter()
        .fold(0.0f64, |w, &(a, b)| w.max((a - b).abs() / floor.max(a.abs() + b.abs()))))
}
