use super::{RngState, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Largest acceptable relative error.
    pub tolerance: f64,
    /// Denominator floor for the relative error, so exact zeros compare sanely.
    pub floor: f64,
    /// Check at most this many coordinates per parameter block (sampled).
    pub max_coords_per_block: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            tolerance: 1e-4,
            floor: 1e-6,
            max_coords_per_block: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BlockReport {
    pub block: usize,
    pub coords: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub blocks: Vec<BlockReport>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.blocks.iter().map(|b| b.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() < self.tolerance
    }
}

/// Compares reverse-mode gradients against central finite differences.
///
/// `f` maps parameter blocks to `(loss, gradients)`. The gradients are read
/// only at the unperturbed point. The step for coordinate θ is
/// `1e-4·max(1, |θ|)`.
pub fn grad_check<F>(params: &[Tensor<f64>], mut f: F, config: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: FnMut(&[Tensor<f64>]) -> Result<(f64, Vec<Tensor<f64>>)>,
{
    let (base, grads) = f(params)?;
    let (again, _) = f(params)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::NonDeterministic {
            first: base,
            second: again,
        });
    }
    if grads.len() != params.len() {
        return Err(Error::shape("grad_check", &[params.len()], &[grads.len()]));
    }

    let mut rng = RngState::new(config.seed);
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut blocks = Vec::with_capacity(params.len());
    for (b, g) in grads.iter().enumerate() {
        if g.shape() != params[b].shape() {
            return Err(Error::shape("grad_check", params[b].shape(), g.shape()));
        }
        let n = params[b].numel();
        let coords: Vec<usize> = match config.max_coords_per_block {
            Some(cap) if cap < n => {
                let mut c = rng.permutation(n);
                c.truncate(cap);
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        let mut report = BlockReport {
            block: b,
            coords: coords.len(),
            max_rel_err: 0.0,
            max_abs_err: 0.0,
        };
        for &c in &coords {
            let theta = params[b].data()[c];
            let h = 1e-4 * theta.abs().max(1.0);
            work[b].data_mut()[c] = theta + h;
            let (fp, _) = f(&work)?;
            work[b].data_mut()[c] = theta - h;
            let (fm, _) = f(&work)?;
            work[b].data_mut()[c] = theta;
            let fd = (fp - fm) / (2.0 * h);
            let an = g.data()[c];
            let abs = (fd - an).abs();
            let rel = abs / fd.abs().max(an.abs()).max(config.floor);
            report.max_abs_err = report.max_abs_err.max(abs);
            report.max_rel_err = report.max_rel_err.max(rel);
        }
        blocks.push(report);
    }
    Ok(GradCheckReport {
        blocks,
        tolerance: config.tolerance,
    })
}
