//! Spatiotemporal SVD clutter filter.
//!
//! The stack is arranged as a Casorati matrix `X` (pixels x frames). Its
//! right singular vectors and singular values come from the eigen
//! decomposition of the frames x frames Gram matrix `XᵀX`, so memory stays
//! linear in the stack size. Removing a set `R` of singular components is
//! `X - X V_R V_Rᵀ`; when more components are removed than kept the
//! equivalent `X V_K V_Kᵀ` is used instead.

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Frame, FrameStack};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SvdFilterConfig {
    /// Singular values strictly above `rel_threshold * sigma_1` are removed.
    pub rel_threshold: f64,
    /// Also remove the last (smallest) singular component.
    pub drop_smallest: bool,
}

impl Default for SvdFilterConfig {
    fn default() -> Self {
        Self {
            rel_threshold: 0.10,
            drop_smallest: true,
        }
    }
}

impl SvdFilterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rel_threshold > 0.0 && self.rel_threshold < 1.0) {
            return Err(Error::Config(format!(
                "rel_threshold must lie in (0, 1), got {}",
                self.rel_threshold
            )));
        }
        Ok(())
    }
}

/// Singular spectrum of a stack, largest first.
#[derive(Debug, Clone)]
pub struct SingularSpectrum {
    pub values: Vec<f64>,
    /// Column k is the right singular vector of `values[k]`.
    pub vectors: DMatrix<f64>,
}

/// Pixels x frames matrix; column `t` is frame `t` flattened row-major.
pub fn casorati(stack: &FrameStack) -> Result<DMatrix<f64>> {
    check_frames(stack)?;
    let npix = stack.geometry.len();
    Ok(DMatrix::from_fn(npix, stack.nframes(), |p, t| {
        stack.frames[t].data[p] as f64
    }))
}

/// Inverse of [`casorati`].
pub fn from_casorati(matrix: &DMatrix<f64>, template: &FrameStack) -> Result<FrameStack> {
    let g = template.geometry;
    if matrix.nrows() != g.len() {
        return Err(Error::Argument(format!(
            "matrix has {} rows, geometry needs {}",
            matrix.nrows(),
            g.len()
        )));
    }
    let frames = (0..matrix.ncols())
        .map(|t| Frame {
            geometry: g,
            data: matrix.column(t).iter().map(|&v| v as f32).collect(),
        })
        .collect();
    FrameStack::new(g, frames)
}

fn check_frames(stack: &FrameStack) -> Result<()> {
    if stack.nframes() < 2 {
        return Err(Error::Argument(format!(
            "SVD filtering needs at least 2 frames, got {}",
            stack.nframes()
        )));
    }
    Ok(())
}

/// Frames x frames Gram matrix, each entry summed in pixel order.
fn gram(stack: &FrameStack) -> DMatrix<f64> {
    let n = stack.nframes();
    let cols: Vec<Vec<f64>> = stack
        .frames
        .par_iter()
        .map(|f| f.data.iter().map(|&v| v as f64).collect())
        .collect();
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|s| (s..n).map(move |t| (s, t))).collect();
    let dots: Vec<f64> = pairs
        .par_iter()
        .map(|&(s, t)| cols[s].iter().zip(&cols[t]).map(|(a, b)| a * b).sum())
        .collect();
    let mut g = DMatrix::zeros(n, n);
    for (&(s, t), &d) in pairs.iter().zip(&dots) {
        g[(s, t)] = d;
        g[(t, s)] = d;
    }
    g
}

pub fn singular_spectrum(stack: &FrameStack) -> Result<SingularSpectrum> {
    check_frames(stack)?;
    let g = gram(stack);
    let n = g.nrows();
    let trace: f64 = (0..n).map(|k| g[(k, k)]).sum();
    let eig = SymmetricEigen::try_new(g, 1e-15, 100 * n.max(10)).ok_or_else(|| {
        Error::Numerical(format!(
            "eigen decomposition of the {n}x{n} Gram matrix did not converge (trace {trace:.3e})"
        ))
    })?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let values = order
        .iter()
        .map(|&k| eig.eigenvalues[k].max(0.0).sqrt())
        .collect();
    let vectors = DMatrix::from_fn(n, n, |r, c| eig.eigenvectors[(r, order[c])]);
    Ok(SingularSpectrum { values, vectors })
}

/// Indices of the singular components the filter removes.
pub fn removed_components(values: &[f64], cfg: &SvdFilterConfig) -> Vec<usize> {
    let Some(&first) = values.first() else {
        return Vec::new();
    };
    let cut = cfg.rel_threshold * first;
    let mut removed: Vec<usize> = (0..values.len()).filter(|&k| values[k] > cut).collect();
    let last = values.len() - 1;
    if cfg.drop_smallest && !removed.contains(&last) {
        removed.push(last);
    }
    removed
}

/// Projects the stack onto (or away from) a set of right singular vectors.
fn project(stack: &FrameStack, vectors: &DMatrix<f64>, comps: &[usize], keep: bool) -> FrameStack {
    let n = stack.nframes();
    let mut p = DMatrix::<f64>::zeros(n, n);
    for &k in comps {
        let v = vectors.column(k);
        p += &v * v.transpose();
    }
    let npix = stack.geometry.len();
    let g = stack.geometry;
    // out[:, t] = sum_s X[:, s] * P[s, t]  (or X[:, t] minus that)
    let frames: Vec<Frame> = (0..n)
        .into_par_iter()
        .map(|t| {
            let mut acc = vec![0.0f64; npix];
            for s in 0..n {
                let w = p[(s, t)];
                if w == 0.0 {
                    continue;
                }
                for (a, &x) in acc.iter_mut().zip(&stack.frames[s].data) {
                    *a += w * x as f64;
                }
            }
            let data = if keep {
                acc.into_iter().map(|v| v as f32).collect()
            } else {
                stack.frames[t]
                    .data
                    .iter()
                    .zip(acc)
                    .map(|(&x, r)| (x as f64 - r) as f32)
                    .collect()
            };
            Frame { geometry: g, data }
        })
        .collect();
    FrameStack { geometry: g, frames }
}

/// Removes every singular component above `rel_threshold * sigma_1`, and
/// optionally the smallest one, then reshapes back into frames.
pub fn svd_clutter_filter(stack: &FrameStack, cfg: &SvdFilterConfig) -> Result<FrameStack> {
    cfg.validate()?;
    let spectrum = singular_spectrum(stack)?;
    let removed = removed_components(&spectrum.values, cfg);
    Ok(apply_removal(stack, &spectrum, &removed))
}

pub(crate) fn apply_removal(
    stack: &FrameStack,
    spectrum: &SingularSpectrum,
    removed: &[usize],
) -> FrameStack {
    let n = spectrum.values.len();
    if removed.len() * 2 <= n {
        project(stack, &spectrum.vectors, removed, false)
    } else {
        let kept: Vec<usize> = (0..n).filter(|k| !removed.contains(k)).collect();
        project(stack, &spectrum.vectors, &kept, true)
    }
}
