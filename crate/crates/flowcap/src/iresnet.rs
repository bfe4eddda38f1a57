//! Invertible residual networks.
//!
//! Each block maps `x -> x + f(x)` where the residual `f` is kept strictly
//! contractive (`Lip(f) < 1`) by spectral normalization of its affine
//! weights. Contractive residuals make every block invertible through the
//! Banach fixed-point iteration `x <- y - f(x)`, applied block by block in
//! reverse order.

use std::sync::Arc;

use crate::autodiff::{Binding, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::Mlp;
use crate::rng::Rng;
use crate::tensor::{self, Tensor};

/// Estimate the largest singular value of `w` by power iteration from a
/// seeded start vector. Deterministic; a zero matrix reports 0.
pub fn spectral_norm(w: &Tensor, iters: usize) -> f64 {
    assert!(iters >= 1);
    let (m, n) = (w.rows(), w.cols());
    let mut rng = Rng::new(0x5eed_u64 ^ ((m as u64) << 32) ^ n as u64);
    let mut u: Vec<f64> = (0..m).map(|_| rng.normal()).collect();
    if !normalize_in_place(&mut u) {
        return 0.0;
    }
    let wt = tensor::transpose(w);
    let mut sigma = 0.0;
    for _ in 0..iters {
        let mut v = tensor::matmul(&wt, &Tensor::vector(&u)).unwrap().data().to_vec();
        if !normalize_in_place(&mut v) {
            return 0.0;
        }
        let wv = tensor::matmul(w, &Tensor::vector(&v)).unwrap();
        let norm = l2(wv.data());
        if norm == 0.0 {
            return 0.0;
        }
        sigma = norm;
        u = wv.data().to_vec();
        normalize_in_place(&mut u);
    }
    sigma
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn normalize_in_place(v: &mut [f64]) -> bool {
    let n = l2(v);
    if n == 0.0 {
        return false;
    }
    for x in v.iter_mut() {
        *x /= n;
    }
    true
}

/// Per-sample residual function used by explicitly constructed layers.
pub type SampleFn = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;

/// What computes a block's residual part.
pub enum ResidualKind {
    /// Trainable residual; subject to spectral normalization.
    Mlp(Mlp),
    /// Fixed linear map `[z, y] -> [coeff * y, 0^p]` on width `2p`.
    CrossShift { coeff: f64, p: usize },
    /// Fixed residual applied column by column.
    Func { f: SampleFn, label: String },
}

pub struct ResidualBlock {
    pub kind: ResidualKind,
    /// Persistent power-iteration vectors, one per affine layer.
    sn_u: Vec<Option<Vec<f64>>>,
    /// Last spectral-norm estimates, aligned with the weight list.
    pub sigma_estimates: Vec<f64>,
}

impl ResidualBlock {
    pub fn mlp(mlp: Mlp) -> Self {
        let layers = mlp.layer_count();
        ResidualBlock {
            kind: ResidualKind::Mlp(mlp),
            sn_u: vec![None; layers],
            sigma_estimates: vec![0.0; layers],
        }
    }

    pub fn cross_shift(coeff: f64, p: usize) -> Self {
        ResidualBlock {
            kind: ResidualKind::CrossShift { coeff, p },
            sn_u: Vec::new(),
            sigma_estimates: vec![coeff.abs()],
        }
    }

    pub fn func(label: &str, f: SampleFn) -> Self {
        ResidualBlock {
            kind: ResidualKind::Func {
                f,
                label: label.to_string(),
            },
            sn_u: Vec::new(),
            sigma_estimates: Vec::new(),
        }
    }

    pub fn label(&self) -> String {
        match &self.kind {
            ResidualKind::Mlp(m) => format!("mlp:{}", m.prefix),
            ResidualKind::CrossShift { coeff, .. } => format!("cross-shift:{coeff}"),
            ResidualKind::Func { label, .. } => label.clone(),
        }
    }

    /// The residual part `f(x)`; `x` is a vector or a columns-as-samples batch.
    pub fn residual(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        match &self.kind {
            ResidualKind::Mlp(mlp) => mlp.eval(store, x),
            ResidualKind::CrossShift { coeff, p } => {
                let y = tensor::slice_rows(x, *p, x.rows() - *p)?;
                let shifted = tensor::scale(&y, *coeff);
                let zeros = Tensor::zeros(&if x.shape().len() == 2 {
                    vec![x.rows() - *p, x.cols()]
                } else {
                    vec![x.rows() - *p]
                });
                tensor::concat_rows(&shifted, &zeros)
            }
            ResidualKind::Func { f, .. } => {
                if x.shape().len() == 1 {
                    let out = f(x.data());
                    Ok(Tensor::vector(&out))
                } else {
                    let cols: Vec<Vec<f64>> = (0..x.cols()).map(|j| f(&x.column(j))).collect();
                    Tensor::from_columns(&cols)
                }
            }
        }
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let r = self.residual(store, x)?;
        tensor::add(x, &r)
    }

    /// One or more rounds of power iteration per affine layer, then scale
    /// each weight by `min(1, c/sigma)`. Never upscales.
    pub fn normalize(&mut self, store: &mut ParamStore, c: f64, iters: usize) {
        assert!(c > 0.0 && c < 1.0, "target constant must be in (0, 1)");
        let mlp = match &self.kind {
            ResidualKind::Mlp(m) => m.clone(),
            _ => return,
        };
        for (layer, name) in mlp.weight_names().iter().enumerate() {
            let sigma = {
                let w = store.get(name);
                self.refresh_layer(w, layer, iters)
            };
            self.sigma_estimates[layer] = sigma;
            if sigma > c {
                let factor = c / sigma;
                let w = store.get_mut(name);
                for v in w.data_mut().iter_mut() {
                    *v *= factor;
                }
                self.sigma_estimates[layer] = c;
            }
        }
    }

    fn refresh_layer(&mut self, w: &Tensor, layer: usize, iters: usize) -> f64 {
        let (m, n) = (w.rows(), w.cols());
        let u_slot = &mut self.sn_u[layer];
        if u_slot.as_ref().map(|u| u.len()) != Some(m) {
            let mut rng =
                Rng::new(0xb10c_u64 ^ ((layer as u64) << 40) ^ ((m as u64) << 20) ^ n as u64);
            let mut fresh: Vec<f64> = (0..m).map(|_| rng.normal()).collect();
            normalize_in_place(&mut fresh);
            *u_slot = Some(fresh);
        }
        let u = u_slot.as_mut().unwrap();
        let wt = tensor::transpose(w);
        let mut sigma = 0.0;
        for _ in 0..iters.max(1) {
            let mut v = tensor::matmul(&wt, &Tensor::vector(u)).unwrap().data().to_vec();
            if !normalize_in_place(&mut v) {
                return 0.0;
            }
            let wv = tensor::matmul(w, &Tensor::vector(&v)).unwrap();
            sigma = l2(wv.data());
            if sigma == 0.0 {
                return 0.0;
            }
            u.copy_from_slice(wv.data());
            normalize_in_place(u);
        }
        sigma
    }
}

/// Ordered stack of residual blocks of equal width.
pub struct IResNet {
    pub blocks: Vec<ResidualBlock>,
    pub store: ParamStore,
    pub width: usize,
}

impl IResNet {
    pub fn new(width: usize) -> Self {
        IResNet {
            blocks: Vec::new(),
            store: ParamStore::new(),
            width,
        }
    }

    /// Stack of trainable blocks; each residual is an MLP with the given
    /// hidden widths (a single affine map when `hidden` is empty).
    pub fn trainable(
        width: usize,
        blocks: usize,
        hidden: &[usize],
        activation: crate::nn::Activation,
        bias: bool,
        rng: &mut Rng,
    ) -> Self {
        let mut net = IResNet::new(width);
        for b in 0..blocks {
            let mut widths = vec![width];
            widths.extend_from_slice(hidden);
            widths.push(width);
            let mlp = Mlp::new(&format!("b{b}"), &widths, activation, bias);
            mlp.init_params(&mut net.store, rng);
            net.blocks.push(ResidualBlock::mlp(mlp));
        }
        net
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for block in &self.blocks {
            h = block.forward(&self.store, &h)?;
        }
        Ok(h)
    }

    /// Tape-recorded forward pass; only trainable (MLP) blocks participate.
    pub fn forward_on(&self, tape: &mut Tape, binding: &Binding, x: Var) -> Result<Var> {
        let mut h = x;
        for block in &self.blocks {
            let r = match &block.kind {
                ResidualKind::Mlp(mlp) => mlp.forward_on(tape, binding, h)?,
                other => {
                    let label = match other {
                        ResidualKind::CrossShift { coeff, .. } => format!("cross-shift:{coeff}"),
                        ResidualKind::Func { label, .. } => label.clone(),
                        ResidualKind::Mlp(_) => unreachable!(),
                    };
                    return Err(Error::InvalidArgument(format!(
                        "block '{label}' is not trainable"
                    )));
                }
            };
            h = tape.add(h, r)?;
        }
        Ok(h)
    }

    /// Fixed-point inversion, blocks in reverse order. Converges only when
    /// every residual is contractive; a stubborn residual is reported.
    pub fn inverse(&self, y: &Tensor, tol: f64, max_iters: usize) -> Result<Tensor> {
        let mut target = y.clone();
        for block in self.blocks.iter().rev() {
            let mut x = target.clone();
            let mut residual_norm = f64::INFINITY;
            let mut converged = false;
            for _ in 0..max_iters {
                let f = block.residual(&self.store, &x)?;
                let next = tensor::sub(&target, &f)?;
                let fwd = tensor::add(&next, &block.residual(&self.store, &next)?)?;
                residual_norm = tensor::sub(&fwd, &target)?.max_abs();
                let moved = tensor::sub(&next, &x)?.max_abs();
                x = next;
                if residual_norm <= tol {
                    converged = true;
                    break;
                }
                if moved == 0.0 || !x.all_finite() {
                    break;
                }
            }
            if !converged {
                return Err(Error::NoConvergence {
                    residual: residual_norm,
                    iters: max_iters,
                });
            }
            target = x;
        }
        Ok(target)
    }

    /// Power-iteration refresh plus projection for every trainable block.
    pub fn normalize(&mut self, c: f64, iters: usize) {
        let store = &mut self.store;
        for block in &mut self.blocks {
            block.normalize(store, c, iters);
        }
    }

    /// Count order inversions of the end-to-end map on width-1 inputs.
    pub fn check_order_preservation(&self, pairs: &[(f64, f64)]) -> Result<usize> {
        if self.width != 1 {
            return Err(Error::InvalidArgument(
                "order preservation is defined for width-1 networks".into(),
            ));
        }
        let mut violations = 0;
        for &(a, b) in pairs {
            let fa = self.forward(&Tensor::vector(&[a]))?.item();
            let fb = self.forward(&Tensor::vector(&[b]))?.item();
            if (fb - fa).signum() != (b - a).signum() {
                violations += 1;
            }
        }
        Ok(violations)
    }
}

#[cfg(test)]
mod tests;
