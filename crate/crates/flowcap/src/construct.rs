//! Exact constructions that realize an invertible map in doubled dimension.
//!
//! Given an invertible map `h` on `R^p`, three constructions are provided:
//!
//! - [`EmbeddingOracle`]: the analytic path bundle
//!   `y(x, tau) = [x + rise(tau) * delta_x, delta_x * lobe(tau)]` with
//!   `delta_x = h(x) - x`, whose induced vector field carries `[x, 0^p]` to
//!   `[h(x), 0^p]` over unit time in `R^{2p}`. The field is a genuine
//!   function of `(state, t)`: the path anchor is recovered from the state
//!   by a small Gauss-Newton solve, never carried as side information.
//! - [`build_iresnet_for`]: an explicit residual stack of `floor(k + 4)`
//!   layers (for `Lip(h) <= k`) mapping `[x, 0^p]` to `[h(x), 0^p]` exactly:
//!   one layer writes the per-step displacement into the trailing block, the
//!   middle layers march the leading block in equal steps, and the last
//!   layer erases the trailing block.
//! - [`cap_field`]: a zero-padded field whose unit-time flow computes an
//!   arbitrary (not necessarily invertible) map, recovered by a fixed linear
//!   readout of the trailing coordinates.
//!
//! A small registry of named maps and the separator-crossing counterexample
//! family round out the module.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::iresnet::{IResNet, ResidualBlock};
use crate::odenet::rk4;
use crate::rng::Rng;
use crate::tensor::Tensor;

pub type PointFn = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;
pub type RegionFn = Arc<dyn Fn(&[f64]) -> bool + Send + Sync>;

/// A user-supplied invertible map with its inverse, a Lipschitz bound, and a
/// sampling domain.
#[derive(Clone)]
pub struct Homeomorphism {
    pub name: String,
    pub dim: usize,
    pub lipschitz: f64,
    /// Per-dimension bounds of the sampling box.
    pub domain: Vec<(f64, f64)>,
    forward: PointFn,
    inverse: Option<PointFn>,
    /// Optional restriction of the sampling box (e.g. an annulus).
    membership: Option<RegionFn>,
}

impl Homeomorphism {
    pub fn new(
        name: &str,
        dim: usize,
        lipschitz: f64,
        domain: Vec<(f64, f64)>,
        forward: PointFn,
        inverse: Option<PointFn>,
    ) -> Self {
        assert_eq!(domain.len(), dim);
        Homeomorphism {
            name: name.to_string(),
            dim,
            lipschitz,
            domain,
            forward,
            inverse,
            membership: None,
        }
    }

    pub fn with_membership(mut self, membership: RegionFn) -> Self {
        self.membership = Some(membership);
        self
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.dim);
        (self.forward)(x)
    }

    pub fn has_inverse(&self) -> bool {
        self.inverse.is_some()
    }

    pub fn apply_inverse(&self, y: &[f64]) -> Result<Vec<f64>> {
        match &self.inverse {
            Some(inv) => Ok(inv(y)),
            None => Err(Error::MissingInverse(self.name.clone())),
        }
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        let in_box = x
            .iter()
            .zip(&self.domain)
            .all(|(v, (lo, hi))| *v >= *lo && *v <= *hi);
        in_box && self.membership.as_ref().map_or(true, |m| m(x))
    }

    /// Draw a point from the domain box, rejecting outside the membership
    /// region.
    pub fn sample(&self, rng: &mut Rng) -> Vec<f64> {
        loop {
            let x: Vec<f64> = self.domain.iter().map(|(lo, hi)| rng.range(*lo, *hi)).collect();
            if self.membership.as_ref().map_or(true, |m| m(&x)) {
                return x;
            }
        }
    }
}

fn smoothstep(u: f64) -> f64 {
    let u = u.clamp(0.0, 1.0);
    u * u * (3.0 - 2.0 * u)
}

/// Radial profile of the annulus swap: `r -> 2 - r` on `[0.25, 1.75]`,
/// blended back to the identity outside so the formula is defined on the
/// whole plane. Only the annulus is part of the map's domain.
fn radial_swap_profile(r: f64) -> f64 {
    if r >= 2.5 {
        r
    } else if r > 1.75 {
        let s = smoothstep((r - 1.75) / 0.75);
        (1.0 - s) * (2.0 - r) + s * r
    } else if r >= 0.25 {
        2.0 - r
    } else {
        let s = smoothstep(r / 0.25);
        (1.0 - s) * r + s * (2.0 - r)
    }
}

fn radial_swap_point(x: &[f64]) -> Vec<f64> {
    let r = (x[0] * x[0] + x[1] * x[1]).sqrt();
    if r == 0.0 {
        return vec![0.0, 0.0];
    }
    let rho = radial_swap_profile(r);
    vec![x[0] * rho / r, x[1] * rho / r]
}

/// Named maps addressable from the command line.
pub fn registry() -> Vec<Homeomorphism> {
    let negation = Homeomorphism::new(
        "negation",
        1,
        1.0,
        vec![(-10.0, 10.0)],
        Arc::new(|x: &[f64]| vec![-x[0]]),
        Some(Arc::new(|y: &[f64]| vec![-y[0]])),
    );
    let identity = Homeomorphism::new(
        "identity",
        1,
        1.0,
        vec![(-10.0, 10.0)],
        Arc::new(|x: &[f64]| x.to_vec()),
        Some(Arc::new(|y: &[f64]| y.to_vec())),
    );
    let swap2d = Homeomorphism::new(
        "swap2d",
        2,
        1.0,
        vec![(-3.0, 3.0), (-3.0, 3.0)],
        Arc::new(|x: &[f64]| vec![x[1], x[0]]),
        Some(Arc::new(|y: &[f64]| vec![y[1], y[0]])),
    );
    // The swap r -> 2 - r fixes the unit circle pointwise and exchanges the
    // inner and outer parts of the annulus 0.25 <= |x| <= 1.75, which the
    // profile maps onto itself. Tangential stretch peaks at the inner rim:
    // (2 - r)/r = 7 at r = 0.25.
    let radial = Homeomorphism::new(
        "radial-swap",
        2,
        7.0,
        vec![(-1.75, 1.75), (-1.75, 1.75)],
        Arc::new(radial_swap_point),
        Some(Arc::new(radial_swap_point)),
    )
    .with_membership(Arc::new(|x: &[f64]| {
        let r = (x[0] * x[0] + x[1] * x[1]).sqrt();
        (0.25..=1.75).contains(&r)
    }));
    vec![negation, identity, swap2d, radial]
}

pub fn lookup(name: &str) -> Result<Homeomorphism> {
    let all = registry();
    let available = all
        .iter()
        .map(|h| h.name.as_str())
        .collect::<Vec<_>>()
        .join(", ");
    all.into_iter()
        .find(|h| h.name == name)
        .ok_or(Error::UnknownHomeomorphism {
            name: name.to_string(),
            available,
        })
}

// -- Path-bundle profiles ---------------------------------------------------

/// Transfer profile: 0 at integer boundaries' start, 1 at the end of a unit
/// interval, with vanishing derivative at both.
pub fn rise(tau: f64) -> f64 {
    (1.0 - (std::f64::consts::PI * tau).cos()) / 2.0
}

pub fn rise_deriv(tau: f64) -> f64 {
    (std::f64::consts::PI / 2.0) * (std::f64::consts::PI * tau).sin()
}

/// Excursion profile: zero exactly at integers, positive in between, with
/// vanishing derivative at integers.
pub fn lobe(tau: f64) -> f64 {
    1.0 - (2.0 * std::f64::consts::PI * tau).cos()
}

pub fn lobe_deriv(tau: f64) -> f64 {
    2.0 * std::f64::consts::PI * (2.0 * std::f64::consts::PI * tau).sin()
}

/// Numerical behavior knobs for the recovered vector field.
#[derive(Clone, Copy, Debug)]
pub struct OracleSettings {
    /// Accept states within this distance of the path bundle, scaled by
    /// `1 + max|state|`. RK4 stage points sit slightly off the bundle (by
    /// roughly `h^2/8 * |y''|`), so this must stay well above solver drift.
    pub bundle_tol: f64,
    /// Relative disagreement allowed between the displacement recovered from
    /// the trailing block and the one recomputed at the recovered anchor.
    pub delta_tol: f64,
    /// Trailing-block route is only consulted when `lobe(t)` exceeds this.
    pub lobe_floor: f64,
    /// Gauss-Newton iteration cap.
    pub max_newton_iters: usize,
}

impl Default for OracleSettings {
    fn default() -> Self {
        OracleSettings {
            bundle_tol: 1e-3,
            delta_tol: 1e-2,
            lobe_floor: 0.1,
            max_newton_iters: 25,
        }
    }
}

/// The analytic doubled-dimension embedding of a homeomorphism.
#[derive(Clone)]
pub struct EmbeddingOracle {
    pub map: Homeomorphism,
    pub settings: OracleSettings,
}

impl EmbeddingOracle {
    pub fn new(map: Homeomorphism) -> Self {
        EmbeddingOracle {
            map,
            settings: OracleSettings::default(),
        }
    }

    /// Closed-form path point `y(x, tau)`. For `tau` outside `[0, 1]` the
    /// path continues through iterates of the map; negative `tau` needs the
    /// inverse.
    pub fn embed_path(&self, x: &[f64], tau: f64) -> Result<Vec<f64>> {
        let k = tau.floor() as i64;
        let frac = tau - tau.floor();
        if k < 0 && !self.map.has_inverse() {
            return Err(Error::MissingInverse(self.map.name.clone()));
        }
        let mut base = x.to_vec();
        if k >= 0 {
            for _ in 0..k {
                base = self.map.apply(&base);
            }
        } else {
            for _ in 0..(-k) {
                base = self.map.apply_inverse(&base)?;
            }
        }
        let image = self.map.apply(&base);
        let p = self.map.dim;
        let mut out = Vec::with_capacity(2 * p);
        for i in 0..p {
            let delta = image[i] - base[i];
            out.push(base[i] + rise(frac) * delta);
        }
        for i in 0..p {
            let delta = image[i] - base[i];
            out.push(delta * lobe(frac));
        }
        Ok(out)
    }

    /// Recover the path anchor `x` with `y(x, t) ~ state`, returning the
    /// anchor and the remaining residual (infinity norm, state units).
    pub fn recover_anchor(&self, state: &[f64], t: f64) -> Result<(Vec<f64>, f64)> {
        let p = self.map.dim;
        if state.len() != 2 * p {
            return Err(Error::ShapeMismatch {
                op: "recover_anchor",
                lhs: vec![2 * p],
                rhs: vec![state.len()],
            });
        }
        let (u, v) = state.split_at(p);
        let f_t = rise(t);
        let g_t = lobe(t);

        let mut candidates: Vec<Vec<f64>> = Vec::new();
        if g_t.abs() >= 1e-3 {
            let start: Vec<f64> = (0..p).map(|i| u[i] - f_t * v[i] / g_t).collect();
            candidates.push(start);
        }
        candidates.push(u.to_vec());
        if let Ok(hu) = self.map.apply_inverse(u) {
            candidates.push(hu);
        }

        let residual = |x: &[f64]| -> Vec<f64> {
            let hx = self.map.apply(x);
            let mut r = Vec::with_capacity(2 * p);
            for i in 0..p {
                r.push(x[i] + f_t * (hx[i] - x[i]) - u[i]);
            }
            for i in 0..p {
                r.push(g_t * (hx[i] - x[i]) - v[i]);
            }
            r
        };
        let inf = |r: &[f64]| r.iter().fold(0.0f64, |m, v| m.max(v.abs()));

        let mut best: Option<(Vec<f64>, f64)> = None;
        for start in candidates {
            let mut x = start;
            for _ in 0..self.settings.max_newton_iters {
                let r = residual(&x);
                // Jacobian of the residual: [I + f*(Dh - I); g*(Dh - I)].
                let dh = self.jacobian_fd(&x);
                let mut jac = vec![vec![0.0; p]; 2 * p];
                for i in 0..p {
                    for j in 0..p {
                        let dh_m_i = dh[i][j] - if i == j { 1.0 } else { 0.0 };
                        jac[i][j] = if i == j { 1.0 } else { 0.0 } + f_t * dh_m_i;
                        jac[p + i][j] = g_t * dh_m_i;
                    }
                }
                // Normal equations (p <= 2 in practice).
                let mut jtj = vec![vec![0.0; p]; p];
                let mut jtr = vec![0.0; p];
                for a in 0..p {
                    for b in 0..p {
                        jtj[a][b] = (0..2 * p).map(|i| jac[i][a] * jac[i][b]).sum();
                    }
                    jtr[a] = (0..2 * p).map(|i| jac[i][a] * r[i]).sum();
                }
                let delta = match solve_small(&mut jtj, &mut jtr) {
                    Some(d) => d,
                    None => break,
                };
                let step_norm = inf(&delta);
                for j in 0..p {
                    x[j] -= delta[j];
                }
                if step_norm <= 1e-13 * (1.0 + inf(&x)) {
                    break;
                }
            }
            let res = inf(&residual(&x));
            if best.as_ref().map_or(true, |(_, b)| res < *b) {
                best = Some((x, res));
            }
        }
        Ok(best.expect("at least one candidate start"))
    }

    fn jacobian_fd(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let p = self.map.dim;
        let step = 1e-6;
        let mut jac = vec![vec![0.0; p]; p];
        let mut probe = x.to_vec();
        for j in 0..p {
            probe[j] = x[j] + step;
            let plus = self.map.apply(&probe);
            probe[j] = x[j] - step;
            let minus = self.map.apply(&probe);
            probe[j] = x[j];
            for i in 0..p {
                jac[i][j] = (plus[i] - minus[i]) / (2.0 * step);
            }
        }
        jac
    }

    /// The induced vector field at `(state, t)`: zero at integer times,
    /// otherwise `[rise'(t) * delta, lobe'(t) * delta]` with `delta`
    /// recovered from the state. States that no path passes near are
    /// rejected; the field is defined on the trajectory bundle only.
    pub fn field(&self, state: &[f64], t: f64) -> Result<Vec<f64>> {
        let p = self.map.dim;
        if (t - t.round()).abs() <= 1e-9 {
            return Ok(vec![0.0; 2 * p]);
        }
        let (anchor, residual) = self.recover_anchor(state, t)?;
        let scale = 1.0 + state.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if residual > self.settings.bundle_tol * scale {
            return Err(Error::OffBundle(format!(
                "residual {residual:.3e} at t={t:.6} exceeds {:.3e}",
                self.settings.bundle_tol * scale
            )));
        }
        let hx = self.map.apply(&anchor);
        let delta: Vec<f64> = (0..p).map(|i| hx[i] - anchor[i]).collect();

        // Cross-check the trailing-block route where it is well conditioned.
        let g_t = lobe(t);
        if g_t.abs() >= self.settings.lobe_floor {
            let v = &state[p..];
            let delta_norm = delta.iter().fold(0.0f64, |m, d| m.max(d.abs())).max(1.0);
            for i in 0..p {
                let via_trailing = v[i] / g_t;
                if (via_trailing - delta[i]).abs() > self.settings.delta_tol * delta_norm {
                    return Err(Error::OffBundle(format!(
                        "displacement routes disagree at t={t:.6}: {via_trailing:.6} vs {:.6}",
                        delta[i]
                    )));
                }
            }
        }

        let fr = rise_deriv(t);
        let gr = lobe_deriv(t);
        let mut out = Vec::with_capacity(2 * p);
        for d in &delta {
            out.push(fr * d);
        }
        for d in &delta {
            out.push(gr * d);
        }
        Ok(out)
    }

    /// RK4 over the recovered field from `[x, 0^p]` for unit time.
    pub fn integrate(&self, x: &[f64], steps: usize) -> Result<Vec<f64>> {
        let p = self.map.dim;
        let mut init = x.to_vec();
        init.extend(std::iter::repeat(0.0).take(p));
        let out = rk4(
            |s, t| Ok(Tensor::vector(&self.field(s.data(), t)?)),
            &Tensor::vector(&init),
            0.0,
            1.0,
            steps,
            None,
        )?;
        Ok(out.data().to_vec())
    }

    /// As [`integrate`](Self::integrate), also reporting the largest
    /// deviation of the numerical states from the closed-form path.
    pub fn integrate_with_path_error(&self, x: &[f64], steps: usize) -> Result<(Vec<f64>, f64)> {
        let p = self.map.dim;
        let mut init = x.to_vec();
        init.extend(std::iter::repeat(0.0).take(p));
        let mut points = Vec::with_capacity(steps + 1);
        let out = rk4(
            |s, t| Ok(Tensor::vector(&self.field(s.data(), t)?)),
            &Tensor::vector(&init),
            0.0,
            1.0,
            steps,
            Some(&mut points),
        )?;
        let mut worst = 0.0f64;
        for (t, state) in &points {
            let exact = self.embed_path(x, *t)?;
            for (a, b) in state.data().iter().zip(&exact) {
                worst = worst.max((a - b).abs());
            }
        }
        Ok((out.data().to_vec(), worst))
    }
}

/// Gaussian elimination with partial pivoting for tiny systems.
fn solve_small(a: &mut [Vec<f64>], b: &mut [f64]) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| {
            a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap()
        })?;
        if a[pivot][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in (col + 1)..n {
            let factor = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= factor * a[col][k];
            }
            b[row] -= factor * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut acc = b[row];
        for k in (row + 1)..n {
            acc -= a[row][k] * x[k];
        }
        x[row] = acc / a[row][row];
    }
    Some(x)
}

// -- Explicit residual-layer recipe ------------------------------------------

/// Step-count policy for the layer recipe.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerBudget {
    /// `T = floor(k + 1)` middle steps; `floor(k + 4)` layers total. The
    /// displacement residual can touch a Lipschitz ratio of exactly 1 for
    /// boundary maps (e.g. negation with k = 1).
    Standard,
    /// `T = floor(k) + 2`: one extra step, keeping every residual strictly
    /// contractive.
    StrictMargin,
}

impl LayerBudget {
    pub fn middle_steps(&self, k: f64) -> usize {
        match self {
            LayerBudget::Standard => (k + 1.0).floor() as usize,
            LayerBudget::StrictMargin => k.floor() as usize + 2,
        }
    }
}

/// Build the explicit width-`2p` residual stack for `h` with `Lip(h) <= k`:
/// a displacement writer, `T + 1` equal-step movers, and a displacement
/// eraser. Maps `[x, 0^p]` to `[h(x), 0^p]` exactly.
pub fn build_iresnet_for(h: &Homeomorphism, k: f64, budget: LayerBudget) -> Result<IResNet> {
    if !h.has_inverse() {
        return Err(Error::MissingInverse(h.name.clone()));
    }
    if !k.is_finite() || k <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "Lipschitz bound must be positive and finite, got {k}"
        )));
    }
    let t_steps = budget.middle_steps(k);
    let p = h.dim;
    let mut net = IResNet::new(2 * p);

    let writer_map = h.clone();
    let t_f = t_steps as f64;
    net.blocks.push(ResidualBlock::func(
        "displacement-writer",
        Arc::new(move |state: &[f64]| {
            let x = &state[..p];
            let hx = writer_map.apply(x);
            let mut out = vec![0.0; 2 * p];
            for i in 0..p {
                out[p + i] = (hx[i] - x[i]) / t_f;
            }
            out
        }),
    ));

    for _ in 0..=t_steps {
        net.blocks
            .push(ResidualBlock::cross_shift(t_f / (t_f + 1.0), p));
    }

    let eraser_map = h.clone();
    net.blocks.push(ResidualBlock::func(
        "displacement-eraser",
        Arc::new(move |state: &[f64]| {
            let w = &state[..p];
            let pre = eraser_map
                .apply_inverse(w)
                .expect("eraser layer requires an inverse");
            let mut out = vec![0.0; 2 * p];
            for i in 0..p {
                out[p + i] = (pre[i] - w[i]) / t_f;
            }
            out
        }),
    ));

    Ok(net)
}

/// Per-layer result of the sampled Lipschitz audit.
pub struct LayerAudit {
    pub label: String,
    pub max_ratio: f64,
    /// Layer-input pair realizing the worst ratio.
    pub witness: Option<(Vec<f64>, Vec<f64>)>,
    /// Operator norm known in closed form (fixed linear layers).
    pub exact_linear_norm: Option<f64>,
}

pub struct AuditReport {
    pub layers: Vec<LayerAudit>,
}

impl AuditReport {
    pub fn worst_ratio(&self) -> f64 {
        self.layers.iter().fold(0.0, |m, l| m.max(l.max_ratio))
    }
}

/// Sample domain pairs, push them through the stack, and measure each
/// layer's residual Lipschitz ratio (Euclidean) at its actual inputs.
pub fn residual_lipschitz_audit(
    net: &IResNet,
    h: &Homeomorphism,
    pairs: usize,
    rng: &mut Rng,
) -> Result<AuditReport> {
    let p = h.dim;
    let mut audits: Vec<LayerAudit> = net
        .blocks
        .iter()
        .map(|b| LayerAudit {
            label: b.label(),
            max_ratio: 0.0,
            witness: None,
            exact_linear_norm: match &b.kind {
                crate::iresnet::ResidualKind::CrossShift { coeff, .. } => Some(coeff.abs()),
                _ => None,
            },
        })
        .collect();

    let l2 = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    for _ in 0..pairs {
        let xa = h.sample(rng);
        let xb = h.sample(rng);
        let mut a: Vec<f64> = xa.iter().chain(std::iter::repeat(&0.0).take(p)).cloned().collect();
        let mut b: Vec<f64> = xb.iter().chain(std::iter::repeat(&0.0).take(p)).cloned().collect();
        for (block, audit) in net.blocks.iter().zip(audits.iter_mut()) {
            let ra = block.residual(&net.store, &Tensor::vector(&a))?;
            let rb = block.residual(&net.store, &Tensor::vector(&b))?;
            let input_dist = l2(&a
                .iter()
                .zip(&b)
                .map(|(x, y)| x - y)
                .collect::<Vec<f64>>());
            if input_dist > 1e-12 {
                let out_dist = l2(&ra
                    .data()
                    .iter()
                    .zip(rb.data())
                    .map(|(x, y)| x - y)
                    .collect::<Vec<f64>>());
                let ratio = out_dist / input_dist;
                if ratio > audit.max_ratio {
                    audit.max_ratio = ratio;
                    audit.witness = Some((a.clone(), b.clone()));
                }
            }
            for (ai, ri) in a.iter_mut().zip(ra.data()) {
                *ai += ri;
            }
            for (bi, ri) in b.iter_mut().zip(rb.data()) {
                *bi += ri;
            }
        }
    }
    Ok(AuditReport { layers: audits })
}

// -- Linear-capped field ------------------------------------------------------

/// Width-`(p + r)` field `[0^p, F(state[..p])]`. The leading block never
/// moves, so every RK4 stage sees the same derivative and the unit-time flow
/// from `[x, 0^r]` lands on `[x, F(x)]` up to rounding.
#[derive(Clone)]
pub struct AnalyticCapField {
    pub p: usize,
    pub r: usize,
    func: PointFn,
}

/// Wrap an arbitrary map `F: R^p -> R^r` as a zero-padded field.
pub fn cap_field(func: PointFn, p: usize, r: usize) -> AnalyticCapField {
    AnalyticCapField { p, r, func }
}

impl AnalyticCapField {
    pub fn width(&self) -> usize {
        self.p + self.r
    }

    pub fn derivative(&self, state: &[f64], _t: f64) -> Vec<f64> {
        let head = &state[..self.p];
        let tail = (self.func)(head);
        let mut out = vec![0.0; self.p];
        out.extend(tail);
        out
    }

    /// Integrate from `[x, 0^r]` over unit time.
    pub fn integrate(&self, x: &[f64], steps: usize) -> Result<Vec<f64>> {
        let mut init = x.to_vec();
        init.extend(std::iter::repeat(0.0).take(self.r));
        let out = rk4(
            |s, t| Ok(Tensor::vector(&self.derivative(s.data(), t))),
            &Tensor::vector(&init),
            0.0,
            1.0,
            steps,
            None,
        )?;
        Ok(out.data().to_vec())
    }

    /// The fixed readout `[0 | I]` extracting the trailing `r` coordinates.
    pub fn extraction_cap(&self) -> Tensor {
        extraction_cap(self.p, self.r)
    }
}

/// Sparse linear readout that returns the last `r` of `p + r` coordinates.
pub fn extraction_cap(p: usize, r: usize) -> Tensor {
    let mut data = vec![0.0; r * (p + r)];
    for i in 0..r {
        data[i * (p + r) + p + i] = 1.0;
    }
    Tensor::new(vec![r, p + r], data).unwrap()
}

// -- Separator-crossing counterexamples --------------------------------------

/// A map that fixes a separator pointwise while exchanging the regions it
/// separates; no flow on the same space can realize it.
#[derive(Clone)]
pub struct CounterexampleMap {
    pub name: String,
    pub separator: String,
    pub map: Homeomorphism,
    separator_sampler: Arc<dyn Fn(&mut Rng) -> Vec<f64> + Send + Sync>,
    region_label: Arc<dyn Fn(&[f64]) -> usize + Send + Sync>,
}

impl CounterexampleMap {
    pub fn sample_separator(&self, rng: &mut Rng) -> Vec<f64> {
        (self.separator_sampler)(rng)
    }

    pub fn region_of(&self, x: &[f64]) -> usize {
        (self.region_label)(x)
    }

    /// Check the defining properties on sampled points: the separator is
    /// fixed pointwise, and at least one sample crosses regions.
    pub fn verify(&self, samples: usize, rng: &mut Rng) -> Result<()> {
        for _ in 0..samples {
            let z = self.sample_separator(rng);
            let hz = self.map.apply(&z);
            let drift = z
                .iter()
                .zip(&hz)
                .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            if drift > 1e-9 {
                return Err(Error::InvalidArgument(format!(
                    "{}: separator point moved by {drift:e}",
                    self.name
                )));
            }
        }
        let mut crossed = false;
        for _ in 0..samples {
            let x = self.map.sample(rng);
            let hx = self.map.apply(&x);
            if self.region_of(&x) != self.region_of(&hx) {
                crossed = true;
                break;
            }
        }
        if !crossed {
            return Err(Error::InvalidArgument(format!(
                "{}: no sampled point crossed regions",
                self.name
            )));
        }
        Ok(())
    }
}

/// The built-in counterexample family: 1D negation about the origin and the
/// 2D annulus swap about the unit circle.
pub fn counterexample_suite() -> Vec<CounterexampleMap> {
    let negation = CounterexampleMap {
        name: "negation".to_string(),
        separator: "the origin {0}".to_string(),
        map: lookup("negation").unwrap(),
        separator_sampler: Arc::new(|_rng: &mut Rng| vec![0.0]),
        region_label: Arc::new(|x: &[f64]| usize::from(x[0] > 0.0)),
    };
    let radial = CounterexampleMap {
        name: "radial-swap".to_string(),
        separator: "the unit circle".to_string(),
        map: lookup("radial-swap").unwrap(),
        separator_sampler: Arc::new(|rng: &mut Rng| {
            let theta = rng.range(0.0, 2.0 * std::f64::consts::PI);
            vec![theta.cos(), theta.sin()]
        }),
        region_label: Arc::new(|x: &[f64]| {
            usize::from((x[0] * x[0] + x[1] * x[1]).sqrt() > 1.0)
        }),
    };
    vec![negation, radial]
}

pub fn lookup_counterexample(name: &str) -> Result<CounterexampleMap> {
    let suite = counterexample_suite();
    let available = suite
        .iter()
        .map(|c| c.name.as_str())
        .collect::<Vec<_>>()
        .join(", ");
    suite
        .into_iter()
        .find(|c| c.name == name)
        .ok_or(Error::UnknownHomeomorphism {
            name: name.to_string(),
            available,
        })
}
