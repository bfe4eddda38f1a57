//! ODE blocks: a trainable vector field integrated with fixed-step RK4.
//!
//! The forward map integrates from `t0` to `t1`; the inverse map reverses the
//! limits of integration. Gradients come from two independent paths:
//! [`OdeBlock::grad_through_solver`] differentiates the discrete RK4 map
//! exactly on the autodiff tape, and [`OdeBlock::grad_adjoint`] integrates the
//! augmented system `(x, a, dL/dtheta)` backward in time, with `a = dL/dx`,
//! `da/dt = -a^T df/dx`, and `dL/dtheta` accumulating `-a^T df/dtheta`.
//!
//! Fixed-step RK4 keeps every run deterministic and differentiable; adaptive
//! stepping is out of scope.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Binding, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::Mlp;
use crate::tensor::{self, Tensor};

/// How the field network maps states to derivatives.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FieldKind {
    /// `net: q -> q`; evaluation ignores `t`.
    Autonomous,
    /// `net: (q+1) -> q`; evaluation consumes `[state, t]`.
    TimeDependent,
    /// Built by [`autonomize`]: state width `q+1`, the last channel is a
    /// clock with derivative identically 1, and the net reads the full state.
    Lifted,
}

/// Trainable ODE right-hand side.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OdeField {
    pub net: Mlp,
    pub kind: FieldKind,
}

impl OdeField {
    pub fn autonomous(net: Mlp) -> Self {
        assert_eq!(
            net.input_width(),
            net.output_width(),
            "autonomous field needs matching input/output widths"
        );
        OdeField {
            net,
            kind: FieldKind::Autonomous,
        }
    }

    pub fn time_dependent(net: Mlp) -> Self {
        assert_eq!(
            net.input_width(),
            net.output_width() + 1,
            "time-dependent field consumes [state, t]"
        );
        OdeField {
            net,
            kind: FieldKind::TimeDependent,
        }
    }

    pub fn is_time_dependent(&self) -> bool {
        self.kind == FieldKind::TimeDependent
    }

    /// State width seen by the integrator.
    pub fn width(&self) -> usize {
        match self.kind {
            FieldKind::Autonomous => self.net.input_width(),
            FieldKind::TimeDependent => self.net.output_width(),
            FieldKind::Lifted => self.net.input_width(),
        }
    }

    /// Derivative at `state` (a vector, or a columns-as-samples batch).
    pub fn eval(&self, store: &ParamStore, state: &Tensor, t: f64) -> Result<Tensor> {
        match self.kind {
            FieldKind::Autonomous => self.net.eval(store, state),
            FieldKind::TimeDependent => {
                let t_row = constant_row(t, state.cols(), state.shape().len());
                let input = tensor::concat_rows(state, &t_row)?;
                self.net.eval(store, &input)
            }
            FieldKind::Lifted => {
                let d = self.net.eval(store, state)?;
                let ones = constant_row(1.0, state.cols(), state.shape().len());
                tensor::concat_rows(&d, &ones)
            }
        }
    }

    /// Tape-recorded version of [`eval`](Self::eval).
    pub fn forward_on(
        &self,
        tape: &mut Tape,
        binding: &Binding,
        state: Var,
        t: f64,
    ) -> Result<Var> {
        match self.kind {
            FieldKind::Autonomous => self.net.forward_on(tape, binding, state),
            FieldKind::TimeDependent => {
                let cols = tape.value(state).cols();
                let rank = tape.value(state).shape().len();
                let t_row = tape.leaf(constant_row(t, cols, rank));
                let input = tape.concat_rows(state, t_row)?;
                self.net.forward_on(tape, binding, input)
            }
            FieldKind::Lifted => {
                let cols = tape.value(state).cols();
                let rank = tape.value(state).shape().len();
                let d = self.net.forward_on(tape, binding, state)?;
                let ones = tape.leaf(constant_row(1.0, cols, rank));
                tape.concat_rows(d, ones)
            }
        }
    }
}

fn constant_row(v: f64, cols: usize, rank: usize) -> Tensor {
    if rank == 2 {
        Tensor::new(vec![1, cols], vec![v; cols]).unwrap()
    } else {
        Tensor::vector(&[v])
    }
}

fn zero_rows(rows: usize, cols: usize, rank: usize) -> Tensor {
    if rank == 2 {
        Tensor::zeros(&[rows, cols])
    } else {
        Tensor::zeros(&[rows])
    }
}

/// Convert a time-dependent field to an autonomous one by adjoining a clock
/// channel. The caller appends `tau = 0` to initial states (see [`augment`]);
/// the new last component has derivative identically 1.
pub fn autonomize(field: OdeField) -> Result<OdeField> {
    if field.kind != FieldKind::TimeDependent {
        return Err(Error::AlreadyAutonomous);
    }
    Ok(OdeField {
        net: field.net,
        kind: FieldKind::Lifted,
    })
}

/// Pad a state with `d` trailing zeros (rows, for batches).
pub fn augment(x: &Tensor, d: usize) -> Tensor {
    if d == 0 {
        return x.clone();
    }
    let zeros = zero_rows(d, x.cols(), x.shape().len());
    tensor::concat_rows(x, &zeros).expect("padding matches column count")
}

/// Drop the `d` trailing rows added by [`augment`].
pub fn de_augment(x: &Tensor, d: usize) -> Result<Tensor> {
    if d == 0 {
        return Ok(x.clone());
    }
    tensor::slice_rows(x, 0, x.rows() - d)
}

/// States visited by the solver, in time order.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub points: Vec<(f64, Tensor)>,
}

/// Classical RK4 with uniform step `(t1 - t0)/steps`. `t1 < t0` integrates
/// backward. Errors out with the step index if the state leaves finite range.
pub fn rk4<F>(
    mut f: F,
    x0: &Tensor,
    t0: f64,
    t1: f64,
    steps: usize,
    mut record: Option<&mut Vec<(f64, Tensor)>>,
) -> Result<Tensor>
where
    F: FnMut(&Tensor, f64) -> Result<Tensor>,
{
    assert!(steps >= 1, "steps must be at least 1");
    assert!(t1 != t0, "integration window must be nonempty");
    let h = (t1 - t0) / steps as f64;
    let mut x = x0.clone();
    if let Some(tr) = record.as_deref_mut() {
        tr.push((t0, x.clone()));
    }
    for step in 0..steps {
        let t = t0 + step as f64 * h;
        let k1 = f(&x, t)?;
        let k2 = f(&tensor::add(&x, &tensor::scale(&k1, h / 2.0))?, t + h / 2.0)?;
        let k3 = f(&tensor::add(&x, &tensor::scale(&k2, h / 2.0))?, t + h / 2.0)?;
        let k4 = f(&tensor::add(&x, &tensor::scale(&k3, h))?, t + h)?;
        let mut incr = tensor::add(&k1, &tensor::scale(&k2, 2.0))?;
        incr = tensor::add(&incr, &tensor::scale(&k3, 2.0))?;
        incr = tensor::add(&incr, &k4)?;
        x = tensor::add(&x, &tensor::scale(&incr, h / 6.0))?;
        if !x.all_finite() {
            return Err(Error::DivergedAt { step, steps });
        }
        if let Some(tr) = record.as_deref_mut() {
            tr.push((t0 + (step + 1) as f64 * h, x.clone()));
        }
    }
    Ok(x)
}

/// Maps a final state to a scalar loss on the tape. Implementations may bind
/// extra trainable parameters (e.g. a linear readout) through the binding.
pub trait LossTail {
    fn build(&self, tape: &mut Tape, binding: &Binding, x_t: Var) -> Result<Var>;
}

/// Plain squared-error tail against a fixed target.
pub struct MseTail {
    pub target: Tensor,
}

impl LossTail for MseTail {
    fn build(&self, tape: &mut Tape, _binding: &Binding, x_t: Var) -> Result<Var> {
        let target = tape.leaf(self.target.clone());
        tape.mse(x_t, target)
    }
}

/// Two-part tail: the first `head` rows are penalized toward `head_target`,
/// the remaining rows toward zero.
pub struct TwoPartTail {
    pub head: usize,
    pub head_target: Tensor,
}

impl LossTail for TwoPartTail {
    fn build(&self, tape: &mut Tape, _binding: &Binding, x_t: Var) -> Result<Var> {
        let rows = tape.value(x_t).rows();
        let head_rows = tape.slice_rows(x_t, 0, self.head)?;
        let target = tape.leaf(self.head_target.clone());
        let head_loss = tape.mse(head_rows, target)?;
        if rows == self.head {
            return Ok(head_loss);
        }
        let tail_rows = tape.slice_rows(x_t, self.head, rows - self.head)?;
        let zeros = tape.leaf(Tensor::zeros(tape.value(tail_rows).shape()));
        let tail_loss = tape.mse(tail_rows, zeros)?;
        tape.add(head_loss, tail_loss)
    }
}

/// Gradient results for one loss evaluation.
pub struct GradReport {
    pub loss: f64,
    /// dLoss/dx0, same shape as the initial state.
    pub input_grad: Tensor,
}

/// An ODE right-hand side plus integration settings defining the flow map.
pub struct OdeBlock {
    pub field: OdeField,
    pub t0: f64,
    pub t1: f64,
    pub steps: usize,
    pub store: ParamStore,
}

impl OdeBlock {
    pub fn new(field: OdeField, t0: f64, t1: f64, steps: usize, store: ParamStore) -> Self {
        assert!(steps >= 1, "steps must be at least 1");
        assert!(t1 != t0, "integration window must be nonempty");
        OdeBlock {
            field,
            t0,
            t1,
            steps,
            store,
        }
    }

    pub fn width(&self) -> usize {
        self.field.width()
    }

    fn check_width(&self, x: &Tensor) -> Result<()> {
        if x.rows() != self.width() {
            return Err(Error::ShapeMismatch {
                op: "integrate",
                lhs: vec![self.width()],
                rhs: x.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Flow map from `t0` to `t1`.
    pub fn integrate(&self, x0: &Tensor) -> Result<Tensor> {
        self.check_width(x0)?;
        rk4(
            |x, t| self.field.eval(&self.store, x, t),
            x0,
            self.t0,
            self.t1,
            self.steps,
            None,
        )
    }

    pub fn integrate_with_trajectory(&self, x0: &Tensor) -> Result<(Tensor, Trajectory)> {
        self.check_width(x0)?;
        let mut points = Vec::with_capacity(self.steps + 1);
        let x = rk4(
            |x, t| self.field.eval(&self.store, x, t),
            x0,
            self.t0,
            self.t1,
            self.steps,
            Some(&mut points),
        )?;
        Ok((x, Trajectory { points }))
    }

    /// Inverse flow map: integrates from `t1` back to `t0`.
    pub fn inverse(&self, x_t: &Tensor) -> Result<Tensor> {
        self.check_width(x_t)?;
        rk4(
            |x, t| self.field.eval(&self.store, x, t),
            x_t,
            self.t1,
            self.t0,
            self.steps,
            None,
        )
    }

    /// RK4 unrolled onto a tape, for exact gradients of the discrete map.
    pub fn integrate_on_tape(
        &self,
        tape: &mut Tape,
        binding: &Binding,
        x0: Var,
    ) -> Result<Var> {
        let h = (self.t1 - self.t0) / self.steps as f64;
        let mut x = x0;
        for step in 0..self.steps {
            let t = self.t0 + step as f64 * h;
            let k1 = self.field.forward_on(tape, binding, x, t)?;
            let half1 = tape.scale(k1, h / 2.0);
            let x2 = tape.add(x, half1)?;
            let k2 = self.field.forward_on(tape, binding, x2, t + h / 2.0)?;
            let half2 = tape.scale(k2, h / 2.0);
            let x3 = tape.add(x, half2)?;
            let k3 = self.field.forward_on(tape, binding, x3, t + h / 2.0)?;
            let full = tape.scale(k3, h);
            let x4 = tape.add(x, full)?;
            let k4 = self.field.forward_on(tape, binding, x4, t + h)?;
            let k2x2 = tape.scale(k2, 2.0);
            let k3x2 = tape.scale(k3, 2.0);
            let mut incr = tape.add(k1, k2x2)?;
            incr = tape.add(incr, k3x2)?;
            incr = tape.add(incr, k4)?;
            let scaled = tape.scale(incr, h / 6.0);
            x = tape.add(x, scaled)?;
            if !tape.value(x).all_finite() {
                return Err(Error::DivergedAt {
                    step,
                    steps: self.steps,
                });
            }
        }
        Ok(x)
    }

    /// Backpropagation through the unrolled solver. Accumulates parameter
    /// gradients into the store and returns the loss and dLoss/dx0.
    pub fn grad_through_solver(&mut self, x0: &Tensor, tail: &dyn LossTail) -> Result<GradReport> {
        self.check_width(x0)?;
        let mut tape = Tape::new();
        let binding = tape.bind(&self.store);
        let x0v = tape.leaf(x0.clone());
        let x_t = self.integrate_on_tape(&mut tape, &binding, x0v)?;
        let loss = tail.build(&mut tape, &binding, x_t)?;
        let grads = tape.backward(loss)?;
        self.store.accumulate(&binding, &grads);
        let input_grad = grads
            .wrt(x0v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(x0.shape()));
        Ok(GradReport {
            loss: tape.value(loss).item(),
            input_grad,
        })
    }

    /// Adjoint gradients: reverse-time RK4 on the augmented state
    /// `(x, a, dL/dtheta)` with vector-Jacobian products from the tape.
    /// Same contract as [`grad_through_solver`](Self::grad_through_solver).
    pub fn grad_adjoint(&mut self, x0: &Tensor, tail: &dyn LossTail) -> Result<GradReport> {
        self.check_width(x0)?;
        let x_t = self.integrate(x0)?;

        // Terminal condition: a(t1) = dL/dx_T, plus any gradients the tail
        // itself contributes (e.g. a trainable readout).
        let mut tape = Tape::new();
        let binding = tape.bind(&self.store);
        let x_t_var = tape.leaf(x_t.clone());
        let loss = tail.build(&mut tape, &binding, x_t_var)?;
        let loss_value = tape.value(loss).item();
        let grads = tape.backward(loss)?;
        self.store.accumulate(&binding, &grads);
        let a_t = grads
            .wrt(x_t_var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(x_t.shape()));

        let state_len = x_t.len();
        let param_len = self.store.scalar_count();
        let state_shape = x_t.shape().to_vec();

        let mut aug = Vec::with_capacity(2 * state_len + param_len);
        aug.extend_from_slice(x_t.data());
        aug.extend_from_slice(a_t.data());
        aug.extend(std::iter::repeat(0.0).take(param_len));
        let aug0 = Tensor::vector(&aug);

        let field = &self.field;
        let store = &self.store;
        let rhs = |aug_state: &Tensor, t: f64| -> Result<Tensor> {
            let flat = aug_state.data();
            let x = Tensor::new(state_shape.clone(), flat[..state_len].to_vec())?;
            let a = Tensor::new(state_shape.clone(), flat[state_len..2 * state_len].to_vec())?;

            let mut vjp_tape = Tape::new();
            let vjp_binding = vjp_tape.bind(store);
            let x_var = vjp_tape.leaf(x);
            let out = field.forward_on(&mut vjp_tape, &vjp_binding, x_var, t)?;
            let dx = vjp_tape.value(out).clone();
            let a_var = vjp_tape.leaf(a);
            let scalar = vjp_tape.dot(a_var, out)?;
            let vjp = vjp_tape.backward(scalar)?;

            let mut d = Vec::with_capacity(2 * state_len + param_len);
            d.extend_from_slice(dx.data());
            match vjp.wrt(x_var) {
                Some(g) => d.extend(g.data().iter().map(|v| -v)),
                None => d.extend(std::iter::repeat(0.0).take(state_len)),
            }
            for var in vjp_binding.vars() {
                match vjp.wrt(*var) {
                    Some(g) => d.extend(g.data().iter().map(|v| -v)),
                    None => {
                        let n = vjp_tape.value(*var).len();
                        d.extend(std::iter::repeat(0.0).take(n));
                    }
                }
            }
            Ok(Tensor::vector(&d))
        };

        let aug_final = rk4(rhs, &aug0, self.t1, self.t0, self.steps, None)?;
        let flat = aug_final.data();
        let input_grad = Tensor::new(state_shape, flat[state_len..2 * state_len].to_vec())?;
        self.store.add_grads_flat(&flat[2 * state_len..]);

        Ok(GradReport {
            loss: loss_value,
            input_grad,
        })
    }
}
