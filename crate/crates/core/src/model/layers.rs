//! Parameter bundles shared by the network stages.

use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::kernels::Conv2dSpec;
use crate::params::{Bound, ParamId, ParamStore};
use crate::scalar::Scalar;

/// Convolution followed by GroupNorm (and optionally ReLU).
#[derive(Clone, Debug)]
pub struct ConvNorm {
    pub conv: Conv,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

/// Plain convolution with bias, stride 1, "same" padding.
#[derive(Clone, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub kernel: usize,
}

/// Fully connected layer, weight `[out, in]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Conv {
    pub fn register<F: Scalar>(store: &mut ParamStore<F>, name: &str, cin: usize, cout: usize, kernel: usize) -> Result<Self> {
        let bound = 1.0 / ((cin * kernel * kernel) as f64).sqrt();
        let w = store.add_uniform(&format!("{name}.weight"), &[cout, cin, kernel, kernel], bound)?;
        let b = store.add_const(&format!("{name}.bias"), &[cout], 0.0)?;
        Ok(Conv { w, b, kernel })
    }

    pub fn forward<F: Scalar>(&self, tape: &mut Tape<F>, p: &Bound, x: Var) -> Result<Var> {
        tape.conv2d(x, p.var(self.w), Some(p.var(self.b)), Conv2dSpec::same(self.kernel))
    }
}

impl ConvNorm {
    pub fn register<F: Scalar>(
        store: &mut ParamStore<F>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        groups: usize,
    ) -> Result<Self> {
        let conv = Conv::register(store, name, cin, cout, kernel)?;
        let gamma = store.add_const(&format!("{name}.gn.gamma"), &[cout], 1.0)?;
        let beta = store.add_const(&format!("{name}.gn.beta"), &[cout], 0.0)?;
        Ok(ConvNorm { conv, gamma, beta, groups })
    }

    pub fn forward<F: Scalar>(&self, tape: &mut Tape<F>, p: &Bound, x: Var, eps: F, relu: bool) -> Result<Var> {
        let y = self.conv.forward(tape, p, x)?;
        let y = tape.group_norm(y, self.groups, p.var(self.gamma), p.var(self.beta), eps)?;
        Ok(if relu { tape.relu(y) } else { y })
    }
}

impl Linear {
    pub fn register<F: Scalar>(store: &mut ParamStore<F>, name: &str, input: usize, out: usize, bias: bool) -> Result<Self> {
        let w = store.add_uniform(&format!("{name}.weight"), &[out, input], 1.0 / (input as f64).sqrt())?;
        let b = if bias { Some(store.add_const(&format!("{name}.bias"), &[out], 0.0)?) } else { None };
        Ok(Linear { w, b })
    }

    pub fn forward<F: Scalar>(&self, tape: &mut Tape<F>, p: &Bound, x: Var) -> Result<Var> {
        tape.linear(x, p.var(self.w), self.b.map(|b| p.var(b)))
    }
}

/// LayerNorm affine pair.
#[derive(Clone, Debug)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Norm {
    pub fn register<F: Scalar>(store: &mut ParamStore<F>, name: &str, width: usize) -> Result<Self> {
        let gamma = store.add_const(&format!("{name}.gamma"), &[width], 1.0)?;
        let beta = store.add_const(&format!("{name}.beta"), &[width], 0.0)?;
        Ok(Norm { gamma, beta })
    }

    pub fn forward<F: Scalar>(&self, tape: &mut Tape<F>, p: &Bound, x: Var, eps: F) -> Result<Var> {
        tape.layer_norm(x, p.var(self.gamma), p.var(self.beta), eps)
    }
}
