//! Single-layer LSTM over `[R, L, In]` sequences, zero initial state, gate order `i, f, g, o`.

use crate::error::{CaimError, Result};
use crate::kernels::activation::{sigmoid, tanh};
use crate::scalar::{gemm, MatRef, Scalar};
use crate::tensor::Tensor;

/// Activated gates and cell states kept for backpropagation through time.
#[derive(Clone, Debug)]
pub struct LstmCache<F> {
    /// `[R, L, 4H]`, post-nonlinearity.
    pub gates: Vec<F>,
    /// `[R, L, H]`
    pub cells: Vec<F>,
    /// `tanh` of `cells`.
    pub cells_tanh: Vec<F>,
}

pub fn lstm_forward<F: Scalar>(
    x: &Tensor<F>,
    w_ih: &Tensor<F>,
    w_hh: &Tensor<F>,
    bias: &Tensor<F>,
) -> Result<(Tensor<F>, LstmCache<F>)> {
    if x.rank() != 3 {
        return Err(CaimError::Shape(format!("lstm expects [R, L, In], got {:?}", x.shape())));
    }
    let (r, l, input) = (x.dim(0), x.dim(1), x.dim(2));
    let hid = w_hh.dim(1);
    let g4 = 4 * hid;
    if w_ih.shape() != [g4, input] || w_hh.shape() != [g4, hid] || bias.shape() != [g4] {
        return Err(CaimError::Shape(format!(
            "lstm weights {:?}/{:?}/{:?} do not fit input width {} and hidden {}",
            w_ih.shape(),
            w_hh.shape(),
            bias.shape(),
            input,
            hid
        )));
    }
    let mut xg = vec![F::zero(); r * l * g4];
    gemm(F::one(), MatRef::new(x.data(), r * l, input), MatRef::new(w_ih.data(), g4, input).t(), F::zero(), &mut xg);
    let mut h = Tensor::zeros(&[r, l, hid]);
    let mut cells = vec![F::zero(); r * l * hid];
    let mut cells_tanh = vec![F::zero(); r * l * hid];
    let mut step = vec![F::zero(); r * g4];
    for t in 0..l {
        for ri in 0..r {
            let o = (ri * l + t) * g4;
            for (j, s) in step[ri * g4..(ri + 1) * g4].iter_mut().enumerate() {
                *s = xg[o + j] + bias.data()[j];
            }
        }
        if t > 0 {
            let hprev = MatRef { data: &h.data()[(t - 1) * hid..], rows: r, cols: hid, rs: l * hid, cs: 1 };
            gemm(F::one(), hprev, MatRef::new(w_hh.data(), g4, hid).t(), F::one(), &mut step);
        }
        for ri in 0..r {
            let s = &mut step[ri * g4..(ri + 1) * g4];
            let base = (ri * l + t) * hid;
            for j in 0..hid {
                let i_g = sigmoid(s[j]);
                let f_g = sigmoid(s[hid + j]);
                let g_g = tanh(s[2 * hid + j]);
                let o_g = sigmoid(s[3 * hid + j]);
                let c_prev = if t > 0 { cells[base - hid + j] } else { F::zero() };
                let c = f_g * c_prev + i_g * g_g;
                let tc = tanh(c);
                cells[base + j] = c;
                cells_tanh[base + j] = tc;
                h.data_mut()[base + j] = o_g * tc;
                s[j] = i_g;
                s[hid + j] = f_g;
                s[2 * hid + j] = g_g;
                s[3 * hid + j] = o_g;
            }
            xg[(ri * l + t) * g4..(ri * l + t + 1) * g4].copy_from_slice(s);
        }
    }
    Ok((h, LstmCache { gates: xg, cells, cells_tanh }))
}

pub struct LstmGrads<F> {
    pub x: Tensor<F>,
    pub w_ih: Tensor<F>,
    pub w_hh: Tensor<F>,
    pub bias: Tensor<F>,
}

pub fn lstm_backward<F: Scalar>(
    x: &Tensor<F>,
    w_ih: &Tensor<F>,
    w_hh: &Tensor<F>,
    h: &Tensor<F>,
    cache: &LstmCache<F>,
    gh: &Tensor<F>,
) -> LstmGrads<F> {
    let (r, l, input) = (x.dim(0), x.dim(1), x.dim(2));
    let hid = w_hh.dim(1);
    let g4 = 4 * hid;
    let mut dgates = vec![F::zero(); r * l * g4];
    let mut dh_next = vec![F::zero(); r * hid];
    let mut dc_next = vec![F::zero(); r * hid];
    let mut da = vec![F::zero(); r * g4];
    let mut gw_hh = Tensor::zeros(w_hh.shape());
    let one = F::one();
    for t in (0..l).rev() {
        for ri in 0..r {
            let base = (ri * l + t) * hid;
            let gb = (ri * l + t) * g4;
            for j in 0..hid {
                let (i_g, f_g, g_g, o_g) = (
                    cache.gates[gb + j],
                    cache.gates[gb + hid + j],
                    cache.gates[gb + 2 * hid + j],
                    cache.gates[gb + 3 * hid + j],
                );
                let c_prev = if t > 0 { cache.cells[base - hid + j] } else { F::zero() };
                let dh = gh.data()[base + j] + dh_next[ri * hid + j];
                let tc = cache.cells_tanh[base + j];
                let d_o = dh * tc;
                let dc = dh * o_g * (one - tc * tc) + dc_next[ri * hid + j];
                dc_next[ri * hid + j] = dc * f_g;
                let a = &mut da[ri * g4..(ri + 1) * g4];
                a[j] = dc * g_g * i_g * (one - i_g);
                a[hid + j] = dc * c_prev * f_g * (one - f_g);
                a[2 * hid + j] = dc * i_g * (one - g_g * g_g);
                a[3 * hid + j] = d_o * o_g * (one - o_g);
            }
            dgates[(ri * l + t) * g4..(ri * l + t + 1) * g4].copy_from_slice(&da[ri * g4..(ri + 1) * g4]);
        }
        gemm(one, MatRef::new(&da, r, g4), MatRef::new(w_hh.data(), g4, hid), F::zero(), &mut dh_next);
        if t > 0 {
            let hprev = MatRef { data: &h.data()[(t - 1) * hid..], rows: r, cols: hid, rs: l * hid, cs: 1 };
            gemm(one, MatRef::new(&da, r, g4).t(), hprev, one, gw_hh.data_mut());
        }
    }
    let mut gx = Tensor::zeros(x.shape());
    gemm(one, MatRef::new(&dgates, r * l, g4), MatRef::new(w_ih.data(), g4, input), F::zero(), gx.data_mut());
    let mut gw_ih = Tensor::zeros(w_ih.shape());
    gemm(one, MatRef::new(&dgates, r * l, g4).t(), MatRef::new(x.data(), r * l, input), F::zero(), gw_ih.data_mut());
    let mut gbias = Tensor::zeros(&[g4]);
    for row in dgates.chunks(g4) {
        for (b, &v) in gbias.data_mut().iter_mut().zip(row) {
            *b += v;
        }
    }
    LstmGrads { x: gx, w_ih: gw_ih, w_hh: gw_hh, bias: gbias }
}
