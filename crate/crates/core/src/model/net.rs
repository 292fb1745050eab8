//! End-to-end network assembly.

use std::path::Path;

use super::cam::{area_var, fuse_vars, temporal_cam, AreaPrediction, CamHeadParams, FusedVars, MomentPrediction, CAM_HEADS};
use super::coarse::{
    extractor1, extractor2, spatiotemporal, CoarseMoment, Extractor1Params, Extractor2Params, SpatioTemporalParams,
};
use super::encoder::{adjacent_diff, boundary_enhance, encode_stacked, BoundaryParams, EncoderParams};
use super::ModelConfig;
use crate::autograd::{Tape, Var};
use crate::error::{shape_err, Result};
use crate::params::{Bound, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct CaimNet<F> {
    pub cfg: ModelConfig,
    pub store: ParamStore<F>,
    pub encoder: EncoderParams,
    pub boundary: BoundaryParams,
    pub temporal: SpatioTemporalParams,
    pub extractor1: Extractor1Params,
    pub extractor2: Extractor2Params,
    pub cam: [CamHeadParams; 4],
}

/// Tape handles of every output of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct NetOutputs {
    pub coarse: [CoarseMoment; 2],
    pub cams: [Var; 4],
    pub aux: [Var; 4],
    pub fused: FusedVars,
    pub area: Var,
}

impl<F: Scalar> CaimNet<F> {
    /// Registers all parameters in a fixed order, initialised from `seed`.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new(seed);
        let encoder = EncoderParams::register(&mut store, &cfg)?;
        let boundary = BoundaryParams::register(&mut store, &cfg)?;
        let temporal = SpatioTemporalParams::register(&mut store, &cfg)?;
        let extractor1 = Extractor1Params::register(&mut store, &cfg)?;
        let extractor2 = Extractor2Params::register(&mut store, &cfg)?;
        let mut heads = Vec::with_capacity(4);
        for (branch, s) in CAM_HEADS {
            heads.push(CamHeadParams::register(&mut store, &format!("cam{branch}_{s}.fc"), cfg.t_len, s)?);
        }
        let cam: [CamHeadParams; 4] = heads.try_into().expect("four heads");
        Ok(CaimNet { cfg, store, encoder, boundary, temporal, extractor1, extractor2, cam })
    }

    /// Builds the architecture for `cfg` and loads checkpoint values into it.
    pub fn from_checkpoint(cfg: ModelConfig, path: &Path) -> Result<Self> {
        let loaded = ParamStore::<f32>::load(path)?;
        let mut net = CaimNet::new(cfg, loaded.seed())?;
        net.store.load_values_from(&loaded.cast())?;
        Ok(net)
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    fn eps(&self) -> F {
        F::from_f64_lossy(self.cfg.norm_eps)
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let c = &self.cfg;
        if shape.len() != 5 || shape[0] != c.t_len || shape[2] != c.bands || shape[1] == 0 {
            return Err(shape_err!("expected [{}, B, {}, H, W] input, got {:?}", c.t_len, c.bands, shape));
        }
        if shape[3] == 0 || shape[4] == 0 || shape[3] % 4 != 0 || shape[4] % 4 != 0 {
            return Err(shape_err!("H and W must be positive multiples of 4, got {:?}", &shape[3..]));
        }
        Ok(())
    }

    /// Full forward pass on a `[T, B, C, H, W]` input.
    pub fn forward(&self, tape: &mut Tape<F>, p: &Bound, x: Var) -> Result<NetOutputs> {
        self.check_input(tape.shape(x))?;
        let eps = self.eps();
        let e = encode_stacked(tape, p, &self.encoder, x, eps)?;
        let d = adjacent_diff(tape, e, self.cfg.signed_diff)?;
        let d = boundary_enhance(tape, p, &self.boundary, d)?;
        let hf = spatiotemporal(tape, p, &self.temporal, d, eps)?;
        let c1 = extractor1(tape, p, &self.extractor1, hf, eps)?;
        let c2 = extractor2(tape, p, &self.extractor2, hf, eps)?;
        let coarse = [c1, c2];
        let mut cams = [x; 4];
        let mut aux = [x; 4];
        for (k, (branch, _)) in CAM_HEADS.iter().enumerate() {
            let (c, a) = temporal_cam(tape, p, &self.cam[k], coarse[branch - 1].logits)?;
            cams[k] = c;
            aux[k] = a;
        }
        let fused = fuse_vars(tape, cams)?;
        let area = area_var(tape, fused.fused_logits)?;
        Ok(NetOutputs { coarse, cams, aux, fused, area })
    }

    /// Inference on `[T, B, C, H, W]` images with frozen parameters.
    pub fn predict(&self, images: &Tensor<F>) -> Result<(MomentPrediction<F>, AreaPrediction<F>)> {
        let mut tape = Tape::new();
        let p = self.store.bind_frozen(&mut tape);
        let x = tape.constant(images.clone());
        let out = self.forward(&mut tape, &p, x)?;
        let v = |v: Var| tape.value(v).clone();
        Ok((
            MomentPrediction {
                fine_moment: v(out.fused.fine),
                moments: out.fused.moments.map(v),
                fused_logits: v(out.fused.fused_logits),
                aux_class_probs: out.aux.map(v),
            },
            AreaPrediction { probs: v(out.area) },
        ))
    }
}
