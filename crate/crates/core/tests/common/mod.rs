//! Finite-difference suite shared by the gradient tests and the acceptance harness.

use rand::seq::SliceRandom;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use caim_core::gradcheck::{grad_check, GradCheckOptions};
use caim_core::kernels::Conv2dSpec;
use caim_core::model::cam::{area_var, fuse_vars, temporal_cam, CamHeadParams};
use caim_core::model::coarse::{extractor1, extractor2, spatiotemporal, Extractor1Params, Extractor2Params, SpatioTemporalParams};
use caim_core::model::encoder::{boundary_enhance, encode_stacked, BoundaryParams, EncoderParams};
use caim_core::model::{CaimNet, ModelConfig, CAM_HEADS};
use caim_core::params::Bound;
use caim_core::train::{fwcl, total_loss, LossConfig, LossWeights};
use caim_core::{ParamStore, Result, Tape, Tensor, Var};

/// Independent random draws per case.
pub const PROBES: u64 = 3;

pub struct CaseResult {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub coords: usize,
}

type Op = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

struct Case {
    name: &'static str,
    /// Inputs for a given random generator.
    inputs: Box<dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>>>,
    op: Op,
    max_coords: usize,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Values kept at least 0.1 away from zero.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let v: f64 = rng.random_range(0.1..1.5);
        if rng.random_bool(0.5) { v } else { -v }
    })
}

/// Pairwise distinct values (gaps ≥ 0.05), so min/max selections have no near-ties.
fn distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let jitter: f64 = rng.random_range(0.0..0.01);
    Tensor::from_vec(shape, order.iter().map(|&k| k as f64 * 0.1 - 1.0 + jitter).collect()).unwrap()
}

fn case(
    name: &'static str,
    inputs: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>> + 'static,
    op: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'static,
) -> Case {
    Case { name, inputs: Box::new(inputs), op: Box::new(op), max_coords: 24 }
}

/// Store values with every affine scale and bias moved off its initial constant.
fn perturbed_values(store: &ParamStore<f64>, rng: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
    store
        .iter()
        .map(|(_, v)| {
            let noise = uniform(rng, v.shape(), -0.2, 0.2);
            v.zip_map(&noise, |a, b| a + b).unwrap()
        })
        .collect()
}

fn stage_case(
    name: &'static str,
    store: ParamStore<f64>,
    x_shape: Vec<usize>,
    positive_x: bool,
    max_coords: usize,
    op: impl Fn(&mut Tape<f64>, &Bound, Var) -> Result<Var> + 'static,
) -> Case {
    Case {
        name,
        inputs: Box::new(move |rng| {
            let x = if positive_x { uniform(rng, &x_shape, 0.1, 1.0) } else { uniform(rng, &x_shape, -1.0, 1.0) };
            let mut v = vec![x];
            v.extend(perturbed_values(&store, rng));
            v
        }),
        op: Box::new(move |t, v| op(t, &Bound::from_vars(v[1..].to_vec()), v[0])),
        max_coords,
    }
}

fn tiny_config() -> ModelConfig {
    ModelConfig { t_len: 3, bands: 2, channels: 4, hidden: 3, heads: 2, ffn_mult: 2, mid: 4, ..Default::default() }
}

fn cases() -> Vec<Case> {
    let mut c = vec![
        case("add", |r| vec![uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[3, 4], -1.0, 1.0)], |t, v| t.add(v[0], v[1])),
        case("sub", |r| vec![uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[3, 4], -1.0, 1.0)], |t, v| t.sub(v[0], v[1])),
        case("mul", |r| vec![uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[3, 4], -1.0, 1.0)], |t, v| t.mul(v[0], v[1])),
        case("scale", |r| vec![uniform(r, &[3, 4], -1.0, 1.0)], |t, v| Ok(t.scale(v[0], -1.7))),
        case("abs", |r| vec![away_from_zero(r, &[3, 5])], |t, v| Ok(t.abs(v[0]))),
        case("relu", |r| vec![away_from_zero(r, &[3, 5])], |t, v| Ok(t.relu(v[0]))),
        case("sum", |r| vec![uniform(r, &[3, 4], -1.0, 1.0)], |t, v| Ok(t.sum(v[0]))),
        case("reshape", |r| vec![uniform(r, &[2, 6], -1.0, 1.0)], |t, v| t.reshape(v[0], &[3, 4])),
        case("permute", |r| vec![uniform(r, &[2, 3, 4], -1.0, 1.0)], |t, v| t.permute(v[0], &[2, 0, 1])),
        case("narrow", |r| vec![uniform(r, &[2, 4, 3], -1.0, 1.0)], |t, v| t.narrow(v[0], 1, 1, 2)),
        case(
            "concat",
            |r| vec![uniform(r, &[2, 1, 3], -1.0, 1.0), uniform(r, &[2, 2, 3], -1.0, 1.0)],
            |t, v| t.concat(&[v[0], v[1]], 1),
        ),
        case("min_axis", |r| vec![distinct(r, &[3, 5, 2])], |t, v| t.min_axis(v[0], 1)),
        case("max_axis", |r| vec![distinct(r, &[3, 5, 2])], |t, v| t.max_axis(v[0], 1)),
        case("mean_axis", |r| vec![uniform(r, &[3, 5, 2], -1.0, 1.0)], |t, v| t.mean_axis(v[0], 1)),
        case(
            "linear",
            |r| vec![uniform(r, &[2, 3, 4], -1.0, 1.0), uniform(r, &[5, 4], -1.0, 1.0), uniform(r, &[5], -1.0, 1.0)],
            |t, v| t.linear(v[0], v[1], Some(v[2])),
        ),
        case(
            "conv2d",
            |r| vec![uniform(r, &[2, 3, 5, 4], -1.0, 1.0), uniform(r, &[4, 3, 3, 3], -1.0, 1.0), uniform(r, &[4], -1.0, 1.0)],
            |t, v| t.conv2d(v[0], v[1], Some(v[2]), Conv2dSpec::same(3)),
        ),
        case(
            "conv2d_strided",
            |r| vec![uniform(r, &[1, 2, 6, 5], -1.0, 1.0), uniform(r, &[3, 2, 3, 3], -1.0, 1.0)],
            |t, v| t.conv2d(v[0], v[1], None, Conv2dSpec { stride: 2, padding: 1, groups: 1 }),
        ),
        case(
            "conv2d_depthwise",
            |r| vec![uniform(r, &[2, 3, 4, 4], -1.0, 1.0), uniform(r, &[3, 1, 3, 3], -1.0, 1.0)],
            |t, v| t.conv2d(v[0], v[1], None, Conv2dSpec::depthwise(3, 3)),
        ),
        case(
            "group_norm",
            |r| vec![uniform(r, &[2, 4, 3, 3], -1.0, 1.0), uniform(r, &[4], 0.5, 1.5), uniform(r, &[4], -0.5, 0.5)],
            |t, v| t.group_norm(v[0], 2, v[1], v[2], 1e-5),
        ),
        case(
            "layer_norm",
            |r| vec![uniform(r, &[3, 2, 6], -1.0, 1.0), uniform(r, &[6], 0.5, 1.5), uniform(r, &[6], -0.5, 0.5)],
            |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5),
        ),
        case("softmax", |r| vec![uniform(r, &[2, 4, 3], -2.0, 2.0)], |t, v| t.softmax(v[0], 1)),
        case("attention", |r| vec![uniform(r, &[3, 4, 24], -1.0, 1.0)], |t, v| t.attention(v[0], 2)),
        case(
            "lstm",
            |r| {
                vec![
                    uniform(r, &[3, 4, 5], -1.0, 1.0),
                    uniform(r, &[12, 5], -0.6, 0.6),
                    uniform(r, &[12, 3], -0.6, 0.6),
                    uniform(r, &[12], -0.3, 0.3),
                ]
            },
            |t, v| t.lstm(v[0], v[1], v[2], v[3]),
        ),
        case("upsample_bilinear", |r| vec![uniform(r, &[1, 2, 3, 3], -1.0, 1.0)], |t, v| t.upsample_bilinear(v[0], 7, 8)),
        case("space_to_depth", |r| vec![uniform(r, &[1, 2, 4, 4], -1.0, 1.0)], |t, v| t.space_to_depth(v[0], 2)),
        case("depth_to_space", |r| vec![uniform(r, &[1, 8, 2, 2], -1.0, 1.0)], |t, v| t.depth_to_space(v[0], 2)),
        case("min_max_normalize", |r| vec![distinct(r, &[2, 5, 3])], |t, v| t.min_max_normalize(v[0], 1, 1e-8)),
        case("center_difference_kernel", |r| vec![uniform(r, &[3, 1, 3, 3], -1.0, 1.0)], |t, v| {
            t.center_difference_kernel(v[0])
        }),
        case(
            "focal_loss",
            |r| vec![uniform(r, &[2, 3, 2, 2], 0.05, 0.95)],
            |t, v| t.focal_loss(v[0], &[0, 1, 2, 2, 1, 0, 0, 2], &[0.5, 1.0, 2.0], 2.0, 1e-12),
        ),
    ];

    let cfg = tiny_config();
    let (tl, tm) = (cfg.t_len, cfg.t_len - 1);

    let mut s = ParamStore::<f64>::new(1);
    let enc = EncoderParams::register(&mut s, &cfg).unwrap();
    let eps = cfg.norm_eps;
    c.push(stage_case("stage:encoder", s, vec![tl, 1, cfg.bands, 4, 4], false, 12, move |t, p, x| {
        encode_stacked(t, p, &enc, x, eps)
    }));

    let mut s = ParamStore::<f64>::new(2);
    let bp = BoundaryParams::register(&mut s, &cfg).unwrap();
    c.push(stage_case("stage:boundary_enhance", s, vec![tm, 1, cfg.channels, 4, 4], true, 24, move |t, p, x| {
        boundary_enhance(t, p, &bp, x)
    }));

    let mut s = ParamStore::<f64>::new(3);
    let st = SpatioTemporalParams::register(&mut s, &cfg).unwrap();
    c.push(stage_case("stage:spatiotemporal", s, vec![tm, 1, cfg.channels, 2, 2], true, 12, move |t, p, x| {
        spatiotemporal(t, p, &st, x, eps)
    }));

    let mut s = ParamStore::<f64>::new(4);
    let e1 = Extractor1Params::register(&mut s, &cfg).unwrap();
    c.push(stage_case("stage:extractor1", s, vec![tm, 1, cfg.hidden, 2, 2], false, 24, move |t, p, x| {
        Ok(extractor1(t, p, &e1, x, eps)?.probs)
    }));

    let mut s = ParamStore::<f64>::new(5);
    let e2 = Extractor2Params::register(&mut s, &cfg).unwrap();
    c.push(stage_case("stage:extractor2", s, vec![tm, 1, cfg.hidden, 3, 3], false, 24, move |t, p, x| {
        Ok(extractor2(t, p, &e2, x, eps)?.probs)
    }));

    for (name, area) in [("stage:cam_fusion_fine", false), ("stage:cam_fusion_area", true)] {
        let mut s = ParamStore::<f64>::new(6);
        let heads: Vec<CamHeadParams> = CAM_HEADS
            .iter()
            .map(|&(b, sc)| CamHeadParams::register(&mut s, &format!("cam{b}_{sc}"), tl, sc).unwrap())
            .collect();
        // input: both coarse branches stacked, [2, B, T, H, W]
        c.push(stage_case(name, s, vec![2, 1, tl, 4, 4], false, 24, move |t, p, x| {
            let mut cams = Vec::new();
            for (head, &(branch, _)) in heads.iter().zip(CAM_HEADS.iter()) {
                let coarse = t.narrow(x, 0, branch - 1, 1)?;
                let coarse = t.reshape(coarse, &[1, tl, 4, 4])?;
                cams.push(temporal_cam(t, p, head, coarse)?.0);
            }
            let fused = fuse_vars(t, [cams[0], cams[1], cams[2], cams[3]])?;
            if area {
                area_var(t, fused.fused_logits)
            } else {
                Ok(fused.fine)
            }
        }));
    }

    c.push(case(
        "stage:fwcl",
        |r| vec![uniform(r, &[2, 3, 2, 2], -2.0, 2.0)],
        |t, v| {
            let p = t.softmax(v[0], 1)?;
            fwcl(t, p, &[0, 1, 2, 2, 1, 0, 0, 2], &[0.7, 1.3, 2.0], &LossConfig::default())
        },
    ));

    let net = CaimNet::<f64>::new(tiny_config(), 7).unwrap();
    let store = net.store.clone();
    let labels: Vec<usize> = (0..32).map(|i| [0, 1, 2, 2, 0][i % 5]).collect();
    let area: Vec<usize> = labels.iter().map(|&m| usize::from(m != 0)).collect();
    let weights = LossWeights { area: vec![0.8, 1.2], moment: vec![0.5, 1.0, 1.5] };
    c.push(stage_case("stage:full_network_loss", store, vec![tl, 2, 2, 4, 4], true, 4, move |t, p, x| {
        let out = net.forward(t, p, x)?;
        Ok(total_loss(t, &out, &labels, &area, &weights, &LossConfig::default())?.total)
    }));
    c
}

/// Runs every case on [`PROBES`] random draws; reports the worst draw.
pub fn gradient_suite() -> Vec<CaseResult> {
    cases()
        .into_iter()
        .map(|case| {
            let mut worst = 0.0f64;
            let mut coords = 0;
            for probe in 0..PROBES {
                let mut rng = ChaCha8Rng::seed_from_u64(0x9e37 + probe);
                let inputs = (case.inputs)(&mut rng);
                let opts = GradCheckOptions { max_coords: case.max_coords, ..Default::default() };
                match grad_check(&inputs, |t, v| (case.op)(t, v), opts) {
                    Ok(r) => {
                        worst = worst.max(r.max_rel_error);
                        coords += r.coords_checked;
                    }
                    Err(_) => worst = f64::INFINITY,
                }
            }
            CaseResult { name: case.name, max_rel_error: worst, coords }
        })
        .collect()
}
