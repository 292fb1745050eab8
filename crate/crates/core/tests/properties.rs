use proptest::prelude::*;

use caim_core::bench::count_params;
use caim_core::data::storage::{decode_container, encode_cube};
use caim_core::data::{derive_change_labels, generate_synthetic_scene, ChangeLabels, SceneConfig, SemanticSeries, TsiCube};
use caim_core::kernels::{depth_to_space, softmax, space_to_depth};
use caim_core::model::cam::{area_var, fuse_fine_moment, infer_area};
use caim_core::model::coarse::extractor1_logits;
use caim_core::model::encoder::{adjacent_diff, boundary_enhance, encode_siamese, encode_stacked, BoundaryParams, EncoderParams};
use caim_core::model::{CaimNet, ModelConfig};
use caim_core::train::{compute_metrics, fwcl_value, ConfusionMatrix, LossConfig};
use caim_core::{ParamStore, Tape, Tensor};

fn tensor(shape: Vec<usize>, lo: f64, hi: f64) -> impl Strategy<Value = Tensor<f64>> {
    let n: usize = shape.iter().product();
    prop::collection::vec(lo..hi, n).prop_map(move |v| Tensor::from_vec(&shape, v).unwrap())
}

/// Brute-force "last differing adjacent pair" over one pixel's sequence.
fn last_change(seq: &[u16]) -> u16 {
    let mut m = 0;
    for i in 1..seq.len() {
        if seq[i] != seq[i - 1] {
            m = i as u16;
        }
    }
    m
}

fn series() -> impl Strategy<Value = SemanticSeries> {
    (2usize..6, 1usize..5, 1usize..5, 2usize..5).prop_flat_map(|(t, h, w, k)| {
        prop::collection::vec(0..k as u16, t * h * w)
            .prop_map(move |labels| SemanticSeries::new(t, h, w, k, labels).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, ..ProptestConfig::default() })]

    #[test]
    fn labels_match_scan_and_are_consistent(s in series()) {
        let l = derive_change_labels(&s).unwrap();
        let n = s.height * s.width;
        for p in 0..n {
            let seq: Vec<u16> = (0..s.t_len).map(|t| s.labels[t * n + p]).collect();
            prop_assert_eq!(l.moment[p], last_change(&seq));
            prop_assert_eq!(l.area[p] == 1, l.moment[p] != 0);
        }
    }

    #[test]
    fn synthetic_scenes_are_consistent_and_reproducible(seed in 0u64..1000, grid in 1usize..5) {
        let cfg = SceneConfig { seed, grid, height: 16, width: 20, min_size: 4, max_size: 8, ..Default::default() };
        let (cube, series, labels) = generate_synthetic_scene(&cfg).unwrap();
        prop_assert_eq!(&derive_change_labels(&series).unwrap(), &labels);
        for (&a, &m) in labels.area.iter().zip(&labels.moment) {
            prop_assert_eq!(a == 1, m != 0);
        }
        let again = generate_synthetic_scene(&cfg).unwrap();
        prop_assert_eq!(&again.0, &cube);
        prop_assert!(cube.images().all_finite());
    }

    #[test]
    fn storage_round_trip(s in series(), bands in 1usize..4, vals in prop::collection::vec(-1e3f32..1e3, 200)) {
        let labels = derive_change_labels(&s).unwrap();
        let shape = [s.t_len, bands, s.height, s.width];
        let n: usize = shape.iter().product();
        let data: Vec<f32> = (0..n).map(|i| vals[i % vals.len()] * (i as f32 + 1.0)).collect();
        let cube = TsiCube::new(Tensor::from_vec(&shape, data).unwrap()).unwrap();
        let bytes = encode_cube(&cube, Some(&labels)).unwrap();
        let back = decode_container(&bytes).unwrap();
        prop_assert_eq!(back.cube.as_ref(), Some(&cube));
        prop_assert_eq!(back.labels.as_ref(), Some(&labels));
        let unlabelled = decode_container(&encode_cube(&cube, None).unwrap()).unwrap();
        prop_assert!(unlabelled.labels.is_none());
    }

    #[test]
    fn softmax_slices_sum_to_one(x in (1usize..4, 1usize..6, 1usize..4).prop_flat_map(|(a, b, c)| tensor(vec![a, b, c], -30.0, 30.0)), axis in 0usize..3) {
        let y = softmax(&x, axis);
        let s = x.shape().to_vec();
        let inner: usize = s[axis + 1..].iter().product();
        let outer: usize = s[..axis].iter().product();
        for o in 0..outer {
            for i in 0..inner {
                let sum: f64 = (0..s[axis]).map(|k| y.data()[(o * s[axis] + k) * inner + i]).sum();
                prop_assert!((sum - 1.0).abs() <= 1e-5);
            }
        }
        prop_assert!(y.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn space_depth_are_inverse(
        (x, s) in (1usize..3, 1usize..4, 1usize..4, 1usize..4, 1usize..4)
            .prop_flat_map(|(b, c, s, hh, ww)| (tensor(vec![b, c, hh * s, ww * s], -1.0, 1.0), Just(s)))
    ) {
        let y = space_to_depth(&x, s).unwrap();
        prop_assert_eq!(y.dim(1), x.dim(1) * s * s);
        prop_assert_eq!(&depth_to_space(&y, s).unwrap(), &x);
    }

    #[test]
    fn area_argmax_follows_moment_argmax(x in (1usize..3, 2usize..7, 1usize..4).prop_flat_map(|(b, t, h)| tensor(vec![b, t, h, 3], -2.0, 2.0)), quant in any::<bool>()) {
        // quantising produces many exact ties
        let x = if quant { x.map(|v| (v * 2.0).round() / 2.0) } else { x };
        let area = infer_area(&x).unwrap();
        let m = x.argmax(1);
        let a = area.probs.argmax(1);
        for (&mi, &ai) in m.iter().zip(&a) {
            prop_assert_eq!(ai == 1, mi != 0);
        }
    }

    #[test]
    fn shift_leaves_fine_moment_and_area(x in (1usize..3, 2usize..6).prop_flat_map(|(b, t)| tensor(vec![b, t, 4, 4], -3.0, 3.0)), c in -50.0f64..50.0) {
        let cams = [x.clone(), x.map(|v| 0.5 * v), x.map(|v| -v), x.map(|v| v * v)];
        let base = fuse_fine_moment(&cams).unwrap();
        let shifted = fuse_fine_moment(&cams.clone().map(|t| t.map(|v| v + c))).unwrap();
        prop_assert!(base.fine_moment.max_abs_diff(&shifted.fine_moment) <= 1e-9);
        prop_assert_eq!(
            infer_area(&base.fused_logits).unwrap().probs.argmax(1),
            infer_area(&shifted.fused_logits).unwrap().probs.argmax(1)
        );
        for m in base.moments.iter().chain([&base.fine_moment]) {
            let t = m.dim(1);
            for b in 0..m.dim(0) {
                for p in 0..16 {
                    let sum: f64 = (0..t).map(|k| m.data()[(b * t + k) * 16 + p]).sum();
                    prop_assert!((sum - 1.0).abs() <= 1e-5);
                }
            }
        }
    }

    #[test]
    fn min_max_normalisation_range(x in (1usize..3, 1usize..8).prop_flat_map(|(a, n)| tensor(vec![a, n, 2], -5.0, 5.0)), constant in any::<bool>()) {
        let x = if constant { x.map(|_| 1.5) } else { x };
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let y = tape.min_max_normalize(v, 1, 1e-8).unwrap();
        let y = tape.value(y);
        prop_assert!(y.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        if constant {
            prop_assert!(y.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn extractor1_min_is_literal(d in (2usize..5).prop_flat_map(|tm| tensor(vec![tm, 1, 2, 1, 1], -2.0, 2.0)), bump in 0.01f64..3.0) {
        let tm = d.dim(0);
        let eval = |d: &Tensor<f64>| {
            let mut tape = Tape::new();
            let v = tape.constant(d.clone());
            let l = extractor1_logits(&mut tape, v).unwrap();
            tape.value(l).clone()
        };
        let nc: Vec<f64> = (0..tm).map(|i| d.data()[i * 2]).collect();
        let argmin = (0..tm).fold(0, |b, i| if nc[i] < nc[b] { i } else { b });
        let second = (0..tm).filter(|&i| i != argmin).map(|i| nc[i]).fold(f64::INFINITY, f64::min);
        let base = eval(&d);
        prop_assert_eq!(base.data()[0], nc[argmin]);
        // raising the minimiser while it stays below every other step keeps the literal min
        let mut raised = d.clone();
        let lifted = nc[argmin] + bump.min((second - nc[argmin]) / 2.0);
        raised.data_mut()[argmin * 2] = lifted;
        prop_assert_eq!(eval(&raised).data()[0], lifted);
        // raising a non-minimising step changes nothing
        let other = (argmin + 1) % tm;
        let mut up = d.clone();
        up.data_mut()[other * 2] += bump;
        prop_assert_eq!(eval(&up).data()[0], base.data()[0]);
    }

    #[test]
    fn fwcl_nonnegative_and_monotone(p in 0.01f64..0.98, dp in 0.001f64..0.01, gamma in 0.0f64..4.0, w in 0.1f64..5.0) {
        let cfg = LossConfig { gamma, ..Default::default() };
        let probs = |q: f64| Tensor::from_vec(&[1, 2, 1, 1], vec![1.0 - q, q]).unwrap();
        let a = fwcl_value(&probs(p), &[1], &[1.0, w], &cfg).unwrap();
        let b = fwcl_value(&probs(p + dp), &[1], &[1.0, w], &cfg).unwrap();
        prop_assert!(a >= 0.0 && b >= 0.0);
        prop_assert!(b < a);
        let ce = fwcl_value(&probs(p), &[1], &[1.0, w], &LossConfig { gamma: 0.0, ..Default::default() }).unwrap();
        prop_assert!((ce - w * -(p + cfg.eps).ln()).abs() <= 1e-12);
    }

    #[test]
    fn metrics_invariant_under_relabelling(
        truth in prop::collection::vec(0u16..4, 64),
        pred in prop::collection::vec(0u16..4, 64),
        perm in Just(vec![0u16, 1, 2, 3]).prop_shuffle(),
    ) {
        let cm = |t: &[u16], p: &[u16]| {
            let mut c = ConfusionMatrix::new(4);
            for (&a, &b) in t.iter().zip(p) {
                c.add(a as usize, b as usize).unwrap();
            }
            c
        };
        let a = cm(&truth, &pred);
        let pt: Vec<u16> = truth.iter().map(|&v| perm[v as usize]).collect();
        let pp: Vec<u16> = pred.iter().map(|&v| perm[v as usize]).collect();
        let b = cm(&pt, &pp);
        prop_assert!((a.overall_accuracy() - b.overall_accuracy()).abs() <= 1e-12);
        prop_assert!((a.kappa() - b.kappa()).abs() <= 1e-12);
        for c in 0..4 {
            let (x, y) = (a.class_scores(c), b.class_scores(perm[c] as usize));
            prop_assert!((x.0 - y.0).abs() <= 1e-12 && (x.1 - y.1).abs() <= 1e-12 && (x.2 - y.2).abs() <= 1e-12);
        }
    }

    #[test]
    fn kappa_is_100_iff_perfect(moment in prop::collection::vec(0u16..3, 16), flip in 0usize..16, perfect in any::<bool>()) {
        prop_assume!(moment.iter().any(|&m| m != moment[0]));
        let area: Vec<u8> = moment.iter().map(|&m| u8::from(m != 0)).collect();
        let labels = ChangeLabels::new(3, 4, 4, area.clone(), moment.clone()).unwrap();
        let mut pred = moment.clone();
        if !perfect {
            pred[flip] = (pred[flip] + 1) % 3;
        }
        let pa: Vec<u8> = pred.iter().map(|&m| u8::from(m != 0)).collect();
        let r = compute_metrics(&pred, &pa, &labels).unwrap();
        prop_assert_eq!((r.moment.kappa - 100.0).abs() < 1e-9, perfect);
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 8, ..ProptestConfig::default() })]

    #[test]
    fn encoder_strategies_agree(t in 1usize..4, b in 1usize..3, hw in 1usize..4, seed in 0u64..100) {
        let cfg = ModelConfig { channels: 8, bands: 3, ..Default::default() };
        let mut store = ParamStore::<f64>::new(seed);
        let enc = EncoderParams::register(&mut store, &cfg).unwrap();
        let x = Tensor::from_fn(&[t, b, 3, hw * 3, hw * 2 + 1], |i| ((i as f64 + seed as f64) * 0.377).sin());
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let xv = tape.constant(x);
        let a = encode_stacked(&mut tape, &p, &enc, xv, 1e-5).unwrap();
        let s = encode_siamese(&mut tape, &p, &enc, xv, 1e-5).unwrap();
        prop_assert_eq!(tape.shape(a), &[t, b, 8, hw * 3, hw * 2 + 1][..]);
        prop_assert!(tape.value(a).max_abs_diff(tape.value(s)) <= 1e-6);
    }

    #[test]
    fn differences_nonnegative_and_kernels_zero_sum(seed in 0u64..100, t in 2usize..5) {
        let cfg = ModelConfig { channels: 4, bands: 2, t_len: t, ..Default::default() };
        let mut store = ParamStore::<f64>::new(seed);
        let bp = BoundaryParams::register(&mut store, &cfg).unwrap();
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let e = tape.constant(Tensor::from_fn(&[t, 2, 4, 5, 6], |i| ((i as f64) * 0.91 + seed as f64).cos()));
        let d = adjacent_diff(&mut tape, e, false).unwrap();
        prop_assert!(tape.value(d).data().iter().all(|&v| v >= 0.0));
        let k = tape.center_difference_kernel(p.var(bp.w)).unwrap();
        for chunk in tape.value(k).data().chunks(9) {
            let ring: f64 = chunk.iter().enumerate().filter(|&(i, _)| i != 4).map(|(_, &v)| v).sum();
            prop_assert_eq!(ring + chunk[4], 0.0);
        }
        // a constant difference map is annihilated in the interior
        let c = tape.constant(Tensor::full(&[t - 1, 2, 4, 5, 6], 0.75));
        let out = boundary_enhance(&mut tape, &p, &bp, c).unwrap();
        let o = tape.value(out);
        prop_assert_eq!(o.shape(), &[t - 1, 2, 4, 5, 6][..]);
        for y in 1..4 {
            for x in 1..5 {
                prop_assert!((o.at(&[0, 0, 0, y, x]) - 0.75).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn param_count_matches_closed_form(t in 2usize..7, bands in 1usize..5, c4 in 1usize..5, hidden in 1usize..9, mid in 1usize..9) {
        let c = 4 * c4;
        let cfg = ModelConfig { t_len: t, bands, channels: c, hidden, heads: 4, mid, ..Default::default() };
        let net = CaimNet::<f32>::new(cfg.clone(), 0).unwrap();
        let conv = |i: usize, o: usize, k: usize| o * i * k * k + o;
        let gn = |o: usize| 2 * o;
        let lin = |i: usize, o: usize| i * o + o;
        let encoder = conv(bands, c, 3) + conv(c, c, 3) + conv(bands, c, 1) + conv(c, c, 1) + conv(c, c, 3) + 5 * gn(c);
        let boundary = (t - 1) * c * 9;
        let mhsa = 2 * gn(c) + lin(c, 3 * c) + lin(c, c) + lin(c, 2 * c) + lin(2 * c, c);
        let lstm = 4 * hidden * c + 4 * hidden * hidden + 4 * hidden;
        let ex1 = conv(hidden, 2, 1) + gn(2);
        let ex2 = conv((t - 1) * hidden, mid, 3) + gn(mid) + conv(mid, t, 3);
        let cam = [4, 16, 4, 16].iter().map(|&s2| lin(s2 * t, t)).sum::<usize>();
        let expected = encoder + boundary + mhsa + lstm + ex1 + ex2 + cam;
        prop_assert_eq!(count_params(&net.store), expected);
        let walked: usize = net.store.iter().map(|(_, v)| v.numel()).sum();
        prop_assert_eq!(walked, expected);
    }
}

#[test]
fn forward_is_bit_deterministic() {
    let cfg = ModelConfig { channels: 8, hidden: 4, mid: 8, heads: 2, t_len: 3, bands: 2, ..Default::default() };
    let net = CaimNet::<f32>::new(cfg, 5).unwrap();
    let x = Tensor::from_fn(&[3, 2, 2, 8, 8], |i| (i as f32 * 0.13).sin());
    let (a, aa) = net.predict(&x).unwrap();
    let (b, bb) = net.predict(&x).unwrap();
    assert_eq!(a.fine_moment, b.fine_moment);
    assert_eq!(aa.probs, bb.probs);
}

#[test]
fn area_ties_resolve_to_no_change() {
    // m₀ equal to the best later logit, and all-equal logits
    let x = Tensor::from_vec(&[1, 3, 1, 2], vec![1.0, 0.0, 1.0, 0.0, 0.5, 0.0]).unwrap();
    let a = infer_area(&x).unwrap();
    assert_eq!(a.probs.argmax(1), vec![0, 0]);
    assert_eq!(x.argmax(1), vec![0, 0]);
    let mut tape = Tape::<f64>::new();
    let v = tape.constant(x);
    assert!(area_var(&mut tape, v).is_ok());
}
