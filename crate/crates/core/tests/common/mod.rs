#![allow(dead_code)]

use dlspf::gradcheck::{gradcheck, gradcheck_params, GradCheckReport};
use dlspf::nn::stepper::unrolled_loss;
use dlspf::nn::wae::wae_total_loss;
use dlspf::nn::{
    dense, layer_norm, AeConfig, AttentionConfig, Autoencoder, Ctx, EncoderBlock, Init, LatentStepper, LayerPlan,
    MultiHeadAttention, ParamStore, PatchSpec, StepperConfig, VitLayer, WaeLossWeights,
};
use dlspf::rng::{rng_stream, StreamRng};
use dlspf::tensor::{Activation, Tape, Tensor, Var};
use dlspf::Result;

pub const PROBES: usize = 12;

fn rng(i: u64) -> StreamRng {
    rng_stream(7, i)
}

/// Contracts `y` with fixed random weights so every output entry matters.
fn contract<'t>(tape: &'t Tape, y: Var<'t>, seed: u64) -> Result<Var<'t>> {
    let w = Tensor::randn(&y.shape(), 1.0, &mut rng(1000 + seed));
    y.mul(tape.constant(w))?.sum()
}

fn op_case<F>(inputs: &[Tensor], seed: u64, f: F) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    gradcheck(inputs, PROBES, &mut rng(seed), |tape, v| contract(tape, f(tape, v)?, seed))
}

fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut rng(seed))
}

fn tiny_ae() -> AeConfig {
    AeConfig {
        channels: 1,
        length: 16,
        latent_dim: 3,
        param_dim: 1,
        layers: vec![
            LayerPlan { num_patches: 4, embed_dim: 8, num_heads: 2, ff_dim: 12, out_channels: 2, out_patch_len: 2 },
            LayerPlan { num_patches: 2, embed_dim: 8, num_heads: 2, ff_dim: 12, out_channels: 3, out_patch_len: 2 },
        ],
        activation: Activation::Gelu,
    }
}

/// Every differentiable op and composite block against central differences.
pub fn gradcheck_suite() -> Result<Vec<(&'static str, GradCheckReport)>> {
    let mut out = Vec::new();
    let a = randn(&[3, 4], 1);
    let b = randn(&[3, 4], 2);
    let row = randn(&[4], 3);
    let pos = Tensor::uniform(&[3, 4], 0.5, 2.0, &mut rng(4));

    out.push(("add", op_case(&[a.clone(), b.clone()], 10, |_, v| v[0].add(v[1]))?));
    out.push(("add_broadcast", op_case(&[a.clone(), row.clone()], 11, |_, v| v[0].add(v[1]))?));
    out.push(("sub", op_case(&[a.clone(), b.clone()], 12, |_, v| v[0].sub(v[1]))?));
    out.push(("mul", op_case(&[a.clone(), b.clone()], 13, |_, v| v[0].mul(v[1]))?));
    out.push(("mul_broadcast", op_case(&[a.clone(), row.clone()], 14, |_, v| v[0].mul(v[1]))?));
    out.push(("scale", op_case(std::slice::from_ref(&a), 15, |_, v| v[0].scale(-1.7))?));
    out.push(("add_scalar", op_case(std::slice::from_ref(&a), 16, |_, v| v[0].add_scalar(0.3)?.square())?));
    out.push(("square", op_case(std::slice::from_ref(&a), 17, |_, v| v[0].square())?));
    out.push(("recip", op_case(&[pos], 18, |_, v| v[0].recip())?));
    for (name, act) in [
        ("gelu", Activation::Gelu),
        ("relu", Activation::Relu),
        ("tanh", Activation::Tanh),
        ("identity", Activation::Identity),
    ] {
        out.push((name, op_case(std::slice::from_ref(&a), 19, move |_, v| v[0].activation(act))?));
    }
    let w = randn(&[4, 5], 5);
    out.push(("matmul", op_case(&[randn(&[2, 3, 4], 6), w], 20, |_, v| v[0].matmul(v[1]))?));
    out.push((
        "bmm",
        op_case(&[randn(&[2, 3, 4], 7), randn(&[2, 4, 5], 8)], 21, |_, v| v[0].bmm(v[1], false))?,
    ));
    out.push((
        "bmm_transposed",
        op_case(&[randn(&[2, 3, 4], 7), randn(&[2, 5, 4], 9)], 22, |_, v| v[0].bmm(v[1], true))?,
    ));
    out.push(("softmax", op_case(&[randn(&[2, 4, 4], 23)], 23, |_, v| v[0].softmax(false))?));
    out.push(("softmax_causal", op_case(&[randn(&[2, 4, 4], 24)], 24, |_, v| v[0].softmax(true))?));
    out.push(("normalize", op_case(std::slice::from_ref(&a), 25, |_, v| v[0].normalize(1e-5))?));
    out.push(("reshape", op_case(std::slice::from_ref(&a), 26, |_, v| v[0].reshape(&[2, 6])?.square())?));
    out.push((
        "permute",
        op_case(&[randn(&[2, 3, 4, 5], 27)], 27, |_, v| v[0].permute(&[0, 2, 1, 3])?.square())?,
    ));
    out.push(("slice", op_case(std::slice::from_ref(&a), 28, |_, v| v[0].slice(1, 1, 2)?.square())?));
    out.push((
        "concat",
        op_case(&[a.clone(), randn(&[3, 2], 29)], 29, |_, v| Var::concat(&[v[0], v[1]], 1)?.square())?,
    ));
    out.push(("sum", op_case(std::slice::from_ref(&a), 30, |_, v| v[0].square()?.sum())?));
    out.push(("mean", op_case(std::slice::from_ref(&a), 31, |_, v| v[0].square()?.mean())?));
    out.push(("pairwise_sq_dist", op_case(&[a.clone(), randn(&[5, 4], 32)], 32, |_, v| v[0].pairwise_sq_dist(v[1]))?));

    let x = randn(&[2, 3, 6], 40);
    out.push((
        "dense",
        op_case(&[x.clone(), randn(&[6, 5], 41), randn(&[5], 42)], 41, |_, v| dense(v[0], v[1], v[2], Activation::Gelu))?,
    ));
    out.push((
        "layer_norm",
        op_case(&[x.clone(), randn(&[6], 43), randn(&[6], 44)], 43, |_, v| layer_norm(v[0], v[1], v[2], 1e-5))?,
    ));

    let attn = AttentionConfig::new(6, 2, 10);
    let mut store = ParamStore::new();
    let mha = MultiHeadAttention::new(&mut store, "mha", &attn, Init::Glorot, &mut rng(50));
    for (name, causal) in [("attention", false), ("attention_causal", true)] {
        let r = gradcheck_params(&store, std::slice::from_ref(&x), PROBES, &mut rng(51), |ctx, v| {
            contract(ctx.tape(), mha.forward(ctx, v[0], v[0], causal)?, 51)
        })?;
        out.push((name, r));
    }

    let mut store = ParamStore::new();
    let block = EncoderBlock::new(&mut store, "block", &attn, Init::Glorot, &mut rng(52));
    let r = gradcheck_params(&store, std::slice::from_ref(&x), PROBES, &mut rng(53), |ctx, v| {
        contract(ctx.tape(), block.forward(ctx, v[0], true)?, 53)
    })?;
    out.push(("encoder_block", r));

    let spec =
        PatchSpec { num_patches: 4, in_channels: 2, in_length: 16, embed_dim: 6, out_channels: 3, out_patch_len: 2 };
    let mut store = ParamStore::new();
    let vit = VitLayer::new(&mut store, "vit", spec, &attn, &mut rng(54))?;
    let r = gradcheck_params(&store, &[randn(&[2, 2, 16], 55)], PROBES, &mut rng(55), |ctx, v| {
        contract(ctx.tape(), vit.forward(ctx, v[0])?, 55)
    })?;
    out.push(("vit_layer", r));

    out.push(("autoencoder", autoencoder_case()?));
    out.push(("stepper", stepper_case()?));
    Ok(out)
}

fn autoencoder_case() -> Result<GradCheckReport> {
    let cfg = tiny_ae();
    let ae = Autoencoder::new(&cfg, &mut rng(60))?;
    let (ne, nd) = (ae.encoder.store.len(), ae.decoder.store.len());
    let mut inputs = ae.encoder.store.tensors();
    inputs.extend(ae.decoder.store.tensors());
    inputs.push(Tensor::uniform(&[4, 1, 16], 0.0, 1.0, &mut rng(61)));
    inputs.push(Tensor::uniform(&[4, 1], 0.0, 1.0, &mut rng(62)));
    inputs.push(randn(&[4, 3], 63));
    let weights = WaeLossWeights { alpha: 1e-3, beta: 0.1, lambda: 0.1, kernel_c: None };
    gradcheck(&inputs, PROBES, &mut rng(64), |tape, v| {
        let enc = Ctx::from_vars(tape, v[..ne].to_vec(), &ae.encoder.store);
        let dec = Ctx::from_vars(tape, v[ne..ne + nd].to_vec(), &ae.decoder.store);
        let rest = &v[ne + nd..];
        Ok(wae_total_loss(&ae, &enc, &dec, rest[0], Some(rest[1]), rest[2], Some(rest[1]), &weights)?.0)
    })
}

fn stepper_case() -> Result<GradCheckReport> {
    let mut cfg = StepperConfig::new(3, 2, 1);
    cfg.embed_dim = 6;
    cfg.ff_dim = 10;
    cfg.unroll = 3;
    let st = LatentStepper::new(&cfg, &mut rng(70))?;
    let extra = [randn(&[2, 3, 3], 71), randn(&[2, 3, 3], 72), randn(&[2, 1], 73)];
    gradcheck_params(&st.store, &extra, PROBES, &mut rng(74), |ctx, v| {
        unrolled_loss(&st, ctx, v[0], v[1], Some(v[2]), 1e-3)
    })
}

pub mod invariants {
    use dlspf::filter::{check_normalized, effective_sample_size, multinomial_indices, update_weights};
    use dlspf::io::{decode_tensor, tensor_bytes, Checkpoint};
    use dlspf::metrics::{quantile, rmse, wasserstein1_1d};
    use dlspf::nn::attention::{attention_weights, scaled_dot_product_attention};
    use dlspf::nn::{patchify, unpatchify};
    use dlspf::rng::rng_stream;
    use dlspf::tensor::{Tape, Tensor};
    use proptest::prelude::*;
    use proptest::test_runner::{Config, RngAlgorithm, TestCaseError, TestError, TestRng, TestRunner};

    const CASES: u32 = 96;

    fn runner() -> TestRunner {
        TestRunner::new_with_rng(
            Config { cases: CASES, failure_persistence: None, ..Config::default() },
            TestRng::deterministic_rng(RngAlgorithm::ChaCha),
        )
    }

    fn check<S: Strategy>(strategy: S, test: impl Fn(S::Value) -> Result<(), TestCaseError>) -> Result<(), String>
    where
        S::Value: std::fmt::Debug,
    {
        runner().run(&strategy, test).map_err(|e| match e {
            TestError::Fail(why, input) => format!("{why} for {input:?}"),
            TestError::Abort(why) => why.to_string(),
        })
    }

    fn fail(e: impl std::fmt::Display) -> TestCaseError {
        TestCaseError::fail(e.to_string())
    }

    fn floats(len: std::ops::Range<usize>) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-1e3..1e3f64, len)
    }

    pub fn weights_normalized() -> Result<(), String> {
        let s = (1usize..200).prop_flat_map(|n| {
            (prop::collection::vec(0.0..1.0f64, n), prop::collection::vec(-700.0..50.0f64, n))
        });
        check(s, |(prev, ll)| {
            let total: f64 = prev.iter().sum();
            prop_assume!(total > 0.0);
            let prev: Vec<f64> = prev.iter().map(|v| v / total).collect();
            let w = update_weights(&prev, &ll).map_err(fail)?;
            check_normalized(&w).map_err(fail)?;
            for (p, v) in prev.iter().zip(&w) {
                prop_assert!(*p > 0.0 || *v == 0.0, "zero prior weight became {v}");
            }
            Ok(())
        })
    }

    pub fn ess_bounds() -> Result<(), String> {
        check(prop::collection::vec(-50.0..50.0f64, 1..300), |ll| {
            let n = ll.len();
            let w = update_weights(&vec![1.0 / n as f64; n], &ll).map_err(fail)?;
            let ess = effective_sample_size(&w).map_err(fail)?;
            prop_assert!(ess >= 1.0 - 1e-9 && ess <= n as f64 + 1e-9, "ESS {ess} outside [1, {n}]");
            let flat = effective_sample_size(&vec![1.0 / n as f64; n]).map_err(fail)?;
            prop_assert!((flat - n as f64).abs() < 1e-9 * n as f64);
            Ok(())
        })
    }

    pub fn resampling_support() -> Result<(), String> {
        let s = (prop::collection::vec(prop_oneof![Just(0.0), 0.0..1.0f64], 1..64), any::<u64>());
        check(s, |(raw, seed)| {
            let total: f64 = raw.iter().sum();
            prop_assume!(total > 0.0);
            let w: Vec<f64> = raw.iter().map(|v| v / total).collect();
            let idx = multinomial_indices(&w, w.len(), &mut rng_stream(seed, 0)).map_err(fail)?;
            prop_assert_eq!(idx.len(), w.len());
            for i in idx {
                prop_assert!(i < w.len() && w[i] > 0.0, "picked index {i} with weight {}", w.get(i).copied().unwrap_or(f64::NAN));
            }
            Ok(())
        })
    }

    pub fn softmax_contract() -> Result<(), String> {
        let s = (1usize..6, 1usize..8).prop_flat_map(|(b, t)| (Just(b), Just(t), floats(b * t * t..b * t * t + 1)));
        check(s, |(b, t, data)| {
            let tape = Tape::inference();
            for causal in [false, true] {
                let x = tape.constant(Tensor::new(&[b, t, t], data.clone()).map_err(fail)?);
                let y = x.softmax(causal).map_err(fail)?.value();
                for (r, row) in y.data().chunks(t).enumerate() {
                    let i = r % t;
                    let sum: f64 = row.iter().sum();
                    prop_assert!((sum - 1.0).abs() < 1e-12, "row sums to {sum}");
                    prop_assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
                    if causal {
                        prop_assert!(row[i + 1..].iter().all(|v| *v == 0.0), "causal row {i} attends ahead");
                    }
                }
            }
            Ok(())
        })
    }

    pub fn attention_contract() -> Result<(), String> {
        let s = (1usize..4, 1usize..6, 1usize..5)
            .prop_flat_map(|(b, t, d)| (Just(b), Just(t), Just(d), floats(3 * b * t * d..3 * b * t * d + 1)));
        check(s, |(b, t, d, data)| {
            let n = b * t * d;
            let tape = Tape::inference();
            let part = |i: usize| Tensor::new(&[b, t, d], data[i * n..(i + 1) * n].to_vec()).map(|x| tape.constant(x));
            let (q, k, v) = (part(0).map_err(fail)?, part(1).map_err(fail)?, part(2).map_err(fail)?);
            for causal in [false, true] {
                let w = attention_weights(q, k, causal).map_err(fail)?.value();
                for row in w.data().chunks(t) {
                    prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                }
                // outputs are convex combinations of the value rows
                let out = scaled_dot_product_attention(q, k, v, causal).map_err(fail)?.value();
                let vv = v.value();
                for bi in 0..b {
                    for c in 0..d {
                        let col: Vec<f64> = (0..t).map(|j| vv.data()[(bi * t + j) * d + c]).collect();
                        let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
                        let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        for i in 0..t {
                            let o = out.data()[(bi * t + i) * d + c];
                            prop_assert!(o >= lo - 1e-9 && o <= hi + 1e-9, "output {o} outside [{lo}, {hi}]");
                        }
                    }
                }
            }
            Ok(())
        })
    }

    pub fn patchify_round_trip() -> Result<(), String> {
        let s = (1usize..4, 1usize..9, 1usize..9).prop_flat_map(|(c, p, len)| (Just(c), Just(p), floats(c * p * len..c * p * len + 1)));
        check(s, |(c, p, data)| {
            let n = data.len() / c;
            let x = Tensor::new(&[c, n], data).map_err(fail)?;
            let patches = patchify(&x, p).map_err(fail)?;
            prop_assert_eq!(patches.len(), p);
            prop_assert!(patches.iter().all(|t| t.shape() == [c, n / p]));
            let back = unpatchify(&patches).map_err(fail)?;
            prop_assert_eq!(back, x);
            Ok(())
        })
    }

    fn any_bits() -> impl Strategy<Value = f64> {
        any::<u64>().prop_map(f64::from_bits)
    }

    fn tensor() -> impl Strategy<Value = Tensor> {
        prop::collection::vec(0usize..5, 0..4).prop_flat_map(|shape| {
            let len = shape.iter().product::<usize>();
            prop::collection::vec(any_bits(), len..len + 1)
                .prop_map(move |data| Tensor::new(&shape, data).expect("shape matches"))
        })
    }

    fn bits(t: &Tensor) -> Vec<u64> {
        t.data().iter().map(|v| v.to_bits()).collect()
    }

    pub fn tensor_file_round_trip() -> Result<(), String> {
        check(tensor(), |t| {
            let bytes = tensor_bytes(&t).map_err(fail)?;
            let back = decode_tensor(&bytes).map_err(fail)?;
            prop_assert_eq!(back.shape(), t.shape());
            prop_assert_eq!(bits(&back), bits(&t));
            prop_assert_eq!(tensor_bytes(&back).map_err(fail)?, bytes);
            Ok(())
        })
    }

    pub fn checkpoint_round_trip() -> Result<(), String> {
        let s = (prop::collection::vec(tensor(), 0..6), any::<[u8; 32]>(), "[a-z]{1,12}");
        check(s, |(ts, hash, kind)| {
            let named: Vec<(String, Tensor)> = ts.into_iter().enumerate().map(|(i, t)| (format!("layer{i}.w"), t)).collect();
            let ck = Checkpoint::new(&kind, hash, named).map_err(fail)?;
            let bytes = ck.to_bytes().map_err(fail)?;
            let back = Checkpoint::from_bytes(&bytes).map_err(fail)?;
            prop_assert_eq!(&back.kind, &kind);
            prop_assert_eq!(back.config_hash, hash);
            prop_assert_eq!(back.tensors.len(), ck.tensors.len());
            for ((na, a), (nb, b)) in back.tensors.iter().zip(&ck.tensors) {
                prop_assert_eq!(na, nb);
                prop_assert_eq!(a.shape(), b.shape());
                prop_assert_eq!(bits(a), bits(b));
            }
            prop_assert_eq!(back.to_bytes().map_err(fail)?, bytes);
            Ok(())
        })
    }

    pub fn rmse_properties() -> Result<(), String> {
        let s = (1usize..50).prop_flat_map(|n| (floats(n..n + 1), floats(n..n + 1), -10.0..10.0f64));
        check(s, |(a, b, shift)| {
            let ab = rmse(&a, &b).map_err(fail)?;
            prop_assert!(ab >= 0.0);
            prop_assert_eq!(rmse(&a, &a).map_err(fail)?, 0.0);
            prop_assert!((ab - rmse(&b, &a).map_err(fail)?).abs() <= 1e-12 * ab.max(1.0));
            let sa: Vec<f64> = a.iter().map(|v| v + shift).collect();
            let sb: Vec<f64> = b.iter().map(|v| v + shift).collect();
            prop_assert!((rmse(&sa, &sb).map_err(fail)? - ab).abs() <= 1e-9 * ab.max(1.0));
            Ok(())
        })
    }

    pub fn quantile_properties() -> Result<(), String> {
        let s = (1usize..60).prop_flat_map(|n| (floats(n..n + 1), prop::collection::vec(0.01..1.0f64, n..n + 1), 0.0..1.0f64, 0.0..1.0f64));
        check(s, |(x, w, p1, p2)| {
            let (lo, hi) = (p1.min(p2), p1.max(p2));
            let min = x.iter().cloned().fold(f64::INFINITY, f64::min);
            let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for weights in [None, Some(w.as_slice())] {
                let (a, b) = (quantile(&x, weights, lo), quantile(&x, weights, hi));
                prop_assert!(a <= b, "quantile not monotone: {a} > {b}");
                prop_assert!(min <= a && b <= max);
            }
            Ok(())
        })
    }

    pub fn wasserstein_metric_axioms() -> Result<(), String> {
        let s = (floats(1..40), floats(1..40), floats(1..40));
        check(s, |(a, b, c)| {
            let w = |x: &[f64], y: &[f64]| wasserstein1_1d(x, y).map_err(fail);
            let (ab, ba, bc, ac) = (w(&a, &b)?, w(&b, &a)?, w(&b, &c)?, w(&a, &c)?);
            prop_assert_eq!(w(&a, &a)?, 0.0);
            prop_assert!(ab >= 0.0);
            prop_assert!((ab - ba).abs() <= 1e-9 * ab.max(1.0), "asymmetric: {ab} vs {ba}");
            prop_assert!(ac <= ab + bc + 1e-9 * (ab + bc).max(1.0), "triangle: {ac} > {ab} + {bc}");
            let mut shuffled = a.clone();
            shuffled.reverse();
            prop_assert!(w(&a, &shuffled)? <= 1e-12);
            Ok(())
        })
    }

    pub fn suite() -> Vec<(&'static str, Result<(), String>)> {
        vec![
            ("weights_normalized", weights_normalized()),
            ("ess_bounds", ess_bounds()),
            ("resampling_support", resampling_support()),
            ("softmax_contract", softmax_contract()),
            ("attention_contract", attention_contract()),
            ("patchify_round_trip", patchify_round_trip()),
            ("tensor_file_round_trip", tensor_file_round_trip()),
            ("checkpoint_round_trip", checkpoint_round_trip()),
            ("rmse_properties", rmse_properties()),
            ("quantile_properties", quantile_properties()),
            ("wasserstein_metric_axioms", wasserstein_metric_axioms()),
        ]
    }
}
