mod common;

use common::{max_grad_err, rel_err, rng, uniform, H};
use rand::seq::SliceRandom;
use rand::Rng;
use swinforge::swin::{
    patch_merging, swin_block, window_partition, window_reverse, windowed_attention, BlockGeometry, ForwardTrace,
    ModelParams, ParamTree, SwinConfig, SwinModel, MASK_VALUE,
};
use swinforge::{Error, Tape, Tensor, Var};

/// Closed-form parameter count from the config arithmetic.
fn count_from_config(c: &SwinConfig) -> usize {
    let p = c.patch_size;
    let mut total = c.in_channels * p * p * c.embed_dim + c.embed_dim + 2 * c.embed_dim;
    let mut dim = c.embed_dim;
    let mut res = c.input_size / p;
    for s in 0..c.depths.len() {
        let m = c.window_size.min(res);
        let hidden = dim * c.mlp_ratio;
        let block = 2 * dim                     // norm1
            + dim * 3 * dim + 3 * dim           // qkv
            + (2 * m - 1) * (2 * m - 1) * c.heads[s] // relative bias
            + dim * dim + dim                   // proj
            + 2 * dim                           // norm2
            + dim * hidden + hidden             // fc1
            + hidden * dim + dim; // fc2
        total += c.depths[s] * block;
        if s + 1 < c.depths.len() {
            total += 2 * 4 * dim + 4 * dim * 2 * dim;
            dim *= 2;
            res /= 2;
        }
    }
    total + 2 * dim + dim * 2 + 2
}

/// 8x8 inputs, patch 2 -> 4x4 tokens, C=4, two heads, window 2.
fn mini_config() -> SwinConfig {
    SwinConfig {
        input_size: 8,
        patch_size: 2,
        in_channels: 3,
        embed_dim: 4,
        depths: vec![2],
        heads: vec![2],
        window_size: 2,
        mlp_ratio: 2,
        num_classes: 2,
        rel_pos_bias: true,
        norm_eps: 1e-5,
    }
}

/// Parameters with every leaf drawn uniformly, so biases, gains and the
/// relative-bias tables are all exercised.
fn random_params(cfg: &SwinConfig, seed: u64, scale: f64) -> ModelParams<f64> {
    let mut r = rng(seed);
    let base = ModelParams::<f64>::init(cfg, seed).unwrap();
    base.map(|name, t| {
        let mut u = uniform(&mut r, t.shape(), scale);
        if name.ends_with("gain") {
            u.data_mut().iter_mut().for_each(|v| *v += 1.0);
        }
        u
    })
}

#[test]
fn tiny_parameter_count() {
    let cfg = SwinConfig::tiny();
    let params = ModelParams::<f32>::init(&cfg, 0).unwrap();
    assert_eq!(params.param_count(), count_from_config(&cfg));
    assert_eq!(params.param_count(), 76_738);
    let paper = SwinConfig::paper();
    assert_eq!(ModelParams::<f32>::init(&paper, 0).unwrap().param_count(), count_from_config(&paper));
}

#[test]
fn parameter_count_is_a_function_of_config() {
    let cfg = SwinConfig::tiny();
    let a = ModelParams::<f32>::init(&cfg, 1).unwrap();
    let b = ModelParams::<f32>::init(&cfg, 2).unwrap();
    assert_eq!(a.param_count(), b.param_count());
    assert_ne!(a, b);
    assert!(a.all_finite());
}

#[test]
fn patch_embed_token_count() {
    let mut cfg = mini_config();
    cfg.patch_size = 4;
    cfg.window_size = 2;
    cfg.depths = vec![1];
    let model = SwinModel::new(cfg).unwrap();
    let params = model.init_params::<f64>(0).unwrap();
    let mut tape = Tape::new();
    let w = model.bind(&mut tape, &params, false);
    let x = tape.constant(Tensor::zeros(vec![1, 3, 8, 8]));
    let tokens = model.patch_embed(&mut tape, &w, x).unwrap();
    assert_eq!(tape.shape(tokens), &[1, 4, 4]);
}

#[test]
fn divisibility_is_checked_at_construction() {
    let mut cfg = SwinConfig::tiny();
    cfg.patch_size = 3;
    assert!(matches!(SwinModel::new(cfg), Err(Error::Config(_))));
}

#[test]
fn window_partition_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::from_fn(vec![1, 8, 8, 3], |i| i as f64));
    let w = window_partition(&mut tape, x, 4).unwrap();
    assert_eq!(tape.shape(w), &[4, 16, 3]);
    let back = window_reverse(&mut tape, w, 1, 8, 8).unwrap();
    assert_eq!(tape.data(back), tape.data(x));

    let grid = tape.constant(Tensor::from_fn(vec![1, 4, 4, 1], |i| i as f64));
    let w = window_partition(&mut tape, grid, 2).unwrap();
    // (0,0), (0,1), (1,0), (1,1) of the 4x4 grid
    assert_eq!(&tape.data(w)[..4], &[0.0, 1.0, 4.0, 5.0]);
    let bad = tape.constant(Tensor::zeros(vec![1, 6, 6, 1]));
    assert!(matches!(window_partition(&mut tape, bad, 4), Err(Error::Dimension { .. })));
}

#[test]
fn attention_single_token_returns_values() {
    let mut r = rng(3);
    let mut tape = Tape::<f64>::new();
    let q = tape.constant(uniform(&mut r, &[3, 2, 1, 4], 1.0));
    let k = tape.constant(uniform(&mut r, &[3, 2, 1, 4], 1.0));
    let vt = uniform(&mut r, &[3, 2, 1, 4], 1.0);
    let v = tape.constant(vt.clone());
    let out = windowed_attention(&mut tape, q, k, v, None, None).unwrap();
    // [W, heads, 1, kv] -> [W, 1, heads*kv] is a pure reshape for N = 1
    assert_eq!(tape.data(out.output), vt.data());
}

#[test]
fn attention_zero_queries_are_uniform() {
    let mut r = rng(4);
    let mut tape = Tape::<f64>::new();
    let q = tape.constant(Tensor::zeros(vec![2, 2, 5, 3]));
    let k = tape.constant(uniform(&mut r, &[2, 2, 5, 3], 2.0));
    let v = tape.constant(uniform(&mut r, &[2, 2, 5, 3], 1.0));
    let out = windowed_attention(&mut tape, q, k, v, None, None).unwrap();
    assert!(tape.data(out.weights).iter().all(|&w| (w - 0.2).abs() < 1e-15));
}

#[test]
fn attention_two_token_hand_case() {
    let q = [[1.0, 0.0], [0.5, -1.0]];
    let k = [[0.0, 2.0], [1.0, 1.0]];
    let v = [[1.0, 3.0], [-2.0, 0.5]];
    let mut expected = [[0.0; 2]; 2];
    for i in 0..2 {
        let s: Vec<f64> = (0..2).map(|j| (q[i][0] * k[j][0] + q[i][1] * k[j][1]) / 2f64.sqrt()).collect();
        let z: f64 = s.iter().map(|x| x.exp()).sum();
        for c in 0..2 {
            expected[i][c] = (0..2).map(|j| s[j].exp() / z * v[j][c]).sum();
        }
    }
    let flat = |m: [[f64; 2]; 2]| Tensor::new(vec![1, 1, 2, 2], m.iter().flatten().copied().collect()).unwrap();
    let mut tape = Tape::<f64>::new();
    let (qv, kv, vv) = (tape.constant(flat(q)), tape.constant(flat(k)), tape.constant(flat(v)));
    let out = windowed_attention(&mut tape, qv, kv, vv, None, None).unwrap();
    for (a, b) in tape.data(out.output).iter().zip(expected.iter().flatten()) {
        assert!((a - b).abs() < 1e-6);
    }
}

/// Random mini model with a shifted second block, as a `[B, 3, 8, 8]` input.
fn traced_forward<T: swinforge::Float>(
    cfg: &SwinConfig,
    params: &ModelParams<T>,
    x: Tensor<T>,
) -> (Tape<T>, ForwardTrace, Var) {
    let model = SwinModel::new(cfg.clone()).unwrap();
    let mut tape = Tape::new();
    let w = model.bind(&mut tape, params, false);
    let xv = tape.constant(x);
    let mut trace = ForwardTrace::default();
    let y = model.forward(&mut tape, &w, xv, Some(&mut trace)).unwrap();
    (tape, trace, y)
}

#[test]
fn attention_rows_sum_to_one_in_every_layer() {
    let cfg = SwinConfig::tiny();
    for seed in 0..3 {
        let params = random_params(&cfg, seed, 0.3).cast::<f32>();
        let x = uniform(&mut rng(seed + 50), &[2, 3, 32, 32], 2.0).cast::<f32>();
        let (tape, trace, _) = traced_forward(&cfg, &params, x);
        assert_eq!(trace.attention.len(), 4);
        for &(s, b, a) in &trace.attention {
            let n = *tape.shape(a).last().unwrap();
            for row in tape.data(a).chunks(n) {
                let sum: f32 = row.iter().sum();
                assert!((sum - 1.0).abs() <= 1e-6, "stage {s} block {b}: row sum {sum}");
            }
        }
    }
}

#[test]
fn shifted_windows_do_not_attend_across_the_wrap() {
    // 16x16 input, patch 2 -> 8x8 map, M=4, block 1 shifted by 2.
    let cfg = SwinConfig {
        input_size: 16,
        patch_size: 2,
        in_channels: 3,
        embed_dim: 8,
        depths: vec![2],
        heads: vec![2],
        window_size: 4,
        mlp_ratio: 2,
        num_classes: 2,
        rel_pos_bias: true,
        norm_eps: 1e-5,
    };
    assert_eq!(cfg.block_shift(0, 1), 2);
    let (side, m, shift) = (8usize, 4usize, 2usize);
    // A shifted-grid position holds the token from ((y + s) mod H, (x + s) mod W);
    // it came across the wrap iff y + s >= H (resp. x).
    let wrapped = |y: usize, x: usize| (y + shift >= side, x + shift >= side);
    for seed in 0..5 {
        let params = random_params(&cfg, seed, 0.5);
        let x = uniform(&mut rng(seed + 9), &[2, 3, 16, 16], 2.0);
        let (tape, trace, _) = traced_forward(&cfg, &params, x);
        let &(_, _, attn) = trace.attention.iter().find(|t| t.1 == 1).unwrap();
        let shape = tape.shape(attn).to_vec();
        assert_eq!(shape, vec![8, 2, 16, 16]);
        let data = tape.data(attn);
        let per_image = (side / m) * (side / m);
        let mut cross_mass: f64 = 0.0;
        for win in 0..shape[0] {
            let wi = win % per_image;
            let (wy, wx) = (wi / (side / m), wi % (side / m));
            let pos = |t: usize| (wy * m + t / m, wx * m + t % m);
            for h in 0..2 {
                for i in 0..16 {
                    for j in 0..16 {
                        let (yi, xi) = pos(i);
                        let (yj, xj) = pos(j);
                        if wrapped(yi, xi) != wrapped(yj, xj) {
                            let w = data[((win * 2 + h) * 16 + i) * 16 + j];
                            assert!(w < 1e-8, "window {win} head {h}: {i}->{j} weight {w}");
                            cross_mass += w;
                        }
                    }
                }
            }
        }
        assert!(cross_mass < 1e-6);
    }
    assert!(MASK_VALUE <= -1e9);
}

#[test]
fn identical_images_give_identical_logits_and_batch_order_is_respected() {
    let cfg = SwinConfig::tiny();
    let model = SwinModel::new(cfg.clone()).unwrap();
    let params = random_params(&cfg, 5, 0.2);
    let one = uniform(&mut rng(1), &[1, 3, 32, 32], 1.0);
    let two = uniform(&mut rng(2), &[1, 3, 32, 32], 1.0);
    let stack = |parts: &[&Tensor<f64>]| {
        let data: Vec<f64> = parts.iter().flat_map(|t| t.data().iter().copied()).collect();
        Tensor::new(vec![parts.len(), 3, 32, 32], data).unwrap()
    };
    let same = model.logits(&params, &stack(&[&one, &one])).unwrap();
    assert_eq!(&same.data()[..2], &same.data()[2..]);
    let ab = model.logits(&params, &stack(&[&one, &two])).unwrap();
    let ba = model.logits(&params, &stack(&[&two, &one])).unwrap();
    assert_eq!(&ab.data()[..2], &ba.data()[2..]);
    assert_eq!(&ab.data()[2..], &ba.data()[..2]);
    let again = model.logits(&params, &stack(&[&one, &two])).unwrap();
    assert_eq!(ab, again);
}

#[test]
fn forward_is_head_of_features() {
    let cfg = SwinConfig::tiny();
    let model = SwinModel::new(cfg.clone()).unwrap();
    let params = random_params(&cfg, 8, 0.2);
    let x = uniform(&mut rng(8), &[3, 3, 32, 32], 1.0);
    let feats = model.extract_features(&params, &x).unwrap();
    assert_eq!(feats.shape(), &[3, cfg.final_dim()]);
    let logits = model.logits(&params, &x).unwrap();
    let mut tape = Tape::new();
    let w = model.bind(&mut tape, &params, false);
    let f = tape.constant(feats.clone());
    let y = model.head(&mut tape, &w, f).unwrap();
    assert_eq!(tape.data(y), logits.data());

    let mut other = params.clone();
    other.head.weight.data_mut().iter_mut().for_each(|v| *v = -*v);
    assert_eq!(model.extract_features(&other, &x).unwrap(), feats);
}

#[test]
fn patch_merging_shapes_and_constants() {
    let cfg = SwinConfig::tiny();
    let params = random_params(&cfg, 2, 0.3);
    let merge = params.stages[0].merge.as_ref().unwrap();
    let mut tape = Tape::new();
    let mw = merge.try_map::<Var, Error>("", &mut |_, t| Ok(tape.constant(t.clone()))).unwrap();
    let x = tape.constant(Tensor::from_fn(vec![1, 4, 4, 24], |i| (i % 24) as f64 * 0.1));
    let y = patch_merging(&mut tape, x, &mw, 1e-5).unwrap();
    assert_eq!(tape.shape(y), &[1, 2, 2, 48]);
    let d = tape.data(y);
    for p in 1..4 {
        assert_eq!(&d[p * 48..(p + 1) * 48], &d[..48]);
    }
    let odd = tape.constant(Tensor::zeros(vec![1, 3, 3, 24]));
    assert!(patch_merging(&mut tape, odd, &mw, 1e-5).is_err());
}

fn tree_inputs<P: ParamTree<Tensor<f64>>>(tree: &P) -> Vec<Tensor<f64>> {
    let mut out = Vec::new();
    tree.visit("", &mut |_, t| out.push(t.clone()));
    out
}

fn rebind<P: ParamTree<Tensor<f64>>>(template: &P, vars: &[Var]) -> P::Mapped<Var> {
    let mut i = 0;
    template
        .try_map::<Var, Error>("", &mut |_, _| {
            i += 1;
            Ok(vars[i - 1])
        })
        .unwrap()
}

#[test]
fn block_gradients_plain_and_shifted() {
    let cfg = mini_config();
    for seed in 0..20 {
        let params = random_params(&cfg, seed, 0.5);
        for (bi, shift) in [(0usize, 0usize), (1, 1)] {
            assert_eq!(cfg.block_shift(0, bi), shift);
            let block = &params.stages[0].blocks[bi];
            let mut inputs = vec![uniform(&mut rng(seed + 1000), &[1, 4, 4, 4], 1.0)];
            inputs.extend(tree_inputs(block));
            let geom = BlockGeometry { heads: 2, window: 2, shift };
            let err = max_grad_err(
                |t, v| Ok(swin_block(t, v[0], &rebind(block, &v[1..]), geom, 1e-5)?.0),
                &inputs,
                seed,
            );
            assert!(err <= 1e-4, "block {bi} seed {seed}: {err:e}");
        }
    }
}

#[test]
fn patch_merging_gradients() {
    let cfg = SwinConfig { depths: vec![1, 1], heads: vec![1, 2], ..mini_config() };
    for seed in 0..20 {
        let params = random_params(&cfg, seed, 0.5);
        let merge = params.stages[0].merge.as_ref().unwrap();
        let mut inputs = vec![uniform(&mut rng(seed + 7), &[1, 4, 4, 4], 1.0)];
        inputs.extend(tree_inputs(merge));
        let err = max_grad_err(|t, v| patch_merging(t, v[0], &rebind(merge, &v[1..]), 1e-5), &inputs, seed);
        assert!(err <= 1e-4, "seed {seed}: {err:e}");
    }
}

#[test]
fn full_mini_model_gradients_including_patch_embed() {
    let cfg = mini_config();
    let model = SwinModel::new(cfg.clone()).unwrap();
    for seed in 0..20 {
        let params = random_params(&cfg, seed, 0.5);
        let mut inputs = vec![uniform(&mut rng(seed + 77), &[2, 3, 8, 8], 1.0)];
        inputs.extend(tree_inputs(&params));
        let err = max_grad_err(
            |t, v| {
                let w = rebind(&params, &v[1..]);
                model.forward(t, &w, v[0], None)
            },
            &inputs,
            seed,
        );
        assert!(err <= 1e-4, "seed {seed}: {err:e}");
    }
}

fn ce_loss(model: &SwinModel, params: &ModelParams<f64>, x: &Tensor<f64>, labels: &[usize]) -> f64 {
    let mut tape = Tape::new();
    let w = model.bind(&mut tape, params, false);
    let xv = tape.constant(x.clone());
    let logits = model.forward(&mut tape, &w, xv, None).unwrap();
    let loss = tape.cross_entropy(logits, labels).unwrap();
    tape.data(loss)[0]
}

#[test]
fn tiny_model_end_to_end_gradient_sample() {
    let cfg = SwinConfig::tiny();
    let model = SwinModel::new(cfg.clone()).unwrap();
    let params = random_params(&cfg, 42, 0.2);
    let x = uniform(&mut rng(43), &[2, 3, 32, 32], 1.0);
    let labels = [0, 1];

    let mut tape = Tape::new();
    let w = model.bind(&mut tape, &params, true);
    let xv = tape.constant(x.clone());
    let logits = model.forward(&mut tape, &w, xv, None).unwrap();
    let loss = tape.cross_entropy(logits, &labels).unwrap();
    tape.backward(loss).unwrap();
    let grads: Vec<Vec<f64>> = w.named().iter().map(|(_, &v)| tape.grad(v).unwrap().to_vec()).collect();

    let sizes: Vec<usize> = params.named().iter().map(|(_, t)| t.len()).collect();
    let mut r = rng(44);
    let mut picks: Vec<(usize, usize)> = sizes.iter().enumerate().map(|(l, &n)| (l, r.gen_range(0..n))).collect();
    while picks.len() < 220 {
        let l = r.gen_range(0..sizes.len());
        picks.push((l, r.gen_range(0..sizes[l])));
    }
    picks.shuffle(&mut r);
    let mut worst: f64 = 0.0;
    for &(leaf, idx) in &picks {
        let at = |delta: f64| {
            let mut p = params.clone();
            let mut k = 0;
            p.visit_mut("", &mut |_, t| {
                if k == leaf {
                    t.data_mut()[idx] += delta;
                }
                k += 1;
            });
            ce_loss(&model, &p, &x, &labels)
        };
        let numeric = (at(H) - at(-H)) / (2.0 * H);
        worst = worst.max(rel_err(grads[leaf][idx], numeric));
    }
    assert!(worst <= 1e-4, "worst rel err {worst:e} over {} parameters", picks.len());
}
