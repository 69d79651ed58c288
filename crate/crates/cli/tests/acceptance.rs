//! One PASS/FAIL line per acceptance criterion, run in order so that each
//! runtime is measured without competing tests.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::rc::Rc;
use std::time::{Duration, Instant};

use common::{max_grad_err, rng, uniform};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use swinforge::colorframe::{ycbcr_pixel, ColorFrame, Preprocessor, YCBCR_MATRIX};
use swinforge::dataset::{DatasetManifest, SampleLoader, Split, SplitRatios};
use swinforge::metrics::{confusion, f1_score, prf1, roc_auc, ConfusionMatrix};
use swinforge::swin::{patch_merging, swin_block, BlockGeometry, ModelParams, ParamTree, SwinConfig, SwinModel};
use swinforge::trainer::{cross_entropy_loss, evaluate, train, train_step, AdamConfig, AdamState, TrainConfig};
use swinforge::tsne::{self, conditional_affinities, kl_divergence, kl_gradient, low_dim_affinities, symmetrize, DIM};
use swinforge::{Error, Tape, Tensor, Var};

type Check = std::result::Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

enum Outcome {
    Pass,
    Fail,
    Blocked,
}

/// `Err` from the runner means the criterion cannot be exercised here.
fn report(id: u32, name: &str, limit: Duration, run: impl FnOnce() -> std::result::Result<Check, String>) -> Outcome {
    let started = Instant::now();
    let result = run();
    let took = started.elapsed();
    let (outcome, line) = match result {
        Err(why) => (Outcome::Blocked, format!("BLOCKED  {why}")),
        Ok(Ok(detail)) if took <= limit => {
            (Outcome::Pass, format!("PASS  {detail} ({:.1}s, limit {}s)", took.as_secs_f64(), limit.as_secs()))
        }
        Ok(Ok(detail)) => (
            Outcome::Fail,
            format!("FAIL  {detail} but took {:.1}s, limit {}s", took.as_secs_f64(), limit.as_secs()),
        ),
        Ok(Err(why)) => (Outcome::Fail, format!("FAIL  {why} ({:.1}s)", took.as_secs_f64())),
    };
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "acceptance {id} {name}: {line}");
    let _ = out.flush();
    outcome
}

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn criterion_1() -> Check {
    let readme = fs::read_to_string(workspace_root().join("README.md")).map_err(|e| format!("README.md: {e}"))?;
    ensure(readme.contains("Paper-scale results are not reproduced"), || {
        "README does not state that paper-scale results are not reproduced".into()
    })?;
    Ok("README states the scale limitation; suites 2-9 substitute".into())
}

const SEEDS: u64 = 20;
const GRAD_TOL: f64 = 1e-4;

type OpCase = (&'static str, Box<dyn Fn(u64) -> f64>);

fn op_cases() -> Vec<OpCase> {
    fn case(name: &'static str, f: impl Fn(u64) -> f64 + 'static) -> OpCase {
        (name, Box::new(f))
    }
    let labels = [0usize, 1, 1, 0, 1, 0];
    let idx: Rc<[usize]> = vec![3, 1, 3, 9, 0, 0, 7, 2].into();
    let mut cases = vec![
        case("matmul", |s| {
            let mut r = rng(s);
            let (a, b) = (uniform(&mut r, &[3, 4], 1.0), uniform(&mut r, &[4, 2], 1.0));
            max_grad_err(|t, v| t.matmul(v[0], v[1]), &[a, b], s)
        }),
        case("batched matmul", |s| {
            let mut r = rng(s);
            let (a, b) = (uniform(&mut r, &[2, 3, 4], 1.0), uniform(&mut r, &[2, 4, 3], 1.0));
            max_grad_err(|t, v| t.matmul(v[0], v[1]), &[a, b], s)
        }),
        case("shared-weight matmul", |s| {
            let mut r = rng(s);
            let (a, b) = (uniform(&mut r, &[2, 3, 4], 1.0), uniform(&mut r, &[4, 2], 1.0));
            max_grad_err(|t, v| t.matmul(v[0], v[1]), &[a, b], s)
        }),
        case("add", |s| {
            let mut r = rng(s);
            let (a, b) = (uniform(&mut r, &[4, 5], 1.0), uniform(&mut r, &[4, 5], 1.0));
            max_grad_err(|t, v| t.add(v[0], v[1]), &[a, b], s)
        }),
        case("add_trailing", |s| {
            let mut r = rng(s);
            let (a, b) = (uniform(&mut r, &[3, 2, 5], 1.0), uniform(&mut r, &[5], 1.0));
            max_grad_err(|t, v| t.add_trailing(v[0], v[1]), &[a, b], s)
        }),
        case("mul", |s| {
            let mut r = rng(s);
            let (a, b) = (uniform(&mut r, &[6, 4], 1.0), uniform(&mut r, &[6, 4], 1.0));
            max_grad_err(|t, v| t.mul(v[0], v[1]), &[a, b], s)
        }),
        case("scale", |s| max_grad_err(|t, v| t.scale(v[0], -1.75), &[uniform(&mut rng(s), &[8], 2.0)], s)),
        case("gelu", |s| max_grad_err(|t, v| t.gelu(v[0]), &[uniform(&mut rng(s), &[40], 4.0)], s)),
        case("reshape", |s| max_grad_err(|t, v| t.reshape(v[0], &[2, 12]), &[uniform(&mut rng(s), &[4, 6], 1.0)], s)),
        case("permute", |s| {
            max_grad_err(|t, v| t.permute(v[0], &[2, 0, 1]), &[uniform(&mut rng(s), &[2, 3, 4], 1.0)], s)
        }),
        case("narrow", |s| max_grad_err(|t, v| t.narrow(v[0], 1, 2, 4), &[uniform(&mut rng(s), &[3, 7], 1.0)], s)),
        case("concat", |s| {
            let mut r = rng(s);
            let (a, b) = (uniform(&mut r, &[2, 3], 1.0), uniform(&mut r, &[2, 5], 1.0));
            max_grad_err(|t, v| t.concat(&[v[0], v[1], v[0]], 1), &[a, b], s)
        }),
        case("gather", move |s| {
            let idx = idx.clone();
            max_grad_err(move |t, v| t.gather(v[0], idx.clone(), &[2, 4]), &[uniform(&mut rng(s), &[10], 1.0)], s)
        }),
        case("layer_norm", |s| {
            let mut r = rng(s);
            let x = uniform(&mut r, &[4, 6], 2.0);
            let g = uniform(&mut r, &[6], 1.5);
            let b = uniform(&mut r, &[6], 1.0);
            max_grad_err(|t, v| t.layer_norm(v[0], v[1], v[2], 1e-5), &[x, g, b], s)
        }),
        case("sum", |s| max_grad_err(|t, v| t.sum(v[0]), &[uniform(&mut rng(s), &[3, 5], 1.0)], s)),
        case("mean", |s| max_grad_err(|t, v| t.mean(v[0]), &[uniform(&mut rng(s), &[3, 5], 1.0)], s)),
        case("cross_entropy", move |s| {
            max_grad_err(|t, v| t.cross_entropy(v[0], &labels), &[uniform(&mut rng(s), &[6, 2], 3.0)], s)
        }),
    ];
    for axis in 0..3 {
        cases.push(case("softmax", move |s| {
            max_grad_err(|t, v| t.softmax(v[0], axis), &[uniform(&mut rng(s), &[2, 3, 4], 3.0)], s)
        }));
        cases.push(case("mean_axis", move |s| {
            max_grad_err(|t, v| t.mean_axis(v[0], axis), &[uniform(&mut rng(s), &[2, 3, 4], 1.0)], s)
        }));
    }
    cases
}

/// 8x8 inputs, patch 2, C=4, two heads, window 2: every Swin mechanism at a
/// size where exhaustive finite differences are cheap.
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

fn random_params(cfg: &SwinConfig, seed: u64) -> ModelParams<f64> {
    let mut r = rng(seed);
    ModelParams::<f64>::init(cfg, seed).unwrap().map(|name, t| {
        let mut u = uniform(&mut r, t.shape(), 0.5);
        if name.ends_with("gain") {
            u.data_mut().iter_mut().for_each(|v| *v += 1.0);
        }
        u
    })
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

fn composed_cases() -> Vec<OpCase> {
    let mut cases: Vec<OpCase> = Vec::new();
    for (bi, shift) in [(0usize, 0usize), (1, 1)] {
        let name = if shift == 0 { "swin block" } else { "shifted swin block" };
        cases.push((
            name,
            Box::new(move |s| {
                let params = random_params(&mini_config(), s);
                let block = &params.stages[0].blocks[bi];
                let mut inputs = vec![uniform(&mut rng(s + 1000), &[1, 4, 4, 4], 1.0)];
                inputs.extend(tree_inputs(block));
                let geom = BlockGeometry { heads: 2, window: 2, shift };
                max_grad_err(|t, v| Ok(swin_block(t, v[0], &rebind(block, &v[1..]), geom, 1e-5)?.0), &inputs, s)
            }),
        ));
    }
    cases.push((
        "patch merging",
        Box::new(|s| {
            let cfg = SwinConfig { depths: vec![1, 1], heads: vec![1, 2], ..mini_config() };
            let params = random_params(&cfg, s);
            let merge = params.stages[0].merge.as_ref().unwrap();
            let mut inputs = vec![uniform(&mut rng(s + 7), &[1, 4, 4, 4], 1.0)];
            inputs.extend(tree_inputs(merge));
            max_grad_err(|t, v| patch_merging(t, v[0], &rebind(merge, &v[1..]), 1e-5), &inputs, s)
        }),
    ));
    cases.push((
        "full model",
        Box::new(|s| {
            let cfg = mini_config();
            let model = SwinModel::new(cfg.clone()).unwrap();
            let params = random_params(&cfg, s);
            let mut inputs = vec![uniform(&mut rng(s + 77), &[2, 3, 8, 8], 1.0)];
            inputs.extend(tree_inputs(&params));
            max_grad_err(|t, v| model.forward(t, &rebind(&params, &v[1..]), v[0], None), &inputs, s)
        }),
    ));
    cases
}

fn criterion_2() -> Check {
    let cases: Vec<OpCase> = op_cases().into_iter().chain(composed_cases()).collect();
    let mut worst: f64 = 0.0;
    for (name, check) in &cases {
        for seed in 0..SEEDS {
            let err = check(seed);
            ensure(err <= GRAD_TOL, || format!("{name} seed {seed}: rel err {err:e}"))?;
            worst = worst.max(err);
        }
    }
    Ok(format!("{} cases x {SEEDS} seeds, worst rel err {worst:.2e}", cases.len()))
}

fn criterion_3() -> Check {
    let pins = [[0.300, 0.586, 0.113], [-0.168, -0.328, 0.496], [0.496, -0.414, -0.082]];
    for (r, row) in pins.iter().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            ensure(YCBCR_MATRIX[r][c].to_bits() == f64::to_bits(v), || format!("matrix entry ({r},{c})"))?;
        }
    }
    let offsets = [0.0, 128.0, 128.0];
    for c in 0..3 {
        let mut px = [0.0; 3];
        px[c] = 255.0;
        let out = ycbcr_pixel(px);
        for r in 0..3 {
            let want = pins[r][c] * 255.0 + offsets[r];
            ensure(out[r].to_bits() == want.to_bits(), || format!("column {c} row {r}: {} vs {want}", out[r]))?;
        }
    }
    ensure(ycbcr_pixel([0.0; 3]) == [0.0, 128.0, 128.0], || "black pixel".into())?;
    for v in 0..=255u8 {
        let [_, cb, cr] = ycbcr_pixel([f64::from(v); 3]);
        ensure((cb - 128.0).abs() <= 1e-9 && (cr - 128.0).abs() <= 1e-9, || format!("gray level {v}: {cb}, {cr}"))?;
    }
    Ok("9 coefficient pins exact, 256 gray levels neutral".into())
}

fn ce(logits: &[f64], labels: &[usize]) -> f64 {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::new(vec![labels.len(), 2], logits.to_vec()).unwrap());
    let loss = cross_entropy_loss(&mut tape, x, labels).unwrap();
    tape.data(loss)[0]
}

fn scalar_adam(w: f64, g: f64, m: &mut f64, v: &mut f64, t: i32, c: &AdamConfig) -> f64 {
    *m = c.beta1 * *m + (1.0 - c.beta1) * g;
    *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
    let mh = *m / (1.0 - c.beta1.powi(t));
    let vh = *v / (1.0 - c.beta2.powi(t));
    w - c.learning_rate * mh / (vh.sqrt() + c.eps)
}

fn criterion_4() -> Check {
    let uniform_case = ce(&[0.0; 6], &[0, 1, 1]);
    ensure((uniform_case - std::f64::consts::LN_2).abs() <= 1e-6, || format!("uniform case {uniform_case}"))?;
    let hand = ce(&[2.0, 0.0, 0.0, 2.0, 1.0, 1.0], &[0, 1, 0]);
    ensure((hand - 0.315668).abs() <= 1e-6, || format!("hand case {hand}"))?;

    let cfg = AdamConfig::default();
    let mut r = rng(3);
    let mut state = AdamState::<f64>::new(&[4]);
    let mut p: Vec<f64> = (0..4).map(|_| r.gen_range(-1.0..1.0)).collect();
    let g: Vec<f64> = (0..4).map(|_| r.gen_range(-2.0..2.0)).collect();
    let want: Vec<f64> = p.iter().zip(&g).map(|(&w, &gv)| scalar_adam(w, gv, &mut 0.0, &mut 0.0, 1, &cfg)).collect();
    state.step_slices(&mut [&mut p[..]], &[g], &cfg).map_err(|e| e.to_string())?;
    for (a, b) in p.iter().zip(&want) {
        ensure((a - b).abs() <= 1e-10, || format!("adam step {a} vs {b}"))?;
    }

    let bowl = AdamConfig { learning_rate: 1e-2, ..AdamConfig::default() };
    let mut s = AdamState::<f64>::new(&[1]);
    let mut w = vec![1.0];
    for _ in 0..500 {
        let g = vec![2.0 * w[0]];
        s.step_slices(&mut [&mut w[..]], &[g], &bowl).map_err(|e| e.to_string())?;
    }
    ensure(w[0].abs() < 1e-2, || format!("bowl ends at {}", w[0]))?;
    Ok(format!("ln2 and hand cases within 1e-6, Adam step exact, bowl |w| = {:.1e}", w[0].abs()))
}

/// Fixed balanced batch of 32 noise images in the model's input range.
fn noise_batch(seed: u64) -> (Tensor<f32>, Vec<usize>) {
    let mut r = rng(seed + 100);
    let x = Tensor::new(vec![32, 3, 32, 32], (0..32 * 3 * 1024).map(|_| r.gen_range(-2.0f32..2.0)).collect()).unwrap();
    (x, (0..32).map(|i| i % 2).collect())
}

fn criterion_5() -> Check {
    let model = SwinModel::new(SwinConfig::tiny()).map_err(|e| e.to_string())?;
    let cfg = AdamConfig::default();
    let mut reached = Vec::new();
    for seed in 0..10 {
        let (x, labels) = noise_batch(seed);
        let mut params = model.init_params::<f32>(seed).map_err(|e| e.to_string())?;
        let mut adam = AdamState::for_params(&params);
        let mut hit = None;
        for step in 0..=200 {
            // `correct` is measured before the update, so it describes the
            // parameters after `step` updates.
            let stats = train_step(&model, &mut params, &mut adam, &x, &labels, &cfg).map_err(|e| e.to_string())?;
            if stats.correct == labels.len() {
                hit = Some(step);
                break;
            }
        }
        reached.push(hit);
    }
    let ok = reached.iter().filter(|h| h.is_some()).count();
    let steps: Vec<String> = reached.iter().map(|h| h.map_or("-".into(), |s| s.to_string())).collect();
    ensure(ok >= 9, || format!("{ok}/10 seeds reached 100% within 200 steps (steps: {})", steps.join(" ")))?;
    Ok(format!("{ok}/10 seeds reached 100% train accuracy, steps {}", steps.join(" ")))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn criterion_6(root: &Path) -> Check {
    let full = DatasetManifest::build(root, SplitRatios::default(), 0).map_err(|e| e.to_string())?;
    let model = SwinModel::new(SwinConfig::tiny()).map_err(|e| e.to_string())?;
    let mut accs = [Vec::new(), Vec::new()];
    for seed in 0..3u64 {
        let mut records = full.sample_balanced(Split::Train, 1000, seed);
        records.extend(full.sample_balanced(Split::Val, 100, seed));
        records.extend(full.sample_balanced(Split::Test, 250, seed));
        let subset = DatasetManifest::from_records(full.root(), seed, records);
        for (k, frame) in [ColorFrame::Rgb, ColorFrame::Ycbcr].into_iter().enumerate() {
            let loader = SampleLoader::new(Preprocessor::new(frame, 32));
            let cfg = TrainConfig { epochs: 5, seed, ..TrainConfig::default() };
            let params = model.init_params::<f32>(seed).map_err(|e| e.to_string())?;
            let out = train(&model, params, &subset, &loader, &cfg, None).map_err(|e| e.to_string())?;
            let ev = evaluate(&model, &out.params, &subset, Split::Test, &loader, 64).map_err(|e| e.to_string())?;
            accs[k].push(ev.accuracy());
        }
    }
    let (rgb, ycbcr) = (median(accs[0].clone()), median(accs[1].clone()));
    let detail = format!("median test accuracy rgb {rgb:.4}, ycbcr {ycbcr:.4}");
    ensure(rgb >= 0.75 && rgb >= ycbcr, || detail.clone())?;
    Ok(detail)
}

/// Mann-Whitney estimate over every positive-negative pair, ties counted as
/// one half.
fn pair_auc(scores: &[f64], labels: &[usize], positive: usize) -> f64 {
    let (mut twice, mut pairs) = (0u64, 0u64);
    let of = |pos: bool| scores.iter().zip(labels).filter(move |&(_, &l)| (l == positive) == pos).map(|(&s, _)| s);
    for si in of(true) {
        for sj in of(false) {
            pairs += 1;
            twice += match si.partial_cmp(&sj).unwrap() {
                std::cmp::Ordering::Greater => 2,
                std::cmp::Ordering::Equal => 1,
                std::cmp::Ordering::Less => 0,
            };
        }
    }
    twice as f64 / (2 * pairs) as f64
}

fn criterion_7() -> Check {
    let mut r = rng(11);
    for instance in 0..100 {
        let n = r.gen_range(2..=200);
        let levels = r.gen_range(2..20);
        let mut labels: Vec<usize> = (0..n).map(|_| r.gen_range(0..2)).collect();
        labels[0] = 0;
        labels[1] = 1;
        let scores: Vec<f64> = (0..n).map(|_| f64::from(r.gen_range(0..levels)) / f64::from(levels)).collect();
        let positive = instance % 2;
        let auc = roc_auc(&scores, &labels, positive).map_err(|e| e.to_string())?.auc;
        let want = pair_auc(&scores, &labels, positive);
        ensure(auc == want, || format!("instance {instance}: {auc} vs {want}"))?;
    }
    let preds = [0, 0, 1, 0];
    let labels = [0, 1, 1, 0];
    let cm = confusion(&preds, &labels, 0).map_err(|e| e.to_string())?;
    ensure(cm == ConfusionMatrix { tp: 2, fp: 1, tn: 1, fn_: 0 }, || format!("{cm:?}"))?;
    let rep = prf1(&cm).map_err(|e| e.to_string())?;
    ensure(
        rep.accuracy == 0.75 && rep.precision == 2.0 / 3.0 && rep.recall == 1.0 && (rep.f1 - 0.8).abs() < 1e-12,
        || format!("{rep:?}"),
    )?;
    // reported precision 97.15 and recall 97.60 against the reported F1 97.37
    let f1 = f1_score(97.15, 97.60).ok_or("undefined F1")?;
    ensure((f1 - 97.37).abs() <= 0.01, || format!("F1 {f1}"))?;
    Ok(format!("100 AUC instances exact, hand confusion exact, F1 {f1:.3}"))
}

fn random_points(seed: u64, n: usize, d: usize) -> Vec<f64> {
    let mut r = rng(seed);
    (0..n * d).map(|_| r.gen_range(-3.0..3.0)).collect()
}

fn is_distribution(p: &[f64], n: usize) -> bool {
    let total: f64 = p.iter().sum();
    (total - 1.0).abs() < 1e-9 && (0..n).all(|i| p[i * n + i] == 0.0) && p.iter().all(|&v| v >= 0.0)
}

fn criterion_8() -> Check {
    for seed in 0..50 {
        let n = 4 + (seed as usize % 8);
        let x = random_points(seed, n, 3);
        let p = symmetrize(&conditional_affinities(&x, n, 3, 3.0).map_err(|e| e.to_string())?, n);
        let q = low_dim_affinities(&random_points(seed + 1, n, DIM), n);
        ensure(is_distribution(&p, n) && is_distribution(&q, n), || format!("seed {seed}: invalid P or Q"))?;
        let kl = kl_divergence(&p, &q).map_err(|e| e.to_string())?;
        ensure(kl >= 0.0, || format!("seed {seed}: KL {kl}"))?;
        ensure(kl_divergence(&p, &p).map_err(|e| e.to_string())? == 0.0, || "KL(P, P) != 0".into())?;
    }

    let n = 6;
    let mut worst: f64 = 0.0;
    for seed in 0..5 {
        let x = random_points(seed, n, 4);
        let p = symmetrize(&conditional_affinities(&x, n, 4, 3.0).map_err(|e| e.to_string())?, n);
        let y = random_points(seed + 50, n, DIM);
        let g = kl_gradient(&p, &y, n);
        for k in 0..n * DIM {
            let at = |delta: f64| {
                let mut yy = y.clone();
                yy[k] += delta;
                kl_divergence(&p, &low_dim_affinities(&yy, n)).unwrap()
            };
            let numeric = (at(1e-6) - at(-1e-6)) / 2e-6;
            worst = worst.max((g[k] - numeric).abs() / g[k].abs().max(numeric.abs()).max(1e-8));
        }
    }
    ensure(worst <= 1e-4, || format!("t-SNE gradient rel err {worst:e}"))?;

    let mut r = rng(4);
    let mut x = Vec::new();
    let mut labels = Vec::new();
    for class in 0..2 {
        for _ in 0..20 {
            for c in 0..16 {
                let center = if class == 1 && c == 0 { 10.0 } else { 0.0 };
                let e: f64 = StandardNormal.sample(&mut r);
                x.push(center + e);
            }
            labels.push(class);
        }
    }
    let cfg = tsne::TsneConfig { perplexity: 10.0, iterations: 600, ..tsne::TsneConfig::default() };
    let res = tsne::run(&x, 40, 16, &cfg).map_err(|e| e.to_string())?;
    let probe = tsne::linear_probe_accuracy(&res.embedding, &labels);
    ensure(probe == 1.0, || format!("blob probe accuracy {probe}"))?;
    Ok(format!("P/Q valid, KL >= 0 and KL(P,P) = 0, gradient rel err {worst:.1e}, blob probe {probe}"))
}

fn run_cli(args: &[&str], cwd: &Path) -> std::result::Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_swinforge"))
        .args(args)
        .current_dir(cwd)
        .env("SWINFORGE_THREADS", "1")
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())?;
    ensure(out.status.success(), || format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)))
}

fn criterion_9() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cwd = dir.path();
    common::write_png_dataset(&cwd.join("data"), 100, 32, 9, true);
    let outputs = [
        "prep/manifest.tsv",
        "prep/counts.csv",
        "run/epochs.csv",
        "ev/metrics.csv",
        "ev/roc.csv",
        "ev/predictions.csv",
    ];
    let mut runs = Vec::new();
    for k in 0..2 {
        let base = cwd.join(format!("run{k}"));
        let p = |s: &str| base.join(s).to_string_lossy().into_owned();
        run_cli(&["prepare", "--root", "data", "--out", &p("prep"), "--seed", "7"], cwd)?;
        run_cli(
            &["train", "--manifest", &p("prep/manifest.tsv"), "--epochs", "2", "--seed", "7", "--out", &p("run")],
            cwd,
        )?;
        run_cli(&["eval", "--checkpoint", &p("run/last.ckpt"), "--out", &p("ev")], cwd)?;
        let bytes: Vec<Vec<u8>> = outputs.iter().map(|f| fs::read(base.join(f)).unwrap_or_default()).collect();
        runs.push(bytes);
    }
    for (f, (a, b)) in outputs.iter().zip(runs[0].iter().zip(&runs[1])) {
        ensure(!a.is_empty(), || format!("{f} missing"))?;
        ensure(a == b, || format!("{f} differs between runs"))?;
    }
    Ok(format!("{} CSV outputs byte-identical across two runs", outputs.len()))
}

#[test]
fn acceptance() {
    let mins = |m: u64| Duration::from_secs(60 * m);
    let _ = writeln!(std::io::stdout());
    let outcomes = [
        report(1, "scale limitation documented", Duration::from_secs(1), || Ok(criterion_1())),
        report(2, "gradient suite", mins(2), || Ok(criterion_2())),
        report(3, "color matrix exactness", Duration::from_secs(1), || Ok(criterion_3())),
        report(4, "loss and optimizer", Duration::from_secs(10), || Ok(criterion_4())),
        report(5, "overfit oracle", mins(5), || Ok(criterion_5())),
        report(6, "color-frame direction on CIFAKE", mins(60), || {
            std::env::var_os("CIFAKE_ROOT")
                .map(|r| criterion_6(Path::new(&r)))
                .ok_or_else(|| "needs the CIFAKE images; set CIFAKE_ROOT to run it".to_string())
        }),
        report(7, "metrics oracle", Duration::from_secs(10), || Ok(criterion_7())),
        report(8, "t-SNE suite", mins(2), || Ok(criterion_8())),
        report(9, "determinism", mins(10), || Ok(criterion_9())),
    ];
    let failed = outcomes.iter().filter(|o| matches!(o, Outcome::Fail)).count();
    let blocked = outcomes.iter().filter(|o| matches!(o, Outcome::Blocked)).count();
    let _ = writeln!(std::io::stdout(), "acceptance: {} passed, {failed} failed, {blocked} blocked", 9 - failed - blocked);
    assert_eq!(failed, 0);
}
