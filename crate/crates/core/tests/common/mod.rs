#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use swinforge::{Result, Tape, Tensor, Var};

pub const H: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

/// |a - n| / max(|a|, |n|, 1e-5)
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-5)
}

/// Scalar loss `sum(f(inputs) * weights)`, returned as value.
fn eval<F>(f: &F, inputs: &[Tensor<f64>], weights: &Tensor<f64>, trainable: bool) -> Result<(Tape<f64>, Vec<Var>, Var)>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) })
        .collect();
    let out = f(&mut tape, &vars)?;
    let w = tape.constant(weights.clone().reshaped(tape.shape(out).to_vec())?);
    let prod = tape.mul(out, w)?;
    let loss = tape.sum(prod)?;
    Ok((tape, vars, loss))
}

/// Largest relative error between backward() and central differences over
/// every input element. The output is contracted with fixed random weights.
pub fn max_grad_err<F>(f: F, inputs: &[Tensor<f64>], seed: u64) -> f64
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let probe = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars).unwrap();
        tape.shape(out).to_vec()
    };
    let weights = uniform(&mut rng(seed ^ 0xA5A5), &probe, 1.0);
    let (mut tape, vars, loss) = eval(&f, inputs, &weights, true).unwrap();
    tape.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (k, v) in vars.iter().enumerate() {
        let analytic = tape.grad(*v).unwrap().to_vec();
        for i in 0..inputs[k].len() {
            let value_at = |delta: f64| {
                let mut shifted = inputs.to_vec();
                shifted[k].data_mut()[i] += delta;
                let (tape, _, loss) = eval(&f, &shifted, &weights, false).unwrap();
                tape.data(loss)[0]
            };
            let numeric = (value_at(H) - value_at(-H)) / (2.0 * H);
            let e = rel_err(analytic[i], numeric);
            if e > worst && std::env::var_os("GRAD_DEBUG").is_some() {
                eprintln!("input {k} elem {i}: analytic {:e} numeric {:e} err {e:e}", analytic[i], numeric);
            }
            worst = worst.max(e);
        }
    }
    worst
}

/// Writes `per_class` random `side`x`side` PNGs into `root/FAKE` and
/// `root/REAL`. With `separable`, fake images are tinted toward red and real
/// ones toward blue so that a classifier can learn the split quickly.
pub fn write_png_dataset(root: &std::path::Path, per_class: usize, side: u32, seed: u64, separable: bool) {
    let mut r = rng(seed);
    for (c, class) in ["FAKE", "REAL"].iter().enumerate() {
        let dir = root.join(class);
        std::fs::create_dir_all(&dir).unwrap();
        for i in 0..per_class {
            let img = image::RgbImage::from_fn(side, side, |_, _| {
                let mut px: [u8; 3] = [r.gen(), r.gen(), r.gen()];
                if separable {
                    let tinted = if c == 0 { 0 } else { 2 };
                    px[tinted] = px[tinted] / 2 + 128;
                }
                image::Rgb(px)
            });
            img.save(dir.join(format!("{i:04}.png"))).unwrap();
        }
    }
}
