//! Finite-difference verification of the autodiff in float64.
//!
//! Each check draws random inputs and a random upstream gradient `r`, runs
//! backward, and compares analytic gradients of `sum(r * out)` against
//! central differences at sampled coordinates.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::Serialize;

use super::tensor::{Tape, Var};
use super::unet::{UNet, UNetConfig};
use crate::error::Result;
use crate::seed;

pub const OP_TOLERANCE: f64 = 1e-4;
pub const MODEL_TOLERANCE: f64 = 1e-3;
/// Random points per check.
pub const POINTS: usize = 20;

#[derive(Clone, Debug, Serialize)]
pub struct GradCheck {
    pub name: String,
    pub points: usize,
    /// Coordinates compared, summed over all points.
    pub coordinates: usize,
    /// Probes discarded because `x +/- h` crossed a ReLU or max-pool kink.
    pub skipped_kinks: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(1e-8);
    (analytic - numeric).abs() / scale
}

type Inputs = Vec<(Vec<usize>, Vec<f64>)>;

fn normal(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect()
}

fn leaves(tape: &mut Tape<f64>, inputs: &Inputs) -> Result<Vec<Var>> {
    inputs.iter().map(|(s, v)| tape.leaf(s, v.clone(), true)).collect()
}

/// `sum(r * f(inputs))` on a fresh tape, with the tape's activation pattern.
fn objective<F>(f: &F, inputs: &Inputs, r: &[f64]) -> Result<(f64, Vec<u32>)>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = leaves(&mut tape, inputs)?;
    let out = f(&mut tape, &vars)?;
    let value = tape.value(out).iter().zip(r).map(|(a, b)| a * b).sum();
    Ok((value, tape.activation_pattern()))
}

/// Runs one check. `make` builds inputs and the function for a point from
/// its rng; `coords` caps the coordinates probed per point.
fn run<M, F>(name: &str, master: u64, tolerance: f64, h: f64, coords: usize, make: M) -> Result<GradCheck>
where
    M: Fn(&mut ChaCha8Rng) -> (Inputs, F),
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut max_rel_err: f64 = 0.0;
    let mut checked = 0;
    let mut skipped_kinks = 0;
    for point in 0..POINTS {
        let mut rng = seed::rng(master, &[seed::hash_str(name), point as u64]);
        let (inputs, f) = make(&mut rng);
        let mut tape = Tape::new();
        let vars = leaves(&mut tape, &inputs)?;
        let out = f(&mut tape, &vars)?;
        let r = normal(&mut rng, tape.value(out).len(), 1.0);
        let pattern = tape.activation_pattern();
        tape.backward_with(out, r.clone())?;
        let analytic: Vec<Vec<f64>> = vars
            .iter()
            .map(|&v| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; tape.value(v).len()]))
            .collect();

        let total: usize = inputs.iter().map(|(_, v)| v.len()).sum();
        let probes: Vec<(usize, usize)> = if total <= coords {
            (0..inputs.len())
                .flat_map(|i| (0..inputs[i].1.len()).map(move |j| (i, j)))
                .collect()
        } else {
            (0..coords)
                .map(|_| {
                    let mut flat = rng.random_range(0..total);
                    let mut i = 0;
                    while flat >= inputs[i].1.len() {
                        flat -= inputs[i].1.len();
                        i += 1;
                    }
                    (i, flat)
                })
                .collect()
        };
        for (i, j) in probes {
            let mut plus = inputs.clone();
            plus[i].1[j] += h;
            let mut minus = inputs.clone();
            minus[i].1[j] -= h;
            let (fp, pp) = objective(&f, &plus, &r)?;
            let (fm, pm) = objective(&f, &minus, &r)?;
            if pp != pattern || pm != pattern {
                skipped_kinks += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * h);
            max_rel_err = max_rel_err.max(rel_err(analytic[i][j], numeric));
            checked += 1;
        }
    }
    Ok(GradCheck {
        name: name.to_string(),
        points: POINTS,
        coordinates: checked,
        skipped_kinks,
        max_rel_err,
        tolerance,
    })
}

const H_OP: f64 = 1e-5;
const H_MODEL: f64 = 1e-5;
const OP_COORDS: usize = 48;

fn unary(shape: &[usize], rng: &mut ChaCha8Rng) -> Inputs {
    vec![(shape.to_vec(), normal(rng, shape.iter().product(), 1.0))]
}

pub fn check_conv2d(seed: u64, k: usize) -> Result<GradCheck> {
    let name = format!("conv2d_{k}x{k}");
    run(&name, seed, OP_TOLERANCE, H_OP, OP_COORDS, |rng| {
        let (b, cin, cout, h, w) = (2, 3, 4, 5, 6);
        let inputs = vec![
            (vec![b, cin, h, w], normal(rng, b * cin * h * w, 1.0)),
            (vec![cout, cin, k, k], normal(rng, cout * cin * k * k, 0.5)),
            (vec![cout], normal(rng, cout, 0.5)),
        ];
        (inputs, |t: &mut Tape<f64>, v: &[Var]| t.conv2d(v[0], v[1], v[2]))
    })
}

pub fn check_relu(seed: u64) -> Result<GradCheck> {
    run("relu", seed, OP_TOLERANCE, H_OP, OP_COORDS, |rng| {
        (unary(&[2, 3, 4, 4], rng), |t: &mut Tape<f64>, v: &[Var]| Ok(t.relu(v[0])))
    })
}

pub fn check_sigmoid(seed: u64) -> Result<GradCheck> {
    run("sigmoid", seed, OP_TOLERANCE, H_OP, OP_COORDS, |rng| {
        (unary(&[2, 3, 4, 4], rng), |t: &mut Tape<f64>, v: &[Var]| Ok(t.sigmoid(v[0])))
    })
}

pub fn check_maxpool2(seed: u64) -> Result<GradCheck> {
    run("maxpool2", seed, OP_TOLERANCE, H_OP, OP_COORDS, |rng| {
        (unary(&[2, 2, 4, 6], rng), |t: &mut Tape<f64>, v: &[Var]| t.maxpool2(v[0]))
    })
}

pub fn check_upsample2(seed: u64) -> Result<GradCheck> {
    run("upsample2", seed, OP_TOLERANCE, H_OP, OP_COORDS, |rng| {
        (unary(&[2, 2, 3, 3], rng), |t: &mut Tape<f64>, v: &[Var]| t.upsample2(v[0]))
    })
}

pub fn check_concat(seed: u64) -> Result<GradCheck> {
    run("concat", seed, OP_TOLERANCE, H_OP, OP_COORDS, |rng| {
        let mut inputs = unary(&[2, 2, 3, 3], rng);
        inputs.extend(unary(&[2, 3, 3, 3], rng));
        (inputs, |t: &mut Tape<f64>, v: &[Var]| t.concat(v[0], v[1]))
    })
}

pub fn check_sum(seed: u64) -> Result<GradCheck> {
    run("sum", seed, OP_TOLERANCE, H_OP, OP_COORDS, |rng| {
        (unary(&[2, 3, 4, 4], rng), |t: &mut Tape<f64>, v: &[Var]| Ok(t.sum(v[0])))
    })
}

pub fn check_bce(seed: u64) -> Result<GradCheck> {
    run("bce_with_logits", seed, OP_TOLERANCE, H_OP, OP_COORDS, |rng| {
        let n = 2 * 16;
        let inputs = vec![(vec![2, 1, 4, 4], normal(rng, n, 2.0))];
        let target: Vec<f64> = (0..n).map(|_| f64::from(rng.random_bool(0.5) as u8)).collect();
        let mut ignore: Vec<bool> = (0..n).map(|_| rng.random_bool(0.25)).collect();
        ignore[0] = false;
        let f = move |t: &mut Tape<f64>, v: &[Var]| t.bce_with_logits(v[0], &target, &ignore);
        (inputs, f)
    })
}

/// The tiny network used for the end-to-end check: 8 channels, two
/// downsamplings.
pub fn tiny_config() -> UNetConfig {
    UNetConfig {
        in_channels: 8,
        depth: 2,
        encoder_widths: vec![4, 6, 8],
        decoder_widths: vec![6, 4],
    }
}

/// BCE of a freshly initialised tiny U-Net on a 1x8x16x16 input, checked
/// against every parameter tensor and the input.
pub fn check_unet(seed: u64) -> Result<GradCheck> {
    let config = tiny_config();
    run("unet_end_to_end", seed, MODEL_TOLERANCE, H_MODEL, 40, |rng| {
        let point_seed: u64 = rng.random();
        let mut model = UNet::<f64>::init(config.clone(), point_seed).expect("valid config");
        let bias = Normal::new(0.0, 0.1).unwrap();
        for p in model.params_mut() {
            if p.shape.len() == 1 {
                p.data.iter_mut().for_each(|v| *v = bias.sample(rng));
            }
        }
        let (hw, c) = (16 * 16, config.in_channels);
        let mut inputs = vec![(vec![1, c, 16, 16], normal(rng, c * hw, 1.0))];
        inputs.extend(model.params().iter().map(|p| (p.shape.clone(), p.data.clone())));
        let target: Vec<f64> = (0..hw).map(|_| f64::from(rng.random_bool(0.4) as u8)).collect();
        let ignore: Vec<bool> = (0..hw).map(|_| rng.random_bool(0.1)).collect();
        let f = move |t: &mut Tape<f64>, v: &[Var]| {
            let logits = model.forward_with(t, v[0], &v[1..])?;
            t.bce_with_logits(logits, &target, &ignore)
        };
        (inputs, f)
    })
}

/// Every per-op check followed by the end-to-end model check.
pub fn run_all(seed: u64) -> Result<Vec<GradCheck>> {
    Ok(vec![
        check_conv2d(seed, 3)?,
        check_conv2d(seed, 1)?,
        check_relu(seed)?,
        check_maxpool2(seed)?,
        check_upsample2(seed)?,
        check_concat(seed)?,
        check_sigmoid(seed)?,
        check_sum(seed)?,
        check_bce(seed)?,
        check_unet(seed)?,
    ])
}
