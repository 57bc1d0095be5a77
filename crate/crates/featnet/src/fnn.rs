//! Fully connected feedforward networks: ReLU hidden layers, softmax
//! output, cross-entropy loss, analytic gradients, decimal quantization and
//! plain-text persistence.
//!
//! Weight matrices are stored fan_in x fan_out row-major, so the forward
//! pass accumulates `z[o] += a[i] * w[i, o]` with unit stride.

use std::io::{BufRead, Write};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::features::Matrix;

/// Layer sizes from input to output; at least one hidden layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FnnArch(Vec<usize>);

impl FnnArch {
    pub fn new(sizes: Vec<usize>) -> Result<Self> {
        if sizes.len() < 3 {
            return Err(Error::Config(format!(
                "architecture {sizes:?} needs input, at least one hidden, and output layer"
            )));
        }
        if sizes.iter().any(|&s| s == 0) {
            return Err(Error::Config(format!(
                "architecture {sizes:?} has an empty layer"
            )));
        }
        Ok(Self(sizes))
    }

    pub fn sizes(&self) -> &[usize] {
        &self.0
    }

    pub fn input_len(&self) -> usize {
        self.0[0]
    }

    pub fn output_len(&self) -> usize {
        *self.0.last().unwrap()
    }

    /// Number of weight layers (connections between consecutive layers).
    pub fn depth(&self) -> usize {
        self.0.len() - 1
    }

    /// Trainable parameters of one net: weights plus biases.
    pub fn params_per_net(&self) -> u64 {
        self.0
            .windows(2)
            .map(|w| (w[0] as u64 + 1) * w[1] as u64)
            .sum()
    }

    /// Neurons of one net, input layer included.
    pub fn neurons_per_net(&self) -> u64 {
        self.0.iter().map(|&s| s as u64).sum()
    }

    /// `900x256x25` style rendering, also used by the weight file header.
    pub fn label(&self) -> String {
        self.0
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join("x")
    }

    pub fn parse(text: &str) -> Result<Self> {
        let sizes = text
            .split('x')
            .map(|t| {
                t.parse::<usize>()
                    .map_err(|_| Error::Parse(format!("bad architecture {text:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(sizes)
    }
}

/// Total parameter count of a model with `n` features, `k` modules and `r`
/// submodules: one net per (feature, module, submodule) cell.
pub fn count_params(arch: &FnnArch, n: u64, k: u64, r: u64) -> u64 {
    n * k * r * arch.params_per_net()
}

/// Total neuron count of the same grid of nets.
pub fn count_neurons(arch: &FnnArch, n: u64, k: u64, r: u64) -> u64 {
    n * k * r * arch.neurons_per_net()
}

/// Weights and biases of one net. `precision` is the decimal grid the
/// values live on, if the net has been quantized.
#[derive(Debug, Clone, PartialEq)]
pub struct FnnParams {
    pub arch: FnnArch,
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
    pub precision: Option<u8>,
}

impl FnnParams {
    /// Applies `params -= rate * grad`. Clears any quantization tag.
    pub fn apply_step(&mut self, grad: &Gradient, rate: f64) {
        for (w, dw) in self.weights.iter_mut().zip(&grad.dw) {
            for (v, d) in w.data_mut().iter_mut().zip(dw.data()) {
                *v -= rate * d;
            }
        }
        for (b, db) in self.biases.iter_mut().zip(&grad.db) {
            for (v, d) in b.iter_mut().zip(db) {
                *v -= rate * d;
            }
        }
        self.precision = None;
    }
}

/// Glorot-uniform weights (bound sqrt(6 / (fan_in + fan_out))), zero biases.
/// The draw order is layer by layer, row-major, so a seed pins every value.
pub fn init_params(arch: &FnnArch, seed: u64) -> FnnParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut weights = Vec::with_capacity(arch.depth());
    let mut biases = Vec::with_capacity(arch.depth());
    for pair in arch.sizes().windows(2) {
        let (fan_in, fan_out) = (pair[0], pair[1]);
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        weights.push(Matrix::new(fan_in, fan_out, data).expect("sized by construction"));
        biases.push(vec![0.0; fan_out]);
    }
    FnnParams {
        arch: arch.clone(),
        weights,
        biases,
        precision: None,
    }
}

/// Numerically stable softmax: shifts by the max logit before
/// exponentiating.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / sum).collect()
}

/// Forward-pass record: post-ReLU hidden activations, raw output logits and
/// softmax probabilities.
#[derive(Debug, Clone)]
pub struct Activations {
    pub hidden: Vec<Vec<f64>>,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

fn affine(w: &Matrix, b: &[f64], a: &[f64]) -> Vec<f64> {
    let mut z = b.to_vec();
    let cols = w.cols();
    let data = w.data();
    for (i, &ai) in a.iter().enumerate() {
        if ai == 0.0 {
            continue;
        }
        let row = &data[i * cols..(i + 1) * cols];
        for (zo, &wo) in z.iter_mut().zip(row) {
            *zo += ai * wo;
        }
    }
    z
}

pub fn forward(params: &FnnParams, x: &[f64]) -> Result<Activations> {
    if x.len() != params.arch.input_len() {
        return Err(Error::Dimension(format!(
            "input has {} values, net expects {}",
            x.len(),
            params.arch.input_len()
        )));
    }
    let depth = params.arch.depth();
    let mut hidden: Vec<Vec<f64>> = Vec::with_capacity(depth - 1);
    for l in 0..depth - 1 {
        let a: &[f64] = if l == 0 { x } else { &hidden[l - 1] };
        let mut z = affine(&params.weights[l], &params.biases[l], a);
        for v in &mut z {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        hidden.push(z);
    }
    let a: &[f64] = if depth == 1 { x } else { &hidden[depth - 2] };
    let logits = affine(&params.weights[depth - 1], &params.biases[depth - 1], a);
    let probs = softmax(&logits);
    Ok(Activations {
        hidden,
        logits,
        probs,
    })
}

/// Cross-entropy loss of a single class: -ln p_c.
pub fn class_loss(probs: &[f64], c: u32) -> f64 {
    -probs[c as usize].ln()
}

/// Index of the largest probability; ties go to the smaller label.
pub fn arg_top(probs: &[f64]) -> u32 {
    let mut best = 0usize;
    for (i, &p) in probs.iter().enumerate().skip(1) {
        if p > probs[best] {
            best = i;
        }
    }
    best as u32
}

/// One ranked prediction: a class label with the cross-entropy loss the net
/// would incur were that class the target.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictionRecord {
    pub label: u32,
    pub loss: f64,
}

/// The `m` most probable classes as (label, loss) records, ordered by
/// ascending loss, ties by ascending label. `m` is clamped to the class
/// count.
pub fn predict_top(params: &FnnParams, x: &[f64], m: usize) -> Result<Vec<PredictionRecord>> {
    let acts = forward(params, x)?;
    Ok(rank_records(&acts.probs, m))
}

/// Ranks softmax probabilities into (label, loss) records; see
/// [`predict_top`].
pub fn rank_records(probs: &[f64], m: usize) -> Vec<PredictionRecord> {
    let mut records: Vec<PredictionRecord> = probs
        .iter()
        .enumerate()
        .map(|(c, &p)| PredictionRecord {
            label: c as u32,
            loss: -p.ln(),
        })
        .collect();
    records.sort_by(|a, b| a.loss.total_cmp(&b.loss).then(a.label.cmp(&b.label)));
    records.truncate(m.min(probs.len()));
    records
}

/// Mean-zero accumulator for loss gradients, shaped like the net.
#[derive(Debug, Clone)]
pub struct Gradient {
    pub dw: Vec<Matrix>,
    pub db: Vec<Vec<f64>>,
}

impl Gradient {
    pub fn zeros(arch: &FnnArch) -> Self {
        let mut dw = Vec::with_capacity(arch.depth());
        let mut db = Vec::with_capacity(arch.depth());
        for pair in arch.sizes().windows(2) {
            dw.push(Matrix::zeros(pair[0], pair[1]));
            db.push(vec![0.0; pair[1]]);
        }
        Self { dw, db }
    }

    pub fn clear(&mut self) {
        for m in &mut self.dw {
            m.data_mut().fill(0.0);
        }
        for b in &mut self.db {
            b.fill(0.0);
        }
    }
}

/// Backpropagates one sample, adding `weight * grad(-ln p_y)` into `grad`.
/// Returns the sample's loss and whether its top prediction is `y`.
pub fn accumulate_grad(
    params: &FnnParams,
    x: &[f64],
    y: u32,
    weight: f64,
    grad: &mut Gradient,
) -> Result<(f64, bool)> {
    let acts = forward(params, x)?;
    let loss = class_loss(&acts.probs, y);
    let correct = arg_top(&acts.probs) == y;
    let depth = params.arch.depth();

    // Softmax + cross-entropy: dL/dz = p - onehot(y).
    let mut dz: Vec<f64> = acts.probs.clone();
    dz[y as usize] -= 1.0;

    for l in (0..depth).rev() {
        let a_prev: &[f64] = if l == 0 { x } else { &acts.hidden[l - 1] };
        let cols = params.weights[l].cols();
        {
            let dw = grad.dw[l].data_mut();
            for (i, &ai) in a_prev.iter().enumerate() {
                if ai == 0.0 {
                    continue;
                }
                let scale = weight * ai;
                let row = &mut dw[i * cols..(i + 1) * cols];
                for (slot, &d) in row.iter_mut().zip(&dz) {
                    *slot += scale * d;
                }
            }
            for (slot, &d) in grad.db[l].iter_mut().zip(&dz) {
                *slot += weight * d;
            }
        }
        if l > 0 {
            let w = params.weights[l].data();
            let mut da = vec![0.0; params.weights[l].rows()];
            for (i, slot) in da.iter_mut().enumerate() {
                let row = &w[i * cols..(i + 1) * cols];
                *slot = row.iter().zip(&dz).map(|(&wv, &d)| wv * d).sum();
            }
            // ReLU gate: the stored activation is zero exactly where the
            // pre-activation was clipped.
            for (slot, &h) in da.iter_mut().zip(&acts.hidden[l - 1]) {
                if h == 0.0 {
                    *slot = 0.0;
                }
            }
            dz = da;
        }
    }
    Ok((loss, correct))
}

/// Rounds half-to-even onto the grid of `decimals` fractional digits.
/// Negative zero is normalized to positive zero.
pub fn quantize_value(v: f64, decimals: u8) -> f64 {
    let scale = 10f64.powi(decimals as i32);
    (v * scale).round_ties_even() / scale + 0.0
}

/// Quantizes every weight and bias; tags the result with the precision.
pub fn quantize_params(params: &FnnParams, decimals: u8) -> FnnParams {
    let mut out = params.clone();
    for w in &mut out.weights {
        for v in w.data_mut() {
            *v = quantize_value(*v, decimals);
        }
    }
    for b in &mut out.biases {
        for v in b.iter_mut() {
            *v = quantize_value(*v, decimals);
        }
    }
    out.precision = Some(decimals);
    out
}

// ---------------------------------------------------------------------------
// Plain-text weight files: header `FNN d=<d> arch=<s0>x<s1>x...`, then per
// layer all weights (row-major) and all biases, one value per line with
// exactly d fractional digits. Quantized values round-trip bit-exactly.
// ---------------------------------------------------------------------------

pub fn write_weights<W: Write>(mut w: W, params: &FnnParams) -> Result<()> {
    let d = params.precision.ok_or_else(|| {
        Error::Domain("only quantized nets are persisted; call quantize_params first".into())
    })? as usize;
    writeln!(w, "FNN d={d} arch={}", params.arch.label())?;
    for l in 0..params.arch.depth() {
        for v in params.weights[l].data() {
            writeln!(w, "{v:.d$}")?;
        }
        for v in &params.biases[l] {
            writeln!(w, "{v:.d$}")?;
        }
    }
    Ok(())
}

pub fn read_weights<R: BufRead>(r: R) -> Result<FnnParams> {
    let mut lines = r.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Parse("empty weight file".into()))??;
    let rest = header
        .strip_prefix("FNN d=")
        .ok_or_else(|| Error::Parse(format!("bad weight header {header:?}")))?;
    let (d_text, arch_text) = rest
        .split_once(" arch=")
        .ok_or_else(|| Error::Parse(format!("bad weight header {header:?}")))?;
    let d: u8 = d_text
        .parse()
        .map_err(|_| Error::Parse(format!("bad precision {d_text:?}")))?;
    let arch = FnnArch::parse(arch_text)?;

    let mut next_value = || -> Result<f64> {
        let line = lines
            .next()
            .ok_or_else(|| Error::Parse("weight file truncated".into()))??;
        line.trim()
            .parse::<f64>()
            .map_err(|_| Error::Parse(format!("bad weight value {line:?}")))
    };

    let mut weights = Vec::with_capacity(arch.depth());
    let mut biases = Vec::with_capacity(arch.depth());
    for pair in arch.sizes().windows(2) {
        let (fan_in, fan_out) = (pair[0], pair[1]);
        let mut data = Vec::with_capacity(fan_in * fan_out);
        for _ in 0..fan_in * fan_out {
            data.push(next_value()?);
        }
        weights.push(Matrix::new(fan_in, fan_out, data)?);
        let mut b = Vec::with_capacity(fan_out);
        for _ in 0..fan_out {
            b.push(next_value()?);
        }
        biases.push(b);
    }
    if lines.next().transpose()?.is_some_and(|l| !l.trim().is_empty()) {
        return Err(Error::Parse("trailing data in weight file".into()));
    }
    Ok(FnnParams {
        arch,
        weights,
        biases,
        precision: Some(d),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn arch(sizes: &[usize]) -> FnnArch {
        FnnArch::new(sizes.to_vec()).unwrap()
    }

    /// The 2-2-2 desk example: identity first layer, second layer maps
    /// h=(1,0) to logits (1,-1).
    fn desk_net() -> FnnParams {
        FnnParams {
            arch: arch(&[2, 2, 2]),
            weights: vec![
                Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(),
                Matrix::from_rows(&[vec![1.0, -1.0], vec![0.0, 1.0]]).unwrap(),
            ],
            biases: vec![vec![0.0, 0.0], vec![0.0, 0.0]],
            precision: None,
        }
    }

    #[test]
    fn arch_validation() {
        assert!(FnnArch::new(vec![900, 256, 25]).is_ok());
        assert!(FnnArch::new(vec![900, 25]).is_err());
        assert!(FnnArch::new(vec![900, 0, 25]).is_err());
        assert_eq!(arch(&[900, 256, 25]).label(), "900x256x25");
        assert_eq!(
            FnnArch::parse("900x256x77x25").unwrap().sizes(),
            &[900, 256, 77, 25]
        );
        assert!(FnnArch::parse("900xx25").is_err());
    }

    #[test]
    fn parameter_counts() {
        let a = arch(&[900, 256, 25]);
        assert_eq!(a.params_per_net(), 901 * 256 + 257 * 25);
        assert_eq!(a.params_per_net(), 237_081);
        assert_eq!(a.neurons_per_net(), 1_181);
        assert_eq!(count_params(&a, 17, 40, 2), 322_430_160);
        assert_eq!(count_neurons(&a, 17, 40, 2), 1_606_160);
        assert_eq!(count_params(&a, 6, 40, 2), 113_798_880);
        assert_eq!(count_neurons(&a, 6, 40, 2), 566_880);

        let deep = arch(&[900, 256, 77, 25]);
        assert_eq!(deep.params_per_net(), 901 * 256 + 257 * 77 + 78 * 25);
    }

    #[test]
    fn init_is_seeded_glorot() {
        let a = arch(&[6, 5, 4]);
        let p1 = init_params(&a, 42);
        let p2 = init_params(&a, 42);
        let p3 = init_params(&a, 43);
        assert_eq!(p1, p2);
        assert_ne!(p1.weights, p3.weights);

        for (l, pair) in a.sizes().windows(2).enumerate() {
            let bound = (6.0 / (pair[0] + pair[1]) as f64).sqrt();
            assert!(p1.weights[l].data().iter().all(|&v| v.abs() < bound));
            assert!(p1.biases[l].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn softmax_examples() {
        let p = softmax(&[0.0, 0.0]);
        assert_eq!(p, vec![0.5, 0.5]);

        let p = softmax(&[1000.0, 1000.0, 1000.0]);
        assert!(p.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));

        let p = softmax(&[-1000.0, 0.0]);
        assert!(p[0] < 1e-300);
        assert!((p[1] - 1.0).abs() < 1e-15);

        let p = softmax(&[3.0]);
        assert_eq!(p, vec![1.0]);
    }

    #[test]
    fn forward_desk_example() {
        let net = desk_net();
        let acts = forward(&net, &[1.0, -2.0]).unwrap();
        assert_eq!(acts.hidden, vec![vec![1.0, 0.0]]);
        assert_eq!(acts.logits, vec![1.0, -1.0]);
        assert!((acts.probs[0] - 0.8807970779778823).abs() < 1e-15);
        assert!((acts.probs[1] - 0.11920292202211755).abs() < 1e-15);
        assert!((class_loss(&acts.probs, 0) - 0.12692801104297263).abs() < 1e-15);

        assert!(matches!(
            forward(&net, &[1.0]),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn predict_top_orders_and_breaks_ties() {
        // Zero net: uniform probabilities, ties resolved by ascending label.
        let a = arch(&[3, 4, 5]);
        let zero = FnnParams {
            weights: vec![Matrix::zeros(3, 4), Matrix::zeros(4, 5)],
            biases: vec![vec![0.0; 4], vec![0.0; 5]],
            arch: a,
            precision: None,
        };
        let top = predict_top(&zero, &[0.3, -0.2, 0.9], 3).unwrap();
        let labels: Vec<u32> = top.iter().map(|r| r.label).collect();
        assert_eq!(labels, vec![0, 1, 2]);
        assert!((top[0].loss - 5f64.ln()).abs() < 1e-15);

        // m larger than the class count clamps.
        let all = predict_top(&zero, &[0.0, 0.0, 0.0], 99).unwrap();
        assert_eq!(all.len(), 5);

        // A clearly ranked case.
        let net = desk_net();
        let top = predict_top(&net, &[1.0, -2.0], 2).unwrap();
        assert_eq!(top[0].label, 0);
        assert_eq!(top[1].label, 1);
        assert!(top[0].loss < top[1].loss);
    }

    #[test]
    fn gradient_desk_example() {
        // x=(1.), one hidden pair, identity output layer; y = 1.
        let net = FnnParams {
            arch: arch(&[1, 2, 2]),
            weights: vec![
                Matrix::from_rows(&[vec![1.0, -1.0]]).unwrap(),
                Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(),
            ],
            biases: vec![vec![0.0, 0.0], vec![0.0, 0.0]],
            precision: None,
        };
        let mut grad = Gradient::zeros(&net.arch);
        let (loss, correct) = accumulate_grad(&net, &[1.0], 1, 1.0, &mut grad).unwrap();
        let p0 = 1.0 / (1.0 + (-1f64).exp()); // softmax(1, 0)
        assert!((loss + (1.0 - p0).ln()).abs() < 1e-15);
        assert!(!correct);

        // dz at the output is probs - onehot(1) = (p0, -p0).
        let e = 1e-12;
        assert!((grad.db[1][0] - p0).abs() < e);
        assert!((grad.db[1][1] + p0).abs() < e);
        assert!((grad.dw[1].get(0, 0) - p0).abs() < e);
        assert!((grad.dw[1].get(0, 1) + p0).abs() < e);
        assert_eq!(grad.dw[1].get(1, 0), 0.0); // dead hidden unit
        assert_eq!(grad.dw[1].get(1, 1), 0.0);
        assert!((grad.dw[0].get(0, 0) - p0).abs() < e);
        assert_eq!(grad.dw[0].get(0, 1), 0.0); // gated by ReLU
        assert!((grad.db[0][0] - p0).abs() < e);
        assert_eq!(grad.db[0][1], 0.0);
    }

    /// Flattens all parameters for finite-difference probing.
    fn flat_view(p: &FnnParams) -> Vec<f64> {
        let mut out = Vec::new();
        for l in 0..p.arch.depth() {
            out.extend_from_slice(p.weights[l].data());
            out.extend_from_slice(&p.biases[l]);
        }
        out
    }

    fn set_flat(p: &mut FnnParams, flat: &[f64]) {
        let mut at = 0;
        for l in 0..p.arch.depth() {
            let wlen = p.weights[l].data().len();
            p.weights[l].data_mut().copy_from_slice(&flat[at..at + wlen]);
            at += wlen;
            let blen = p.biases[l].len();
            p.biases[l].copy_from_slice(&flat[at..at + blen]);
            at += blen;
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let a = arch(&[5, 7, 4]);
        for seed in 0..3u64 {
            let params = init_params(&a, 1000 + seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
            let y = (seed % 4) as u32;

            let mut grad = Gradient::zeros(&a);
            accumulate_grad(&params, &x, y, 1.0, &mut grad).unwrap();
            let analytic = flat_view(&FnnParams {
                arch: a.clone(),
                weights: grad.dw.clone(),
                biases: grad.db.clone(),
                precision: None,
            });

            let base = flat_view(&params);
            let mut probe = params.clone();
            let h = 1e-4;
            for (t, &g) in analytic.iter().enumerate() {
                let mut plus = base.clone();
                plus[t] += h;
                set_flat(&mut probe, &plus);
                let lp = class_loss(&forward(&probe, &x).unwrap().probs, y);
                let mut minus = base.clone();
                minus[t] -= h;
                set_flat(&mut probe, &minus);
                let lm = class_loss(&forward(&probe, &x).unwrap().probs, y);
                let fd = (lp - lm) / (2.0 * h);
                let rel = (g - fd).abs() / fd.abs().max(1.0);
                assert!(rel < 1e-5, "param {t}: analytic {g} vs fd {fd}");
            }
        }
    }

    #[test]
    fn weighted_accumulation_scales_linearly() {
        let a = arch(&[3, 4, 2]);
        let params = init_params(&a, 5);
        let x = [0.2, -0.4, 0.9];

        let mut g1 = Gradient::zeros(&a);
        accumulate_grad(&params, &x, 1, 1.0, &mut g1).unwrap();
        let mut g3 = Gradient::zeros(&a);
        accumulate_grad(&params, &x, 1, 3.0, &mut g3).unwrap();
        for (m1, m3) in g1.dw.iter().zip(&g3.dw) {
            for (&v1, &v3) in m1.data().iter().zip(m3.data()) {
                assert!((3.0 * v1 - v3).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn apply_step_moves_downhill() {
        let a = arch(&[4, 6, 3]);
        let mut params = init_params(&a, 9);
        let x = [0.1, 0.5, -0.3, 0.8];
        let before = class_loss(&forward(&params, &x).unwrap().probs, 2);
        let mut grad = Gradient::zeros(&a);
        accumulate_grad(&params, &x, 2, 1.0, &mut grad).unwrap();
        params.apply_step(&grad, 0.1);
        let after = class_loss(&forward(&params, &x).unwrap().probs, 2);
        assert!(after < before);
    }

    #[test]
    fn quantize_examples() {
        assert_eq!(quantize_value(0.123456, 4), 0.1235);
        assert_eq!(quantize_value(-0.123456, 4), -0.1235);
        assert_eq!(quantize_value(1.0, 4), 1.0);
        // Exact binary ties round half to even.
        assert_eq!(quantize_value(0.25, 1), 0.2);
        assert_eq!(quantize_value(0.75, 1), 0.8);
        // Tiny values collapse to an unsigned zero.
        let z = quantize_value(-0.00004, 4);
        assert_eq!(z, 0.0);
        assert!(z.is_sign_positive());

        let p = init_params(&arch(&[3, 3, 2]), 1);
        let q = quantize_params(&p, 3);
        assert_eq!(q.precision, Some(3));
        for w in &q.weights {
            for &v in w.data() {
                assert_eq!(v, quantize_value(v, 3), "idempotent on the grid");
            }
        }
    }

    #[test]
    fn weight_file_round_trips_bit_exactly() {
        let a = arch(&[6, 9, 4]);
        let q = quantize_params(&init_params(&a, 77), 4);
        let mut buf = Vec::new();
        write_weights(&mut buf, &q).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("FNN d=4 arch=6x9x4\n"));

        let back = read_weights(&buf[..]).unwrap();
        assert_eq!(back.arch, q.arch);
        assert_eq!(back.precision, Some(4));
        for (wa, wb) in q.weights.iter().zip(&back.weights) {
            for (&x, &y) in wa.data().iter().zip(wb.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        for (ba, bb) in q.biases.iter().zip(&back.biases) {
            for (&x, &y) in ba.iter().zip(bb) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn weight_file_rejects_malformed_input() {
        let q = quantize_params(&init_params(&arch(&[2, 2, 2]), 3), 2);
        let mut buf = Vec::new();
        write_weights(&mut buf, &q).unwrap();

        let text = String::from_utf8(buf).unwrap();
        let truncated = text.lines().take(5).collect::<Vec<_>>().join("\n");
        assert!(read_weights(truncated.as_bytes()).is_err());

        let mut extra = text.clone();
        extra.push_str("0.5\n");
        assert!(read_weights(extra.as_bytes()).is_err());

        let garbled = text.replacen("FNN", "XXX", 1);
        assert!(read_weights(garbled.as_bytes()).is_err());

        let unquantized = init_params(&arch(&[2, 2, 2]), 3);
        assert!(write_weights(&mut Vec::new(), &unquantized).is_err());
    }

    proptest! {
        #[test]
        fn softmax_is_a_distribution(logits in proptest::collection::vec(-30f64..30.0, 1..9)) {
            let p = softmax(&logits);
            let sum: f64 = p.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            prop_assert!(p.iter().all(|&v| v > 0.0));
        }

        #[test]
        fn quantization_error_is_bounded(v in -10f64..10.0, d in 1u8..7) {
            let q = quantize_value(v, d);
            let step = 10f64.powi(-(d as i32));
            prop_assert!((q - v).abs() <= step / 2.0 + step * 1e-9);
            prop_assert_eq!(q, quantize_value(q, d));
        }

        #[test]
        fn records_are_sorted(logits in proptest::collection::vec(-5f64..5.0, 2..7), m in 1usize..9) {
            let probs = softmax(&logits);
            let recs = rank_records(&probs, m);
            prop_assert_eq!(recs.len(), m.min(logits.len()));
            for pair in recs.windows(2) {
                prop_assert!(pair[0].loss <= pair[1].loss);
            }
        }
    }
}
