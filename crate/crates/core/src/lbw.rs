//! Log-base-weight network
//!
//! `ℓ(z) = c z + dense3(elu(layer_norm(dense2(tanh(dense1(z))))))`
//!
//! dense1 maps 1 → h with a bias, dense2 maps h → h and dense3 maps h → 1, both
//! without bias. The skip term `c z` has no bias either: softmax ignores a
//! constant shift of ℓ, so an output bias would not be identifiable.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{E2bError, Result};
use crate::rng::StreamRng;

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct LbwNetParams {
    pub hidden: usize,
    pub skip: f64,
    /// dense1 weights, h × 1.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// dense2 weights, h × h row-major (output-major).
    pub w2: Vec<f64>,
    pub ln_gain: Vec<f64>,
    pub ln_bias: Vec<f64>,
    /// dense3 weights, 1 × h.
    pub w3: Vec<f64>,
}

impl LbwNetParams {
    /// All-zero parameters except unit layer-norm gain: the network outputs 0.
    pub fn zeros(hidden: usize) -> Self {
        assert!(hidden >= 1, "hidden width must be positive");
        Self {
            hidden,
            skip: 0.0,
            w1: vec![0.0; hidden],
            b1: vec![0.0; hidden],
            w2: vec![0.0; hidden * hidden],
            ln_gain: vec![1.0; hidden],
            ln_bias: vec![0.0; hidden],
            w3: vec![0.0; hidden],
        }
    }

    /// dense1 and dense2 uniform in ±1/√fan_in, skip and dense3 zero.
    ///
    /// With a zero output layer the initial ℓ is identically 0, so training
    /// starts from plain entropy balancing.
    pub fn init(hidden: usize, rng: &mut StreamRng) -> Self {
        let mut p = Self::zeros(hidden);
        let b2 = 1.0 / (hidden as f64).sqrt();
        for v in p.w1.iter_mut().chain(p.b1.iter_mut()) {
            *v = rng.random_range(-1.0..1.0);
        }
        for v in p.w2.iter_mut() {
            *v = rng.random_range(-b2..b2);
        }
        p
    }

    pub fn n_params(&self) -> usize {
        1 + 5 * self.hidden + self.hidden * self.hidden
    }

    /// Flat view in the order skip, w1, b1, w2, ln_gain, ln_bias, w3.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.n_params());
        v.push(self.skip);
        for part in [&self.w1, &self.b1, &self.w2, &self.ln_gain, &self.ln_bias, &self.w3] {
            v.extend_from_slice(part);
        }
        v
    }

    pub fn from_flat(hidden: usize, flat: &[f64]) -> Result<Self> {
        let h = hidden;
        let expected = 1 + 5 * h + h * h;
        if flat.len() != expected {
            return Err(E2bError::Shape(format!(
                "expected {expected} parameters for hidden width {h}, got {}",
                flat.len()
            )));
        }
        let mut at = 1;
        let mut take = |len: usize| {
            let s = flat[at..at + len].to_vec();
            at += len;
            s
        };
        Ok(Self {
            hidden: h,
            skip: flat[0],
            w1: take(h),
            b1: take(h),
            w2: take(h * h),
            ln_gain: take(h),
            ln_bias: take(h),
            w3: take(h),
        })
    }

    pub fn is_finite(&self) -> bool {
        self.to_flat().iter().all(|v| v.is_finite())
    }
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    hidden: usize,
    z: Vec<f64>,
    tanh1: Vec<f64>,
    normed: Vec<f64>,
    inv_std: Vec<f64>,
    pre_elu: Vec<f64>,
}

impl Tape {
    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }
}

fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

fn elu_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        x.exp()
    }
}

/// Evaluates ℓ at every feature value.
#[allow(clippy::needless_range_loop)]
pub fn lbw_forward(p: &LbwNetParams, z: &[f64]) -> (Vec<f64>, Tape) {
    let h = p.hidden;
    let n = z.len();
    let mut tape = Tape {
        hidden: h,
        z: z.to_vec(),
        tanh1: vec![0.0; n * h],
        normed: vec![0.0; n * h],
        inv_std: vec![0.0; n],
        pre_elu: vec![0.0; n * h],
    };
    let mut out = vec![0.0; n];
    let mut h2 = vec![0.0; h];
    for (i, &zi) in z.iter().enumerate() {
        let t1 = &mut tape.tanh1[i * h..(i + 1) * h];
        for k in 0..h {
            t1[k] = (p.w1[k] * zi + p.b1[k]).tanh();
        }
        for (j, v) in h2.iter_mut().enumerate() {
            *v = p.w2[j * h..(j + 1) * h].iter().zip(t1.iter()).map(|(a, b)| a * b).sum();
        }
        let mean = h2.iter().sum::<f64>() / h as f64;
        let var = h2.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / h as f64;
        let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        tape.inv_std[i] = inv_std;
        let mut acc = p.skip * zi;
        for j in 0..h {
            let nj = (h2[j] - mean) * inv_std;
            tape.normed[i * h + j] = nj;
            let pre = p.ln_gain[j] * nj + p.ln_bias[j];
            tape.pre_elu[i * h + j] = pre;
            acc += p.w3[j] * elu(pre);
        }
        out[i] = acc;
    }
    (out, tape)
}

/// Reverse pass: parameter gradients and `dL/dz`.
#[allow(clippy::needless_range_loop)]
pub fn lbw_backward(p: &LbwNetParams, tape: &Tape, dl_dell: &[f64]) -> Result<(LbwNetParams, Vec<f64>)> {
    let h = p.hidden;
    if tape.hidden != h || dl_dell.len() != tape.len() {
        return Err(E2bError::Shape(format!(
            "tape (hidden {}, n {}) does not match parameters (hidden {h}) and cotangent (n {})",
            tape.hidden,
            tape.len(),
            dl_dell.len()
        )));
    }
    let mut g = LbwNetParams::zeros(h);
    g.ln_gain.iter_mut().for_each(|v| *v = 0.0);
    let mut dz = vec![0.0; tape.len()];
    let mut d_normed = vec![0.0; h];
    let mut d_h2 = vec![0.0; h];
    let mut d_t1 = vec![0.0; h];
    for i in 0..tape.len() {
        let go = dl_dell[i];
        let zi = tape.z[i];
        if go == 0.0 {
            continue;
        }
        g.skip += go * zi;
        dz[i] += go * p.skip;
        let normed = &tape.normed[i * h..(i + 1) * h];
        let pre = &tape.pre_elu[i * h..(i + 1) * h];
        for j in 0..h {
            g.w3[j] += go * elu(pre[j]);
            let d_pre = go * p.w3[j] * elu_grad(pre[j]);
            g.ln_gain[j] += d_pre * normed[j];
            g.ln_bias[j] += d_pre;
            d_normed[j] = d_pre * p.ln_gain[j];
        }
        // layer norm
        let hf = h as f64;
        let sum_d: f64 = d_normed.iter().sum();
        let sum_dn: f64 = d_normed.iter().zip(normed).map(|(a, b)| a * b).sum();
        let inv_std = tape.inv_std[i];
        for j in 0..h {
            d_h2[j] = inv_std / hf * (hf * d_normed[j] - sum_d - normed[j] * sum_dn);
        }
        let t1 = &tape.tanh1[i * h..(i + 1) * h];
        d_t1.iter_mut().for_each(|v| *v = 0.0);
        for j in 0..h {
            let row = &mut g.w2[j * h..(j + 1) * h];
            for k in 0..h {
                row[k] += d_h2[j] * t1[k];
                d_t1[k] += d_h2[j] * p.w2[j * h + k];
            }
        }
        for k in 0..h {
            let d_pre1 = d_t1[k] * (1.0 - t1[k] * t1[k]);
            g.w1[k] += d_pre1 * zi;
            g.b1[k] += d_pre1;
            dz[i] += d_pre1 * p.w1[k];
        }
    }
    Ok((g, dz))
}

/// Adam with coupled L2 weight decay (`grad += wd · param`), no AMSGrad.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    pub fn new(n_params: usize, lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }

    /// One update of `params` in place.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(E2bError::Shape(format!(
                "optimizer holds {} moments, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for k in 0..params.len() {
            let g = grads[k] + self.weight_decay * params[k];
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g;
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[k] / c1;
            let v_hat = self.v[k] / c2;
            params[k] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Applies one Adam step to the network parameters.
pub fn adam_step(state: &mut AdamState, params: &LbwNetParams, grads: &LbwNetParams) -> Result<LbwNetParams> {
    let mut flat = params.to_flat();
    state.step(&mut flat, &grads.to_flat())?;
    LbwNetParams::from_flat(params.hidden, &flat)
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// On-disk checkpoint layout.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub hidden: usize,
    pub tensors: Vec<NamedTensor>,
}

impl LbwNetParams {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let h = self.hidden;
        let t = |name: &str, shape: Vec<usize>, data: &[f64]| NamedTensor {
            name: name.into(),
            shape,
            data: data.to_vec(),
        };
        Checkpoint {
            format: "e2b-lbw".into(),
            version: CHECKPOINT_VERSION,
            hidden: h,
            tensors: vec![
                t("skip.c", vec![], &[self.skip]),
                t("dense1.weight", vec![h, 1], &self.w1),
                t("dense1.bias", vec![h], &self.b1),
                t("dense2.weight", vec![h, h], &self.w2),
                t("layer_norm.weight", vec![h], &self.ln_gain),
                t("layer_norm.bias", vec![h], &self.ln_bias),
                t("dense3.weight", vec![1, h], &self.w3),
            ],
        }
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        if c.format != "e2b-lbw" || c.version != CHECKPOINT_VERSION {
            return Err(E2bError::Checkpoint(format!(
                "unsupported checkpoint {} v{}",
                c.format, c.version
            )));
        }
        let h = c.hidden;
        let get = |name: &str, shape: &[usize]| -> Result<Vec<f64>> {
            let t = c
                .tensors
                .iter()
                .find(|t| t.name == name)
                .ok_or_else(|| E2bError::Checkpoint(format!("missing tensor {name}")))?;
            let len: usize = shape.iter().product();
            if t.shape != shape || t.data.len() != len {
                return Err(E2bError::Checkpoint(format!(
                    "tensor {name} has shape {:?}, expected {shape:?}",
                    t.shape
                )));
            }
            Ok(t.data.clone())
        };
        Ok(Self {
            hidden: h,
            skip: get("skip.c", &[])?[0],
            w1: get("dense1.weight", &[h, 1])?,
            b1: get("dense1.bias", &[h])?,
            w2: get("dense2.weight", &[h, h])?,
            ln_gain: get("layer_norm.weight", &[h])?,
            ln_bias: get("layer_norm.bias", &[h])?,
            w3: get("dense3.weight", &[1, h])?,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.to_checkpoint())?;
        std::fs::write(path, text + "\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_checkpoint(&serde_json::from_str(&text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Streams;
    use approx::assert_abs_diff_eq;

    #[test]
    fn dead_branch_is_pure_skip() {
        let mut p = LbwNetParams::init(4, &mut Streams::new(1).stream("init", 0));
        p.skip = 0.7;
        p.w3.iter_mut().for_each(|v| *v = 0.0);
        let z = [-2.0, 0.0, 1.5];
        let (out, _) = lbw_forward(&p, &z);
        for (o, zi) in out.iter().zip(z) {
            assert_abs_diff_eq!(*o, 0.7 * zi, epsilon = 1e-15);
        }
    }

    #[test]
    fn hand_computed_forward_h2() {
        let p = LbwNetParams {
            hidden: 2,
            skip: 0.3,
            w1: vec![0.5, -1.0],
            b1: vec![0.2, 0.4],
            w2: vec![1.0, 2.0, -0.5, 0.25],
            ln_gain: vec![1.5, 0.5],
            ln_bias: vec![0.1, -0.2],
            w3: vec![0.8, -1.1],
        };
        // z = 0: dense1 = b1
        let t = [0.2f64.tanh(), 0.4f64.tanh()];
        let h2 = [t[0] + 2.0 * t[1], -0.5 * t[0] + 0.25 * t[1]];
        let mean = (h2[0] + h2[1]) / 2.0;
        let var = ((h2[0] - mean).powi(2) + (h2[1] - mean).powi(2)) / 2.0;
        let s = (var + 1e-5).sqrt();
        let n0 = (h2[0] - mean) / s;
        let n1 = (h2[1] - mean) / s;
        let p0 = 1.5 * n0 + 0.1;
        let p1 = 0.5 * n1 - 0.2;
        let e = |x: f64| if x > 0.0 { x } else { x.exp() - 1.0 };
        let expected = 0.8 * e(p0) - 1.1 * e(p1);
        let (out, _) = lbw_forward(&p, &[0.0]);
        assert_abs_diff_eq!(out[0], expected, epsilon = 1e-14);
    }

    #[test]
    fn large_inputs_stay_finite() {
        let p = LbwNetParams::init(10, &mut Streams::new(2).stream("init", 0));
        let (out, _) = lbw_forward(&p, &[-50.0, 50.0]);
        assert!(out.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn skip_gradient_and_zero_cotangent() {
        let mut p = LbwNetParams::zeros(3);
        p.skip = 1.3;
        let z = [0.5, -1.0, 2.0];
        let (_, tape) = lbw_forward(&p, &z);
        let up = [1.0, 2.0, -0.5];
        let (g, dz) = lbw_backward(&p, &tape, &up).unwrap();
        assert_abs_diff_eq!(g.skip, 0.5 - 2.0 - 1.0, epsilon = 1e-15);
        assert_eq!(dz, vec![1.3, 2.6, -0.65]);

        let p = LbwNetParams::init(3, &mut Streams::new(3).stream("init", 0));
        let (_, tape) = lbw_forward(&p, &z);
        let (g, dz) = lbw_backward(&p, &tape, &[0.0; 3]).unwrap();
        assert!(g.to_flat().iter().all(|v| *v == 0.0));
        assert!(dz.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn tape_mismatch_is_rejected() {
        let p = LbwNetParams::zeros(3);
        let (_, tape) = lbw_forward(&p, &[0.1, 0.2]);
        assert!(lbw_backward(&p, &tape, &[1.0]).is_err());
        assert!(lbw_backward(&LbwNetParams::zeros(4), &tape, &[1.0, 1.0]).is_err());
    }

    #[test]
    fn adam_first_step_and_zero_gradient() {
        let mut st = AdamState::new(1, 0.02, 0.0);
        let mut p = [0.4];
        st.step(&mut p, &[1.0]).unwrap();
        assert_abs_diff_eq!(0.4 - p[0], 0.02, epsilon = 1e-6);

        let mut st = AdamState::new(2, 0.02, 0.0);
        let mut p = [0.4, -3.0];
        for _ in 0..5 {
            st.step(&mut p, &[0.0, 0.0]).unwrap();
        }
        assert_eq!(p, [0.4, -3.0]);
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let mut params = LbwNetParams::init(5, &mut Streams::new(9).stream("init", 0));
            let mut st = AdamState::new(params.n_params(), 0.02, 2.5e-5);
            let z: Vec<f64> = (0..8).map(|k| k as f64 / 4.0 - 1.0).collect();
            for _ in 0..10 {
                let (out, tape) = lbw_forward(&params, &z);
                let (g, _) = lbw_backward(&params, &tape, &out).unwrap();
                params = adam_step(&mut st, &params, &g).unwrap();
            }
            params.to_flat()
        };
        let a = run();
        let b = run();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn flat_and_checkpoint_round_trip() {
        let p = LbwNetParams::init(4, &mut Streams::new(4).stream("init", 0));
        assert_eq!(p.to_flat().len(), p.n_params());
        assert_eq!(LbwNetParams::from_flat(4, &p.to_flat()).unwrap(), p);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lbw.json");
        p.save(&path).unwrap();
        assert_eq!(LbwNetParams::load(&path).unwrap(), p);
    }

    #[test]
    fn structure_has_no_output_biases() {
        let c = LbwNetParams::zeros(3).to_checkpoint();
        let names: Vec<&str> = c.tensors.iter().map(|t| t.name.as_str()).collect();
        assert!(!names.contains(&"dense2.bias"));
        assert!(!names.contains(&"dense3.bias"));
        assert!(names.contains(&"dense1.bias"));
    }
}
