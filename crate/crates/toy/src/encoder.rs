//! Streaming encoder: a one-hidden-layer tanh MLP over a left-only window of
//! frames, with hand-written backpropagation.

use fdt_core::container::MatrixContainer;
use fdt_core::{FdtError, LogPosteriorGrid, Matrix};
use rand::Rng;

use crate::error::{Result, ToyError};

/// Weights of the windowed MLP.
///
/// `w1` is `hidden x (context * input_dim)` row-major; column block `k`
/// multiplies frame `t - context + 1 + k`, so the last block sees frame `t`.
/// `w2` is `classes x hidden`.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyEncoderParams {
    pub context: usize,
    pub input_dim: usize,
    pub hidden: usize,
    pub classes: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

const TENSORS: [&str; 4] = ["w1", "b1", "w2", "b2"];

/// Four independent accumulators keep the loop vectorizable; the summation
/// order is fixed, so results are reproducible.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let chunks = n / 4;
    for i in 0..chunks {
        let j = 4 * i;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut tail = 0.0;
    for j in 4 * chunks..n {
        tail += a[j] * b[j];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

impl ToyEncoderParams {
    pub fn zeros(context: usize, input_dim: usize, hidden: usize, classes: usize) -> Self {
        Self {
            context,
            input_dim,
            hidden,
            classes,
            w1: vec![0.0; hidden * context * input_dim],
            b1: vec![0.0; hidden],
            w2: vec![0.0; classes * hidden],
            b2: vec![0.0; classes],
        }
    }

    /// Glorot-uniform weights, zero biases, rounded to f32.
    pub fn init<R: Rng>(context: usize, input_dim: usize, hidden: usize, classes: usize, rng: &mut R) -> Self {
        let mut p = Self::zeros(context, input_dim, hidden, classes);
        let fan_in = context * input_dim;
        let a1 = (6.0 / (fan_in + hidden) as f64).sqrt();
        for w in &mut p.w1 {
            *w = rng.random_range(-a1..a1);
        }
        let a2 = (6.0 / (hidden + classes) as f64).sqrt();
        for w in &mut p.w2 {
            *w = rng.random_range(-a2..a2);
        }
        p.round_to_f32();
        p
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.context, self.input_dim, self.hidden, self.classes)
    }

    pub fn window_len(&self) -> usize {
        self.context * self.input_dim
    }

    pub fn tensors(&self) -> [&[f64]; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn tensors_mut(&mut self) -> [&mut Vec<f64>; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Parameter `index` in the flat order w1, b1, w2, b2.
    pub fn get_flat(&self, mut index: usize) -> f64 {
        for t in self.tensors() {
            if index < t.len() {
                return t[index];
            }
            index -= t.len();
        }
        panic!("parameter index out of range");
    }

    pub fn set_flat(&mut self, mut index: usize, value: f64) {
        for t in self.tensors_mut() {
            if index < t.len() {
                t[index] = value;
                return;
            }
            index -= t.len();
        }
        panic!("parameter index out of range");
    }

    pub fn round_to_f32(&mut self) {
        for t in self.tensors_mut() {
            for v in t.iter_mut() {
                *v = *v as f32 as f64;
            }
        }
    }

    pub fn add_scaled(&mut self, other: &Self, scale: f64) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            axpy(a, scale, b);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    fn shapes(&self) -> [(usize, usize); 4] {
        [(self.hidden, self.window_len()), (1, self.hidden), (self.classes, self.hidden), (1, self.classes)]
    }

    /// Stores the four tensors under `prefix` + their names.
    pub fn push_to(&self, container: &mut MatrixContainer, prefix: &str) -> Result<()> {
        for ((name, data), (r, c)) in TENSORS.iter().zip(self.tensors()).zip(self.shapes()) {
            container.push(format!("{prefix}{name}"), Matrix::from_vec(r, c, data.to_vec())?)?;
        }
        Ok(())
    }

    pub fn read_from(container: &MatrixContainer, prefix: &str, context: usize) -> Result<Self> {
        let w1 = container.require(&format!("{prefix}w1"))?;
        let w2 = container.require(&format!("{prefix}w2"))?;
        let (hidden, classes) = (w1.rows(), w2.rows());
        if context == 0 || w1.cols() % context != 0 {
            return Err(ToyError::Data(format!("w1 width {} is not a multiple of context {context}", w1.cols())));
        }
        let mut p = Self::zeros(context, w1.cols() / context, hidden, classes);
        let shapes = p.shapes();
        for ((name, slot), (r, c)) in TENSORS.iter().zip(p.tensors_mut()).zip(shapes) {
            let m = container.require(&format!("{prefix}{name}"))?;
            if (m.rows(), m.cols()) != (r, c) {
                return Err(ToyError::Data(format!("{prefix}{name}: shape {}x{}, expected {r}x{c}", m.rows(), m.cols())));
            }
            slot.copy_from_slice(m.as_slice());
        }
        Ok(p)
    }

    fn check_features(&self, features: &Matrix) -> Result<()> {
        if features.cols() != self.input_dim {
            return Err(FdtError::DimensionMismatch(format!("features have {} columns, encoder expects {}", features.cols(), self.input_dim)).into());
        }
        if features.rows() == 0 {
            return Err(FdtError::DimensionMismatch("features have no frames".into()).into());
        }
        Ok(())
    }

    /// Left-context window ending at frame `t`, zero padded before frame 0.
    fn window(&self, features: &Matrix, t: usize, buf: &mut [f64]) {
        let d = self.input_dim;
        for k in 0..self.context {
            let dst = &mut buf[k * d..(k + 1) * d];
            match (t + k + 1).checked_sub(self.context) {
                Some(src) => dst.copy_from_slice(features.row(src)),
                None => dst.fill(0.0),
            }
        }
    }
}

/// Activations kept from the forward pass for backpropagation.
#[derive(Clone, Debug)]
pub struct EncoderActivations {
    /// T x hidden, post-tanh.
    pub hidden: Matrix,
    pub logits: Matrix,
}

pub fn encoder_forward_with_activations(params: &ToyEncoderParams, features: &Matrix) -> Result<(LogPosteriorGrid, EncoderActivations)> {
    params.check_features(features)?;
    let frames = features.rows();
    let mut hidden = Matrix::zeros(frames, params.hidden);
    let mut logits = Matrix::zeros(frames, params.classes);
    let mut x = vec![0.0; params.window_len()];
    let wl = params.window_len();
    for t in 0..frames {
        params.window(features, t, &mut x);
        let h = hidden.row_mut(t);
        for (j, hj) in h.iter_mut().enumerate() {
            *hj = (params.b1[j] + dot(&params.w1[j * wl..(j + 1) * wl], &x)).tanh();
        }
        let h = hidden.row(t).to_vec();
        for (c, z) in logits.row_mut(t).iter_mut().enumerate() {
            *z = params.b2[c] + dot(&params.w2[c * params.hidden..(c + 1) * params.hidden], &h);
        }
    }
    let grid = LogPosteriorGrid::from_logits(&logits)?;
    Ok((grid, EncoderActivations { hidden, logits }))
}

/// Per-frame log-posteriors. Row `t` depends only on frames
/// `t - context + 1 ..= t`.
pub fn encoder_forward(params: &ToyEncoderParams, features: &Matrix) -> Result<LogPosteriorGrid> {
    Ok(encoder_forward_with_activations(params, features)?.0)
}

/// Adds the gradient of `sum_t grad_logits[t] . logits[t]` to `grads`.
pub fn accumulate_backward(
    params: &ToyEncoderParams,
    features: &Matrix,
    acts: &EncoderActivations,
    grad_logits: &Matrix,
    grads: &mut ToyEncoderParams,
) -> Result<()> {
    params.check_features(features)?;
    let frames = features.rows();
    if grad_logits.rows() != frames || grad_logits.cols() != params.classes {
        return Err(FdtError::DimensionMismatch(format!(
            "grad_logits is {}x{}, expected {frames}x{}",
            grad_logits.rows(),
            grad_logits.cols(),
            params.classes
        ))
        .into());
    }
    let (hsz, wl) = (params.hidden, params.window_len());
    let mut x = vec![0.0; wl];
    let mut gh = vec![0.0; hsz];
    for t in 0..frames {
        let g = grad_logits.row(t);
        if g.iter().all(|&v| v == 0.0) {
            continue;
        }
        let h = acts.hidden.row(t);
        gh.fill(0.0);
        for (c, &gc) in g.iter().enumerate() {
            if gc == 0.0 {
                continue;
            }
            grads.b2[c] += gc;
            axpy(&mut grads.w2[c * hsz..(c + 1) * hsz], gc, h);
            axpy(&mut gh, gc, &params.w2[c * hsz..(c + 1) * hsz]);
        }
        params.window(features, t, &mut x);
        for j in 0..hsz {
            let gpre = gh[j] * (1.0 - h[j] * h[j]);
            if gpre == 0.0 {
                continue;
            }
            grads.b1[j] += gpre;
            axpy(&mut grads.w1[j * wl..(j + 1) * wl], gpre, &x);
        }
    }
    Ok(())
}

/// Exact gradient of `sum_t grad_logits[t] . logits[t]` w.r.t. all
/// parameters.
pub fn encoder_backward(params: &ToyEncoderParams, features: &Matrix, grad_logits: &Matrix) -> Result<ToyEncoderParams> {
    let (_, acts) = encoder_forward_with_activations(params, features)?;
    let mut grads = params.zeros_like();
    accumulate_backward(params, features, &acts, grad_logits, &mut grads)?;
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use fdt_oracles::{central_difference, relative_error};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random_features(rng: &mut ChaCha8Rng, frames: usize, d: usize) -> Matrix {
        let data = (0..frames * d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        Matrix::from_vec(frames, d, data).unwrap()
    }

    fn random_params(rng: &mut ChaCha8Rng) -> ToyEncoderParams {
        let mut p = ToyEncoderParams::init(3, 4, 6, 5, rng);
        for t in p.tensors_mut() {
            for v in t.iter_mut() {
                *v += 0.3 * rng.sample::<f64, _>(StandardNormal);
            }
        }
        p
    }

    #[test]
    fn zero_weights_give_uniform_rows() {
        let p = ToyEncoderParams::zeros(5, 4, 8, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let grid = encoder_forward(&p, &random_features(&mut rng, 7, 4)).unwrap();
        for t in 0..7 {
            for &v in grid.row(t) {
                assert!((v + 3f64.ln()).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn rows_are_normalized() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let p = random_params(&mut rng);
            let grid = encoder_forward(&p, &random_features(&mut rng, 9, 4)).unwrap();
            for t in 0..9 {
                let s: f64 = grid.row(t).iter().map(|v| v.exp()).sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn future_frames_do_not_change_the_past() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = random_params(&mut rng);
        let x = random_features(&mut rng, 10, 4);
        let base = encoder_forward(&p, &x).unwrap();
        for t in 0..9 {
            let mut y = x.clone();
            for v in y.row_mut(t + 1) {
                *v += 1.5;
            }
            let moved = encoder_forward(&p, &y).unwrap();
            for s in 0..=t {
                assert_eq!(base.row(s), moved.row(s));
            }
            assert_ne!(base.row(t + 1), moved.row(t + 1));
        }
    }

    #[test]
    fn frames_beyond_the_window_are_ignored() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = random_params(&mut rng);
        let x = random_features(&mut rng, 10, 4);
        let mut y = x.clone();
        for v in y.row_mut(2) {
            *v -= 2.0;
        }
        let (a, b) = (encoder_forward(&p, &x).unwrap(), encoder_forward(&p, &y).unwrap());
        // context 3: frame 2 reaches rows 2, 3 and 4 only
        for t in 0..10 {
            assert_eq!(a.row(t) == b.row(t), !(2..=4).contains(&t), "row {t}");
        }
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let p = ToyEncoderParams::zeros(2, 4, 3, 3);
        assert!(encoder_forward(&p, &Matrix::zeros(5, 3)).is_err());
        assert!(encoder_backward(&p, &Matrix::zeros(5, 4), &Matrix::zeros(4, 3)).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = random_params(&mut rng);
        let x = random_features(&mut rng, 6, 4);
        let g = encoder_backward(&p, &x, &Matrix::zeros(6, 5)).unwrap();
        assert_eq!(g, p.zeros_like());
    }

    #[test]
    fn single_entry_gradient_touches_only_its_window() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = random_params(&mut rng);
        let x = random_features(&mut rng, 8, 4);
        let mut up = Matrix::zeros(8, 5);
        up.set(1, 2, 1.0);
        let g = encoder_backward(&p, &x, &up).unwrap();
        // frame 1 with context 3: window blocks 0 (frame -1) is padding
        for j in 0..p.hidden {
            for (col, &v) in g.w1[j * 12..(j + 1) * 12].iter().enumerate() {
                if col < 4 {
                    assert_eq!(v, 0.0);
                }
            }
        }
        for c in 0..5 {
            assert_eq!(g.b2[c] != 0.0, c == 2);
            for j in 0..p.hidden {
                if c != 2 {
                    assert_eq!(g.w2[c * p.hidden + j], 0.0);
                }
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = random_params(&mut rng);
        let x = random_features(&mut rng, 7, 4);
        let up_data = (0..7 * 5).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let up = Matrix::from_vec(7, 5, up_data).unwrap();
        let grads = encoder_backward(&p, &x, &up).unwrap();
        let objective = |q: &ToyEncoderParams| {
            let (_, acts) = encoder_forward_with_activations(q, &x).unwrap();
            acts.logits.as_slice().iter().zip(up.as_slice()).map(|(a, b)| a * b).sum::<f64>()
        };
        let n = p.num_params();
        let flat: Vec<f64> = (0..n).map(|i| p.get_flat(i)).collect();
        for _ in 0..50 {
            let i = rng.random_range(0..n);
            let numeric = central_difference(
                |v| {
                    let mut q = p.clone();
                    for (k, &vk) in v.iter().enumerate() {
                        q.set_flat(k, vk);
                    }
                    objective(&q)
                },
                &flat,
                i,
                1e-5,
            );
            let err = relative_error(grads.get_flat(i), numeric);
            assert!(err <= 1e-4, "param {i}: analytic {} numeric {numeric} rel {err}", grads.get_flat(i));
        }
    }

    #[test]
    fn container_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = ToyEncoderParams::init(3, 4, 6, 5, &mut rng);
        let mut c = MatrixContainer::new();
        p.push_to(&mut c, "").unwrap();
        let back = MatrixContainer::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(ToyEncoderParams::read_from(&back, "", 3).unwrap(), p);
    }
}
