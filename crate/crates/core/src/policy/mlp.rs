use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::dynamics::Environment;
use crate::error::{Error, Result};

/// Single-hidden-layer ReLU network with outputs clamped to action bounds:
/// `clamp(W2·relu(W1·x + b1) + b2)`.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpPolicy {
    pub w1: DMatrix<f64>,
    pub b1: DVector<f64>,
    pub w2: DMatrix<f64>,
    pub b2: DVector<f64>,
    pub bounds: Vec<(f64, f64)>,
}

/// Intermediate values of one forward pass, kept for backpropagation.
#[derive(Clone, Debug)]
pub struct Activations {
    pub input: DVector<f64>,
    pub hidden: DVector<f64>,
    pub raw: DVector<f64>,
    pub output: Vec<f64>,
}

impl MlpPolicy {
    pub fn zeros(n_in: usize, hidden: usize, bounds: Vec<(f64, f64)>) -> Self {
        let n_out = bounds.len();
        MlpPolicy {
            w1: DMatrix::zeros(hidden, n_in),
            b1: DVector::zeros(hidden),
            w2: DMatrix::zeros(n_out, hidden),
            b2: DVector::zeros(n_out),
            bounds,
        }
    }

    /// He-uniform hidden layer; the output layer starts small so an
    /// untrained policy acts near zero.
    pub fn random<R: Rng + ?Sized>(n_in: usize, hidden: usize, bounds: Vec<(f64, f64)>, rng: &mut R) -> Self {
        let mut p = Self::zeros(n_in, hidden, bounds);
        let a1 = (6.0 / n_in.max(1) as f64).sqrt();
        p.w1 = DMatrix::from_fn(hidden, n_in, |_, _| rng.gen_range(-a1..a1));
        let a2 = 0.1 / (hidden.max(1) as f64).sqrt();
        let n_out = p.w2.nrows();
        p.w2 = DMatrix::from_fn(n_out, hidden, |_, _| rng.gen_range(-a2..a2));
        p
    }

    /// Policy sized for an environment's observation and action spaces.
    pub fn for_env<R: Rng + ?Sized>(env: &Environment, hidden: usize, rng: &mut R) -> Self {
        Self::random(env.policy_input_dim(), hidden, env.action_bounds().to_vec(), rng)
    }

    pub fn input_dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.w2.nrows()
    }

    pub fn num_params(&self) -> usize {
        let (h, n, m) = (self.hidden_dim(), self.input_dim(), self.output_dim());
        h * n + h + m * h + m
    }

    pub fn activations(&self, input: &[f64]) -> Result<Activations> {
        if input.len() != self.input_dim() {
            return Err(Error::input(format!(
                "policy expects {} inputs, got {}",
                self.input_dim(),
                input.len()
            )));
        }
        let input = DVector::from_row_slice(input);
        let hidden = (&self.w1 * &input + &self.b1).map(|v| v.max(0.0));
        let raw = &self.w2 * &hidden + &self.b2;
        let output = raw
            .iter()
            .zip(&self.bounds)
            .map(|(&v, &(lo, hi))| v.clamp(lo, hi))
            .collect();
        Ok(Activations {
            input,
            hidden,
            raw,
            output,
        })
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        Ok(self.activations(input)?.output)
    }

    /// Action at an environment state.
    pub fn act(&self, env: &Environment, x: &[f64]) -> Vec<f64> {
        self.forward(&env.policy_input(x))
            .expect("policy sized for the environment")
    }

    /// Backpropagate `dL/d output` through one pass: accumulates parameter
    /// gradients into `grad` (flat layout of [`params`](Self::params)) and
    /// returns `dL/d input`. Clamped outputs pass no gradient.
    pub fn backward(&self, act: &Activations, d_out: &[f64], grad: &mut [f64]) -> DVector<f64> {
        let (h, n, m) = (self.hidden_dim(), self.input_dim(), self.output_dim());
        let d_raw = DVector::from_iterator(
            m,
            d_out.iter().zip(act.raw.iter()).zip(&self.bounds).map(
                |((&d, &r), &(lo, hi))| {
                    if r > lo && r < hi {
                        d
                    } else {
                        0.0
                    }
                },
            ),
        );
        let (g_w1, rest) = grad.split_at_mut(h * n);
        let (g_b1, rest) = rest.split_at_mut(h);
        let (g_w2, g_b2) = rest.split_at_mut(m * h);
        for i in 0..m {
            if d_raw[i] == 0.0 {
                continue;
            }
            for j in 0..h {
                g_w2[i * h + j] += d_raw[i] * act.hidden[j];
            }
            g_b2[i] += d_raw[i];
        }
        let d_hidden = self.w2.tr_mul(&d_raw);
        let mut d_pre = DVector::zeros(h);
        for j in 0..h {
            if act.hidden[j] > 0.0 {
                d_pre[j] = d_hidden[j];
            }
        }
        for j in 0..h {
            let d = d_pre[j];
            if d == 0.0 {
                continue;
            }
            for k in 0..n {
                g_w1[j * n + k] += d * act.input[k];
            }
            g_b1[j] += d;
        }
        self.w1.tr_mul(&d_pre)
    }

    /// Flat parameters: `W1` row-major, `b1`, `W2` row-major, `b2`.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for i in 0..self.w1.nrows() {
            out.extend(self.w1.row(i).iter());
        }
        out.extend(self.b1.iter());
        for i in 0..self.w2.nrows() {
            out.extend(self.w2.row(i).iter());
        }
        out.extend(self.b2.iter());
        out
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.num_params() {
            return Err(Error::input(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                p.len()
            )));
        }
        let (h, n, m) = (self.hidden_dim(), self.input_dim(), self.output_dim());
        let mut it = p.iter().copied();
        self.w1 = DMatrix::from_row_iterator(h, n, it.by_ref().take(h * n));
        self.b1 = DVector::from_iterator(h, it.by_ref().take(h));
        self.w2 = DMatrix::from_row_iterator(m, h, it.by_ref().take(m * h));
        self.b2 = DVector::from_iterator(m, it.by_ref().take(m));
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|v| v.is_finite())
    }

    /// Text checkpoint:
    ///
    /// ```text
    /// mlp <n_in> <hidden> <n_out>
    /// bounds <lo_1> <hi_1> ... <lo_m> <hi_m>
    /// <one parameter per line, in the flat layout of `params`>
    /// ```
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "mlp {} {} {}\nbounds",
            self.input_dim(),
            self.hidden_dim(),
            self.output_dim()
        );
        for (lo, hi) in &self.bounds {
            let _ = write!(s, " {lo} {hi}");
        }
        s.push('\n');
        for v in self.params() {
            let _ = writeln!(s, "{v}");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |msg: &str| Error::input(format!("policy checkpoint: {msg}"));
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: Vec<&str> = lines.next().ok_or_else(|| bad("empty"))?.split_whitespace().collect();
        if header.len() != 4 || header[0] != "mlp" {
            return Err(bad("header must be `mlp <n_in> <hidden> <n_out>`"));
        }
        let dims: Vec<usize> = header[1..]
            .iter()
            .map(|v| v.parse().map_err(|_| bad("bad dimension")))
            .collect::<Result<_>>()?;
        let bl: Vec<&str> = lines
            .next()
            .ok_or_else(|| bad("missing bounds"))?
            .split_whitespace()
            .collect();
        if bl.first() != Some(&"bounds") || bl.len() != 1 + 2 * dims[2] {
            return Err(bad("bounds line must list one `lo hi` pair per output"));
        }
        let bv: Vec<f64> = bl[1..]
            .iter()
            .map(|v| v.parse().map_err(|_| bad("bad bound")))
            .collect::<Result<_>>()?;
        let bounds = bv.chunks(2).map(|c| (c[0], c[1])).collect();
        let params: Vec<f64> = lines
            .map(|l| l.trim().parse().map_err(|_| bad("bad parameter")))
            .collect::<Result<_>>()?;
        let mut p = Self::zeros(dims[0], dims[1], bounds);
        p.set_params(&params)?;
        if !p.is_finite() {
            return Err(bad("non-finite parameter"));
        }
        Ok(p)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_text(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::dynamics::Variant;

    #[test]
    fn zero_policy_outputs_zero() {
        let p = MlpPolicy::zeros(3, 5, vec![(-1.0, 1.0)]);
        assert_eq!(p.forward(&[0.3, -2.0, 7.0]).unwrap(), vec![0.0]);
        assert!(p.forward(&[1.0]).is_err());
    }

    #[test]
    fn bicycle_acceleration_is_clamped() {
        let env = Environment::bicycle(Variant::Original, 0).unwrap();
        let mut p = MlpPolicy::zeros(env.policy_input_dim(), 4, env.action_bounds().to_vec());
        p.b2[0] = 0.9;
        let u = p.act(&env, &[0.0, 0.0, -0.1, 0.0, 0.0]);
        assert_eq!(u[0], 0.25);
    }

    #[test]
    fn forward_matches_straight_line_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = MlpPolicy::random(4, 200, vec![(-1e9, 1e9)], &mut rng);
        let x: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let params = p.params();
        let (w1, rest) = params.split_at(800);
        let (b1, rest) = rest.split_at(200);
        let (w2, b2) = rest.split_at(200);
        let mut out = b2[0];
        for j in 0..200 {
            let mut a = b1[j];
            for k in 0..4 {
                a += w1[j * 4 + k] * x[k];
            }
            out += w2[j] * a.max(0.0);
        }
        let got = p.forward(&x).unwrap()[0];
        assert!((got - out).abs() <= 1e-12 * (1.0 + out.abs()));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = MlpPolicy::random(3, 16, vec![(-10.0, 10.0), (-10.0, 10.0)], &mut rng);
        let x = [0.4, -0.3, 0.8];
        let w = [0.7, -1.3];
        let loss = |q: &MlpPolicy, x: &[f64]| {
            let o = q.forward(x).unwrap();
            o[0] * w[0] + o[1] * w[1]
        };
        let act = p.activations(&x).unwrap();
        let mut grad = vec![0.0; p.num_params()];
        let d_in = p.backward(&act, &w, &mut grad);
        let theta = p.params();
        let h = 1e-6;
        for i in (0..theta.len()).step_by(7) {
            let mut q = p.clone();
            let mut t = theta.clone();
            t[i] += h;
            q.set_params(&t).unwrap();
            let up = loss(&q, &x);
            t[i] -= 2.0 * h;
            q.set_params(&t).unwrap();
            let fd = (up - loss(&q, &x)) / (2.0 * h);
            assert!((fd - grad[i]).abs() < 1e-6, "param {i}: {fd} vs {}", grad[i]);
        }
        for k in 0..3 {
            let mut xp = x;
            xp[k] += h;
            let mut xm = x;
            xm[k] -= h;
            let fd = (loss(&p, &xp) - loss(&p, &xm)) / (2.0 * h);
            assert!((fd - d_in[k]).abs() < 1e-6);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = MlpPolicy::random(7, 10, vec![(-0.25, 0.25), (-0.5, 0.5)], &mut rng);
        let back = MlpPolicy::from_text(&p.to_text()).unwrap();
        assert_eq!(back, p);
        assert!(MlpPolicy::from_text("mlp 1 2\n").is_err());
        assert!(MlpPolicy::from_text("mlp 1 1 1\nbounds -1 1\n0\n0\n0\n").is_err());
    }

    proptest! {
        #[test]
        fn outputs_stay_within_bounds(seed in 0u64..1000, x in prop::collection::vec(-100.0f64..100.0, 4)) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut p = MlpPolicy::random(4, 8, vec![(-0.25, 0.25), (-0.5, 0.5)], &mut rng);
            p.b2[0] = 50.0 * (seed as f64 - 500.0);
            let u = p.forward(&x).unwrap();
            prop_assert!((-0.25..=0.25).contains(&u[0]));
            prop_assert!((-0.5..=0.5).contains(&u[1]));
        }
    }
}
