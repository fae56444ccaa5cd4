//! Simple-RNN and LSTM cells with hand-written reverse passes.
//!
//! LSTM parameters are packed with gate blocks in the order
//! `(input, forget, candidate, output)`: rows `0..H` of `w_x`, `w_h` and `b`
//! belong to the input gate, `H..2H` to the forget gate, `2H..3H` to the
//! tanh candidate and `3H..4H` to the output gate. No peepholes.
//!
//! Both initial states are zero unless a caller supplies an [`LstmState`].

use thiserror::Error;

use crate::numerics::{init_params, sigmoid, InitScheme, Matrix, NumericsError, ParamTensor, SeededRng};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RecurrentError {
    #[error("{what}: expected length {expected}, got {actual}")]
    Dimension {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("{what}: expected shape {expected:?}, got {actual:?}")]
    Shape {
        what: &'static str,
        expected: (usize, usize),
        actual: (usize, usize),
    },
    #[error("empty sequence")]
    EmptySequence,
    #[error("cache does not match parameters: {0}")]
    CacheMismatch(&'static str),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

fn check_len(what: &'static str, v: &[f64], expected: usize) -> Result<(), RecurrentError> {
    if v.len() != expected {
        return Err(RecurrentError::Dimension {
            what,
            expected,
            actual: v.len(),
        });
    }
    Ok(())
}

/// `h_t = tanh(W_hx x_t + W_hh h_{t−1} + b_h)`.
#[derive(Clone, Debug)]
pub struct RnnParams {
    pub w_hx: ParamTensor,
    pub w_hh: ParamTensor,
    pub b_h: ParamTensor,
}

impl RnnParams {
    pub fn init(input: usize, hidden: usize, rng: &mut SeededRng) -> Result<Self, RecurrentError> {
        Ok(Self {
            w_hx: init_params("rnn.w_hx", (hidden, input), InitScheme::Uniform008, rng)?,
            w_hh: init_params("rnn.w_hh", (hidden, hidden), InitScheme::Uniform008, rng)?,
            b_h: init_params("rnn.b_h", (hidden, 1), InitScheme::Zeros, rng)?,
        })
    }

    pub fn hidden_size(&self) -> usize {
        self.w_hx.value.rows()
    }

    pub fn input_size(&self) -> usize {
        self.w_hx.value.cols()
    }
}

pub fn simple_rnn_cell(x: &[f64], h_prev: &[f64], params: &RnnParams) -> Result<Vec<f64>, RecurrentError> {
    check_len("rnn input", x, params.input_size())?;
    check_len("rnn previous hidden", h_prev, params.hidden_size())?;
    let mut pre = params.b_h.value.as_slice().to_vec();
    params.w_hx.value.matvec_add(x, &mut pre);
    params.w_hh.value.matvec_add(h_prev, &mut pre);
    Ok(pre.into_iter().map(f64::tanh).collect())
}

/// Runs [`simple_rnn_cell`] over the rows of `seq` from `h_0 = 0`.
pub fn simple_rnn_forward(seq: &Matrix, params: &RnnParams) -> Result<Matrix, RecurrentError> {
    if seq.rows() == 0 {
        return Err(RecurrentError::EmptySequence);
    }
    let hidden = params.hidden_size();
    let mut out = Matrix::zeros(seq.rows(), hidden);
    let mut h = vec![0.0; hidden];
    for t in 0..seq.rows() {
        h = simple_rnn_cell(seq.row(t), &h, params)?;
        out.row_mut(t).copy_from_slice(&h);
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct LstmParams {
    /// `4H × D`.
    pub w_x: ParamTensor,
    /// `4H × H`.
    pub w_h: ParamTensor,
    /// `4H × 1`.
    pub b: ParamTensor,
}

impl LstmParams {
    /// U(−0.08, 0.08) weights, zero bias except the forget-gate block at 1.
    pub fn init(prefix: &str, input: usize, hidden: usize, rng: &mut SeededRng) -> Result<Self, RecurrentError> {
        let w_x = init_params(
            format!("{prefix}.w_x"),
            (4 * hidden, input),
            InitScheme::Uniform008,
            rng,
        )?;
        let w_h = init_params(
            format!("{prefix}.w_h"),
            (4 * hidden, hidden),
            InitScheme::Uniform008,
            rng,
        )?;
        let mut b = init_params(format!("{prefix}.b"), (4 * hidden, 1), InitScheme::Zeros, rng)?;
        let forget = init_params("forget", (hidden, 1), InitScheme::ForgetBiasOne, rng)?;
        b.value.as_mut_slice()[hidden..2 * hidden].copy_from_slice(forget.value.as_slice());
        Ok(Self { w_x, w_h, b })
    }

    /// All-zero parameters of the given shape.
    pub fn zeros(prefix: &str, input: usize, hidden: usize) -> Self {
        Self {
            w_x: ParamTensor::zeros(format!("{prefix}.w_x"), 4 * hidden, input),
            w_h: ParamTensor::zeros(format!("{prefix}.w_h"), 4 * hidden, hidden),
            b: ParamTensor::zeros(format!("{prefix}.b"), 4 * hidden, 1),
        }
    }

    pub fn hidden_size(&self) -> usize {
        self.w_h.value.cols()
    }

    pub fn input_size(&self) -> usize {
        self.w_x.value.cols()
    }

    pub fn tensors(&self) -> [&ParamTensor; 3] {
        [&self.w_x, &self.w_h, &self.b]
    }

    pub fn tensors_mut(&mut self) -> [&mut ParamTensor; 3] {
        [&mut self.w_x, &mut self.w_h, &mut self.b]
    }
}

/// Carried recurrent state.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

impl LstmState {
    pub fn zeros(hidden: usize) -> Self {
        Self {
            h: vec![0.0; hidden],
            c: vec![0.0; hidden],
        }
    }
}

/// Everything one forward step saves for its reverse pass.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmStep {
    pub x: Vec<f64>,
    pub h_prev: Vec<f64>,
    pub c_prev: Vec<f64>,
    pub input_gate: Vec<f64>,
    pub forget_gate: Vec<f64>,
    pub candidate: Vec<f64>,
    pub output_gate: Vec<f64>,
    pub c: Vec<f64>,
    pub tanh_c: Vec<f64>,
    pub h: Vec<f64>,
}

/// Gradients flowing out of one step.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmStepGrads {
    pub dx: Vec<f64>,
    pub dh_prev: Vec<f64>,
    pub dc_prev: Vec<f64>,
}

pub fn lstm_cell_forward(
    x: &[f64],
    h_prev: &[f64],
    c_prev: &[f64],
    params: &LstmParams,
) -> Result<LstmStep, RecurrentError> {
    let hidden = params.hidden_size();
    check_len("lstm input", x, params.input_size())?;
    check_len("lstm previous hidden", h_prev, hidden)?;
    check_len("lstm previous cell", c_prev, hidden)?;

    let mut pre = params.b.value.as_slice().to_vec();
    params.w_x.value.matvec_add(x, &mut pre);
    params.w_h.value.matvec_add(h_prev, &mut pre);

    let input_gate: Vec<f64> = pre[..hidden].iter().map(|&a| sigmoid(a)).collect();
    let forget_gate: Vec<f64> = pre[hidden..2 * hidden].iter().map(|&a| sigmoid(a)).collect();
    let candidate: Vec<f64> = pre[2 * hidden..3 * hidden].iter().map(|a| a.tanh()).collect();
    let output_gate: Vec<f64> = pre[3 * hidden..].iter().map(|&a| sigmoid(a)).collect();

    let c: Vec<f64> = (0..hidden)
        .map(|j| forget_gate[j] * c_prev[j] + input_gate[j] * candidate[j])
        .collect();
    let tanh_c: Vec<f64> = c.iter().map(|v| v.tanh()).collect();
    let h: Vec<f64> = output_gate.iter().zip(&tanh_c).map(|(o, t)| o * t).collect();

    Ok(LstmStep {
        x: x.to_vec(),
        h_prev: h_prev.to_vec(),
        c_prev: c_prev.to_vec(),
        input_gate,
        forget_gate,
        candidate,
        output_gate,
        c,
        tanh_c,
        h,
    })
}

/// Reverse pass of one step. Parameter gradients are added into the grad
/// slots of `params`.
pub fn lstm_cell_backward(
    step: &LstmStep,
    dh: &[f64],
    dc: &[f64],
    params: &mut LstmParams,
) -> Result<LstmStepGrads, RecurrentError> {
    let hidden = params.hidden_size();
    if step.x.len() != params.input_size() || step.h.len() != hidden {
        return Err(RecurrentError::CacheMismatch("step shape differs from parameter shape"));
    }
    check_len("upstream hidden gradient", dh, hidden)?;
    check_len("upstream cell gradient", dc, hidden)?;

    let mut dpre = vec![0.0; 4 * hidden];
    let mut dc_prev = vec![0.0; hidden];
    for j in 0..hidden {
        let i = step.input_gate[j];
        let f = step.forget_gate[j];
        let g = step.candidate[j];
        let o = step.output_gate[j];
        let tc = step.tanh_c[j];

        let d_out = dh[j] * tc;
        let dc_total = dc[j] + dh[j] * o * (1.0 - tc * tc);
        dpre[j] = dc_total * g * i * (1.0 - i);
        dpre[hidden + j] = dc_total * step.c_prev[j] * f * (1.0 - f);
        dpre[2 * hidden + j] = dc_total * i * (1.0 - g * g);
        dpre[3 * hidden + j] = d_out * o * (1.0 - o);
        dc_prev[j] = dc_total * f;
    }

    params.w_x.grad.add_outer(&dpre, &step.x);
    params.w_h.grad.add_outer(&dpre, &step.h_prev);
    params.b.grad.add_column(&dpre);

    let mut dx = vec![0.0; params.input_size()];
    params.w_x.value.matvec_transposed_add(&dpre, &mut dx);
    let mut dh_prev = vec![0.0; hidden];
    params.w_h.value.matvec_transposed_add(&dpre, &mut dh_prev);

    Ok(LstmStepGrads { dx, dh_prev, dc_prev })
}

/// Saved activations of a full sequence, plus the output mask if one was
/// applied.
#[derive(Clone, Debug)]
pub struct LstmCache {
    pub steps: Vec<LstmStep>,
    pub mask: Option<Matrix>,
}

impl LstmCache {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn final_state(&self) -> Option<LstmState> {
        self.steps.last().map(|s| LstmState {
            h: s.h.clone(),
            c: s.c.clone(),
        })
    }
}

/// Runs the LSTM over the rows of `seq` from zero state.
///
/// Row `t` of the returned matrix is `h_t`, multiplied by row `t` of
/// `mask` when one is given. The mask never touches the recurrent path.
pub fn lstm_sequence_forward(
    seq: &Matrix,
    params: &LstmParams,
    mask: Option<&Matrix>,
) -> Result<(Matrix, LstmCache), RecurrentError> {
    lstm_sequence_forward_from(seq, params, mask, &LstmState::zeros(params.hidden_size()))
}

pub fn lstm_sequence_forward_from(
    seq: &Matrix,
    params: &LstmParams,
    mask: Option<&Matrix>,
    initial: &LstmState,
) -> Result<(Matrix, LstmCache), RecurrentError> {
    let steps_len = seq.rows();
    let hidden = params.hidden_size();
    if steps_len == 0 {
        return Err(RecurrentError::EmptySequence);
    }
    if seq.cols() != params.input_size() {
        return Err(RecurrentError::Shape {
            what: "lstm input sequence",
            expected: (steps_len, params.input_size()),
            actual: seq.shape(),
        });
    }
    if let Some(m) = mask {
        if m.shape() != (steps_len, hidden) {
            return Err(RecurrentError::Shape {
                what: "dropout mask",
                expected: (steps_len, hidden),
                actual: m.shape(),
            });
        }
    }

    let mut out = Matrix::zeros(steps_len, hidden);
    let mut steps = Vec::with_capacity(steps_len);
    let mut h = initial.h.clone();
    let mut c = initial.c.clone();
    for t in 0..steps_len {
        let step = lstm_cell_forward(seq.row(t), &h, &c, params)?;
        let row = out.row_mut(t);
        match mask {
            Some(m) => {
                for ((o, &hv), &mv) in row.iter_mut().zip(&step.h).zip(m.row(t)) {
                    *o = hv * mv;
                }
            }
            None => row.copy_from_slice(&step.h),
        }
        h.clone_from(&step.h);
        c.clone_from(&step.c);
        steps.push(step);
    }
    Ok((
        out,
        LstmCache {
            steps,
            mask: mask.cloned(),
        },
    ))
}

/// Full unrolled reverse pass. `d_out` is the gradient w.r.t. the exposed
/// (masked) outputs. Returns the gradient w.r.t. the input sequence.
pub fn lstm_sequence_backward(
    cache: &LstmCache,
    d_out: &Matrix,
    params: &mut LstmParams,
) -> Result<Matrix, RecurrentError> {
    let steps_len = cache.len();
    let hidden = params.hidden_size();
    if d_out.shape() != (steps_len, hidden) {
        return Err(RecurrentError::Shape {
            what: "output gradient",
            expected: (steps_len, hidden),
            actual: d_out.shape(),
        });
    }
    let mut d_seq = Matrix::zeros(steps_len, params.input_size());
    let mut dh_next = vec![0.0; hidden];
    let mut dc_next = vec![0.0; hidden];
    for t in (0..steps_len).rev() {
        let mut dh: Vec<f64> = d_out.row(t).to_vec();
        if let Some(m) = &cache.mask {
            dh.iter_mut().zip(m.row(t)).for_each(|(d, mv)| *d *= mv);
        }
        dh.iter_mut().zip(&dh_next).for_each(|(d, n)| *d += n);
        let grads = lstm_cell_backward(&cache.steps[t], &dh, &dc_next, params)?;
        d_seq.row_mut(t).copy_from_slice(&grads.dx);
        dh_next = grads.dh_prev;
        dc_next = grads.dc_prev;
    }
    Ok(d_seq)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    // 40-digit reference values: c = σ(1)·tanh(1), h = σ(1)·tanh(c).
    const SCALAR_C: f64 = 0.556_769_941_145_939_7;
    const SCALAR_H: f64 = 0.369_606_352_935_705_8;

    fn scalar_lstm(weight: f64) -> LstmParams {
        let mut p = LstmParams::zeros("s", 1, 1);
        p.w_x.value.fill(weight);
        p.w_h.value.fill(weight);
        p
    }

    fn random_lstm(input: usize, hidden: usize, seed: u64, scale: f64) -> LstmParams {
        let mut rng = SeededRng::new(seed);
        let mut p = LstmParams::zeros("r", input, hidden);
        for t in p.tensors_mut() {
            t.value
                .as_mut_slice()
                .iter_mut()
                .for_each(|v| *v = rng.uniform(-scale, scale));
        }
        p
    }

    fn random_matrix(rows: usize, cols: usize, rng: &mut SeededRng) -> Matrix {
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap()
    }

    #[test]
    fn rnn_cell_examples() {
        let mut p = RnnParams::init(1, 1, &mut SeededRng::new(0)).unwrap();
        p.w_hx.value.fill(0.0);
        p.w_hh.value.fill(0.0);
        assert_eq!(simple_rnn_cell(&[3.7], &[0.2], &p).unwrap(), vec![0.0]);
        p.w_hx.value.fill(1.0);
        p.w_hh.value.fill(1.0);
        let h = simple_rnn_cell(&[1.0], &[0.0], &p).unwrap();
        assert!((h[0] - 0.761_594_155_955_764_9).abs() < 1e-6);
        assert!(matches!(
            simple_rnn_cell(&[1.0, 2.0], &[0.0], &p),
            Err(RecurrentError::Dimension {
                expected: 1,
                actual: 2,
                ..
            })
        ));
    }

    #[test]
    fn rnn_sequence_starts_from_zero_state() {
        let p = RnnParams::init(2, 3, &mut SeededRng::new(4)).unwrap();
        let seq = Matrix::from_rows(&[vec![0.5, -0.2], vec![0.1, 0.9]]).unwrap();
        let out = simple_rnn_forward(&seq, &p).unwrap();
        let first = simple_rnn_cell(seq.row(0), &[0.0; 3], &p).unwrap();
        assert_eq!(out.row(0), first.as_slice());
        let second = simple_rnn_cell(seq.row(1), &first, &p).unwrap();
        assert_eq!(out.row(1), second.as_slice());
    }

    #[test]
    fn zero_input_zero_bias_gives_zero_state() {
        let mut p = random_lstm(3, 4, 11, 2.0);
        p.b.value.fill(0.0);
        let step = lstm_cell_forward(&[0.0; 3], &[0.0; 4], &[0.0; 4], &p).unwrap();
        assert!(step.h.iter().chain(&step.c).all(|&v| v == 0.0));
        let (out, _) = lstm_sequence_forward(&Matrix::zeros(5, 3), &p, None).unwrap();
        assert!(out.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scalar_cell_matches_reference() {
        let p = scalar_lstm(1.0);
        let step = lstm_cell_forward(&[1.0], &[0.0], &[0.0], &p).unwrap();
        assert!((step.c[0] - SCALAR_C).abs() < 1e-3);
        assert!((step.h[0] - SCALAR_H).abs() < 1e-3);
        // Tighter than required; both routes are double precision.
        assert!((step.c[0] - SCALAR_C).abs() < 1e-12);
        assert!((step.h[0] - SCALAR_H).abs() < 1e-12);
    }

    #[test]
    fn cell_rejects_dimension_mismatch() {
        let p = scalar_lstm(1.0);
        assert!(lstm_cell_forward(&[1.0, 1.0], &[0.0], &[0.0], &p).is_err());
        assert!(lstm_cell_forward(&[1.0], &[0.0, 0.0], &[0.0], &p).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut p = random_lstm(2, 3, 5, 1.0);
        let step = lstm_cell_forward(&[0.3, -0.7], &[0.1, 0.2, -0.3], &[0.5, -0.5, 0.2], &p).unwrap();
        let g = lstm_cell_backward(&step, &[0.0; 3], &[0.0; 3], &mut p).unwrap();
        assert!(g.dx.iter().chain(&g.dh_prev).chain(&g.dc_prev).all(|&v| v == 0.0));
        for t in p.tensors() {
            assert!(t.grad.as_slice().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn backward_is_linear_in_upstream() {
        let base = random_lstm(2, 3, 6, 1.0);
        let step = lstm_cell_forward(&[0.3, -0.7], &[0.1, 0.2, -0.3], &[0.5, -0.5, 0.2], &base).unwrap();
        let dh = [0.25, -0.5, 0.125];
        let dc = [0.5, 0.25, -1.0];
        let mut p1 = base.clone();
        let g1 = lstm_cell_backward(&step, &dh, &dc, &mut p1).unwrap();
        let mut p2 = base.clone();
        let dh2: Vec<f64> = dh.iter().map(|v| 2.0 * v).collect();
        let dc2: Vec<f64> = dc.iter().map(|v| 2.0 * v).collect();
        let g2 = lstm_cell_backward(&step, &dh2, &dc2, &mut p2).unwrap();
        for (a, b) in g1
            .dx
            .iter()
            .chain(&g1.dh_prev)
            .chain(&g1.dc_prev)
            .zip(g2.dx.iter().chain(&g2.dh_prev).chain(&g2.dc_prev))
        {
            assert_eq!(2.0 * a, *b);
        }
        for (t1, t2) in p1.tensors().iter().zip(p2.tensors()) {
            for (a, b) in t1.grad.as_slice().iter().zip(t2.grad.as_slice()) {
                assert_eq!(2.0 * a, *b);
            }
        }
    }

    #[test]
    fn stale_cache_rejected() {
        let p = random_lstm(2, 3, 1, 1.0);
        let step = lstm_cell_forward(&[0.3, -0.7], &[0.0; 3], &[0.0; 3], &p).unwrap();
        let mut other = random_lstm(3, 3, 1, 1.0);
        assert!(matches!(
            lstm_cell_backward(&step, &[1.0; 3], &[0.0; 3], &mut other),
            Err(RecurrentError::CacheMismatch(_))
        ));
    }

    // Central differences of the scalar forward example against the
    // analytic cell gradients, loss = h + 0.5·c.
    #[test]
    fn scalar_cell_gradcheck() {
        let loss = |p: &LstmParams, x: f64, h0: f64, c0: f64| {
            let s = lstm_cell_forward(&[x], &[h0], &[c0], p).unwrap();
            s.h[0] + 0.5 * s.c[0]
        };
        let mut p = scalar_lstm(1.0);
        let step = lstm_cell_forward(&[1.0], &[0.0], &[0.0], &p).unwrap();
        let g = lstm_cell_backward(&step, &[1.0], &[0.5], &mut p).unwrap();
        let eps = 1e-5;
        let rel = |a: f64, n: f64| (a - n).abs() / n.abs().max(1.0);

        let fd_x = (loss(&p, 1.0 + eps, 0.0, 0.0) - loss(&p, 1.0 - eps, 0.0, 0.0)) / (2.0 * eps);
        assert!(rel(g.dx[0], fd_x) < 1e-6);
        let fd_h = (loss(&p, 1.0, eps, 0.0) - loss(&p, 1.0, -eps, 0.0)) / (2.0 * eps);
        assert!(rel(g.dh_prev[0], fd_h) < 1e-6);
        let fd_c = (loss(&p, 1.0, 0.0, eps) - loss(&p, 1.0, 0.0, -eps)) / (2.0 * eps);
        assert!(rel(g.dc_prev[0], fd_c) < 1e-6);

        let analytic = p.clone();
        for (ti, t) in analytic.tensors().iter().enumerate() {
            for k in 0..t.value.len() {
                let mut plus = p.clone();
                plus.tensors_mut()[ti].value.as_mut_slice()[k] += eps;
                let mut minus = p.clone();
                minus.tensors_mut()[ti].value.as_mut_slice()[k] -= eps;
                let fd = (loss(&plus, 1.0, 0.0, 0.0) - loss(&minus, 1.0, 0.0, 0.0)) / (2.0 * eps);
                assert!(rel(t.grad.as_slice()[k], fd) < 1e-6, "{} [{k}]", t.name);
            }
        }
    }

    fn weighted_sum_loss(out: &Matrix, weights: &Matrix) -> f64 {
        out.as_slice().iter().zip(weights.as_slice()).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn sequence_gradcheck() {
        let mut rng = SeededRng::new(21);
        let seq = random_matrix(3, 2, &mut rng);
        let upstream = random_matrix(3, 2, &mut rng);
        let mut p = random_lstm(2, 2, 22, 0.8);
        let (_, cache) = lstm_sequence_forward(&seq, &p, None).unwrap();
        let d_seq = lstm_sequence_backward(&cache, &upstream, &mut p).unwrap();

        let eps = 1e-5;
        let loss =
            |p: &LstmParams, s: &Matrix| weighted_sum_loss(&lstm_sequence_forward(s, p, None).unwrap().0, &upstream);
        let mut worst: f64 = 0.0;
        for ti in 0..3 {
            for k in 0..p.tensors()[ti].value.len() {
                let mut plus = p.clone();
                plus.tensors_mut()[ti].value.as_mut_slice()[k] += eps;
                let mut minus = p.clone();
                minus.tensors_mut()[ti].value.as_mut_slice()[k] -= eps;
                let fd = (loss(&plus, &seq) - loss(&minus, &seq)) / (2.0 * eps);
                let a = p.tensors()[ti].grad.as_slice()[k];
                worst = worst.max((a - fd).abs() / fd.abs().max(1.0));
            }
        }
        for k in 0..seq.len() {
            let mut plus = seq.clone();
            plus.as_mut_slice()[k] += eps;
            let mut minus = seq.clone();
            minus.as_mut_slice()[k] -= eps;
            let fd = (loss(&p, &plus) - loss(&p, &minus)) / (2.0 * eps);
            worst = worst.max((d_seq.as_slice()[k] - fd).abs() / fd.abs().max(1.0));
        }
        assert!(worst < 1e-5, "worst relative error {worst}");
    }

    #[test]
    fn credit_flows_to_first_step() {
        let mut rng = SeededRng::new(8);
        let seq = random_matrix(3, 2, &mut rng);
        let mut upstream = Matrix::zeros(3, 2);
        upstream.row_mut(2).copy_from_slice(&[1.0, -1.0]);
        let mut p = random_lstm(2, 2, 9, 1.0);
        let (_, cache) = lstm_sequence_forward(&seq, &p, None).unwrap();
        let d_seq = lstm_sequence_backward(&cache, &upstream, &mut p).unwrap();

        let eps = 1e-5;
        let loss = |s: &Matrix| weighted_sum_loss(&lstm_sequence_forward(s, &p, None).unwrap().0, &upstream);
        let mut plus = seq.clone();
        plus.as_mut_slice()[0] += eps;
        let mut minus = seq.clone();
        minus.as_mut_slice()[0] -= eps;
        let fd = (loss(&plus) - loss(&minus)) / (2.0 * eps);
        assert!(fd.abs() > 1e-6);
        assert!(d_seq.row(0)[0].abs() > 1e-6);
        assert!((d_seq.row(0)[0] - fd).abs() < 1e-8);
    }

    #[test]
    fn zero_output_gradient_gives_zero_input_gradient() {
        let mut rng = SeededRng::new(2);
        let seq = random_matrix(4, 3, &mut rng);
        let mut p = random_lstm(3, 2, 3, 1.0);
        let (_, cache) = lstm_sequence_forward(&seq, &p, None).unwrap();
        let d = lstm_sequence_backward(&cache, &Matrix::zeros(4, 2), &mut p).unwrap();
        assert!(d.as_slice().iter().all(|&v| v == 0.0));
        assert!(p.tensors().iter().all(|t| t.grad.as_slice().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn sequence_matches_manual_composition() {
        let mut rng = SeededRng::new(7);
        let seq = random_matrix(4, 3, &mut rng);
        let p = LstmParams::init("m", 3, 2, &mut rng).unwrap();
        let (out, cache) = lstm_sequence_forward(&seq, &p, None).unwrap();
        let (mut h, mut c) = (vec![0.0; 2], vec![0.0; 2]);
        for t in 0..4 {
            let s = lstm_cell_forward(seq.row(t), &h, &c, &p).unwrap();
            assert_eq!(out.row(t), s.h.as_slice());
            assert_eq!(cache.steps[t], s);
            h = s.h;
            c = s.c;
        }

        let (one, _) = lstm_sequence_forward(&Matrix::from_rows(&[seq.row(0).to_vec()]).unwrap(), &p, None).unwrap();
        let single = lstm_cell_forward(seq.row(0), &[0.0; 2], &[0.0; 2], &p).unwrap();
        assert_eq!(one.row(0), single.h.as_slice());
    }

    #[test]
    fn mask_scales_exposed_outputs_only() {
        let mut rng = SeededRng::new(12);
        let seq = random_matrix(3, 2, &mut rng);
        let p = LstmParams::init("m", 2, 2, &mut rng).unwrap();
        let mask = Matrix::from_rows(&[vec![0.0, 2.0], vec![1.0, 0.0], vec![2.0, 2.0]]).unwrap();
        let (plain, plain_cache) = lstm_sequence_forward(&seq, &p, None).unwrap();
        let (masked, masked_cache) = lstm_sequence_forward(&seq, &p, Some(&mask)).unwrap();
        assert_eq!(plain_cache.steps, masked_cache.steps);
        for k in 0..plain.len() {
            assert_eq!(masked.as_slice()[k], plain.as_slice()[k] * mask.as_slice()[k]);
        }
        assert!(lstm_sequence_forward(&seq, &p, Some(&Matrix::zeros(2, 2))).is_err());
    }

    #[test]
    fn empty_sequence_rejected() {
        let p = scalar_lstm(1.0);
        assert_eq!(
            lstm_sequence_forward(&Matrix::zeros(0, 1), &p, None).unwrap_err(),
            RecurrentError::EmptySequence
        );
    }

    proptest! {
        #[test]
        fn split_run_equals_full_run(seed in 0u64..1000, a in 1usize..4, b in 1usize..4) {
            let mut rng = SeededRng::new(seed);
            let seq = random_matrix(a + b, 2, &mut rng);
            let p = random_lstm(2, 3, seed + 1, 1.5);
            let (full, _) = lstm_sequence_forward(&seq, &p, None).unwrap();
            let head = Matrix::from_rows(&seq.to_rows()[..a]).unwrap();
            let tail = Matrix::from_rows(&seq.to_rows()[a..]).unwrap();
            let (out_a, cache_a) = lstm_sequence_forward(&head, &p, None).unwrap();
            let state = cache_a.final_state().unwrap();
            let (out_b, _) = lstm_sequence_forward_from(&tail, &p, None, &state).unwrap();
            for t in 0..a {
                prop_assert_eq!(full.row(t), out_a.row(t));
            }
            for t in 0..b {
                prop_assert_eq!(full.row(a + t), out_b.row(t));
            }
        }

        #[test]
        fn activations_stay_in_range(seed in 0u64..1000, len in 1usize..8) {
            let mut rng = SeededRng::new(seed);
            let seq = Matrix::from_vec(len, 2, (0..len * 2).map(|_| rng.uniform(-5.0, 5.0)).collect()).unwrap();
            let p = random_lstm(2, 3, seed, 3.0);
            let (_, cache) = lstm_sequence_forward(&seq, &p, None).unwrap();
            for (t, s) in cache.steps.iter().enumerate() {
                for j in 0..3 {
                    for g in [s.input_gate[j], s.forget_gate[j], s.output_gate[j]] {
                        prop_assert!((0.0..=1.0).contains(&g));
                    }
                    prop_assert!(s.candidate[j].abs() <= 1.0);
                    prop_assert!(s.h[j].abs() <= 1.0);
                    prop_assert!(s.c[j].abs() <= s.c_prev[j].abs() + 1.0);
                    prop_assert!(s.c[j].abs() <= (t + 1) as f64);
                }
            }
        }
    }
}
