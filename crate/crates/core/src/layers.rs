//! LSTM cell, bidirectional runner, character encoders and the bigram convolution.
//!
//! Parameter names registered by [`LstmParams::register`] are
//! `<prefix>.w_ih` `[4h, in]`, `<prefix>.w_hh` `[4h, h]` and `<prefix>.b`
//! `[4h]`, with gate blocks ordered input, forget, output, candidate.

use rand::Rng;

use crate::autodiff::{CustomOp, Graph, NodeId, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::scalar::{sigmoid, Scalar};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct LstmParams {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b: ParamId,
    pub input_size: usize,
    pub hidden_size: usize,
}

pub fn uniform_tensor<T: Scalar>(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::lit(rng.gen_range(-bound..=bound))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

impl LstmParams {
    /// Weights `U(−√(1/h), √(1/h))`, forget-gate bias 1.
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        input_size: usize,
        hidden_size: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if input_size == 0 || hidden_size == 0 {
            return Err(Error::Config(format!("{prefix}: LSTM sizes must be positive")));
        }
        let h = hidden_size;
        let bound = (1.0 / h as f64).sqrt();
        let w_ih = store.register(format!("{prefix}.w_ih"), uniform_tensor(&[4 * h, input_size], bound, rng))?;
        let w_hh = store.register(format!("{prefix}.w_hh"), uniform_tensor(&[4 * h, h], bound, rng))?;
        let mut bias: Tensor<T> = uniform_tensor(&[4 * h], bound, rng);
        bias.data_mut()[h..2 * h].iter_mut().for_each(|x| *x = T::one());
        let b = store.register(format!("{prefix}.b"), bias)?;
        Ok(LstmParams { w_ih, w_hh, b, input_size, hidden_size })
    }

    pub fn lookup<T: Scalar>(store: &ParamStore<T>, prefix: &str) -> Result<Self> {
        let w_ih = store.require(&format!("{prefix}.w_ih"))?;
        let w_hh = store.require(&format!("{prefix}.w_hh"))?;
        let b = store.require(&format!("{prefix}.b"))?;
        let shape = store.value(w_ih).shape();
        Ok(LstmParams { w_ih, w_hh, b, input_size: shape[1], hidden_size: shape[0] / 4 })
    }
}

/// Gate pre-activations `[1, 4h]` and previous cell `[1, h]` to `[h' ‖ c']`.
struct LstmCell;

fn gates<T: Scalar>(z: &[T], h: usize) -> (Vec<T>, Vec<T>, Vec<T>, Vec<T>) {
    let i = z[..h].iter().map(|&v| sigmoid(v)).collect();
    let f = z[h..2 * h].iter().map(|&v| sigmoid(v)).collect();
    let o = z[2 * h..3 * h].iter().map(|&v| sigmoid(v)).collect();
    let g = z[3 * h..].iter().map(|&v| v.tanh()).collect();
    (i, f, o, g)
}

impl<T: Scalar> CustomOp<T> for LstmCell {
    fn name(&self) -> &'static str {
        "lstm_cell"
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let (z, c) = (inputs[0], inputs[1]);
        let h = c.len();
        if z.len() != 4 * h {
            return Err(Error::Shape(format!("lstm cell: gates {} vs cell {h}", z.len())));
        }
        let (i, f, o, g) = gates(z.data(), h);
        let mut out = vec![T::zero(); 2 * h];
        for k in 0..h {
            let c_new = f[k] * c.data()[k] + i[k] * g[k];
            out[k] = o[k] * c_new.tanh();
            out[h + k] = c_new;
        }
        Tensor::new(vec![1, 2 * h], out)
    }

    fn backward(&self, inputs: &[&Tensor<T>], output: &Tensor<T>, grad: &Tensor<T>) -> Vec<Tensor<T>> {
        let (z, c) = (inputs[0], inputs[1]);
        let h = c.len();
        let (i, f, o, g) = gates(z.data(), h);
        let one = T::one();
        let mut dz = vec![T::zero(); 4 * h];
        let mut dc_prev = vec![T::zero(); h];
        for k in 0..h {
            let tc = output.data()[h + k].tanh();
            let dh = grad.data()[k];
            let dc = grad.data()[h + k] + dh * o[k] * (one - tc * tc);
            dz[k] = dc * g[k] * i[k] * (one - i[k]);
            dz[h + k] = dc * c.data()[k] * f[k] * (one - f[k]);
            dz[2 * h + k] = dh * tc * o[k] * (one - o[k]);
            dz[3 * h + k] = dc * i[k] * (one - g[k] * g[k]);
            dc_prev[k] = dc * f[k];
        }
        vec![
            Tensor::new(z.shape().to_vec(), dz).expect("gate shape"),
            Tensor::new(c.shape().to_vec(), dc_prev).expect("cell shape"),
        ]
    }
}

fn zero_state<T: Scalar>(g: &mut Graph<'_, T>, h: usize) -> NodeId {
    g.input(Tensor::zeros(&[1, h]))
}

fn cell_from_gates<T: Scalar>(g: &mut Graph<'_, T>, z: NodeId, c: NodeId, p: &LstmParams) -> Result<(NodeId, NodeId)> {
    let out = g.custom(Box::new(LstmCell), &[z, c])?;
    let h = p.hidden_size;
    Ok((g.slice_cols(out, 0, h)?, g.slice_cols(out, h, 2 * h)?))
}

/// One step: `x` `[1, in]`, `h`, `c` `[1, hidden]`.
pub fn lstm_step<T: Scalar>(
    g: &mut Graph<'_, T>,
    x: NodeId,
    h: NodeId,
    c: NodeId,
    p: &LstmParams,
) -> Result<(NodeId, NodeId)> {
    let xs = g.value(x).shape().to_vec();
    if xs != [1, p.input_size] {
        return Err(Error::Shape(format!("lstm input {xs:?}, expected [1, {}]", p.input_size)));
    }
    for s in [h, c] {
        if g.value(s).shape() != [1, p.hidden_size] {
            return Err(Error::Shape(format!("lstm state {:?}, expected [1, {}]", g.value(s).shape(), p.hidden_size)));
        }
    }
    let (w_ih, w_hh, b) = (g.param(p.w_ih), g.param(p.w_hh), g.param(p.b));
    let zx = g.linear(x, w_ih, Some(b))?;
    let zh = g.linear(h, w_hh, None)?;
    let z = g.add(zx, zh)?;
    cell_from_gates(g, z, c, p)
}

/// Unidirectional run from a zero state; returns hidden rows in input order.
pub fn run_lstm<T: Scalar>(g: &mut Graph<'_, T>, seq: NodeId, p: &LstmParams, reverse: bool) -> Result<Vec<NodeId>> {
    let (m, cols) = (g.value(seq).rows(), g.value(seq).cols());
    if m == 0 {
        return Err(Error::Empty);
    }
    if cols != p.input_size {
        return Err(Error::Shape(format!("lstm input width {cols}, expected {}", p.input_size)));
    }
    let (w_ih, w_hh, b) = (g.param(p.w_ih), g.param(p.w_hh), g.param(p.b));
    let proj = g.linear(seq, w_ih, Some(b))?;
    let mut h = zero_state(g, p.hidden_size);
    let mut c = zero_state(g, p.hidden_size);
    let mut out = vec![h; m];
    let order: Vec<usize> = if reverse { (0..m).rev().collect() } else { (0..m).collect() };
    for t in order {
        let zx = g.row(proj, t)?;
        let zh = g.linear(h, w_hh, None)?;
        let z = g.add(zx, zh)?;
        (h, c) = cell_from_gates(g, z, c, p)?;
        out[t] = h;
    }
    Ok(out)
}

/// `[m, in]` → `[m, 2h]`, row t = forward hidden at t ‖ backward hidden at t.
pub fn run_blstm<T: Scalar>(g: &mut Graph<'_, T>, seq: NodeId, fwd: &LstmParams, bwd: &LstmParams) -> Result<NodeId> {
    let f = run_lstm(g, seq, fwd, false)?;
    let b = run_lstm(g, seq, bwd, true)?;
    let fs = g.stack_rows(&f)?;
    let bs = g.stack_rows(&b)?;
    g.concat_cols(&[fs, bs])
}

/// Final hidden state `[1, h]` of a forward LSTM over the word's characters.
pub fn char_word_encoding<T: Scalar>(
    g: &mut Graph<'_, T>,
    word_chars: &[usize],
    char_table: NodeId,
    p: &LstmParams,
) -> Result<NodeId> {
    if word_chars.is_empty() {
        return Err(Error::Empty);
    }
    let emb = g.gather(char_table, word_chars)?;
    let hs = run_lstm(g, emb, p, false)?;
    Ok(*hs.last().expect("non-empty"))
}

/// BLSTM over a whole character stream, sampled per word at
/// (forward state at the word's last char ‖ backward state at its first char).
pub fn selective_pickup<T: Scalar>(
    g: &mut Graph<'_, T>,
    sentence_chars: &[usize],
    word_ends: &[usize],
    word_starts: &[usize],
    fwd: &LstmParams,
    bwd: &LstmParams,
    char_table: NodeId,
) -> Result<NodeId> {
    let n = sentence_chars.len();
    if word_ends.len() != word_starts.len() || word_ends.is_empty() {
        return Err(Error::Shape(format!("{} word ends vs {} word starts", word_ends.len(), word_starts.len())));
    }
    for w in [word_ends, word_starts] {
        if w.windows(2).any(|p| p[0] >= p[1]) {
            return Err(Error::OutOfRange("word positions must be strictly increasing".into()));
        }
        if w.last().is_some_and(|&p| p >= n) {
            return Err(Error::OutOfRange(format!("word position beyond {n} characters")));
        }
    }
    if word_starts.iter().zip(word_ends).any(|(s, e)| s > e) {
        return Err(Error::OutOfRange("word starts after it ends".into()));
    }
    let emb = g.gather(char_table, sentence_chars)?;
    let f = run_lstm(g, emb, fwd, false)?;
    let b = run_lstm(g, emb, bwd, true)?;
    let fs: Vec<NodeId> = word_ends.iter().map(|&e| f[e]).collect();
    let bs: Vec<NodeId> = word_starts.iter().map(|&s| b[s]).collect();
    let fs = g.stack_rows(&fs)?;
    let bs = g.stack_rows(&bs)?;
    g.concat_cols(&[fs, bs])
}

/// Kernel `[2, d]` applied with stride 1: `B_i = I_i ⊙ K_0 + I_{i+1} ⊙ K_1`.
#[derive(Clone, Debug, PartialEq)]
pub struct BigramKernel {
    pub kernel: ParamId,
    pub dim: usize,
}

impl BigramKernel {
    pub fn register<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize, rng: &mut impl Rng) -> Result<Self> {
        let bound = (1.0 / dim as f64).sqrt();
        let kernel = store.register(name, uniform_tensor(&[2, dim], bound, rng))?;
        Ok(BigramKernel { kernel, dim })
    }
}

/// `[(m+1), d]` padded input → `[m, d]`.
pub fn bigram_conv<T: Scalar>(g: &mut Graph<'_, T>, padded: NodeId, kernel: NodeId) -> Result<NodeId> {
    let (rows, d) = (g.value(padded).rows(), g.value(padded).cols());
    if rows < 2 {
        return Err(Error::Shape(format!("bigram input needs ≥ 2 rows, got {rows}")));
    }
    if g.value(kernel).shape() != [2, d] {
        return Err(Error::Shape(format!("bigram kernel {:?}, expected [2, {d}]", g.value(kernel).shape())));
    }
    let k0 = g.row(kernel, 0)?;
    let k1 = g.row(kernel, 1)?;
    let a = g.slice_rows(padded, 0, rows - 1)?;
    let b = g.slice_rows(padded, 1, rows)?;
    let a = g.mul_row(a, k0)?;
    let b = g.mul_row(b, k1)?;
    g.add(a, b)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zero_lstm(store: &mut ParamStore<f64>, input: usize, hidden: usize) -> LstmParams {
        let w_ih = store.register("z.w_ih", Tensor::zeros(&[4 * hidden, input])).unwrap();
        let w_hh = store.register("z.w_hh", Tensor::zeros(&[4 * hidden, hidden])).unwrap();
        let b = store.register("z.b", Tensor::zeros(&[4 * hidden])).unwrap();
        LstmParams { w_ih, w_hh, b, input_size: input, hidden_size: hidden }
    }

    #[test]
    fn zero_weights_zero_state() {
        let mut store = ParamStore::new();
        let p = zero_lstm(&mut store, 3, 2);
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::row_vector(vec![1.0, -2.0, 0.5]));
        let h = g.input(Tensor::zeros(&[1, 2]));
        let c = g.input(Tensor::zeros(&[1, 2]));
        let (h2, c2) = lstm_step(&mut g, x, h, c, &p).unwrap();
        assert_eq!(g.value(h2).data(), &[0.0, 0.0]);
        assert_eq!(g.value(c2).data(), &[0.0, 0.0]);
    }

    #[test]
    fn carousel_keeps_cell() {
        let mut store = ParamStore::new();
        let p = zero_lstm(&mut store, 1, 2);
        let bias = store.value_mut(p.b).data_mut();
        bias[..2].iter_mut().for_each(|v| *v = -1e3);
        bias[2..4].iter_mut().for_each(|v| *v = 1e3);
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::row_vector(vec![0.3]));
        let h = g.input(Tensor::zeros(&[1, 2]));
        let c = g.input(Tensor::row_vector(vec![0.7, -1.1]));
        let (_, c2) = lstm_step(&mut g, x, h, c, &p).unwrap();
        assert_eq!(g.value(c2).data(), &[0.7, -1.1]);
    }

    #[test]
    fn forget_bias_initialized_to_one() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = rand::thread_rng();
        let p = LstmParams::register(&mut store, "l", 3, 4, &mut rng).unwrap();
        assert!(store.value(p.b).data()[4..8].iter().all(|&v| v == 1.0));
        assert_eq!(LstmParams::lookup(&store, "l").unwrap(), p);
    }

    #[test]
    fn step_rejects_bad_shapes() {
        let mut store = ParamStore::new();
        let p = zero_lstm(&mut store, 3, 2);
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::row_vector(vec![1.0, 2.0]));
        let h = g.input(Tensor::zeros(&[1, 2]));
        assert!(lstm_step(&mut g, x, h, h, &p).is_err());
    }

    #[test]
    fn bigram_hand_fixture() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let i = g.input(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0], vec![7.0, 8.0]]).unwrap());
        let k = g.input(Tensor::from_rows(&[vec![1.0, -1.0], vec![0.5, 2.0]]).unwrap());
        let b = bigram_conv(&mut g, i, k).unwrap();
        // [1·1 + 3·.5, 2·−1 + 4·2], [3 + 2.5, −4 + 12], [5 + 3.5, −6 + 16]
        assert_eq!(g.value(b).data(), &[2.5, 6.0, 5.5, 8.0, 8.5, 10.0]);
    }

    #[test]
    fn bigram_needs_two_rows() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let i = g.input(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
        let k = g.input(Tensor::zeros(&[2, 2]));
        assert!(bigram_conv(&mut g, i, k).is_err());
    }
}
